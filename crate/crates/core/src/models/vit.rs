//! Shifted-window transformer with a pixel-shuffle super-resolution head.
//!
//! coarse `[C, H, W]` → non-overlapping `p×p` patch embedding → `blocks` ×
//! (LN → windowed MHSA, windows cyclically shifted by `window/2` on odd
//! blocks → residual → LN → GELU MLP → residual) → LN → linear head to
//! `C·(p·s)²` per token → pixel shuffle → `[C, sH, sW]` + bilinear(input).

use std::sync::Arc;

use crate::scalar::Real;
use crate::tensor::{Graph, Var, LAYER_NORM_EPS};

use super::{ModelError, ModelSpec};

/// Parameters of one block, in storage order.
struct BlockParams {
    norm1: (Var, Var),
    qkv: (Var, Var),
    proj: (Var, Var),
    norm2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

struct Geometry {
    /// Token grid.
    th: usize,
    tw: usize,
    dim: usize,
    window: usize,
    heads: usize,
}

impl Geometry {
    fn windows(&self) -> usize {
        (self.th / self.window) * (self.tw / self.window)
    }

    fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// `[th·tw, D]` (row-major token grid) → `[windows·ws², D]`.
    fn partition_index(&self) -> Vec<usize> {
        let ws = self.window;
        let (nwy, nwx) = (self.th / ws, self.tw / ws);
        let mut idx = Vec::with_capacity(self.th * self.tw * self.dim);
        for wy in 0..nwy {
            for wx in 0..nwx {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let tok = (wy * ws + iy) * self.tw + wx * ws + ix;
                        idx.extend(tok * self.dim..(tok + 1) * self.dim);
                    }
                }
            }
        }
        idx
    }

    fn inverse(index: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; index.len()];
        for (i, &src) in index.iter().enumerate() {
            inv[src] = i;
        }
        inv
    }

    /// Selects head-major `[windows·heads, T, hd]` (or its transpose when
    /// `transposed`) from a `[windows·T, 3D]` qkv matrix at `offset`.
    fn head_index(&self, offset: usize, transposed: bool) -> Vec<usize> {
        let t = self.tokens_per_window();
        let hd = self.dim / self.heads;
        let mut idx = Vec::with_capacity(self.windows() * t * self.dim);
        for w in 0..self.windows() {
            for h in 0..self.heads {
                let at = |tok: usize, e: usize| (w * t + tok) * 3 * self.dim + offset + h * hd + e;
                if transposed {
                    for e in 0..hd {
                        idx.extend((0..t).map(|tok| at(tok, e)));
                    }
                } else {
                    for tok in 0..t {
                        idx.extend((0..hd).map(|e| at(tok, e)));
                    }
                }
            }
        }
        idx
    }

    /// `[windows·heads, T, hd]` → `[windows·T, D]`.
    fn merge_index(&self) -> Vec<usize> {
        let t = self.tokens_per_window();
        let hd = self.dim / self.heads;
        let mut idx = Vec::with_capacity(self.windows() * t * self.dim);
        for w in 0..self.windows() {
            for tok in 0..t {
                for h in 0..self.heads {
                    let base = ((w * self.heads + h) * t + tok) * hd;
                    idx.extend(base..base + hd);
                }
            }
        }
        idx
    }
}

pub(super) fn forward<R: Real>(
    spec: &ModelSpec,
    g: &mut Graph<R>,
    params: &[Var],
    input: Var,
) -> Result<Var, ModelError> {
    let v = &spec.vit;
    let &[c, h, w] = g.shape(input) else {
        unreachable!("checked by ModelSpec::check_input")
    };
    let p = v.patch;
    let geo = Geometry {
        th: h / p,
        tw: w / p,
        dim: v.dim,
        window: v.window,
        heads: v.heads,
    };
    let ntok = geo.th * geo.tw;
    let mut it = params.iter().copied();
    let mut pair = || (it.next().expect("param"), it.next().expect("param"));

    // Patch embedding: token (ty, tx) gathers features ordered (c, py, px).
    let mut idx = Vec::with_capacity(ntok * c * p * p);
    for ty in 0..geo.th {
        for tx in 0..geo.tw {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        idx.push((ch * h + ty * p + py) * w + tx * p + px);
                    }
                }
            }
        }
    }
    let patches = g.gather(input, idx, &[ntok, c * p * p])?;
    let (ew, eb) = pair();
    let mut x = g.linear(patches, ew, Some(eb))?;

    let blocks: Vec<BlockParams> = (0..v.blocks)
        .map(|_| BlockParams {
            norm1: pair(),
            qkv: pair(),
            proj: pair(),
            norm2: pair(),
            fc1: pair(),
            fc2: pair(),
        })
        .collect();
    let partition: Arc<[usize]> = geo.partition_index().into();
    let unpartition: Arc<[usize]> = Geometry::inverse(&partition).into();
    let q_idx: Arc<[usize]> = geo.head_index(0, false).into();
    let kt_idx: Arc<[usize]> = geo.head_index(geo.dim, true).into();
    let v_idx: Arc<[usize]> = geo.head_index(2 * geo.dim, false).into();
    let merge: Arc<[usize]> = geo.merge_index().into();
    let eps = R::lit(LAYER_NORM_EPS);
    let hd = geo.dim / geo.heads;
    let att_scale = R::one() / R::count(hd).sqrt();
    let (nw, t) = (geo.windows(), geo.tokens_per_window());

    for (b, bp) in blocks.iter().enumerate() {
        let shift = if b % 2 == 1 { (v.window / 2) as isize } else { 0 };
        let y = g.layer_norm(x, bp.norm1.0, bp.norm1.1, eps)?;
        let y = if shift != 0 {
            let grid = g.reshape(y, &[geo.th, geo.tw, geo.dim])?;
            let rolled = g.roll2d(grid, shift, shift)?;
            g.reshape(rolled, &[ntok, geo.dim])?
        } else {
            y
        };
        let win = g.gather(y, partition.clone(), &[ntok, geo.dim])?;
        let qkv = g.linear(win, bp.qkv.0, Some(bp.qkv.1))?;
        let q = g.gather(qkv, q_idx.clone(), &[nw * geo.heads, t, hd])?;
        let kt = g.gather(qkv, kt_idx.clone(), &[nw * geo.heads, hd, t])?;
        let vv = g.gather(qkv, v_idx.clone(), &[nw * geo.heads, t, hd])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, att_scale);
        let attn = g.softmax(scores, 2)?;
        let o = g.bmm(attn, vv)?;
        let o = g.gather(o, merge.clone(), &[ntok, geo.dim])?;
        let o = g.linear(o, bp.proj.0, Some(bp.proj.1))?;
        let o = g.gather(o, unpartition.clone(), &[ntok, geo.dim])?;
        let o = if shift != 0 {
            let grid = g.reshape(o, &[geo.th, geo.tw, geo.dim])?;
            let rolled = g.roll2d(grid, -shift, -shift)?;
            g.reshape(rolled, &[ntok, geo.dim])?
        } else {
            o
        };
        x = g.add(x, o)?;

        let y = g.layer_norm(x, bp.norm2.0, bp.norm2.1, eps)?;
        let y = g.linear(y, bp.fc1.0, Some(bp.fc1.1))?;
        let y = g.gelu(y);
        let y = g.linear(y, bp.fc2.0, Some(bp.fc2.1))?;
        x = g.add(x, y)?;
    }

    let (ng, nb) = pair();
    let x = g.layer_norm(x, ng, nb, eps)?;
    let (hw, hb) = pair();
    let y = g.linear(x, hw, Some(hb))?;
    let r = p * spec.scale;
    let out_ch = c * r * r;
    let chw = g.transpose_last(y)?;
    let chw = g.reshape(chw, &[out_ch, geo.th, geo.tw])?;
    let fine = g.pixel_shuffle(chw, r)?;
    let base = g.bilinear_upsample(input, spec.scale)?;
    Ok(g.add(fine, base)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{bilinear_upsample, Model};
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    fn tiny_spec(c: usize) -> ModelSpec {
        let mut s = ModelSpec::vit(c);
        s.vit.dim = 8;
        s.vit.heads = 2;
        s.vit.blocks = 2;
        s
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = SplitMix64::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn shape_contract_and_zero_head_identity() {
        let m = Model::<f64>::init(tiny_spec(3), 1).unwrap();
        let x = random(&[3, 16, 8], 2);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[3, 32, 16]);
        assert_eq!(y, bilinear_upsample(&x, 2).unwrap());
    }

    #[test]
    fn nonzero_head_changes_output_and_is_size_agnostic() {
        let mut m = Model::<f64>::init(tiny_spec(2), 1).unwrap();
        let mut r = SplitMix64::new(9);
        for v in m.params_mut().get_mut("head.w").unwrap().data_mut() {
            *v = r.uniform(-0.1, 0.1);
        }
        for (h, w) in [(8, 8), (16, 24), (24, 16)] {
            let x = random(&[2, h, w], 4);
            let y = m.predict(&x).unwrap();
            assert_eq!(y.shape(), &[2, 2 * h, 2 * w]);
            assert_ne!(y, bilinear_upsample(&x, 2).unwrap());
        }
    }

    #[test]
    fn partition_is_a_permutation() {
        let geo = Geometry {
            th: 8,
            tw: 12,
            dim: 3,
            window: 4,
            heads: 1,
        };
        let idx = geo.partition_index();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8 * 12 * 3).collect::<Vec<_>>());
        let inv = Geometry::inverse(&idx);
        for (i, &src) in idx.iter().enumerate() {
            assert_eq!(inv[src], i);
        }
    }

    #[test]
    fn window_attention_is_local() {
        // Perturbing one coarse cell only moves outputs within its window
        // neighbourhood when a single unshifted block is used.
        let mut spec = tiny_spec(1);
        spec.vit.blocks = 1;
        let mut m = Model::<f64>::init(spec, 3).unwrap();
        let mut r = SplitMix64::new(5);
        for v in m.params_mut().get_mut("head.w").unwrap().data_mut() {
            *v = r.uniform(-0.5, 0.5);
        }
        let x = random(&[1, 16, 16], 6);
        let mut x2 = x.clone();
        x2.data_mut()[0] += 1.0;
        let (a, b) = (m.predict(&x).unwrap(), m.predict(&x2).unwrap());
        let base_a = bilinear_upsample(&x, 2).unwrap();
        let base_b = bilinear_upsample(&x2, 2).unwrap();
        // Correction (model minus bilinear) differs only inside the first
        // 8x8 coarse window = 16x16 fine cells.
        for y in 0..32 {
            for xx in 0..32 {
                let i = y * 32 + xx;
                let da = a.data()[i] - base_a.data()[i];
                let db = b.data()[i] - base_b.data()[i];
                if y >= 16 || xx >= 16 {
                    assert!((da - db).abs() < 1e-12);
                }
            }
        }
    }
}
