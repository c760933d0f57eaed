use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::params::{Init, ParamSpec};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vit,
    Resnet,
    Bilinear,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vit => "vit",
            Self::Resnet => "resnet",
            Self::Bilinear => "bilinear",
        })
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vit" => Ok(Self::Vit),
            "resnet" => Ok(Self::Resnet),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(ModelError::InvalidSpec(format!("unknown model kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitSpec {
    pub patch: usize,
    pub window: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for VitSpec {
    fn default() -> Self {
        Self {
            patch: 2,
            window: 4,
            dim: 96,
            heads: 4,
            blocks: 4,
        }
    }
}

/// Defaults follow the training hyperparameter table: 64 channels,
/// 16 blocks, 9×9 and 3×3 kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResnetSpec {
    pub channels: usize,
    pub blocks: usize,
    pub large_kernel: usize,
    pub small_kernel: usize,
}

impl Default for ResnetSpec {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: 16,
            large_kernel: 9,
            small_kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub scale: usize,
    pub vit: VitSpec,
    pub resnet: ResnetSpec,
}

pub(crate) const MLP_RATIO: usize = 4;

#[derive(Default)]
struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) {
        self.push(format!("{name}.w"), vec![fan_in, fan_out], init);
        self.push(format!("{name}.b"), vec![fan_out], Init::Zeros);
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.push(format!("{name}.gamma"), vec![dim], Init::Ones);
        self.push(format!("{name}.beta"), vec![dim], Init::Zeros);
    }

    fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize, init: Init) {
        self.push(format!("{name}.w"), vec![out_ch, in_ch, k, k], init);
        self.push(format!("{name}.b"), vec![out_ch], Init::Zeros);
    }
}

impl ModelSpec {
    pub fn vit(in_channels: usize) -> Self {
        Self {
            kind: ModelKind::Vit,
            in_channels,
            scale: 2,
            vit: VitSpec::default(),
            resnet: ResnetSpec::default(),
        }
    }

    pub fn resnet(in_channels: usize) -> Self {
        Self {
            kind: ModelKind::Resnet,
            ..Self::vit(in_channels)
        }
    }

    pub fn bilinear(in_channels: usize) -> Self {
        Self {
            kind: ModelKind::Bilinear,
            ..Self::vit(in_channels)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.scale != 2 {
            return bad(format!("scale must be 2, got {}", self.scale));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        let v = &self.vit;
        if v.patch == 0 || v.window == 0 || v.blocks == 0 || v.heads == 0 || v.dim == 0 {
            return bad("vit sizes must be >= 1".into());
        }
        if !v.dim.is_multiple_of(v.heads) {
            return bad(format!("vit dim {} not divisible by heads {}", v.dim, v.heads));
        }
        let r = &self.resnet;
        if r.channels == 0 {
            return bad("resnet channels must be >= 1".into());
        }
        if r.large_kernel.is_multiple_of(2) || r.small_kernel.is_multiple_of(2) {
            return bad("resnet kernels must be odd".into());
        }
        Ok(())
    }

    /// Spatial multiple the coarse input must satisfy.
    pub fn required_multiple(&self) -> usize {
        match self.kind {
            ModelKind::Vit => self.vit.patch * self.vit.window,
            _ => 1,
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let &[c, h, w] = shape else {
            return Err(ModelError::InvalidSpec(format!(
                "input must be [C, H, W], got {shape:?}"
            )));
        };
        if c != self.in_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.in_channels,
                found: c,
            });
        }
        let multiple = self.required_multiple();
        for (dim, size) in [("height", h), ("width", w)] {
            if size % multiple != 0 {
                return Err(ModelError::NotDivisible {
                    dim,
                    size,
                    multiple,
                });
            }
        }
        Ok(())
    }

    /// Names, shapes and initialisers of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut b = SpecBuilder::default();
        let c = self.in_channels;
        match self.kind {
            ModelKind::Bilinear => {}
            ModelKind::Vit => {
                let v = &self.vit;
                let d = v.dim;
                let pin = c * v.patch * v.patch;
                let pout = c * (v.patch * self.scale).pow(2);
                let hidden = MLP_RATIO * d;
                b.linear("patch_embed", pin, d, Init::glorot(pin, d));
                for i in 0..v.blocks {
                    let p = format!("blocks.{i}");
                    b.norm(&format!("{p}.norm1"), d);
                    b.linear(&format!("{p}.attn.qkv"), d, 3 * d, Init::glorot(d, 3 * d));
                    b.linear(&format!("{p}.attn.proj"), d, d, Init::glorot(d, d));
                    b.norm(&format!("{p}.norm2"), d);
                    b.linear(&format!("{p}.mlp.fc1"), d, hidden, Init::glorot(d, hidden));
                    b.linear(&format!("{p}.mlp.fc2"), hidden, d, Init::glorot(hidden, d));
                }
                b.norm("norm", d);
                b.linear("head", d, pout, Init::Zeros);
            }
            ModelKind::Resnet => {
                let r = &self.resnet;
                let f = r.channels;
                let (lk, sk) = (r.large_kernel, r.small_kernel);
                b.conv("stem", f, c, lk, Init::glorot(c * lk * lk, f * lk * lk));
                for i in 0..r.blocks {
                    for part in ["conv1", "conv2"] {
                        let init = Init::glorot(f * sk * sk, f * sk * sk);
                        b.conv(&format!("blocks.{i}.{part}"), f, f, sk, init);
                    }
                }
                let up = c * self.scale * self.scale;
                b.conv("upsample", up, f, sk, Init::glorot(f * sk * sk, up * sk * sk));
                b.conv("refine", c, c, lk, Init::Zeros);
            }
        }
        b.0
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let v = &self.vit;
        let r = &self.resnet;
        [
            ("kind", self.kind.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("scale", self.scale.to_string()),
            ("vit.patch", v.patch.to_string()),
            ("vit.window", v.window.to_string()),
            ("vit.dim", v.dim.to_string()),
            ("vit.heads", v.heads.to_string()),
            ("vit.blocks", v.blocks.to_string()),
            ("resnet.channels", r.channels.to_string()),
            ("resnet.blocks", r.blocks.to_string()),
            ("resnet.large_kernel", r.large_kernel.to_string()),
            ("resnet.small_kernel", r.small_kernel.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| ModelError::MalformedHeader(format!("missing spec key {k}")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::MalformedHeader(format!("bad integer for {k}")))
        };
        let spec = Self {
            kind: get("kind")?.parse()?,
            in_channels: num("in_channels")?,
            scale: num("scale")?,
            vit: VitSpec {
                patch: num("vit.patch")?,
                window: num("vit.window")?,
                dim: num("vit.dim")?,
                heads: num("vit.heads")?,
                blocks: num("vit.blocks")?,
            },
            resnet: ResnetSpec {
                channels: num("resnet.channels")?,
                blocks: num("resnet.blocks")?,
                large_kernel: num("resnet.large_kernel")?,
                small_kernel: num("resnet.small_kernel")?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_dim_and_scale() {
        let mut s = ModelSpec::vit(4);
        s.vit.heads = 5;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::vit(4);
        s.scale = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut s = ModelSpec::resnet(4);
        s.resnet.blocks = 3;
        let kv: BTreeMap<_, _> = s.to_kv().into_iter().collect();
        assert_eq!(ModelSpec::from_kv(&kv).unwrap(), s);
    }

    #[test]
    fn input_divisibility_names_multiple() {
        let s = ModelSpec::vit(19);
        match s.check_input(&[19, 50, 48]) {
            Err(ModelError::NotDivisible {
                dim: "height",
                size: 50,
                multiple: 8,
            }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            s.check_input(&[4, 48, 48]),
            Err(ModelError::ChannelMismatch { expected: 19, found: 4 })
        ));
    }
}
