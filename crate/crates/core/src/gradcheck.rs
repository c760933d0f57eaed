//! Central finite-difference checks for every differentiable op and for a
//! tiny shifted-window transformer trained on the composite loss.

use std::fmt::Write as _;

use crate::fields::{NormStats, VariableId};
use crate::models::{Model, ModelSpec, VitSpec};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Graph, OpKind, Tensor, TensorError, Var, LAYER_NORM_EPS};
use crate::training::{total_loss, LossConfig};

/// Name of the end-to-end composite-loss check in reports.
pub const END_TO_END: &str = "vit_e2e";

/// Central differences of a scalar function with respect to every element
/// of `x`.
pub fn finite_difference(
    x: &Tensor<f64>,
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub threshold: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Elements sampled per parameter tensor in the end-to-end check.
    pub samples_per_param: usize,
    /// Fault injection: negate the backward pass of one op kind.
    pub sign_flip: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: 1e-4,
            floor: 1e-6,
            seed: 0,
            samples_per_param: 4,
            sign_flip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.threshold)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpCheck> {
        self.checks.iter().filter(|c| !(c.max_rel_err < self.threshold))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let verdict = if c.max_rel_err < self.threshold { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:<18} max_rel_err={:.3e} elements={:<5} {verdict}",
                c.name, c.max_rel_err, c.elements
            );
        }
        let _ = writeln!(
            out,
            "threshold {:.0e}: {}",
            self.threshold,
            if self.passed() { "pass" } else { "FAIL" }
        );
        out
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

struct Case {
    kind: OpKind,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn randn(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    Tensor::new(shape, v).expect("shape")
}

/// Values bounded away from zero, for `abs` and divisors.
fn away_from_zero(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = 0.5 + rng.uniform(0.0, 1.0);
            if rng.next_u64() & 1 == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape")
}

fn case(
    kind: OpKind,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
) -> Case {
    Case {
        kind,
        inputs,
        build: Box::new(build),
    }
}

fn cases(seed: u64) -> Vec<Case> {
    let mut r = SplitMix64::stream(seed, 1);
    let r = &mut r;
    vec![
        case(OpKind::Add, vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |g, v| g.add(v[0], v[1])),
        case(OpKind::Add, vec![randn(r, &[2, 3]), randn(r, &[3])], |g, v| g.add(v[0], v[1])),
        case(OpKind::Sub, vec![randn(r, &[2, 3]), randn(r, &[3])], |g, v| g.sub(v[0], v[1])),
        case(OpKind::Sub, vec![randn(r, &[1]), randn(r, &[4])], |g, v| g.sub(v[0], v[1])),
        case(OpKind::Mul, vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |g, v| g.mul(v[0], v[1])),
        case(OpKind::Mul, vec![randn(r, &[3, 2]), randn(r, &[2])], |g, v| g.mul(v[0], v[1])),
        case(
            OpKind::Div,
            vec![randn(r, &[2, 3]), away_from_zero(r, &[2, 3])],
            |g, v| g.div(v[0], v[1]),
        ),
        case(
            OpKind::Matmul,
            vec![randn(r, &[2, 3]), randn(r, &[3, 4])],
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            OpKind::Bmm,
            vec![randn(r, &[2, 2, 3]), randn(r, &[2, 3, 2])],
            |g, v| g.bmm(v[0], v[1]),
        ),
        case(OpKind::Softmax, vec![randn(r, &[2, 4])], |g, v| g.softmax(v[0], 1)),
        case(OpKind::Softmax, vec![randn(r, &[3, 2])], |g, v| g.softmax(v[0], 0)),
        case(
            OpKind::LayerNorm,
            vec![randn(r, &[3, 4]), randn(r, &[4]), randn(r, &[4])],
            |g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS),
        ),
        case(OpKind::Gelu, vec![randn(r, &[2, 5])], |g, v| Ok(g.gelu(v[0]))),
        case(
            OpKind::Conv2d,
            vec![randn(r, &[2, 5, 5]), randn(r, &[3, 2, 3, 3]), randn(r, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            OpKind::Conv2d,
            vec![randn(r, &[1, 6, 6]), randn(r, &[2, 1, 3, 3])],
            |g, v| g.conv2d(v[0], v[1], None, 2, 1),
        ),
        case(OpKind::AvgPool2d, vec![randn(r, &[2, 4, 4])], |g, v| g.avg_pool2d(v[0], 2)),
        case(OpKind::PixelShuffle, vec![randn(r, &[4, 2, 3])], |g, v| {
            g.pixel_shuffle(v[0], 2)
        }),
        case(OpKind::Permute, vec![randn(r, &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1])),
        case(OpKind::Roll, vec![randn(r, &[3, 4, 2])], |g, v| g.roll2d(v[0], 1, -1)),
        case(OpKind::Gather, vec![randn(r, &[6])], |g, v| {
            g.gather(v[0], vec![0, 2, 2, 5, 1], &[5])
        }),
        case(OpKind::BilinearUpsample, vec![randn(r, &[2, 3, 3])], |g, v| {
            g.bilinear_upsample(v[0], 2)
        }),
        case(OpKind::Sum, vec![randn(r, &[2, 3])], |g, v| Ok(g.sum(v[0]))),
        case(OpKind::RowSum, vec![randn(r, &[3, 4])], |g, v| Ok(g.row_sum(v[0]))),
        case(OpKind::Abs, vec![away_from_zero(r, &[2, 3])], |g, v| Ok(g.abs(v[0]))),
        case(OpKind::Scale, vec![randn(r, &[2, 3])], |g, v| Ok(g.scale(v[0], -1.75))),
        case(OpKind::Square, vec![randn(r, &[2, 3])], |g, v| Ok(g.square(v[0]))),
        case(OpKind::Reshape, vec![randn(r, &[2, 3])], |g, v| g.reshape(v[0], &[3, 2])),
    ]
}

/// Builds `Σ w ⊙ out` so every output element contributes.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn run_case(c: &Case, index: usize, cfg: &GradcheckConfig) -> Result<(f64, usize), TensorError> {
    let mut probe = Graph::new();
    let vars: Vec<Var> = c.inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = (c.build)(&mut probe, &vars)?;
    let weights = randn(
        &mut SplitMix64::stream(cfg.seed, 100 + index as u64),
        probe.shape(out),
    );

    let mut g = Graph::new();
    if let Some(kind) = cfg.sign_flip {
        g.inject_sign_flip(kind);
    }
    let vars: Vec<Var> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (c.build)(&mut g, &vars)?;
    let loss = weighted_sum(&mut g, out, &weights)?;
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, input) in c.inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = finite_difference(input, cfg.step, |x| {
            let mut h = Graph::new();
            let vs: Vec<Var> = c
                .inputs
                .iter()
                .enumerate()
                .map(|(j, t)| h.constant(if j == k { x.clone() } else { t.clone() }))
                .collect();
            let out = (c.build)(&mut h, &vs).expect("built once already");
            let l = weighted_sum(&mut h, out, &weights).expect("same shapes");
            h.value(l).data()[0]
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, cfg.floor));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn tiny_vit_spec() -> ModelSpec {
    let mut spec = ModelSpec::vit(2);
    spec.vit = VitSpec {
        patch: 2,
        window: 2,
        dim: 8,
        heads: 2,
        blocks: 2,
    };
    spec
}

/// Composite MSE + mass loss of a 2-block transformer with every parameter
/// (including the zero-initialised head) perturbed off its init.
fn end_to_end(cfg: &GradcheckConfig) -> Result<(f64, usize), TensorError> {
    let spec = tiny_vit_spec();
    let mut model = Model::<f64>::init(spec, derive_seed(cfg.seed, 7)).expect("valid spec");
    let mut rng = SplitMix64::stream(cfg.seed, 8);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    let input = randn(&mut rng, &[2, 4, 4]);
    let truth = randn(&mut rng, &[2, 8, 8]);
    let norm = NormStats::new(vec![VariableId::T2m, VariableId::Pr], vec![288.0, 2.0], vec![5.0, 4.0])
        .expect("positive stds");
    let loss_cfg = LossConfig::default().with_mass(true);

    let loss_of = |m: &Model<f64>, g: &mut Graph<f64>, trainable: bool| -> Result<(Vec<Var>, Var), TensorError> {
        let params = m.register(g, trainable);
        let x = g.constant(input.clone());
        let y = g.constant(truth.clone());
        let pred = m
            .forward(g, &params, x)
            .map_err(|e| TensorError::InvalidShape { shape: vec![], reason: e.to_string() })?;
        let terms = total_loss(g, pred, y, x, &loss_cfg, Some(&norm))
            .map_err(|e| TensorError::InvalidShape { shape: vec![], reason: e.to_string() })?;
        Ok((params, terms.total))
    };

    let mut g = Graph::new();
    if let Some(kind) = cfg.sign_flip {
        g.inject_sign_flip(kind);
    }
    let (params, loss) = loss_of(&model, &mut g, true)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(model.params().tensors())
        .map(|(&p, t)| g.grad(p).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        let len = grads.len();
        let picks: Vec<usize> = if len <= cfg.samples_per_param {
            (0..len).collect()
        } else {
            (0..cfg.samples_per_param).map(|_| rng.below(len)).collect()
        };
        for ei in picks {
            let eval = |delta: f64| -> Result<f64, TensorError> {
                let mut m = model.clone();
                let t = m.params_mut().tensors_mut().nth(pi).expect("index in range");
                t.data_mut()[ei] += delta;
                let mut h = Graph::new();
                let (_, l) = loss_of(&m, &mut h, false)?;
                Ok(h.value(l).data()[0])
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            worst = worst.max(relative_error(grads[ei], numeric, cfg.floor));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Runs every registered op case plus the end-to-end check.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, TensorError> {
    let cases = cases(cfg.seed);
    let mut checks = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let mut worst: f64 = 0.0;
        let mut elements = 0;
        for (i, c) in cases.iter().enumerate().filter(|(_, c)| c.kind == kind) {
            let (e, n) = run_case(c, i, cfg)?;
            worst = worst.max(e);
            elements += n;
        }
        if elements == 0 {
            // An op without a case must not pass silently.
            worst = f64::INFINITY;
        }
        checks.push(OpCheck {
            name: kind.name().to_string(),
            max_rel_err: worst,
            elements,
        });
    }
    let (e, n) = end_to_end(cfg)?;
    checks.push(OpCheck {
        name: END_TO_END.to_string(),
        max_rel_err: e,
        elements: n,
    });
    Ok(GradcheckReport {
        threshold: cfg.threshold,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_a_case() {
        let cases = cases(0);
        for kind in OpKind::DIFFERENTIABLE {
            assert!(cases.iter().any(|c| c.kind == kind), "{}", kind.name());
        }
    }

    #[test]
    fn suite_passes_and_covers_registry() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.checks.len(), OpKind::DIFFERENTIABLE.len() + 1);
        for kind in OpKind::DIFFERENTIABLE {
            assert!(report.checks.iter().any(|c| c.name == kind.name()));
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        for kind in [OpKind::Softmax, OpKind::Conv2d, OpKind::Roll] {
            let cfg = GradcheckConfig {
                sign_flip: Some(kind),
                ..GradcheckConfig::default()
            };
            let report = run_gradcheck(&cfg).unwrap();
            assert!(!report.passed());
            assert!(report.failures().any(|c| c.name == kind.name()));
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
    }
}
