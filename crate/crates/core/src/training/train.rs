use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::fields::{ChannelMask, FieldStack, NormStats, VariableId};
use crate::models::{Checkpoint, Model, ModelSpec};
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Real;
use crate::tensor::{Graph, Tensor};

use super::{total_loss, Adam, AdamConfig, LossConfig, TrainError};

/// RNG stream offset for the per-epoch shuffle; stream 0 seeds the weights.
const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub channels: ChannelMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            channels: ChannelMask::Surface,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// A standardised (coarse input, fine target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<R> {
    pub input: Tensor<R>,
    pub target: Tensor<R>,
}

/// Selects `vars`, derives the coarse input by block averaging and
/// standardises both sides with `norm`.
pub fn prepare_pairs<R: Real>(
    stacks: &[FieldStack],
    vars: &[VariableId],
    norm: &NormStats,
    scale: usize,
) -> Result<Vec<TrainingPair<R>>, TrainError> {
    let norm = norm.select(vars)?;
    let mut shape = None;
    stacks
        .iter()
        .map(|s| {
            let fine = s.select(vars)?;
            let dims = (fine.ny(), fine.nx());
            if *shape.get_or_insert(dims) != dims {
                return Err(TrainError::Config(format!(
                    "inconsistent grid {}x{} in dataset of {}x{}",
                    dims.0,
                    dims.1,
                    shape.unwrap().0,
                    shape.unwrap().1
                )));
            }
            let coarse = fine.coarsen(scale)?;
            Ok(TrainingPair {
                input: norm.apply(&coarse)?.to_tensor(),
                target: norm.apply(&fine)?.to_tensor(),
            })
        })
        .collect()
}

/// Dataset-averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub mass: f64,
    pub total: f64,
}

/// Loss terms averaged over `pairs` with the model in inference mode.
pub fn evaluate_losses<R: Real>(
    model: &Model<R>,
    pairs: &[TrainingPair<R>],
    loss: &LossConfig,
    norm: Option<&NormStats>,
) -> Result<LossBreakdown, TrainError> {
    let mut acc = LossBreakdown {
        mse: 0.0,
        mass: 0.0,
        total: 0.0,
    };
    for pair in pairs {
        let mut g = Graph::new();
        let params = model.register(&mut g, false);
        let x = g.constant(pair.input.clone());
        let y = g.constant(pair.target.clone());
        let pred = model.forward(&mut g, &params, x)?;
        let terms = total_loss(&mut g, pred, y, x, loss, norm)?;
        acc.mse += g.value(terms.mse).data()[0].to_f64_lossy();
        acc.mass += g.value(terms.mass).data()[0].to_f64_lossy();
        acc.total += g.value(terms.total).data()[0].to_f64_lossy();
    }
    let n = pairs.len().max(1) as f64;
    Ok(LossBreakdown {
        mse: acc.mse / n,
        mass: acc.mass / n,
        total: acc.total / n,
    })
}

fn normalized_rmse<R: Real>(model: &Model<R>, pairs: &[TrainingPair<R>]) -> Result<f64, TrainError> {
    let mut sq = 0.0;
    let mut n = 0usize;
    for pair in pairs {
        let pred = model.predict(&pair.input)?;
        for (p, t) in pred.data().iter().zip(pair.target.data()) {
            let d = (*p - *t).to_f64_lossy();
            sq += d * d;
        }
        n += pred.len();
    }
    Ok((sq / n.max(1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_mass: f64,
    pub train_total: f64,
    /// RMSE on the validation split in standardised units.
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<EpochRecord>,
}

impl LossLog {
    pub const HEADER: &'static str = "epoch,train_mse,train_mass,train_total,val_rmse";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            let val = r.val_rmse.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_mse, r.train_mass, r.train_total, val
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<R> {
    pub model: Model<R>,
    pub norm: NormStats,
    pub log: LossLog,
    /// Losses over the training set before the first update.
    pub initial: LossBreakdown,
    /// Losses over the training set after the last update.
    pub final_losses: LossBreakdown,
    pub checkpoint: Checkpoint,
}

/// Trains a fresh model on fine stacks; coarse inputs are derived from them.
pub fn train<R: Real>(
    spec: &ModelSpec,
    train_set: &[FieldStack],
    val_set: Option<&[FieldStack]>,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome<R>, TrainError> {
    cfg.validate()?;
    loss.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let vars = cfg.channels.variables();
    if spec.in_channels != vars.len() {
        return Err(TrainError::Config(format!(
            "model expects {} channels, channel mask {} selects {}",
            spec.in_channels,
            cfg.channels.name(),
            vars.len()
        )));
    }
    let selected: Vec<FieldStack> = train_set
        .iter()
        .map(|s| s.select(&vars))
        .collect::<Result<_, _>>()?;
    let norm = NormStats::fit(&selected)?;
    let pairs: Vec<TrainingPair<R>> = prepare_pairs(&selected, &vars, &norm, spec.scale)?;
    let val_pairs: Option<Vec<TrainingPair<R>>> = val_set
        .map(|v| prepare_pairs(v, &vars, &norm, spec.scale))
        .transpose()?;

    let mut model = Model::<R>::init(spec.clone(), derive_seed(cfg.seed, 0))?;
    if let Some(p) = pairs.first() {
        spec.check_input(p.input.shape())?;
    }
    let initial = evaluate_losses(&model, &pairs, loss, Some(&norm))?;
    let mut opt = Adam::new(cfg.adam(), model.params().tensors());
    let mut log = LossLog::default();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        SplitMix64::stream(cfg.seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
        let (mut mse_sum, mut mass_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<R>> = model
                .params()
                .tensors()
                .map(|t| vec![R::zero(); t.len()])
                .collect();
            let inv = R::one() / R::count(idx.len());
            for &i in idx {
                let pair = &pairs[i];
                let mut g = Graph::new();
                let params = model.register(&mut g, true);
                let x = g.constant(pair.input.clone());
                let y = g.constant(pair.target.clone());
                let pred = model.forward(&mut g, &params, x)?;
                let terms = total_loss(&mut g, pred, y, x, loss, Some(&norm))?;
                let total = g.value(terms.total).data()[0].to_f64_lossy();
                if !total.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch });
                }
                mse_sum += g.value(terms.mse).data()[0].to_f64_lossy();
                mass_sum += g.value(terms.mass).data()[0].to_f64_lossy();
                total_sum += total;
                g.backward(terms.total)?;
                for (acc, &p) in grads.iter_mut().zip(&params) {
                    if let Some(gp) = g.grad(p) {
                        for (a, &v) in acc.iter_mut().zip(gp) {
                            *a += v * inv;
                        }
                    }
                }
            }
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch });
            }
            opt.step(model.params_mut().tensors_mut(), &grads)?;
        }
        let n = pairs.len() as f64;
        let val_rmse = val_pairs
            .as_deref()
            .map(|v| normalized_rmse(&model, v))
            .transpose()?;
        log.records.push(EpochRecord {
            epoch,
            train_mse: mse_sum / n,
            train_mass: mass_sum / n,
            train_total: total_sum / n,
            val_rmse,
        });
    }

    let final_losses = evaluate_losses(&model, &pairs, loss, Some(&norm))?;
    let first = &selected[0];
    let mut meta = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        meta.insert(k.to_string(), v);
    };
    put("epochs", cfg.epochs.to_string());
    put("seed", cfg.seed.to_string());
    put("lr", cfg.lr.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("channels", cfg.channels.name().to_string());
    put("use_mass_loss", loss.use_mass_loss.to_string());
    put("mass_weight", loss.mass_weight.to_string());
    put("mass_convention", loss.mass_convention.name().to_string());
    put("mass_units", loss.mass_units.name().to_string());
    put("per_variable", loss.per_variable.to_string());
    put("train_samples", pairs.len().to_string());
    put("train_ny", first.ny().to_string());
    put("train_nx", first.nx().to_string());
    put("train_spacing_m", first.spacing_m().to_string());
    put("initial_mse", initial.mse.to_string());
    put("final_mse", final_losses.mse.to_string());
    put("final_mass", final_losses.mass.to_string());
    put("final_total", final_losses.total.to_string());
    let checkpoint = Checkpoint::from_model(&model, Some(norm.clone()), meta);

    Ok(TrainOutcome {
        model,
        norm,
        log,
        initial,
        final_losses,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{synth_stack, SynthProfile};
    use crate::models::ResnetSpec;

    fn data(n: usize, size: usize, seed: u64) -> Vec<FieldStack> {
        (0..n)
            .map(|i| synth_stack(size, size, seed + i as u64, &SynthProfile::default_profile()).unwrap())
            .collect()
    }

    fn tiny_resnet() -> ModelSpec {
        let mut spec = ModelSpec::resnet(4);
        spec.resnet = ResnetSpec {
            channels: 4,
            blocks: 1,
            large_kernel: 3,
            small_kernel: 3,
        };
        spec
    }

    fn surface_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            seed: 3,
            channels: ChannelMask::Surface,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn initial_loss_equals_bilinear() {
        let set = data(3, 16, 10);
        let out = train::<f64>(&tiny_resnet(), &set, None, &surface_cfg(1), &LossConfig::default())
            .unwrap();
        let bilinear = Model::<f64>::init(ModelSpec::bilinear(4), 0).unwrap();
        let vars = ChannelMask::Surface.variables();
        let pairs: Vec<TrainingPair<f64>> = prepare_pairs(&set, &vars, &out.norm, 2).unwrap();
        let base = evaluate_losses(&bilinear, &pairs, &LossConfig::default(), Some(&out.norm)).unwrap();
        assert_eq!(out.initial, base);
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let set = data(4, 16, 20);
        let run = || {
            let out = train::<f64>(
                &tiny_resnet(),
                &set,
                Some(&set[..1]),
                &surface_cfg(2),
                &LossConfig::default().with_mass(true),
            )
            .unwrap();
            (out.checkpoint.encode().unwrap(), out.log.to_csv())
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.lines().count(), 3);
        assert!(la.lines().nth(1).unwrap().split(',').nth(4).unwrap() != "");
    }

    #[test]
    fn rejects_bad_configs() {
        let set = data(2, 16, 0);
        let spec = tiny_resnet();
        let lc = LossConfig::default();
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..surface_cfg(1)
        };
        assert!(train::<f64>(&spec, &set, None, &zero_epochs, &lc).is_err());
        let neg_lr = TrainConfig {
            lr: -1.0,
            ..surface_cfg(1)
        };
        assert!(train::<f64>(&spec, &set, None, &neg_lr, &lc).is_err());
        let full = TrainConfig {
            channels: ChannelMask::Full,
            ..surface_cfg(1)
        };
        assert!(train::<f64>(&spec, &set, None, &full, &lc).is_err());
        assert!(train::<f64>(&spec, &[], None, &surface_cfg(1), &lc).is_err());
    }

    #[test]
    fn non_finite_loss_reports_coordinates() {
        let set = data(2, 16, 0);
        let cfg = TrainConfig {
            lr: 1e300,
            ..surface_cfg(3)
        };
        let lc = LossConfig {
            use_mass_loss: true,
            mass_weight: 1e300,
            ..LossConfig::default()
        };
        match train::<f64>(&tiny_resnet(), &set, None, &cfg, &lc) {
            Err(TrainError::NonFinite { epoch, batch }) => {
                assert!(epoch >= 1);
                assert_eq!(batch, 0);
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn convex_sanity_problem_moving_average_descends() {
        // Linear model on linear data, minibatched exactly as `train` does.
        let w_true = [0.5, -1.25, 2.0];
        let mut rng = SplitMix64::new(9);
        let xs: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..3).map(|_| rng.normal()).collect())
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| x.iter().zip(&w_true).map(|(a, b)| a * b).sum())
            .collect();
        let mut w = vec![Tensor::<f64>::zeros(&[3, 1]).unwrap()];
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
            &w,
        );
        let mut log = Vec::new();
        for epoch in 1..=60u64 {
            let mut order: Vec<usize> = (0..xs.len()).collect();
            SplitMix64::stream(1, epoch).shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for idx in order.chunks(8) {
                let mut g = Graph::new();
                let wv = g.param(w[0].clone());
                let flat: Vec<f64> = idx.iter().flat_map(|&i| xs[i].clone()).collect();
                let x = g.constant(Tensor::from_f64(&[idx.len(), 3], &flat).unwrap());
                let yv: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
                let y = g.constant(Tensor::from_f64(&[idx.len(), 1], &yv).unwrap());
                let pred = g.matmul(x, wv).unwrap();
                let l = super::super::mse_loss(&mut g, pred, y, true).unwrap();
                epoch_loss += g.value(l).data()[0] * idx.len() as f64;
                g.backward(l).unwrap();
                let grad = g.grad(wv).unwrap().to_vec();
                opt.step(w.iter_mut(), &[grad]).unwrap();
            }
            log.push(epoch_loss / xs.len() as f64);
        }
        let avg: Vec<f64> = log.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        for pair in avg.windows(2) {
            assert!(pair[1] <= pair[0], "{avg:?}");
        }
        assert!(log[log.len() - 1] < 1e-3 * log[0]);
    }

    #[test]
    fn short_resnet_run_reduces_training_loss() {
        let set = data(4, 16, 40);
        let cfg = TrainConfig {
            lr: 3e-3,
            ..surface_cfg(10)
        };
        let out = train::<f64>(&tiny_resnet(), &set, None, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(out.log.records.len(), 10);
        assert!(out.final_losses.mse < out.initial.mse);
    }
}
