use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::fields::{FieldStack, NormStats, VariableId};
use crate::models::{bilinear_upsample_stack, Checkpoint, Model};
use crate::scalar::Real;

use super::metrics::{self, CarbonConfig};
use super::{EvalError, EvalReport, EvalRow};

/// Anything that maps a coarse stack to a fine one.
pub trait Downscaler: Sync {
    fn name(&self) -> &str;

    fn downscale(&self, coarse: &FieldStack) -> Result<FieldStack, EvalError>;

    /// Extra report metadata (training convention, grid size, ...).
    fn describe(&self) -> Vec<(String, String)> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct BilinearBaseline {
    pub scale: usize,
}

impl Default for BilinearBaseline {
    fn default() -> Self {
        Self { scale: 2 }
    }
}

impl Downscaler for BilinearBaseline {
    fn name(&self) -> &str {
        "bilinear"
    }

    fn downscale(&self, coarse: &FieldStack) -> Result<FieldStack, EvalError> {
        Ok(bilinear_upsample_stack(coarse, self.scale)?)
    }
}

/// A trained model plus the statistics it was trained with.
#[derive(Debug, Clone)]
pub struct CheckpointModel<R> {
    name: String,
    model: Model<R>,
    norm: NormStats,
    meta: BTreeMap<String, String>,
}

impl<R: Real> CheckpointModel<R> {
    pub fn new(name: impl Into<String>, ckpt: &Checkpoint) -> Result<Self, EvalError> {
        let norm = ckpt
            .norm
            .clone()
            .ok_or_else(|| EvalError::Config("checkpoint carries no normalisation stats".into()))?;
        Ok(Self {
            name: name.into(),
            model: ckpt.model()?,
            norm,
            meta: ckpt.meta.clone(),
        })
    }

    pub fn model(&self) -> &Model<R> {
        &self.model
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }
}

impl<R: Real> Downscaler for CheckpointModel<R> {
    fn name(&self) -> &str {
        &self.name
    }

    fn downscale(&self, coarse: &FieldStack) -> Result<FieldStack, EvalError> {
        let vars = self.norm.variables();
        let input = self.norm.apply(&coarse.select(vars)?)?;
        let pred = self.model.predict(&input.to_tensor::<R>())?;
        let spacing = coarse.spacing_m() / self.model.spec().scale as f64;
        let stack = FieldStack::from_tensor(vars, spacing, &pred)?;
        Ok(self.norm.invert(&stack)?.clamp_physical())
    }

    fn describe(&self) -> Vec<(String, String)> {
        [
            "mass_convention",
            "use_mass_loss",
            "mass_units",
            "train_ny",
            "train_nx",
            "epochs",
            "seed",
        ]
        .iter()
        .filter_map(|k| self.meta.get(*k).map(|v| (k.to_string(), v.clone())))
        .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub carbon: CarbonConfig,
    pub scale: usize,
    pub dataset_id: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            carbon: CarbonConfig::default(),
            scale: 2,
            dataset_id: "unnamed".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct VarStats {
    sq_err: f64,
    count: usize,
    ssim: f64,
    gap_local: f64,
    gap_global: f64,
}

/// Scores every model on every variable of the fine test stacks. Coarse
/// inputs are derived from the truth by block averaging.
pub fn evaluate(
    models: &[&dyn Downscaler],
    test: &[FieldStack],
    vars: &[VariableId],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.carbon.validate()?;
    if models.is_empty() {
        return Err(EvalError::Empty("no models to evaluate"));
    }
    if test.is_empty() {
        return Err(EvalError::Empty("test set"));
    }
    if vars.is_empty() {
        return Err(EvalError::Empty("variable list"));
    }
    let truth: Vec<FieldStack> = test
        .iter()
        .map(|s| s.select(vars))
        .collect::<Result<_, _>>()?;
    let (ny, nx) = (truth[0].ny(), truth[0].nx());
    if let Some(bad) = truth.iter().position(|s| s.ny() != ny || s.nx() != nx) {
        return Err(EvalError::Unpaired(format!(
            "sample {bad} is {}x{}, sample 0 is {ny}x{nx}",
            truth[bad].ny(),
            truth[bad].nx()
        )));
    }
    let coarse: Vec<FieldStack> = truth
        .iter()
        .map(|s| s.coarsen(cfg.scale))
        .collect::<Result<_, _>>()?;

    let ranges: Vec<f64> = vars
        .iter()
        .map(|&v| {
            let (lo, hi) = truth
                .iter()
                .flat_map(|s| s.field(v).expect("selected").values().iter().copied())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        })
        .collect();

    let mut report = EvalReport::default();
    let meta = &mut report.meta;
    meta.insert("dataset".into(), cfg.dataset_id.clone());
    meta.insert("samples".into(), truth.len().to_string());
    meta.insert("fine_grid".into(), format!("{ny}x{nx}"));
    meta.insert("coarse_grid".into(), format!("{}x{}", coarse[0].ny(), coarse[0].nx()));
    meta.insert("scale".into(), cfg.scale.to_string());
    meta.insert(
        "psnr_range".into(),
        "per-variable truth max - min over the test set".into(),
    );
    meta.insert(
        "ssim".into(),
        format!(
            "gaussian {w}x{w} sigma {s}, K1 {k1}, K2 {k2}, valid windows only",
            w = metrics::SSIM_WINDOW,
            s = metrics::SSIM_SIGMA,
            k1 = metrics::SSIM_K1,
            k2 = metrics::SSIM_K2
        ),
    );
    meta.insert(
        "conservation_gap".into(),
        "physical units; local = mean |block mean - coarse|, global = |mean(pred) - mean(coarse)|"
            .into(),
    );
    meta.insert(
        "carbon".into(),
        format!(
            "estimate = inference wall time x {} W x {} kg/kWh",
            cfg.carbon.device_power_watts, cfg.carbon.emission_factor_kg_per_kwh
        ),
    );
    for (v, r) in vars.iter().zip(&ranges) {
        meta.insert(format!("range.{v}"), r.to_string());
    }

    for model in models {
        let name = model.name().to_string();
        for (k, v) in model.describe() {
            report.meta.insert(format!("model.{name}.{k}"), v);
        }
        let start = Instant::now();
        let preds: Vec<FieldStack> = coarse
            .par_iter()
            .map(|c| model.downscale(c))
            .collect::<Result<_, _>>()?;
        let wall = start.elapsed().as_secs_f64();
        let carbon = metrics::estimate_carbon(wall, &cfg.carbon)?;

        let per_sample: Vec<Vec<VarStats>> = preds
            .par_iter()
            .zip(&truth)
            .zip(&coarse)
            .map(|((p, t), c)| sample_stats(p, t, c, vars, &ranges))
            .collect::<Result<_, _>>()?;
        for (vi, &var) in vars.iter().enumerate() {
            let mut acc = VarStats::default();
            for s in &per_sample {
                acc.sq_err += s[vi].sq_err;
                acc.count += s[vi].count;
                acc.ssim += s[vi].ssim;
                acc.gap_local += s[vi].gap_local;
                acc.gap_global += s[vi].gap_global;
            }
            let n = per_sample.len() as f64;
            let mse = acc.sq_err / acc.count as f64;
            report.rows.push(EvalRow {
                model: name.clone(),
                variable: var,
                rmse: mse.sqrt(),
                psnr_db: metrics::psnr_from_mse(mse, ranges[vi])?,
                ssim: acc.ssim / n,
                cons_gap_local: acc.gap_local / n,
                cons_gap_global: acc.gap_global / n,
                carbon_kg: carbon,
            });
        }
        report.wall_seconds.insert(name, wall);
    }
    Ok(report)
}

fn sample_stats(
    pred: &FieldStack,
    truth: &FieldStack,
    coarse: &FieldStack,
    vars: &[VariableId],
    ranges: &[f64],
) -> Result<Vec<VarStats>, EvalError> {
    vars.iter()
        .zip(ranges)
        .map(|(&v, &range)| {
            let missing = || EvalError::Unpaired(format!("prediction lacks {v}"));
            let p = pred.field(v).ok_or_else(missing)?;
            let t = truth.field(v).expect("selected");
            let c = coarse.field(v).expect("selected");
            if (p.ny(), p.nx()) != (t.ny(), t.nx()) {
                return Err(EvalError::Unpaired(format!(
                    "{v}: prediction {}x{} vs truth {}x{}",
                    p.ny(),
                    p.nx(),
                    t.ny(),
                    t.nx()
                )));
            }
            let mse = metrics::mse(p.values(), t.values())?;
            let gap = metrics::conservation_gap(
                p.values(),
                (p.ny(), p.nx()),
                c.values(),
                (c.ny(), c.nx()),
            )?;
            Ok(VarStats {
                sq_err: mse * p.values().len() as f64,
                count: p.values().len(),
                ssim: metrics::ssim(p.values(), t.values(), t.ny(), t.nx(), range)?,
                gap_local: gap.local,
                gap_global: gap.global,
            })
        })
        .collect()
}
