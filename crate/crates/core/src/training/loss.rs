use std::fmt;
use std::str::FromStr;

use crate::fields::NormStats;
use crate::scalar::Real;
use crate::tensor::{Graph, Tensor, TensorError, Var};

use super::TrainError;

/// How a coarse cell relates to the fine cells it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MassConvention {
    /// Coarse value is the block mean, so `Σpred / s²` is compared with `Σinput`.
    #[default]
    MeanPreserving,
    /// Literal `|Σpred − Σinput|`.
    RawSum,
}

impl MassConvention {
    pub fn name(self) -> &'static str {
        match self {
            MassConvention::MeanPreserving => "mean_preserving",
            MassConvention::RawSum => "raw_sum",
        }
    }
}

impl fmt::Display for MassConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MassConvention {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean_preserving" => Ok(MassConvention::MeanPreserving),
            "raw_sum" => Ok(MassConvention::RawSum),
            other => Err(TrainError::Config(format!("unknown mass convention {other:?}"))),
        }
    }
}

/// Units the mass gap is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MassUnits {
    /// Denormalise both sides before summing.
    #[default]
    Physical,
    Normalized,
}

impl MassUnits {
    pub fn name(self) -> &'static str {
        match self {
            MassUnits::Physical => "physical",
            MassUnits::Normalized => "normalized",
        }
    }
}

impl fmt::Display for MassUnits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MassUnits {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "physical" => Ok(MassUnits::Physical),
            "normalized" => Ok(MassUnits::Normalized),
            other => Err(TrainError::Config(format!("unknown mass units {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub use_mass_loss: bool,
    pub mass_weight: f64,
    pub mass_convention: MassConvention,
    pub per_variable: bool,
    pub mass_units: MassUnits,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_mass_loss: false,
            mass_weight: 1.0,
            mass_convention: MassConvention::MeanPreserving,
            per_variable: true,
            mass_units: MassUnits::Physical,
        }
    }
}

impl LossConfig {
    pub fn with_mass(mut self, on: bool) -> Self {
        self.use_mass_loss = on;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.mass_weight >= 0.0 && self.mass_weight.is_finite()) {
            return Err(TrainError::Config(format!(
                "mass_weight must be finite and >= 0, got {}",
                self.mass_weight
            )));
        }
        Ok(())
    }
}

/// Splits a shape into (channels, plane height, plane width). Ranks below 3
/// count as one channel.
fn planes(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [] => (1, 1, 1),
        [w] => (1, 1, *w),
        [h, w] => (1, *h, *w),
        [lead @ .., h, w] => (lead.iter().product(), *h, *w),
    }
}

/// Mean squared error. With `per_variable` the mean is taken per channel and
/// the channel means are averaged.
pub fn mse_loss<R: Real>(
    g: &mut Graph<R>,
    pred: Var,
    truth: Var,
    per_variable: bool,
) -> Result<Var, TensorError> {
    if g.shape(pred) != g.shape(truth) {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(truth).to_vec(),
        });
    }
    let diff = g.sub(pred, truth)?;
    let sq = g.square(diff);
    let (c, h, w) = planes(g.shape(pred));
    if !per_variable || c == 1 {
        return Ok(g.mean(sq));
    }
    let rows = g.reshape(sq, &[c, h * w])?;
    let per_channel = g.row_sum(rows);
    let per_channel = g.scale(per_channel, R::one() / R::count(h * w));
    let total = g.sum(per_channel);
    Ok(g.scale(total, R::one() / R::count(c)))
}

/// Mass-conservation penalty between a fine prediction and its coarse input.
///
/// `norm` gives the statistics both tensors are standardised with. When it is
/// present and `cfg.mass_units` is physical, channel sums are denormalised
/// before comparison. The result is divided by channel count and coarse pixel
/// count in every configuration.
pub fn mass_loss<R: Real>(
    g: &mut Graph<R>,
    pred: Var,
    input: Var,
    cfg: &LossConfig,
    norm: Option<&NormStats>,
) -> Result<Var, TrainError> {
    let ps = g.shape(pred).to_vec();
    let is = g.shape(input).to_vec();
    let (c, hf, wf) = planes(&ps);
    let (ci, hc, wc) = planes(&is);
    let ratio_ok = ps.len() == is.len()
        && c == ci
        && hc > 0
        && wc > 0
        && hf % hc == 0
        && wf % wc == 0
        && hf / hc == wf / wc
        && hf / hc >= 1;
    if !ratio_ok {
        return Err(TrainError::ScaleMismatch {
            pred: ps,
            input: is,
        });
    }
    let s = hf / hc;
    let (nf, nc) = (hf * wf, hc * wc);

    let pred_rows = g.reshape(pred, &[c, nf])?;
    let mut pred_sum = g.row_sum(pred_rows);
    let input_rows = g.reshape(input, &[c, nc])?;
    let mut input_sum = g.row_sum(input_rows);

    let affine = match (norm, cfg.mass_units) {
        (Some(n), MassUnits::Physical) => {
            if n.stds().len() != c {
                return Err(TrainError::Config(format!(
                    "norm stats cover {} channels, tensors have {c}",
                    n.stds().len()
                )));
            }
            Some(n)
        }
        _ => None,
    };
    if let Some(n) = affine {
        let std = g.constant(Tensor::from_f64(&[c], n.stds())?);
        let shift = |count: usize| -> Result<Tensor<R>, TensorError> {
            let v: Vec<f64> = n.means().iter().map(|m| m * count as f64).collect();
            Tensor::from_f64(&[c], &v)
        };
        let fine_shift = g.constant(shift(nf)?);
        let coarse_shift = g.constant(shift(nc)?);
        let scaled = g.mul(pred_sum, std)?;
        pred_sum = g.add(scaled, fine_shift)?;
        let scaled = g.mul(input_sum, std)?;
        input_sum = g.add(scaled, coarse_shift)?;
    }
    if cfg.mass_convention == MassConvention::MeanPreserving {
        pred_sum = g.scale(pred_sum, R::one() / R::count(s * s));
    }

    let gap = if cfg.per_variable {
        let d = g.sub(pred_sum, input_sum)?;
        let a = g.abs(d);
        g.sum(a)
    } else {
        let p = g.sum(pred_sum);
        let i = g.sum(input_sum);
        let d = g.sub(p, i)?;
        g.abs(d)
    };
    Ok(g.scale(gap, R::one() / R::count(c * nc)))
}

/// Nodes of the composite loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mse: Var,
    /// Always computed so it can be logged; only part of `total` when the
    /// mass term is enabled.
    pub mass: Var,
    pub total: Var,
}

pub fn total_loss<R: Real>(
    g: &mut Graph<R>,
    pred: Var,
    truth: Var,
    input: Var,
    cfg: &LossConfig,
    norm: Option<&NormStats>,
) -> Result<LossTerms, TrainError> {
    cfg.validate()?;
    let mse = mse_loss(g, pred, truth, cfg.per_variable)?;
    let mass = mass_loss(g, pred, input, cfg, norm)?;
    let total = if cfg.use_mass_loss {
        let weighted = g.scale(mass, R::lit(cfg.mass_weight));
        g.add(mse, weighted)?
    } else {
        mse
    };
    Ok(LossTerms { mse, mass, total })
}
