//! Seeded Gaussian random fields standing in for reanalysis variables.

use crate::rng::{derive_seed, SplitMix64};

use super::{FieldError, FieldStack, GridField, PressureLevel, UpperAirVar, VariableId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrfParams {
    /// Standard deviation of the smoothing kernel, in grid cells.
    pub corr_len: f64,
    pub mean: f64,
    pub std: f64,
}

/// White noise convolved with a Gaussian kernel, rescaled so the sample
/// mean and standard deviation equal the requested ones.
pub fn gaussian_random_field(
    ny: usize,
    nx: usize,
    params: &GrfParams,
    seed: u64,
) -> Result<Vec<f64>, FieldError> {
    if !(params.corr_len >= 1.0) || !(params.std >= 0.0) || ny == 0 || nx == 0 {
        return Err(FieldError::InvalidGrid(format!(
            "random field {ny}x{nx} with correlation length {} and std {}",
            params.corr_len, params.std
        )));
    }
    let radius = (3.0 * params.corr_len).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * params.corr_len * params.corr_len)).exp()
        })
        .collect();
    let (py, px) = (ny + 2 * radius, nx + 2 * radius);
    let mut rng = SplitMix64::new(seed);
    let noise: Vec<f64> = (0..py * px).map(|_| rng.normal()).collect();

    let mut rows = vec![0.0; py * nx];
    for y in 0..py {
        let src = &noise[y * px..(y + 1) * px];
        for x in 0..nx {
            rows[y * nx + x] = kernel.iter().zip(&src[x..]).map(|(k, v)| k * v).sum();
        }
    }
    let mut field = vec![0.0; ny * nx];
    for y in 0..ny {
        for (k, w) in kernel.iter().enumerate() {
            let src = &rows[(y + k) * nx..(y + k + 1) * nx];
            for (dst, v) in field[y * nx..(y + 1) * nx].iter_mut().zip(src) {
                *dst += w * v;
            }
        }
    }

    let n = field.len() as f64;
    let m = field.iter().sum::<f64>() / n;
    let s = (field.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    let gain = if s > 0.0 { params.std / s } else { 0.0 };
    Ok(field.iter().map(|v| params.mean + gain * (v - m)).collect())
}

/// Shifts a field down so at least `dry_fraction` of its cells fall to zero,
/// then clips at zero (rain / no-rain structure).
pub fn apply_dry_fraction(values: &mut [f64], dry_fraction: f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((dry_fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let threshold = sorted[k - 1];
    values.iter_mut().for_each(|v| *v = (*v - threshold).max(0.0));
}

/// Per-variable generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProfile {
    pub name: String,
    pub spacing_m: f64,
    pub dry_fraction: f64,
    params: Vec<(VariableId, GrfParams)>,
}

impl SynthProfile {
    pub const NAMES: [&'static str; 1] = ["default"];

    /// Magnitudes loosely following a mid-latitude reanalysis day on a
    /// 0.25° grid.
    pub fn default_profile() -> Self {
        use PressureLevel::*;
        use UpperAirVar::*;
        let p = |corr_len, mean, std| GrfParams {
            corr_len,
            mean,
            std,
        };
        let mut params = vec![
            (VariableId::U10, p(2.0, 0.0, 5.0)),
            (VariableId::V10, p(2.0, 0.0, 5.0)),
            (VariableId::T2m, p(2.0, 288.0, 5.0)),
            (VariableId::Pr, p(2.0, 2.0, 4.0)),
        ];
        let upper = [
            (Z, [(Hpa50, 202_000.0), (Hpa100, 158_900.0), (Hpa150, 133_400.0)], 1_000.0),
            (Q, [(Hpa50, 2.6e-6), (Hpa100, 3.0e-6), (Hpa150, 5.0e-6)], 1.0e-6),
            (T, [(Hpa50, 210.0), (Hpa100, 205.0), (Hpa150, 215.0)], 3.0),
            (U, [(Hpa50, 8.0), (Hpa100, 12.0), (Hpa150, 15.0)], 8.0),
            (V, [(Hpa50, 0.0), (Hpa100, 0.0), (Hpa150, 0.0)], 5.0),
        ];
        for (var, levels, std) in upper {
            for (level, mean) in levels {
                params.push((VariableId::Upper(var, level), p(3.0, mean, std)));
            }
        }
        params.sort_by_key(|(v, _)| *v);
        Self {
            name: "default".into(),
            spacing_m: 25_000.0,
            dry_fraction: 0.5,
            params,
        }
    }

    pub fn named(name: &str) -> Result<Self, FieldError> {
        match name {
            "default" => Ok(Self::default_profile()),
            other => Err(FieldError::Malformed(format!("unknown synth profile {other}"))),
        }
    }

    pub fn with_spacing_km(mut self, km: f64) -> Self {
        self.spacing_m = km * 1000.0;
        self
    }

    pub fn params(&self, var: VariableId) -> Option<GrfParams> {
        self.params.iter().find(|(v, _)| *v == var).map(|(_, p)| *p)
    }

    pub fn variables(&self) -> Vec<VariableId> {
        self.params.iter().map(|(v, _)| *v).collect()
    }
}

/// One field per variable of the profile, each seeded from its own sub-stream.
pub fn synth_stack(
    ny: usize,
    nx: usize,
    seed: u64,
    profile: &SynthProfile,
) -> Result<FieldStack, FieldError> {
    if profile.variables() != VariableId::all() {
        return Err(FieldError::Malformed(format!(
            "profile {} does not cover all {} variables",
            profile.name,
            VariableId::COUNT
        )));
    }
    let fields = profile
        .params
        .iter()
        .map(|(var, p)| {
            let mut values = gaussian_random_field(ny, nx, p, derive_seed(seed, var.index() as u64))?;
            if *var == VariableId::Pr {
                apply_dry_fraction(&mut values, profile.dry_fraction);
            }
            GridField::new(*var, ny, nx, profile.spacing_m, values)
        })
        .collect::<Result<_, _>>()?;
    FieldStack::new(fields)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn zero_std_gives_constant_mean() {
        let p = GrfParams {
            corr_len: 2.0,
            mean: 3.5,
            std: 0.0,
        };
        let f = gaussian_random_field(8, 8, &p, 1).unwrap();
        assert!(f.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = GrfParams {
            corr_len: 2.5,
            mean: 0.0,
            std: 1.0,
        };
        let a = gaussian_random_field(16, 24, &p, 99).unwrap();
        let b = gaussian_random_field(16, 24, &p, 99).unwrap();
        assert_eq!(a, b);
        let c = gaussian_random_field(16, 24, &p, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn moments_match_request() {
        let p = GrfParams {
            corr_len: 3.0,
            mean: -4.0,
            std: 2.0,
        };
        let f = gaussian_random_field(128, 128, &p, 5).unwrap();
        let (m, s) = moments(&f);
        assert!((m - p.mean).abs() < 0.05 * p.std);
        assert!((s - p.std).abs() < 0.1 * p.std);
    }

    #[test]
    fn field_is_spatially_correlated() {
        let p = GrfParams {
            corr_len: 3.0,
            mean: 0.0,
            std: 1.0,
        };
        let f = gaussian_random_field(64, 64, &p, 11).unwrap();
        let lag1: f64 = (0..64)
            .flat_map(|y| (0..63).map(move |x| (y, x)))
            .map(|(y, x)| f[y * 64 + x] * f[y * 64 + x + 1])
            .sum::<f64>()
            / (64.0 * 63.0);
        // Gaussian kernel of width 3 gives lag-1 correlation exp(-1/36) ≈ 0.97.
        assert!(lag1 > 0.9, "{lag1}");
    }

    #[test]
    fn rejects_bad_params() {
        let p = GrfParams {
            corr_len: 0.5,
            mean: 0.0,
            std: 1.0,
        };
        assert!(gaussian_random_field(8, 8, &p, 0).is_err());
    }

    #[test]
    fn default_stack_shapes_and_magnitudes() {
        let profile = SynthProfile::default_profile();
        let s = synth_stack(32, 32, 7, &profile).unwrap();
        assert_eq!(s.len(), 19);
        let t2m = s.field(VariableId::T2m).unwrap().mean();
        assert!((278.0..=298.0).contains(&t2m));
        let pr = s.field(VariableId::Pr).unwrap();
        assert!(pr.check_physical().is_ok());
        let dry = pr.values().iter().filter(|&&v| v == 0.0).count();
        assert!(dry as f64 >= 0.4 * pr.values().len() as f64);
    }

    #[test]
    fn different_seeds_differ_in_every_channel() {
        let profile = SynthProfile::default_profile();
        let a = synth_stack(16, 16, 1, &profile).unwrap();
        let b = synth_stack(16, 16, 2, &profile).unwrap();
        for (fa, fb) in a.fields().iter().zip(b.fields()) {
            assert_ne!(fa.values(), fb.values(), "{}", fa.var());
        }
    }
}
