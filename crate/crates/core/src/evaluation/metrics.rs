use crate::scalar::Real;

use super::EvalError;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_lengths<R>(pred: &[R], truth: &[R]) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty("no values to compare"));
    }
    Ok(())
}

pub fn mse<R: Real>(pred: &[R], truth: &[R]) -> Result<f64, EvalError> {
    check_lengths(pred, truth)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let d = p.to_f64_lossy() - t.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn rmse<R: Real>(pred: &[R], truth: &[R]) -> Result<f64, EvalError> {
    Ok(mse(pred, truth)?.sqrt())
}

/// `20·log10(range) − 10·log10(mse)`; a perfect match gives `+∞`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> Result<f64, EvalError> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(EvalError::InvalidRange(data_range));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * data_range.log10() - 10.0 * mse.log10())
}

pub fn psnr<R: Real>(pred: &[R], truth: &[R], data_range: f64) -> Result<f64, EvalError> {
    psnr_from_mse(mse(pred, truth)?, data_range)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `ny × nx` plane.
fn filter_valid(x: &[f64], ny: usize, nx: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oy, ox) = (ny - k + 1, nx - k + 1);
    let mut rows = vec![0.0; ny * ox];
    for y in 0..ny {
        for j in 0..ox {
            rows[y * ox + j] = taps.iter().enumerate().map(|(t, w)| w * x[y * nx + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oy * ox];
    for i in 0..oy {
        for j in 0..ox {
            out[i * ox + j] = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * rows[(i + t) * ox + j])
                .sum();
        }
    }
    out
}

/// Mean structural similarity over every fully interior 11×11 window.
pub fn ssim<R: Real>(
    pred: &[R],
    truth: &[R],
    ny: usize,
    nx: usize,
    data_range: f64,
) -> Result<f64, EvalError> {
    check_lengths(pred, truth)?;
    if pred.len() != ny * nx {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: ny * nx,
        });
    }
    if ny < SSIM_WINDOW || nx < SSIM_WINDOW {
        return Err(EvalError::GridTooSmall {
            ny,
            nx,
            window: SSIM_WINDOW,
        });
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(EvalError::InvalidRange(data_range));
    }
    // Second moments are taken about a shared offset to limit cancellation on
    // fields with a large mean (temperature, geopotential).
    let n = pred.len() as f64;
    let offset = pred
        .iter()
        .chain(truth)
        .map(|v| v.to_f64_lossy())
        .sum::<f64>()
        / (2.0 * n);
    let a: Vec<f64> = pred.iter().map(|v| v.to_f64_lossy() - offset).collect();
    let b: Vec<f64> = truth.iter().map(|v| v.to_f64_lossy() - offset).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();

    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let [ma, mb, saa, sbb, sab] =
        [&a, &b, &aa, &bb, &ab].map(|p| filter_valid(p, ny, nx, &taps));
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..ma.len() {
        let (mu_a, mu_b) = (ma[i] + offset, mb[i] + offset);
        let var_a = saa[i] - ma[i] * ma[i];
        let var_b = sbb[i] - mb[i] * mb[i];
        let cov = sab[i] - ma[i] * mb[i];
        total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
    Ok(total / ma.len() as f64)
}

/// Local and global conservation gaps between a fine field and its coarse
/// counterpart, in the fields' own units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservationGap {
    /// Mean over coarse cells of `|block_mean(pred) − input|`.
    pub local: f64,
    /// `|mean(pred) − mean(input)|`, i.e. `|Σpred/s² − Σinput|` per coarse cell.
    pub global: f64,
}

pub fn conservation_gap<R: Real>(
    pred: &[R],
    fine: (usize, usize),
    input: &[R],
    coarse: (usize, usize),
) -> Result<ConservationGap, EvalError> {
    let (fy, fx) = fine;
    let (cy, cx) = coarse;
    let ok = cy > 0
        && cx > 0
        && fy % cy == 0
        && fx % cx == 0
        && fy / cy == fx / cx
        && pred.len() == fy * fx
        && input.len() == cy * cx;
    if !ok {
        return Err(EvalError::RatioMismatch { fine, coarse });
    }
    let s = fy / cy;
    let mut local = 0.0;
    let mut pred_sum = 0.0;
    let mut input_sum = 0.0;
    for i in 0..cy {
        for j in 0..cx {
            let mut block = 0.0;
            for y in i * s..(i + 1) * s {
                for x in j * s..(j + 1) * s {
                    block += pred[y * fx + x].to_f64_lossy();
                }
            }
            let target = input[i * cx + j].to_f64_lossy();
            local += (block / (s * s) as f64 - target).abs();
            pred_sum += block;
            input_sum += target;
        }
    }
    let cells = (cy * cx) as f64;
    Ok(ConservationGap {
        local: local / cells,
        global: (pred_sum / (s * s) as f64 - input_sum).abs() / cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarbonConfig {
    pub device_power_watts: f64,
    pub emission_factor_kg_per_kwh: f64,
}

impl Default for CarbonConfig {
    fn default() -> Self {
        Self {
            device_power_watts: 100.0,
            emission_factor_kg_per_kwh: 0.7,
        }
    }
}

impl CarbonConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.device_power_watts) || !ok(self.emission_factor_kg_per_kwh) {
            return Err(EvalError::Config(format!(
                "carbon power and emission factor must be positive, got {} W and {} kg/kWh",
                self.device_power_watts, self.emission_factor_kg_per_kwh
            )));
        }
        Ok(())
    }
}

/// Estimated kg CO₂ for `wall_seconds` at the configured power draw.
pub fn estimate_carbon(wall_seconds: f64, cfg: &CarbonConfig) -> Result<f64, EvalError> {
    cfg.validate()?;
    if !(wall_seconds >= 0.0 && wall_seconds.is_finite()) {
        return Err(EvalError::Config(format!(
            "wall time must be >= 0, got {wall_seconds}"
        )));
    }
    // W·s → kWh is ÷3.6e6; multiplying the factor in first keeps round
    // inputs exact.
    Ok(cfg.emission_factor_kg_per_kwh * cfg.device_power_watts * wall_seconds / 3.6e6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SplitMix64::new(seed);
        (0..n).map(|_| r.normal()).collect()
    }

    /// Direct windowed SSIM with a 2-D weight table and plain moments.
    fn ssim_oracle(a: &[f64], b: &[f64], ny: usize, nx: usize, range: f64) -> f64 {
        let t = gaussian_taps(11, 1.5);
        let c1 = (0.01 * range).powi(2);
        let c2 = (0.03 * range).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=ny - 11 {
            for j in 0..=nx - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let w = t[u] * t[v];
                        ma += w * a[(i + u) * nx + j + v];
                        mb += w * b[(i + u) * nx + j + v];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let w = t[u] * t[v];
                        let da = a[(i + u) * nx + j + v] - ma;
                        let db = b[(i + u) * nx + j + v] - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let v = psnr_from_mse(1.0, 255.0).unwrap();
        assert!((v - 48.1308).abs() < 1e-3, "{v}");
        assert_eq!(psnr(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), f64::INFINITY);
        let d = psnr_from_mse(0.3, 20.0).unwrap() - psnr_from_mse(0.3, 10.0).unwrap();
        assert!((d - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!(psnr_from_mse(0.1, 1.0).unwrap() > psnr_from_mse(0.2, 1.0).unwrap());
        assert!(psnr_from_mse(1.0, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_sign_and_symmetry() {
        let (ny, nx) = (16, 16);
        let a = noise(ny * nx, 1);
        let b: Vec<f64> = a.iter().zip(noise(ny * nx, 2)).map(|(x, n)| x + 0.3 * n).collect();
        assert_eq!(ssim(&a, &a, ny, nx, 4.0).unwrap(), 1.0);
        // Zero local means as well as zero global mean: a modulated checkerboard.
        let c: Vec<f64> = (0..ny * nx)
            .map(|i| {
                let (y, x) = (i / nx, i % nx);
                let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                sign * (1.0 + 0.2 * (x as f64 / 5.0).sin())
            })
            .collect();
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        assert!(ssim(&c, &neg, ny, nx, 4.0).unwrap() < 0.0);
        let ab = ssim(&a, &b, ny, nx, 4.0).unwrap();
        let ba = ssim(&b, &a, ny, nx, 4.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        for (ny, nx, seed) in [(16, 16, 3), (11, 11, 4), (32, 20, 5)] {
            let a: Vec<f64> = noise(ny * nx, seed).iter().map(|v| 288.0 + 3.0 * v).collect();
            let b: Vec<f64> = a
                .iter()
                .zip(noise(ny * nx, seed + 100))
                .map(|(x, n)| x + n)
                .collect();
            let fast = ssim(&a, &b, ny, nx, 15.0).unwrap();
            let slow = ssim_oracle(&a, &b, ny, nx, 15.0);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_rejects_small_grids() {
        let a = vec![0.0; 100];
        assert!(matches!(
            ssim(&a, &a, 10, 10, 1.0),
            Err(EvalError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn conservation_gap_examples() {
        let input = [1.0, -2.0, 0.5, 4.0];
        let up = |extra: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            (0..16)
                .map(|i| {
                    let (y, x) = (i / 4, i % 4);
                    input[(y / 2) * 2 + x / 2] + extra(y, x)
                })
                .collect()
        };
        let constant = up(&|_, _| 0.0);
        let gap = conservation_gap(&constant, (4, 4), &input, (2, 2)).unwrap();
        assert_eq!(gap, ConservationGap { local: 0.0, global: 0.0 });
        let checker = up(&|y, x| if (x + y) % 2 == 0 { 0.25 } else { -0.25 });
        let gap = conservation_gap(&checker, (4, 4), &input, (2, 2)).unwrap();
        assert_eq!(gap.local, 0.0);
        let shifted = up(&|_, _| 0.125);
        let gap = conservation_gap(&shifted, (4, 4), &input, (2, 2)).unwrap();
        assert_eq!(gap.local, 0.125);
        assert_eq!(gap.global, 0.125);
        assert!(conservation_gap(&constant, (4, 4), &input, (3, 2)).is_err());
    }

    #[test]
    fn carbon_arithmetic() {
        let cfg = CarbonConfig {
            device_power_watts: 100.0,
            emission_factor_kg_per_kwh: 0.7,
        };
        assert_eq!(estimate_carbon(3600.0, &cfg).unwrap(), 0.07);
        assert_eq!(estimate_carbon(0.0, &cfg).unwrap(), 0.0);
        let one = estimate_carbon(10.0, &cfg).unwrap();
        let three = estimate_carbon(30.0, &cfg).unwrap();
        assert!((three - 3.0 * one).abs() < 1e-18);
        assert!(estimate_carbon(-1.0, &cfg).is_err());
        let bad = CarbonConfig {
            device_power_watts: 0.0,
            ..cfg
        };
        assert!(estimate_carbon(1.0, &bad).is_err());
    }
}
