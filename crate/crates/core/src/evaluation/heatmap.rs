//! Binary PPM (P6) heatmaps.
//!
//! The colour ramp has 256 entries interpolated linearly between five
//! anchors: dark blue (0), cyan (64), green (128), yellow (192) and dark red
//! (255). Each image gets a `.txt` sidecar with the value range mapped onto
//! the ramp.

use std::fs;
use std::path::{Path, PathBuf};

use crate::fields::GridField;

use super::EvalError;

pub const RAMP_ANCHORS: [(u8, [u8; 3]); 5] = [
    (0, [0, 0, 128]),
    (64, [0, 192, 255]),
    (128, [0, 200, 0]),
    (192, [255, 230, 0]),
    (255, [160, 0, 0]),
];

pub fn ramp() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    for w in RAMP_ANCHORS.windows(2) {
        let ((i0, c0), (i1, c1)) = (w[0], w[1]);
        for i in i0..=i1 {
            let t = (i - i0) as f64 / (i1 - i0) as f64;
            for k in 0..3 {
                let v = c0[k] as f64 + t * (c1[k] as f64 - c0[k] as f64);
                out[i as usize][k] = v.round() as u8;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapInfo {
    pub min: f64,
    pub max: f64,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

/// Writes `values` (`ny × nx`, row-major, north up) as a PPM. Values are
/// mapped linearly from `range` (default: the data's own min/max).
pub fn render_heatmap(
    values: &[f64],
    ny: usize,
    nx: usize,
    range: Option<(f64, f64)>,
    label: &str,
    path: &Path,
) -> Result<HeatmapInfo, EvalError> {
    if values.len() != ny * nx || values.is_empty() {
        return Err(EvalError::LengthMismatch {
            pred: values.len(),
            truth: ny * nx,
        });
    }
    let (min, max) = range.unwrap_or_else(|| {
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let table = ramp();
    let span = if max > min { max - min } else { 1.0 };
    let mut bytes = format!("P6\n{nx} {ny}\n255\n").into_bytes();
    for &v in values {
        let t = ((v - min) / span).clamp(0.0, 1.0);
        bytes.extend_from_slice(&table[(t * 255.0).round() as usize]);
    }
    fs::write(path, bytes)?;
    fs::write(
        sidecar(path),
        format!("label={label}\nmin={min}\nmax={max}\nramp=blue-cyan-green-yellow-red 256\n"),
    )?;
    Ok(HeatmapInfo { min, max })
}

/// Coarse input, truth and prediction on a shared colour scale. Returns the
/// three image paths.
pub fn write_triptych(
    dir: &Path,
    stem: &str,
    coarse: &GridField,
    truth: &GridField,
    pred: &GridField,
) -> Result<[PathBuf; 3], EvalError> {
    let fields = [coarse, truth, pred];
    let (min, max) = fields
        .iter()
        .flat_map(|f| f.values().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut paths = Vec::with_capacity(3);
    for (f, kind) in fields.iter().zip(["coarse", "truth", "pred"]) {
        let path = dir.join(format!("{stem}_{}_{kind}.ppm", f.var()));
        let label = format!("{} {kind} ({})", f.var(), f.units());
        render_heatmap(f.values(), f.ny(), f.nx(), Some((min, max)), &label, &path)?;
        paths.push(path);
    }
    Ok(paths.try_into().expect("three paths"))
}
