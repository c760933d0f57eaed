use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::fields::VariableId;

use super::EvalError;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub variable: VariableId,
    pub rmse: f64,
    /// `f64::INFINITY` for a perfect match.
    pub psnr_db: f64,
    pub ssim: f64,
    pub cons_gap_local: f64,
    pub cons_gap_global: f64,
    pub carbon_kg: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Dataset, grid sizes, metric conventions.
    pub meta: BTreeMap<String, String>,
    /// Inference wall time per model. Kept out of the CSV so the metric
    /// artifact stays reproducible.
    pub wall_seconds: BTreeMap<String, f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "model,variable,rmse,psnr_db,ssim,cons_gap_local,cons_gap_global,carbon_kg";

    pub fn rows_for(&self, model: &str) -> impl Iterator<Item = &EvalRow> {
        let model = model.to_string();
        self.rows.iter().filter(move |r| r.model == model)
    }

    pub fn row(&self, model: &str, var: VariableId) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.variable == var)
    }

    /// Shortest round-trip float formatting; infinity prints as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.model,
                r.variable,
                r.rmse,
                r.psnr_db,
                r.ssim,
                r.cons_gap_local,
                r.cons_gap_global,
                r.carbon_kg
            );
        }
        out
    }

    /// Parses rows written by [`EvalReport::to_csv`]. Metadata is not part
    /// of the CSV and comes back empty.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == Self::CSV_HEADER => {}
            _ => {
                return Err(EvalError::Parse {
                    line: 1,
                    reason: format!("expected header {:?}", Self::CSV_HEADER),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| EvalError::Parse { line: i + 1, reason };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(err(format!("expected 8 columns, found {}", cols.len())));
            }
            let num = |k: usize| -> Result<f64, EvalError> {
                cols[k]
                    .parse::<f64>()
                    .map_err(|e| err(format!("column {}: {e}", k + 1)))
            };
            rows.push(EvalRow {
                model: cols[0].to_string(),
                variable: cols[1].parse().map_err(|e| err(format!("{e}")))?,
                rmse: num(2)?,
                psnr_db: num(3)?,
                ssim: num(4)?,
                cons_gap_local: num(5)?,
                cons_gap_global: num(6)?,
                carbon_kg: num(7)?,
            });
        }
        Ok(Self {
            rows,
            ..Self::default()
        })
    }

    /// Human-readable table with the metadata as a header.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let width = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(
            out,
            "{:<width$}  {:<8} {:>12} {:>10} {:>8} {:>12} {:>12} {:>11}",
            "model", "variable", "rmse", "psnr_db", "ssim", "gap_local", "gap_global", "carbon_kg"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<8} {:>12.5e} {:>10.3} {:>8.4} {:>12.5e} {:>12.5e} {:>11.3e}",
                r.model,
                r.variable.to_string(),
                r.rmse,
                r.psnr_db,
                r.ssim,
                r.cons_gap_local,
                r.cons_gap_global,
                r.carbon_kg
            );
        }
        out
    }
}
