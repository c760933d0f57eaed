//! Skill metrics, conservation diagnostics, carbon estimates, reports and
//! heatmaps.

mod error;
mod evaluate;
pub mod heatmap;
mod metrics;
mod report;

pub use error::EvalError;
pub use evaluate::{evaluate, BilinearBaseline, CheckpointModel, Downscaler, EvalConfig};
pub use heatmap::{render_heatmap, write_triptych, HeatmapInfo};
pub use metrics::{
    conservation_gap, estimate_carbon, gaussian_taps, mse, psnr, psnr_from_mse, rmse, ssim,
    CarbonConfig, ConservationGap, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use report::{EvalReport, EvalRow};
