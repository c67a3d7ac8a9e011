//! Trains each block variant under identical data and budget, over several
//! seeds, and tabulates parameter counts and held-out scores.

use std::fmt::Write as _;

use crate::blocks::BlockVariant;
use crate::error::Result;
use crate::train::config::TrainConfig;
use crate::train::trainer::{test_set, EvalReport, Trainer};
use crate::unet::count_params_flops;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: BlockVariant,
    pub params: usize,
    /// One entry per seed, in seed order.
    pub runs: Vec<EvalReport>,
}

/// Sample mean and standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn psnr(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.psnr).collect::<Vec<_>>())
    }

    pub fn ssim(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.ssim).collect::<Vec<_>>())
    }
}

/// Trains `base` once per `(variant, seed)` and scores every run on the
/// same held-out pairs. `progress` receives one line per finished run.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[BlockVariant],
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let pairs = test_set(base)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut config = base.clone().with_variant(variant);
        let params = count_params_flops(&config.model).0;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            config.seed = seed;
            let mut trainer = Trainer::new(config.clone())?;
            trainer.run(None, |_| Ok(()))?;
            let report = trainer.evaluate(&pairs)?;
            progress(&format!(
                "{} seed {seed}: psnr {:.3} dB (input {:.3}), ssim {:.4}",
                variant.label(),
                report.psnr,
                report.input_psnr,
                report.ssim
            ));
            runs.push(report);
        }
        rows.push(AblationRow { variant, params, runs });
    }
    Ok(rows)
}

/// Fixed-width text table: variant, parameters, PSNR and SSIM mean ± std.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<20} {:>10} {:>18} {:>18}\n", "variant", "params", "psnr (dB)", "ssim");
    for row in rows {
        let (p, ps) = row.psnr();
        let (s, ss) = row.ssim();
        let _ = writeln!(
            out,
            "{:<20} {:>10} {:>11.3} ± {:<5.3} {:>11.4} ± {:<5.4}",
            row.variant.label(),
            row.params,
            p,
            ps,
            s,
            ss
        );
    }
    if let Some(first) = rows.first().and_then(|r| r.runs.first()) {
        let _ = writeln!(out, "{:<20} {:>10} {:>11.3}         {:>11.4}", "input", "-", first.input_psnr, first.input_ssim);
    }
    out
}
