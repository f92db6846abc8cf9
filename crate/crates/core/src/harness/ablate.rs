//! Sweep of the unsupervised loss over norm pairs and prior weights.

use std::fmt::Write as _;

use super::config::{Mode, RunConfig};
use super::train::cmd_train_dcn;
use crate::error::{Error, Result};

pub const ABLATE_HEADER: &str = "gamma,eta,alpha,val_rmse_mm";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub gamma: u32,
    pub eta: u32,
    pub alpha: f64,
    /// Validation RMSE of the selected (best) checkpoint.
    pub val_rmse_mm: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATE_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.gamma, r.eta, r.alpha, r.val_rmse_mm);
    }
    s
}

/// Trains one unsupervised model per (γ, η) × α grid point, each in its own
/// subdirectory of `cfg.out`, in grid order.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    if cfg.mode != Mode::Unsupervised {
        return Err(Error::invalid(format!(
            "ablate needs mode = unsupervised, config says {}",
            cfg.mode.as_str()
        )));
    }
    if cfg.ablate.norms.is_empty() || cfg.ablate.alphas.is_empty() {
        return Err(Error::invalid("the ablation grid is empty"));
    }
    if cfg.cpn_checkpoint.is_none() {
        return Err(Error::invalid("ablate requires a prior-network checkpoint"));
    }
    let mut rows = Vec::new();
    for norms in &cfg.ablate.norms {
        for (ai, &alpha) in cfg.ablate.alphas.iter().enumerate() {
            let mut run = cfg.clone();
            run.norms = *norms;
            run.weights.alpha = alpha;
            run.weights.validate()?;
            run.out = cfg
                .out
                .join(format!("g{}_e{}_a{ai}", norms.gamma, norms.eta));
            let outcome = cmd_train_dcn(&run, None)?;
            rows.push(AblationRow {
                gamma: norms.gamma,
                eta: norms.eta,
                alpha,
                val_rmse_mm: outcome.best.rmse_mm,
            });
        }
    }
    Ok(rows)
}
