use std::fmt::Write as _;

use crate::metrics::{csv_row, EvalResult, CSV_HEADER};

/// Loss components of one optimisation step, summed over the batch. Terms a
/// mode does not use are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub supervised: f64,
    pub fidelity: f64,
    pub prior: f64,
    pub psi_c: f64,
    pub psi_s: f64,
}

pub const STEP_HEADER: &str = "step,lr,total,supervised,fidelity,prior,psi_c,psi_s";

impl StepRecord {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.total,
            self.supervised,
            self.fidelity,
            self.prior,
            self.psi_c,
            self.psi_s
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return None;
        }
        let n = |i: usize| f[i].parse::<f64>().ok();
        Some(StepRecord {
            step: f[0].parse().ok()?,
            lr: n(1)?,
            total: n(2)?,
            supervised: n(3)?,
            fidelity: n(4)?,
            prior: n(5)?,
            psi_c: n(6)?,
            psi_s: n(7)?,
        })
    }
}

/// Records of one training run. Wall-clock times are kept apart from the
/// deterministic logs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    /// Validation snapshots: (step, metrics).
    pub evals: Vec<(usize, EvalResult)>,
    /// Seconds since the start of the run, one per step.
    pub wall_s: Vec<f64>,
}

impl RunLog {
    pub fn steps_csv(&self) -> String {
        let mut s = format!("{STEP_HEADER}\n");
        for r in &self.steps {
            let _ = writeln!(s, "{}", r.csv());
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (step, r) in &self.evals {
            let _ = writeln!(s, "{}", csv_row(&format!("step{step}"), r));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = "step,wall_s\n".to_string();
        for (r, t) in self.steps.iter().zip(&self.wall_s) {
            let _ = writeln!(s, "{},{t}", r.step);
        }
        s
    }
}
