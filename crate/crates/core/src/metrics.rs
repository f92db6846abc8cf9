//! Depth-completion metrics in benchmark units: millimetres for depth errors,
//! 1/km for inverse-depth errors.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub absrel: f64,
    pub n_valid: usize,
}

/// How per-image results are combined over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean of per-image metrics.
    #[default]
    PerImage,
    /// Metrics over all valid pixels pooled together.
    PerPixel,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_image" => Ok(Aggregation::PerImage),
            "per_pixel" => Ok(Aggregation::PerPixel),
            other => Err(Error::invalid(format!("unknown aggregation {other}"))),
        }
    }
}

pub fn compute_metrics(pred: &Tensor, gt: &Tensor, validity: &Tensor) -> Result<EvalResult> {
    if pred.shape() != gt.shape() || validity.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            left: pred.shape(),
            right: gt.shape(),
        });
    }
    let (mut se, mut ae, mut ise, mut iae, mut rel, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for (i, ((&p, &g), &v)) in pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(validity.data())
        .enumerate()
    {
        if v == 0.0 {
            continue;
        }
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::NonPositiveDepth {
                index: i,
                value: if p > 0.0 { g } else { p },
            });
        }
        let e = p - g;
        let ie = 1.0 / p - 1.0 / g;
        se += e * e;
        ae += e.abs();
        ise += ie * ie;
        iae += ie.abs();
        rel += e.abs() / g;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no valid pixels to evaluate"));
    }
    let nf = n as f64;
    Ok(EvalResult {
        rmse_mm: (se / nf).sqrt() * 1000.0,
        mae_mm: ae / nf * 1000.0,
        irmse_per_km: (ise / nf).sqrt() * 1000.0,
        imae_per_km: iae / nf * 1000.0,
        absrel: rel / nf,
        n_valid: n,
    })
}

pub fn aggregate(results: &[EvalResult], how: Aggregation) -> Result<EvalResult> {
    if results.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let total: usize = results.iter().map(|r| r.n_valid).sum();
    let out = match how {
        Aggregation::PerImage => {
            let k = results.len() as f64;
            let mean = |f: fn(&EvalResult) -> f64| results.iter().map(f).sum::<f64>() / k;
            EvalResult {
                rmse_mm: mean(|r| r.rmse_mm),
                mae_mm: mean(|r| r.mae_mm),
                irmse_per_km: mean(|r| r.irmse_per_km),
                imae_per_km: mean(|r| r.imae_per_km),
                absrel: mean(|r| r.absrel),
                n_valid: total,
            }
        }
        Aggregation::PerPixel => {
            let n = total as f64;
            let wmean = |f: fn(&EvalResult) -> f64| {
                results.iter().map(|r| r.n_valid as f64 * f(r)).sum::<f64>() / n
            };
            EvalResult {
                rmse_mm: wmean(|r| r.rmse_mm * r.rmse_mm).sqrt(),
                mae_mm: wmean(|r| r.mae_mm),
                irmse_per_km: wmean(|r| r.irmse_per_km * r.irmse_per_km).sqrt(),
                imae_per_km: wmean(|r| r.imae_per_km),
                absrel: wmean(|r| r.absrel),
                n_valid: total,
            }
        }
    };
    Ok(out)
}

pub const CSV_HEADER: &str = "name,n_valid,rmse_mm,mae_mm,irmse_per_km,imae_per_km,absrel";

pub fn csv_row(name: &str, r: &EvalResult) -> String {
    format!(
        "{name},{},{},{},{},{},{}",
        r.n_valid, r.rmse_mm, r.mae_mm, r.irmse_per_km, r.imae_per_km, r.absrel
    )
}

/// Header, one row per image, then the aggregate row named after `how`.
pub fn to_csv(rows: &[(String, EvalResult)], how: Aggregation) -> Result<String> {
    let per: Vec<EvalResult> = rows.iter().map(|r| r.1).collect();
    let agg = aggregate(&per, how)?;
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER}");
    for (name, r) in rows {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::invalid(format!("row name {name:?} is not CSV-safe")));
        }
        let _ = writeln!(s, "{}", csv_row(name, r));
    }
    let label = match how {
        Aggregation::PerImage => "mean",
        Aggregation::PerPixel => "pooled",
    };
    let _ = writeln!(s, "{}", csv_row(label, &agg));
    Ok(s)
}
