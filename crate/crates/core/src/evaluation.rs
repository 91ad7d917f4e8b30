//! Regression metrics and uncertainty-quality diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(op: &'static str, a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a.len(), b.len()));
    }
    if a.len() < min {
        return Err(Error::Empty(format!("{op} needs at least {min} samples")));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mae", pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mse", pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("r_squared", pred, truth, 2)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "r_squared",
            reason: "truth is constant",
        });
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Per-bin uncertainty and pseudo-label error, bins ordered by ascending
/// predicted uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub n_bins: usize,
    /// Mean of `exp(z)` within each bin.
    pub mean_uncertainty: Vec<f64>,
    /// MSE of the pseudo-labels against ground truth within each bin.
    pub pseudo_label_mse: Vec<f64>,
    pub counts: Vec<usize>,
}

impl BinReport {
    /// Plot-ready CSV: `bin_index,mean_uncertainty,pseudo_label_mse,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_index,mean_uncertainty,pseudo_label_mse,count\n");
        for i in 0..self.n_bins {
            writeln!(
                out,
                "{},{},{},{}",
                i, self.mean_uncertainty[i], self.pseudo_label_mse[i], self.counts[i]
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Sorts samples by `z_pred` (stable, so ties keep their original order),
/// cuts them into `n_bins` contiguous groups whose sizes differ by at most
/// one (the earliest bins take the remainder), and reports mean `exp(z)` and
/// pseudo-label MSE per group.
pub fn uncertainty_binning(
    z_pred: &[f64],
    y_pseudo: &[f64],
    y_truth: &[f64],
    n_bins: usize,
) -> Result<BinReport> {
    check_pair("uncertainty_binning", z_pred, y_pseudo, 1)?;
    check_pair("uncertainty_binning", z_pred, y_truth, 1)?;
    let n = z_pred.len();
    if n_bins == 0 || n_bins > n {
        return Err(Error::param(
            "n_bins",
            format!("must lie in 1..={n} for {n} samples, got {n_bins}"),
        ));
    }
    if z_pred.iter().any(|z| z.is_nan()) {
        return Err(Error::NonFinite { what: "z_pred".into() });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z_pred[a].total_cmp(&z_pred[b]));

    let base = n / n_bins;
    let extra = n % n_bins;
    let mut report = BinReport {
        n_bins,
        mean_uncertainty: Vec::with_capacity(n_bins),
        pseudo_label_mse: Vec::with_capacity(n_bins),
        counts: Vec::with_capacity(n_bins),
    };
    let mut start = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        let members = &order[start..start + size];
        let k = size as f64;
        report
            .mean_uncertainty
            .push(members.iter().map(|&i| z_pred[i].exp()).sum::<f64>() / k);
        report.pseudo_label_mse.push(
            members
                .iter()
                .map(|&i| (y_pseudo[i] - y_truth[i]).powi(2))
                .sum::<f64>()
                / k,
        );
        report.counts.push(size);
        start += size;
    }
    Ok(report)
}

/// Ranks starting at 1, ties receiving the average of their positions.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Pearson correlation of the two vectors.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("pearson_corr", a, b, 2)?;
    pearson(a, b).ok_or(Error::UndefinedMetric {
        metric: "pearson_corr",
        reason: "an input is constant",
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rank_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("spearman_rank_corr", a, b, 3)?;
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            what: "spearman input".into(),
        });
    }
    pearson(&average_ranks(a), &average_ranks(b)).ok_or(Error::UndefinedMetric {
        metric: "spearman_rank_corr",
        reason: "an input is constant",
    })
}
