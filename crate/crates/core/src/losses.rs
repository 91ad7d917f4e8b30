//! Loss terms of the co-training objective and their gradients with respect
//! to the model outputs.
//!
//! All per-sample terms are reduced by the arithmetic mean over the batch.
//! Where the objective sums over the two models, callers add the per-model
//! values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A loss value with its gradient with respect to `ŷ` and `ẑ`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroLoss {
    pub loss: f64,
    pub d_y_hat: Vec<f64>,
    pub d_z_hat: Vec<f64>,
}

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    if a == 0 {
        return Err(Error::Empty(format!("{op} needs at least one sample")));
    }
    Ok(())
}

fn check_finite(what: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            what: format!("{what}[{i}]"),
        }),
        None => Ok(()),
    }
}

/// Heteroscedastic Gaussian regression loss
/// `mean_i[(ŷ_i − y_i)² / (2·exp(z_i)) + z_i / 2]`.
///
/// This is the Gaussian negative log-likelihood with variance `exp(z)` minus
/// the constant `ln(2π) / 2`.
pub fn hetero_loss(y_hat: &[f64], z_hat: &[f64], y_target: &[f64]) -> Result<HeteroLoss> {
    check_lengths("hetero_loss", y_hat.len(), z_hat.len())?;
    check_lengths("hetero_loss", y_hat.len(), y_target.len())?;
    check_finite("y_hat", y_hat)?;
    check_finite("z_hat", z_hat)?;
    check_finite("y_target", y_target)?;

    let n = y_hat.len() as f64;
    let mut loss = 0.0;
    let mut d_y_hat = Vec::with_capacity(y_hat.len());
    let mut d_z_hat = Vec::with_capacity(y_hat.len());
    for ((&yh, &z), &y) in y_hat.iter().zip(z_hat).zip(y_target) {
        let r = yh - y;
        let inv_var = (-z).exp();
        let weighted = 0.5 * r * r * inv_var;
        loss += weighted + 0.5 * z;
        d_y_hat.push(r * inv_var / n);
        d_z_hat.push((0.5 - weighted) / n);
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "hetero_loss".into(),
        });
    }
    Ok(HeteroLoss {
        loss,
        d_y_hat,
        d_z_hat,
    })
}

/// `mean_i (z_a,i − z_b,i)²` between the two models' log-variances on the
/// same inputs. Returns `(loss, d/dz_a, d/dz_b)`.
pub fn consistency_loss_labeled(z_a: &[f64], z_b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_lengths("consistency_loss_labeled", z_a.len(), z_b.len())?;
    check_finite("z_a", z_a)?;
    check_finite("z_b", z_b)?;
    let n = z_a.len() as f64;
    let mut loss = 0.0;
    let mut d_a = Vec::with_capacity(z_a.len());
    for (&a, &b) in z_a.iter().zip(z_b) {
        let d = a - b;
        loss += d * d;
        d_a.push(2.0 * d / n);
    }
    let d_b = d_a.iter().map(|g| -g).collect();
    Ok((loss / n, d_a, d_b))
}

/// `mean_i (z_m,i − z̃_i)²` for one model against the ensembled target.
///
/// The target is treated as a constant: only `d/dz_m` is returned.
pub fn consistency_loss_unlabeled(z_m: &[f64], z_tilde: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths("consistency_loss_unlabeled", z_m.len(), z_tilde.len())?;
    check_finite("z_m", z_m)?;
    check_finite("z_tilde", z_tilde)?;
    let n = z_m.len() as f64;
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(z_m.len());
    for (&z, &t) in z_m.iter().zip(z_tilde) {
        let r = z - t;
        loss += r * r;
        d.push(2.0 * r / n);
    }
    Ok((loss / n, d))
}

/// Per-step values of the four objective terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg_lb: f64,
    pub unc_lb: f64,
    pub reg_ulb: f64,
    pub unc_ulb: f64,
    pub w_ulb: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reg_lb: f64, unc_lb: f64, reg_ulb: f64, unc_ulb: f64, w_ulb: f64) -> Result<Self> {
        let mut parts = Self {
            reg_lb,
            unc_lb,
            reg_ulb,
            unc_ulb,
            w_ulb,
            total: 0.0,
        };
        parts.total = total_loss(&parts)?;
        Ok(parts)
    }

    /// Labeled part of the objective.
    pub fn labeled(&self) -> f64 {
        self.reg_lb + self.unc_lb
    }
}

/// `reg_lb + unc_lb + w_ulb · (reg_ulb + unc_ulb)`.
pub fn total_loss(parts: &LossBreakdown) -> Result<f64> {
    for (name, v) in [
        ("reg_lb", parts.reg_lb),
        ("unc_lb", parts.unc_lb),
        ("reg_ulb", parts.reg_ulb),
        ("unc_ulb", parts.unc_ulb),
        ("w_ulb", parts.w_ulb),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: name.into() });
        }
    }
    Ok(parts.reg_lb + parts.unc_lb + parts.w_ulb * (parts.reg_ulb + parts.unc_ulb))
}
