//! Variational model ensembling.
//!
//! Pseudo-labels for a batch are the average over `T` dropout draws of the
//! mean of the two co-trained models' outputs:
//!
//! ```text
//! ỹ_i = (1/T) Σ_t (ŷ_{i,a}^t + ŷ_{i,b}^t) / 2
//! z̃_i = (1/T) Σ_t (ẑ_{i,a}^t + ẑ_{i,b}^t) / 2
//! ```
//!
//! Each draw uses fresh masks for each model. Draws are taken from one
//! generator in the order `(t = 0, a), (t = 0, b), (t = 1, a), ...` and
//! reduced in that same order, so results are bit-reproducible.
//!
//! The averaged values are plain numbers with no link back to either model:
//! losses that use them as targets cannot produce gradients for them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MlpModel, Mode};
use crate::numeric::{Matrix, RngState};

/// Gradient-isolated targets for an unlabeled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    y_tilde: Vec<f64>,
    z_tilde: Vec<f64>,
    t_draws: usize,
    draws: Option<Draws>,
}

impl PseudoLabelBatch {
    /// Wraps precomputed targets, e.g. a frozen copy of an earlier batch.
    pub fn from_values(y_tilde: Vec<f64>, z_tilde: Vec<f64>, t_draws: usize) -> Result<Self> {
        if y_tilde.len() != z_tilde.len() {
            return Err(Error::shape("PseudoLabelBatch", y_tilde.len(), z_tilde.len()));
        }
        Ok(Self {
            y_tilde,
            z_tilde,
            t_draws,
            draws: None,
        })
    }

    pub fn y_tilde(&self) -> &[f64] {
        &self.y_tilde
    }

    pub fn z_tilde(&self) -> &[f64] {
        &self.z_tilde
    }

    pub fn t_draws(&self) -> usize {
        self.t_draws
    }

    pub fn len(&self) -> usize {
        self.y_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_tilde.is_empty()
    }

    /// Raw per-draw outputs, when retained.
    pub fn draws(&self) -> Option<&Draws> {
        self.draws.as_ref()
    }

    /// Drops the per-draw diagnostics.
    pub fn detach(&self) -> Self {
        Self {
            draws: None,
            ..self.clone()
        }
    }
}

/// Per-draw outputs, indexed `[t][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub y_a: Vec<Vec<f64>>,
    pub y_b: Vec<Vec<f64>>,
    pub z_a: Vec<Vec<f64>>,
    pub z_b: Vec<Vec<f64>>,
}

/// `(1/T) Σ_t (a[t][i] + b[t][i]) / 2`, summed in draw order.
pub fn average_draws(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::shape("average_draws", a.len(), b.len()));
    }
    let n = a[0].len();
    if a.iter().chain(b).any(|d| d.len() != n) {
        return Err(Error::shape("average_draws", n, "ragged draws"));
    }
    let t = a.len() as f64;
    let mut acc = vec![0.0; n];
    for (da, db) in a.iter().zip(b) {
        for ((s, &ya), &yb) in acc.iter_mut().zip(da).zip(db) {
            *s += (ya + yb) / 2.0;
        }
    }
    for s in &mut acc {
        *s /= t;
    }
    Ok(acc)
}

fn check_t(t_draws: usize) -> Result<()> {
    if t_draws == 0 {
        return Err(Error::param("t_draws", "must be >= 1"));
    }
    Ok(())
}

pub fn sample_draws(
    model_a: &MlpModel,
    model_b: &MlpModel,
    x: &Matrix,
    t_draws: usize,
    rng: &mut RngState,
) -> Result<Draws> {
    check_t(t_draws)?;
    let mut d = Draws {
        y_a: Vec::with_capacity(t_draws),
        y_b: Vec::with_capacity(t_draws),
        z_a: Vec::with_capacity(t_draws),
        z_b: Vec::with_capacity(t_draws),
    };
    for _ in 0..t_draws {
        let a = model_a.forward(x, Mode::Stochastic(rng))?;
        let b = model_b.forward(x, Mode::Stochastic(rng))?;
        d.y_a.push(a.y_hat);
        d.z_a.push(a.z_hat);
        d.y_b.push(b.y_hat);
        d.z_b.push(b.z_hat);
    }
    Ok(d)
}

fn ensemble(draws: Draws, keep: bool) -> Result<PseudoLabelBatch> {
    let y_tilde = average_draws(&draws.y_a, &draws.y_b)?;
    let z_tilde = average_draws(&draws.z_a, &draws.z_b)?;
    Ok(PseudoLabelBatch {
        y_tilde,
        z_tilde,
        t_draws: draws.y_a.len(),
        draws: keep.then_some(draws),
    })
}

/// Ensembled pseudo-labels over `t_draws` dropout draws of both models.
pub fn generate_pseudo_labels(
    model_a: &MlpModel,
    model_b: &MlpModel,
    x: &Matrix,
    t_draws: usize,
    rng: &mut RngState,
) -> Result<PseudoLabelBatch> {
    ensemble(sample_draws(model_a, model_b, x, t_draws, rng)?, false)
}

/// As [`generate_pseudo_labels`], keeping the raw draws for diagnostics.
pub fn generate_pseudo_labels_with_draws(
    model_a: &MlpModel,
    model_b: &MlpModel,
    x: &Matrix,
    t_draws: usize,
    rng: &mut RngState,
) -> Result<PseudoLabelBatch> {
    ensemble(sample_draws(model_a, model_b, x, t_draws, rng)?, true)
}

/// Inference: returns `(ỹ, z̃)`, the final prediction and its log-variance.
pub fn predict(
    model_a: &MlpModel,
    model_b: &MlpModel,
    x: &Matrix,
    t_draws: usize,
    rng: &mut RngState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = generate_pseudo_labels(model_a, model_b, x, t_draws, rng)?;
    Ok((p.y_tilde, p.z_tilde))
}

/// Cross-supervision targets: one stochastic pass of each model, used as the
/// target for the *other* model. Returns `(targets_for_a, targets_for_b)`;
/// model `a` is sampled first.
pub fn cross_supervision_targets(
    model_a: &MlpModel,
    model_b: &MlpModel,
    x: &Matrix,
    rng: &mut RngState,
) -> Result<(PseudoLabelBatch, PseudoLabelBatch)> {
    let a = model_a.forward(x, Mode::Stochastic(rng))?;
    let b = model_b.forward(x, Mode::Stochastic(rng))?;
    Ok((
        PseudoLabelBatch::from_values(b.y_hat, b.z_hat, 1)?,
        PseudoLabelBatch::from_values(a.y_hat, a.z_hat, 1)?,
    ))
}

pub const MIN_RERUNS: usize = 30;

/// Monte-Carlo bias–variance comparison of the single-draw predictor
/// (`T = 1`) with the `T`-draw ensemble.
///
/// Over `reruns` repetitions, for each sample `i` with truth `y_i`:
/// `mse = mean (p − y)²`, `bias = mean_i (p̄_i − y_i)²`,
/// `var = mean_i mean_r (p − p̄_i)²` where `p̄_i` is the rerun mean, so
/// `mse = bias + var` up to rounding.
///
/// `mse_gap_se` is the standard error of the paired per-rerun MSE difference
/// (single minus ensemble).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub t_draws: usize,
    pub reruns: usize,
    pub mse_single: f64,
    pub mse_ensemble: f64,
    pub bias_single: f64,
    pub bias_ensemble: f64,
    pub var_single: f64,
    pub var_ensemble: f64,
    pub mse_gap_se: f64,
    /// Jackknife (leave-one-rerun-out) standard error of `bias_single − bias_ensemble`.
    pub bias_gap_se: f64,
}

impl VarianceReport {
    /// Ensemble expected MSE does not exceed the single-draw one by more than
    /// `k` standard errors.
    pub fn ensemble_not_worse(&self, k: f64) -> bool {
        self.mse_ensemble <= self.mse_single + k * self.mse_gap_se
    }

    /// Bias terms agree within `k` standard errors.
    pub fn biases_agree(&self, k: f64) -> bool {
        (self.bias_single - self.bias_ensemble).abs() <= k * self.bias_gap_se
    }
}

struct Moments {
    mean: Vec<f64>,
    mse: f64,
    bias: f64,
    var: f64,
    per_rerun_mse: Vec<f64>,
}

fn moments(preds: &[Vec<f64>], truth: &[f64]) -> Moments {
    let r = preds.len() as f64;
    let n = truth.len() as f64;
    // Offsetting by the first rerun makes the mean exact when all reruns agree.
    let first = &preds[0];
    let mut mean = vec![0.0; truth.len()];
    for p in preds {
        for ((m, v), f) in mean.iter_mut().zip(p).zip(first) {
            *m += v - f;
        }
    }
    for (m, f) in mean.iter_mut().zip(first) {
        *m = f + *m / r;
    }
    let bias = mean.iter().zip(truth).map(|(m, y)| (m - y).powi(2)).sum::<f64>() / n;
    let mut var = 0.0;
    let mut per_rerun_mse = Vec::with_capacity(preds.len());
    for p in preds {
        let mut se = 0.0;
        for ((v, m), y) in p.iter().zip(&mean).zip(truth) {
            var += (v - m).powi(2);
            se += (v - y).powi(2);
        }
        per_rerun_mse.push(se / n);
    }
    var /= r * n;
    Moments {
        mean,
        mse: per_rerun_mse.iter().sum::<f64>() / r,
        bias,
        var,
        per_rerun_mse,
    }
}

/// Standard error of the mean of `a_r − b_r`.
/// Leave-one-out bias term: rerun `k` removed from the mean.
fn bias_without(preds: &[Vec<f64>], mean: &[f64], truth: &[f64], k: usize) -> f64 {
    let r = preds.len() as f64;
    let n = truth.len() as f64;
    preds[k]
        .iter()
        .zip(mean)
        .zip(truth)
        .map(|((v, m), y)| (m + (m - v) / (r - 1.0) - y).powi(2))
        .sum::<f64>()
        / n
}

/// Jackknife standard error of `bias(single) − bias(ensemble)`, deleting one
/// paired rerun at a time.
fn bias_gap_jackknife(single: &[Vec<f64>], ens: &[Vec<f64>], s: &Moments, e: &Moments, truth: &[f64]) -> f64 {
    let r = single.len();
    let d: Vec<f64> = (0..r)
        .map(|k| bias_without(single, &s.mean, truth, k) - bias_without(ens, &e.mean, truth, k))
        .collect();
    let m = d.iter().sum::<f64>() / r as f64;
    let ss = d.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    (ss * (r as f64 - 1.0) / r as f64).sqrt()
}

fn paired_se(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let s2 = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (s2 / n).sqrt()
}

pub fn variance_reduction_check(
    model_a: &MlpModel,
    model_b: &MlpModel,
    features: &Matrix,
    truth: &[f64],
    t_draws: usize,
    reruns: usize,
    rng: &mut RngState,
) -> Result<VarianceReport> {
    check_t(t_draws)?;
    if reruns < MIN_RERUNS {
        return Err(Error::param(
            "reruns",
            format!("need at least {MIN_RERUNS}, got {reruns}"),
        ));
    }
    if truth.len() != features.rows() || truth.is_empty() {
        return Err(Error::shape("variance_reduction_check", features.rows(), truth.len()));
    }
    let mut single = Vec::with_capacity(reruns);
    let mut ens = Vec::with_capacity(reruns);
    for _ in 0..reruns {
        single.push(predict(model_a, model_b, features, 1, rng)?.0);
        ens.push(predict(model_a, model_b, features, t_draws, rng)?.0);
    }
    let s = moments(&single, truth);
    let e = moments(&ens, truth);
    let bias_gap_se = bias_gap_jackknife(&single, &ens, &s, &e, truth);
    Ok(VarianceReport {
        t_draws,
        reruns,
        mse_single: s.mse,
        mse_ensemble: e.mse,
        bias_single: s.bias,
        bias_ensemble: e.bias,
        var_single: s.var,
        var_ensemble: e.var,
        mse_gap_se: paired_se(&s.per_rerun_mse, &e.per_rerun_mse),
        bias_gap_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlpConfig, ParamSet};

    fn constant_model(y: f64, z: f64) -> MlpModel {
        let cfg = MlpConfig::new(1, vec![], 0.0);
        let mut p = ParamSet::zeros(&cfg);
        p.head_y.bias[0] = y;
        p.head_z.bias[0] = z;
        MlpModel::from_params(cfg, p).unwrap()
    }

    fn net(seed: u64, p: f64) -> MlpModel {
        MlpModel::init(MlpConfig::new(2, vec![8, 8], p), &mut RngState::new(seed)).unwrap()
    }

    fn inputs() -> Matrix {
        Matrix::from_rows(&[[0.1, 0.2], [-0.7, 0.4], [0.9, -0.9], [0.0, 0.5]]).unwrap()
    }

    #[test]
    fn single_draw_average() {
        let a = constant_model(2.0, 0.0);
        let b = constant_model(4.0, 1.0);
        let x = Matrix::column(&[0.0]);
        let p = generate_pseudo_labels(&a, &b, &x, 1, &mut RngState::new(0)).unwrap();
        assert_eq!(p.y_tilde(), &[3.0]);
        assert_eq!(p.z_tilde(), &[0.5]);
    }

    #[test]
    fn two_draw_average() {
        let y = average_draws(&[vec![2.0], vec![4.0]], &[vec![6.0], vec![8.0]]).unwrap();
        assert_eq!(y, vec![5.0]);
    }

    #[test]
    fn zero_draws_rejected() {
        let a = net(0, 0.1);
        assert!(matches!(
            generate_pseudo_labels(&a, &a, &inputs(), 0, &mut RngState::new(0)),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn no_dropout_is_deterministic_average() {
        let (a, b) = (net(1, 0.0), net(2, 0.0));
        let x = inputs();
        let ya = a.forward(&x, Mode::Deterministic).unwrap().y_hat;
        let yb = b.forward(&x, Mode::Deterministic).unwrap().y_hat;
        for t in [1, 3, 7] {
            let p = generate_pseudo_labels(&a, &b, &x, t, &mut RngState::new(t as u64)).unwrap();
            for i in 0..x.rows() {
                assert!((p.y_tilde()[i] - (ya[i] + yb[i]) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicated_model_without_dropout_predicts_itself() {
        let a = net(3, 0.0);
        let x = inputs();
        let (y, z) = predict(&a, &a, &x, 5, &mut RngState::new(0)).unwrap();
        let t = a.forward(&x, Mode::Deterministic).unwrap();
        for i in 0..x.rows() {
            assert!((y[i] - t.y_hat[i]).abs() <= 1e-15 * t.y_hat[i].abs().max(1.0));
            assert!((z[i] - t.z_hat[i]).abs() <= 1e-15 * t.z_hat[i].abs().max(1.0));
        }
    }

    #[test]
    fn predict_matches_pseudo_labels() {
        let (a, b) = (net(1, 0.2), net(2, 0.2));
        let (y, z) = predict(&a, &b, &inputs(), 5, &mut RngState::new(4)).unwrap();
        let p = generate_pseudo_labels(&a, &b, &inputs(), 5, &mut RngState::new(4)).unwrap();
        assert_eq!(y, p.y_tilde());
        assert_eq!(z, p.z_tilde());
    }

    #[test]
    fn retained_draws_reproduce_ensemble() {
        let (a, b) = (net(1, 0.3), net(2, 0.3));
        let p = generate_pseudo_labels_with_draws(&a, &b, &inputs(), 4, &mut RngState::new(9)).unwrap();
        let d = p.draws().unwrap();
        assert_eq!(average_draws(&d.y_a, &d.y_b).unwrap(), p.y_tilde());
        assert_eq!(p.detach().draws(), None);
    }

    #[test]
    fn swapping_models_preserves_average() {
        // Swapping a and b changes which model consumes which masks, so the
        // comparison is on the reduction rather than the sampled stream.
        let (a, b) = (net(1, 0.3), net(2, 0.3));
        let d = sample_draws(&a, &b, &inputs(), 6, &mut RngState::new(2)).unwrap();
        let ab = average_draws(&d.y_a, &d.y_b).unwrap();
        let ba = average_draws(&d.y_b, &d.y_a).unwrap();
        assert_eq!(ab, ba);
        let (a, b) = (net(1, 0.0), net(2, 0.0));
        let p = generate_pseudo_labels(&a, &b, &inputs(), 2, &mut RngState::new(0)).unwrap();
        let q = generate_pseudo_labels(&b, &a, &inputs(), 2, &mut RngState::new(0)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn cross_supervision_swaps_targets() {
        let a = constant_model(1.0, -1.0);
        let b = constant_model(5.0, 2.0);
        let x = Matrix::column(&[0.0, 0.0]);
        let (for_a, for_b) = cross_supervision_targets(&a, &b, &x, &mut RngState::new(0)).unwrap();
        assert_eq!(for_a.y_tilde(), &[5.0, 5.0]);
        assert_eq!(for_b.z_tilde(), &[-1.0, -1.0]);
    }

    #[test]
    fn more_draws_reduce_rerun_spread() {
        let (a, b) = (net(5, 0.3), net(6, 0.3));
        let x = inputs();
        let spread = |t: usize| {
            let mut rng = RngState::new(11);
            let preds: Vec<Vec<f64>> = (0..200).map(|_| predict(&a, &b, &x, t, &mut rng).unwrap().0).collect();
            let n = preds.len() as f64;
            (0..x.rows())
                .map(|i| {
                    let m = preds.iter().map(|p| p[i]).sum::<f64>() / n;
                    preds.iter().map(|p| (p[i] - m).powi(2)).sum::<f64>() / n
                })
                .sum::<f64>()
        };
        assert!(spread(100) < spread(5));
    }

    #[test]
    fn no_dropout_variance_report_is_degenerate() {
        let (a, b) = (net(1, 0.0), net(2, 0.0));
        let truth = [0.5, -0.2, 0.1, 0.0];
        let r = variance_reduction_check(&a, &b, &inputs(), &truth, 5, 30, &mut RngState::new(0)).unwrap();
        assert_eq!(r.mse_single, r.mse_ensemble);
        assert_eq!(r.var_single, 0.0);
        assert_eq!(r.var_ensemble, 0.0);
        assert!(r.ensemble_not_worse(2.0) && r.biases_agree(2.0));
    }

    #[test]
    fn variance_report_decomposes_and_validates() {
        let (a, b) = (net(1, 0.25), net(2, 0.25));
        let truth = [0.5, -0.2, 0.1, 0.0];
        let mut rng = RngState::new(3);
        assert!(variance_reduction_check(&a, &b, &inputs(), &truth, 5, 29, &mut rng).is_err());
        let r = variance_reduction_check(&a, &b, &inputs(), &truth, 5, 200, &mut rng).unwrap();
        assert!((r.mse_single - (r.bias_single + r.var_single)).abs() < 1e-12);
        assert!((r.mse_ensemble - (r.bias_ensemble + r.var_ensemble)).abs() < 1e-12);
        assert!(r.var_ensemble < r.var_single);
        assert!(r.ensemble_not_worse(2.0));
        assert!(r.biases_agree(2.0));
    }
}
