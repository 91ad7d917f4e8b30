//! Co-training loop for the two dropout regressors.
//!
//! One optimization step, given a labeled batch `(x, y)` and an unlabeled
//! batch `x′`:
//!
//! 1. Pseudo-labels for `x′` are computed from the current weights, before any
//!    other randomness in the step is consumed.
//! 2. Each model makes one stochastic pass over `x`; the labeled terms are
//!    `reg_lb = Σ_m hetero(ŷ_m, ẑ_m; y)` and `unc_lb = mean (ẑ_a − ẑ_b)²`.
//! 3. Each model makes one stochastic pass over `x′`; the unlabeled terms are
//!    `reg_ulb = Σ_m hetero(ŷ_m, z̃; ỹ)` and `unc_ulb = Σ_m mean (ẑ_m − z̃)²`.
//! 4. Both models take an optimizer step on
//!    `reg_lb + unc_lb + w_ulb · (reg_ulb + unc_ulb)`.
//!
//! Ablation variants switch the two ingredients:
//!
//! | variant         | consistency terms | pseudo-labels                      |
//! |-----------------|-------------------|------------------------------------|
//! | `baseline`      | off               | other model's single pass          |
//! | `baseline_con`  | on                | other model's single pass          |
//! | `baseline_ens`  | off               | `T`-draw ensemble of both models   |
//! | `full`          | on                | `T`-draw ensemble of both models   |
//!
//! Randomness for a run comes from [`RngState::substream`] of the config seed:
//! stream 2 initializes model `a`, stream 3 model `b`, stream 4 drives
//! shuffling and training dropout, and every evaluation restarts stream 5.

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, SemiSupervisedSplit};
use crate::error::{Error, Result};
use crate::evaluation::{self, BinReport};
use crate::losses::{consistency_loss_labeled, consistency_loss_unlabeled, hetero_loss, LossBreakdown};
use crate::model::{Activation, ForwardTrace, GradientSet, MlpConfig, MlpModel, Mode, ParamSet};
use crate::numeric::{Matrix, RngState};
use crate::vme::{self, PseudoLabelBatch};

pub const STREAM_INIT_A: u64 = 2;
pub const STREAM_INIT_B: u64 = 3;
pub const STREAM_TRAIN: u64 = 4;
pub const STREAM_EVAL: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    BaselineCon,
    BaselineEns,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::BaselineCon,
        Variant::BaselineEns,
        Variant::Full,
    ];

    pub fn uses_consistency(self) -> bool {
        matches!(self, Variant::BaselineCon | Variant::Full)
    }

    pub fn uses_ensembling(self) -> bool {
        matches!(self, Variant::BaselineEns | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineCon => "baseline_con",
            Variant::BaselineEns => "baseline_ens",
            Variant::Full => "full",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// First-order optimizer settings. Defaults: momentum 0.9, Adam
/// `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: defaults::momentum(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
        }
    }
}

/// Moment buffers of one model's optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// Momentum buffer (SGD) or first moment (Adam).
    pub first: ParamSet,
    /// Second moment (Adam only).
    pub second: ParamSet,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// Applies one optimizer update in place.
///
/// SGD with momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
/// Adam: `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// `θ ← θ − lr·m̂ / (sqrt(v̂) + ε)` with bias-corrected `m̂`, `v̂`.
pub fn optimizer_update(
    params: &mut ParamSet,
    grads: &GradientSet,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.first) {
        return Err(Error::shape("optimizer_update", "parameters", "gradients/state"));
    }
    state.step += 1;
    let lr = config.learning_rate;
    match config.kind {
        OptimizerKind::SgdMomentum => {
            let mu = config.momentum;
            for ((p, g), v) in params
                .slices_mut()
                .into_iter()
                .zip(grads.slices())
                .zip(state.first.slices_mut())
            {
                for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2, eps) = (config.beta1, config.beta2, config.eps);
            let t = state.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for (((p, g), m), v) in params
                .slices_mut()
                .into_iter()
                .zip(grads.slices())
                .zip(state.first.slices_mut())
                .zip(state.second.slices_mut())
            {
                for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

mod defaults {
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn n_bins() -> usize {
        10
    }
    pub fn activation() -> super::Activation {
        super::Activation::Relu
    }
    pub fn z_min() -> f64 {
        crate::model::DEFAULT_Z_MIN
    }
    pub fn z_max() -> f64 {
        crate::model::DEFAULT_Z_MAX
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub w_ulb: f64,
    pub t_draws: usize,
    pub dropout_p: f64,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default = "defaults::z_min")]
    pub z_min: f64,
    #[serde(default = "defaults::z_max")]
    pub z_max: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    #[serde(default = "defaults::n_bins")]
    pub n_bins: usize,
    /// Epoch after which the uncertainty bin report is captured; `None`
    /// captures it from the selected (best-validation) models.
    #[serde(default)]
    pub bin_report_epoch: Option<usize>,
}

impl TrainConfig {
    /// Desk-scale defaults: Adam at 1e-3, `T = 5`, dropout 5%, `w_ulb = 10`.
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            w_ulb: 10.0,
            t_draws: 5,
            dropout_p: 0.05,
            hidden_dims: vec![64, 64],
            activation: Activation::Relu,
            z_min: crate::model::DEFAULT_Z_MIN,
            z_max: crate::model::DEFAULT_Z_MAX,
            epochs: 200,
            batch_labeled: 32,
            batch_unlabeled: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            seed,
            n_bins: 10,
            bin_report_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_ulb >= 0.0 && self.w_ulb.is_finite()) {
            return Err(Error::param("w_ulb", format!("must be finite and >= 0, got {}", self.w_ulb)));
        }
        if self.t_draws == 0 {
            return Err(Error::param("t_draws", "must be >= 1"));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(Error::param(
                "learning_rate",
                format!("must be > 0, got {}", self.optimizer.learning_rate),
            ));
        }
        if self.batch_labeled == 0 {
            return Err(Error::param("batch_labeled", "must be >= 1"));
        }
        if self.batch_unlabeled == 0 {
            return Err(Error::param("batch_unlabeled", "must be >= 1"));
        }
        if self.n_bins == 0 {
            return Err(Error::param("n_bins", "must be >= 1"));
        }
        self.model_config(1).validate()
    }

    pub fn model_config(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            dropout_p: self.dropout_p,
            activation: self.activation,
            z_min: self.z_min,
            z_max: self.z_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl LabeledBatch {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape("LabeledBatch", x.rows(), y.len()));
        }
        if y.is_empty() {
            return Err(Error::Usage("labeled batch is empty".into()));
        }
        Ok(Self { x, y })
    }
}

/// Pseudo-labels used by one step, per model. Under ensembling both models
/// share the same targets.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTargets {
    pub for_a: PseudoLabelBatch,
    pub for_b: PseudoLabelBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model_a: MlpModel,
    pub model_b: MlpModel,
    pub opt_a: OptimizerState,
    pub opt_b: OptimizerState,
    pub epoch: usize,
    pub history: Vec<LossBreakdown>,
    pub rng: RngState,
}

impl TrainState {
    /// Two models of identical architecture initialized from different
    /// substreams of `config.seed`.
    pub fn new(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        let mc = config.model_config(input_dim);
        let model_a = MlpModel::init(mc.clone(), &mut RngState::substream(config.seed, STREAM_INIT_A))?;
        let model_b = MlpModel::init(mc, &mut RngState::substream(config.seed, STREAM_INIT_B))?;
        Ok(Self::from_models(model_a, model_b, RngState::substream(config.seed, STREAM_TRAIN)))
    }

    pub fn from_models(model_a: MlpModel, model_b: MlpModel, rng: RngState) -> Self {
        Self {
            opt_a: OptimizerState::new(model_a.params()),
            opt_b: OptimizerState::new(model_b.params()),
            model_a,
            model_b,
            epoch: 0,
            history: Vec::new(),
            rng,
        }
    }
}

/// Pseudo-labels for `unlabeled` under the variant's rule, drawn from the
/// state's generator with the current weights. `None` for an empty batch.
pub fn make_targets(
    state: &mut TrainState,
    unlabeled: &Matrix,
    config: &TrainConfig,
) -> Result<Option<StepTargets>> {
    if unlabeled.rows() == 0 {
        return Ok(None);
    }
    let targets = if config.variant.uses_ensembling() {
        let p = vme::generate_pseudo_labels(
            &state.model_a,
            &state.model_b,
            unlabeled,
            config.t_draws,
            &mut state.rng,
        )?;
        StepTargets {
            for_a: p.clone(),
            for_b: p,
        }
    } else {
        let (for_a, for_b) =
            vme::cross_supervision_targets(&state.model_a, &state.model_b, unlabeled, &mut state.rng)?;
        StepTargets { for_a, for_b }
    };
    Ok(Some(targets))
}

/// Dropout masks of the four forward passes in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMasks {
    pub labeled_a: Vec<Matrix>,
    pub labeled_b: Vec<Matrix>,
    /// Empty when the step had no unlabeled pass.
    pub unlabeled_a: Vec<Matrix>,
    pub unlabeled_b: Vec<Matrix>,
}

/// Where the forward passes of a step get their dropout masks.
pub enum MaskSource<'a> {
    /// Fresh masks, in the order labeled a, labeled b, unlabeled a, unlabeled b.
    Draw(&'a mut RngState),
    /// Replays recorded masks, so the loss is a deterministic function of the weights.
    Fixed(&'a StepMasks),
}

impl MaskSource<'_> {
    fn forward(&mut self, model: &MlpModel, x: &Matrix, pick: fn(&StepMasks) -> &Vec<Matrix>) -> Result<ForwardTrace> {
        match self {
            MaskSource::Draw(rng) => model.forward(x, Mode::Stochastic(rng)),
            MaskSource::Fixed(m) => model.forward_with_masks(x, pick(m).clone()),
        }
    }
}

/// Loss terms and gradients of one step before any weight update.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub parts: LossBreakdown,
    pub grad_a: GradientSet,
    pub grad_b: GradientSet,
    pub masks: StepMasks,
}

fn unlabeled_terms(
    model: &MlpModel,
    trace: &ForwardTrace,
    targets: &PseudoLabelBatch,
    config: &TrainConfig,
) -> Result<(f64, f64, Option<GradientSet>)> {
    if targets.len() != trace.batch() {
        return Err(Error::shape("pseudo-labels", trace.batch(), targets.len()));
    }
    // The ensembled log-variance weights the residual, so only ŷ receives gradient.
    let reg = hetero_loss(&trace.y_hat, targets.z_tilde(), targets.y_tilde())?;
    let (unc, d_z) = if config.variant.uses_consistency() {
        consistency_loss_unlabeled(&trace.z_hat, targets.z_tilde())?
    } else {
        (0.0, vec![0.0; trace.batch()])
    };
    if config.w_ulb == 0.0 {
        return Ok((reg.loss, unc, None));
    }
    let w = config.w_ulb;
    let d_y: Vec<f64> = reg.d_y_hat.iter().map(|g| w * g).collect();
    let d_z: Vec<f64> = d_z.iter().map(|g| w * g).collect();
    Ok((reg.loss, unc, Some(model.backward(trace, &d_y, &d_z)?)))
}

/// Total step loss and its gradient with respect to both models' weights,
/// with pseudo-labels held fixed.
pub fn step_gradients(
    model_a: &MlpModel,
    model_b: &MlpModel,
    labeled: &LabeledBatch,
    unlabeled: &Matrix,
    targets: Option<&StepTargets>,
    config: &TrainConfig,
    mut masks: MaskSource<'_>,
) -> Result<StepGradients> {
    if unlabeled.rows() > 0 && targets.is_none() {
        return Err(Error::Usage("unlabeled batch given without pseudo-labels".into()));
    }
    let ta = masks.forward(model_a, &labeled.x, |m| &m.labeled_a)?;
    let tb = masks.forward(model_b, &labeled.x, |m| &m.labeled_b)?;
    let la = hetero_loss(&ta.y_hat, &ta.z_hat, &labeled.y)?;
    let lb = hetero_loss(&tb.y_hat, &tb.z_hat, &labeled.y)?;
    let mut dz_a = la.d_z_hat;
    let mut dz_b = lb.d_z_hat;
    let unc_lb = if config.variant.uses_consistency() {
        let (l, da, db) = consistency_loss_labeled(&ta.z_hat, &tb.z_hat)?;
        dz_a.iter_mut().zip(&da).for_each(|(g, d)| *g += d);
        dz_b.iter_mut().zip(&db).for_each(|(g, d)| *g += d);
        l
    } else {
        0.0
    };
    let mut grad_a = model_a.backward(&ta, &la.d_y_hat, &dz_a)?;
    let mut grad_b = model_b.backward(&tb, &lb.d_y_hat, &dz_b)?;
    let mut recorded = StepMasks {
        labeled_a: ta.masks,
        labeled_b: tb.masks,
        unlabeled_a: Vec::new(),
        unlabeled_b: Vec::new(),
    };

    let (mut reg_ulb, mut unc_ulb) = (0.0, 0.0);
    if let Some(t) = targets.filter(|_| unlabeled.rows() > 0) {
        let ua = masks.forward(model_a, unlabeled, |m| &m.unlabeled_a)?;
        let ub = masks.forward(model_b, unlabeled, |m| &m.unlabeled_b)?;
        for (grad, model, trace, tgt) in [
            (&mut grad_a, model_a, &ua, &t.for_a),
            (&mut grad_b, model_b, &ub, &t.for_b),
        ] {
            let (reg, unc, g) = unlabeled_terms(model, trace, tgt, config)?;
            reg_ulb += reg;
            unc_ulb += unc;
            if let Some(g) = g {
                grad.accumulate(&g)?;
            }
        }
        recorded.unlabeled_a = ua.masks;
        recorded.unlabeled_b = ub.masks;
    }

    let parts = LossBreakdown::new(la.loss + lb.loss, unc_lb, reg_ulb, unc_ulb, config.w_ulb)?;
    Ok(StepGradients {
        parts,
        grad_a,
        grad_b,
        masks: recorded,
    })
}

/// One optimizer update of both models from the given pseudo-labels.
///
/// Parameters and optimizer state change only if every loss term,
/// gradient and updated weight is finite; otherwise the state is left as it
/// was and a `NonFinite` error is returned.
pub fn apply_step(
    state: &mut TrainState,
    labeled: &LabeledBatch,
    unlabeled: &Matrix,
    targets: Option<&StepTargets>,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let g = step_gradients(
        &state.model_a,
        &state.model_b,
        labeled,
        unlabeled,
        targets,
        config,
        MaskSource::Draw(&mut state.rng),
    )?;
    if !g.grad_a.is_finite() || !g.grad_b.is_finite() {
        return Err(Error::NonFinite {
            what: "parameter gradients".into(),
        });
    }

    let mut new_a = state.model_a.params().clone();
    let mut new_b = state.model_b.params().clone();
    let mut opt_a = state.opt_a.clone();
    let mut opt_b = state.opt_b.clone();
    optimizer_update(&mut new_a, &g.grad_a, &mut opt_a, &config.optimizer)?;
    optimizer_update(&mut new_b, &g.grad_b, &mut opt_b, &config.optimizer)?;
    if !new_a.is_finite() || !new_b.is_finite() {
        return Err(Error::NonFinite {
            what: "updated parameters".into(),
        });
    }
    *state.model_a.params_mut() = new_a;
    *state.model_b.params_mut() = new_b;
    state.opt_a = opt_a;
    state.opt_b = opt_b;
    state.history.push(g.parts);
    Ok(g.parts)
}

/// One full co-training step: pseudo-labels from the pre-step weights, then
/// [`apply_step`].
pub fn train_step(
    state: &mut TrainState,
    labeled: &LabeledBatch,
    unlabeled: &Matrix,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if unlabeled.rows() == 0 && config.w_ulb > 0.0 {
        return Err(Error::Usage(format!(
            "w_ulb = {} needs a nonempty unlabeled batch",
            config.w_ulb
        )));
    }
    let targets = make_targets(state, unlabeled, config)?;
    apply_step(state, labeled, unlabeled, targets.as_ref(), config)
}

/// Shuffled pass over the unlabeled rows that reshuffles when exhausted.
struct CyclingSampler {
    order: Vec<usize>,
    pos: usize,
}

impl CyclingSampler {
    fn new(n: usize, rng: &mut RngState) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut RngState) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Metrics of one experiment. Values marked oracle use unlabeled ground
/// truth, which training never sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: usize,
    /// Validation MAE of the selected models, original target units.
    pub val_mae: f64,
    pub test_mae: f64,
    pub test_r2: f64,
    /// Oracle: MAE of ensembled pseudo-labels on the unlabeled rows
    /// (standardized units).
    pub oracle_pseudo_label_mae: Option<f64>,
    /// Oracle: Spearman ρ between `exp(z̃)` and squared pseudo-label error on
    /// the unlabeled rows.
    pub oracle_uncertainty_spearman: Option<f64>,
    /// Oracle: uncertainty bins on the unlabeled rows (standardized units).
    pub oracle_bin_report: Option<BinReport>,
    pub bin_report_epoch: Option<usize>,
    /// Per-step losses; written separately from the metrics file.
    #[serde(skip)]
    pub history: Vec<LossBreakdown>,
}

/// Everything a run produces, including the selected models.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub result: ExperimentResult,
    pub model_a: MlpModel,
    pub model_b: MlpModel,
    pub normalizer: Normalizer,
}

struct UnlabeledOracle {
    report: BinReport,
    spearman: Option<f64>,
    mae: f64,
}

fn unlabeled_oracle(
    a: &MlpModel,
    b: &MlpModel,
    x: &Matrix,
    truth: &[f64],
    config: &TrainConfig,
) -> Result<Option<UnlabeledOracle>> {
    if x.rows() < config.n_bins.max(3) {
        return Ok(None);
    }
    let mut rng = RngState::substream(config.seed, STREAM_EVAL);
    let (y, z) = vme::predict(a, b, x, config.t_draws, &mut rng)?;
    let report = evaluation::uncertainty_binning(&z, &y, truth, config.n_bins)?;
    let unc: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let sq: Vec<f64> = y.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).collect();
    Ok(Some(UnlabeledOracle {
        report,
        spearman: evaluation::spearman_rank_corr(&unc, &sq).ok(),
        mae: evaluation::mae(&y, truth)?,
    }))
}

/// Ensembled predictions in original target units.
pub fn predict_original_units(
    a: &MlpModel,
    b: &MlpModel,
    norm: &Normalizer,
    raw_features: &Matrix,
    t_draws: usize,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let x = norm.transform_features(raw_features)?;
    let (y, _) = vme::predict(a, b, &x, t_draws, rng)?;
    Ok(norm.inverse_targets(&y))
}

fn eval_mae(
    a: &MlpModel,
    b: &MlpModel,
    norm: &Normalizer,
    raw: &crate::data::RegressionDataset,
    config: &TrainConfig,
) -> Result<f64> {
    let mut rng = RngState::substream(config.seed, STREAM_EVAL);
    let pred = predict_original_units(a, b, norm, &raw.features, config.t_draws, &mut rng)?;
    evaluation::mae(&pred, raw.require_targets("evaluation")?)
}

/// Trains both models on a split given in original units.
///
/// Features and targets are standardized with statistics of the labeled
/// rows. After every epoch the ensembled validation MAE is measured and the
/// best pair (ties keep the earlier epoch; epoch 0 is the initialization) is
/// used for the test metrics. A step with a non-finite loss is skipped; two
/// in a row abort the run with [`Error::Diverged`].
pub fn run_experiment(config: &TrainConfig, split: &SemiSupervisedSplit) -> Result<ExperimentOutcome> {
    config.validate()?;
    if split.unlabeled.is_empty() && config.w_ulb > 0.0 {
        return Err(Error::Usage(format!(
            "w_ulb = {} needs unlabeled rows; the split has none",
            config.w_ulb
        )));
    }
    let (norm, data) = crate::data::normalize(split)?;
    let y_lab = data.labeled.require_targets("labeled set")?.to_vec();
    let n_lab = data.labeled.len();
    let mut state = TrainState::new(config, data.labeled.dim())?;

    let mut best = (
        eval_mae(&state.model_a, &state.model_b, &norm, &split.validation, config)?,
        0usize,
        state.model_a.clone(),
        state.model_b.clone(),
    );
    let mut captured: Option<(MlpModel, MlpModel)> = None;
    let mut sampler = CyclingSampler::new(data.unlabeled.len(), &mut state.rng);
    let mut consecutive_failures = 0;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n_lab).collect();
        state.rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_labeled) {
            let batch = LabeledBatch {
                x: data.labeled.features.select_rows(chunk),
                y: chunk.iter().map(|&i| y_lab[i]).collect(),
            };
            let u_idx = sampler.next_batch(config.batch_unlabeled, &mut state.rng);
            let ux = data.unlabeled.features.select_rows(&u_idx);
            match train_step(&mut state, &batch, &ux, config) {
                Ok(_) => consecutive_failures = 0,
                Err(Error::NonFinite { what }) => {
                    consecutive_failures += 1;
                    log::warn!("epoch {epoch}: skipped step with non-finite {what}");
                    if consecutive_failures >= 2 {
                        return Err(Error::Diverged {
                            steps: state.history.len(),
                            reason: format!("non-finite {what} on consecutive steps"),
                            history: state.history,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        state.epoch = epoch;
        let val = eval_mae(&state.model_a, &state.model_b, &norm, &split.validation, config)?;
        if val < best.0 {
            best = (val, epoch, state.model_a.clone(), state.model_b.clone());
        }
        if config.bin_report_epoch == Some(epoch) {
            captured = Some((state.model_a.clone(), state.model_b.clone()));
        }
    }

    let (val_mae, best_epoch, model_a, model_b) = best;
    let test_truth = split.test.require_targets("test set")?;
    let mut rng = RngState::substream(config.seed, STREAM_EVAL);
    let test_pred =
        predict_original_units(&model_a, &model_b, &norm, &split.test.features, config.t_draws, &mut rng)?;

    let (ra, rb) = captured
        .as_ref()
        .map_or((&model_a, &model_b), |(a, b)| (a, b));
    let oracle = unlabeled_oracle(
        ra,
        rb,
        &data.unlabeled.features,
        data.oracle_unlabeled_targets(),
        config,
    )?;

    let result = ExperimentResult {
        variant: config.variant,
        seed: config.seed,
        epochs: config.epochs,
        steps: state.history.len(),
        best_epoch,
        val_mae,
        test_mae: evaluation::mae(&test_pred, test_truth)?,
        test_r2: evaluation::r_squared(&test_pred, test_truth)?,
        oracle_pseudo_label_mae: oracle.as_ref().map(|o| o.mae),
        oracle_uncertainty_spearman: oracle.as_ref().and_then(|o| o.spearman),
        oracle_bin_report: oracle.map(|o| o.report),
        bin_report_epoch: captured.is_some().then_some(config.bin_report_epoch).flatten(),
        history: state.history,
    };
    Ok(ExperimentOutcome {
        result,
        model_a,
        model_b,
        normalizer: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dense;

    fn scalar_params(v: f64) -> ParamSet {
        ParamSet {
            hidden: vec![],
            head_y: Dense {
                weight: Matrix::from_rows(&[[v]]).unwrap(),
                bias: vec![0.0],
            },
            head_z: Dense::zeros(1, 1),
        }
    }

    #[test]
    fn sgd_hand_step() {
        let mut p = scalar_params(1.0);
        let g = scalar_params(2.0);
        let mut s = OptimizerState::new(&p);
        optimizer_update(&mut p, &g, &mut s, &OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        assert!((p.head_y.weight.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = scalar_params(1.0);
        let g = scalar_params(1.0);
        let mut s = OptimizerState::new(&p);
        let c = OptimizerConfig::sgd(0.1, 0.9);
        optimizer_update(&mut p, &g, &mut s, &c).unwrap();
        optimizer_update(&mut p, &g, &mut s, &c).unwrap();
        // v1 = 1, v2 = 1.9; θ = 1 − 0.1 − 0.19
        assert!((p.head_y.weight.get(0, 0) - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for c in [OptimizerConfig::sgd(0.1, 0.0), OptimizerConfig::adam(0.1)] {
            let mut p = scalar_params(1.5);
            let mut s = OptimizerState::new(&p);
            optimizer_update(&mut p, &scalar_params(0.0), &mut s, &c).unwrap();
            assert_eq!(p, scalar_params(1.5));
        }
    }

    #[test]
    fn adam_first_step() {
        for g in [0.3, -4.0] {
            let mut p = scalar_params(1.0);
            let mut s = OptimizerState::new(&p);
            let c = OptimizerConfig::adam(0.01);
            optimizer_update(&mut p, &scalar_params(g), &mut s, &c).unwrap();
            // m̂ = g, v̂ = g²: step = lr·g / (|g| + ε)
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p.head_y.weight.get(0, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn optimizer_shape_mismatch() {
        let mut p = scalar_params(1.0);
        let mut s = OptimizerState::new(&p);
        let g = ParamSet::zeros(&MlpConfig::new(2, vec![], 0.0));
        assert!(optimizer_update(&mut p, &g, &mut s, &OptimizerConfig::adam(0.1)).is_err());
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = TrainConfig::new(Variant::Full, 0);
        c.w_ulb = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("w_ulb"));
        let mut c = TrainConfig::new(Variant::Full, 0);
        c.t_draws = 0;
        assert!(c.validate().unwrap_err().to_string().contains("t_draws"));
        let mut c = TrainConfig::new(Variant::Full, 0);
        c.optimizer.learning_rate = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("learning_rate"));
    }

    #[test]
    fn sampler_cycles_through_all_rows() {
        let mut rng = RngState::new(0);
        let mut s = CyclingSampler::new(5, &mut rng);
        let mut seen: Vec<usize> = s.next_batch(5, &mut rng);
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(7, &mut rng).len(), 7);
        assert!(CyclingSampler::new(0, &mut rng).next_batch(3, &mut rng).is_empty());
    }
}
