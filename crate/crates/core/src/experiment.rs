//! Experiment configuration files and the end-to-end workflows behind the
//! command-line verbs.
//!
//! A config is a TOML document; every table rejects unknown keys. All
//! randomness derives from the top-level `seed`:
//!
//! | stream | consumer                                   |
//! |--------|--------------------------------------------|
//! | 0      | synthetic data (when `task.synthetic.seed` is absent) |
//! | 1      | train/validation/test/unlabeled split      |
//! | 2, 3   | initialization of models `a` and `b`       |
//! | 4      | shuffling and training dropout             |
//! | 5      | evaluation dropout (restarted per evaluation) |
//! | 6      | variance demo reruns                       |
//!
//! Every report carries `config_hash`, the SHA-256 of the resolved config
//! re-serialized as TOML, and the seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, CsvSchema, NoiseModel, SemiSupervisedSplit, SyntheticSpec, TargetFunction};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::losses::LossBreakdown;
use crate::model::{Activation, MlpModel};
use crate::numeric::RngState;
use crate::training::{self, ExperimentOutcome, ExperimentResult, OptimizerConfig, TrainConfig, Variant};
use crate::vme::{self, VarianceReport};

pub const STREAM_DATA: u64 = 0;
pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_VARIANCE: u64 = 6;

pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const BIN_REPORT_FILE: &str = "bin_report.csv";
pub const ABLATION_FILE: &str = "ablation_table.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";
pub const VARIANCE_FILE: &str = "variance_report.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const MANIFEST_FILE: &str = "checkpoints.json";
pub const CHECKPOINT_A: &str = "model_a.ckpt";
pub const CHECKPOINT_B: &str = "model_b.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub n_samples: usize,
    pub input_dim: usize,
    pub target_function: TargetFunction,
    pub noise_model: NoiseModel,
    pub noise_scale: f64,
    /// Fixed data seed; when absent the data is drawn from the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: CsvSchema,
}

/// Exactly one of the two sources must be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub label_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

/// Training settings; see [`TrainConfig`] for meanings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub variant: Variant,
    pub w_ulb: f64,
    pub t_draws: usize,
    pub dropout_p: f64,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub z_min: f64,
    pub z_max: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub n_bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_report_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    /// Run variant × seed cells on a thread pool. Results do not depend on it.
    #[serde(default)]
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceSection {
    pub t_values: Vec<usize>,
    pub reruns: usize,
    /// Dropout used for the demo model; defaults to `train.dropout_p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_p: Option<f64>,
    /// Training epochs for the demo model; defaults to `train.epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub task: TaskSection,
    pub split: SplitSection,
    pub train: TrainSection,
    pub report: ReportSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<VarianceSection>,
}

impl ExperimentConfig {
    /// The default synthetic benchmark: an 8-D linear target with
    /// input-dependent noise, 10% labels, and the full method.
    pub fn benchmark(seed: u64) -> Self {
        let t = TrainConfig::new(Variant::Full, seed);
        Self {
            seed,
            output_dir: None,
            task: TaskSection {
                synthetic: Some(SyntheticTask {
                    n_samples: 3000,
                    input_dim: 8,
                    target_function: TargetFunction::Linear,
                    noise_model: NoiseModel::InputDependent,
                    noise_scale: 1.0,
                    seed: Some(2024),
                }),
                csv: None,
            },
            split: SplitSection {
                label_fraction: 0.1,
                val_fraction: 0.1,
                test_fraction: 0.2,
            },
            train: TrainSection {
                variant: t.variant,
                w_ulb: t.w_ulb,
                t_draws: t.t_draws,
                dropout_p: t.dropout_p,
                hidden_dims: t.hidden_dims,
                activation: t.activation,
                z_min: t.z_min,
                z_max: t.z_max,
                epochs: 300,
                batch_labeled: t.batch_labeled,
                batch_unlabeled: t.batch_unlabeled,
                optimizer: t.optimizer,
            },
            report: ReportSection {
                n_bins: 10,
                bin_report_epoch: None,
            },
            ablation: Some(AblationSection {
                seeds: vec![0, 1, 2, 3, 4],
                parallel: true,
            }),
            variance: Some(VarianceSection {
                t_values: vec![1, 2, 5, 20],
                reruns: 200,
                dropout_p: Some(0.25),
                epochs: None,
            }),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative CSV paths are relative to the config file.
        if let (Some(csv), Some(dir)) = (cfg.task.csv.as_mut(), path.parent()) {
            if csv.path.is_relative() {
                csv.path = dir.join(&csv.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Field-level validation; error messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("{name}: {e}"));
        match (&self.task.synthetic, &self.task.csv) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(
                    "task: exactly one of [task.synthetic] or [task.csv] is required".into(),
                ))
            }
            (Some(s), None) => self
                .synthetic_spec(s)
                .validate()
                .map_err(|e| field("task.synthetic", e))?,
            (None, Some(_)) => {}
        }
        let s = &self.split;
        for (name, v) in [
            ("split.label_fraction", s.label_fraction),
            ("split.val_fraction", s.val_fraction),
            ("split.test_fraction", s.test_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name}: must lie in (0, 1], got {v}")));
            }
        }
        if s.val_fraction + s.test_fraction >= 1.0 {
            return Err(Error::Config(
                "split: val_fraction + test_fraction must be < 1".into(),
            ));
        }
        self.train_config(self.seed).validate().map_err(|e| match e {
            Error::Parameter { name, reason } => Error::Config(format!("train.{name}: {reason}")),
            other => field("train", other),
        })?;
        if let Some(a) = &self.ablation {
            if a.seeds.is_empty() {
                return Err(Error::Config("ablation.seeds: must not be empty".into()));
            }
        }
        if let Some(v) = &self.variance {
            if v.t_values.is_empty() || v.t_values.contains(&0) {
                return Err(Error::Config(
                    "variance.t_values: must be a nonempty list of positive counts".into(),
                ));
            }
            if v.reruns < vme::MIN_RERUNS {
                return Err(Error::Config(format!(
                    "variance.reruns: must be >= {}, got {}",
                    vme::MIN_RERUNS,
                    v.reruns
                )));
            }
            if let Some(p) = v.dropout_p {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "variance.dropout_p: must lie in [0, 1), got {p}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn synthetic_spec(&self, s: &SyntheticTask) -> SyntheticSpec {
        let seed = s
            .seed
            .unwrap_or_else(|| RngState::substream(self.seed, STREAM_DATA).next_u64());
        SyntheticSpec {
            n_samples: s.n_samples,
            input_dim: s.input_dim,
            target_function: s.target_function,
            noise_model: s.noise_model,
            noise_scale: s.noise_scale,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            variant: t.variant,
            w_ulb: t.w_ulb,
            t_draws: t.t_draws,
            dropout_p: t.dropout_p,
            hidden_dims: t.hidden_dims.clone(),
            activation: t.activation,
            z_min: t.z_min,
            z_max: t.z_max,
            epochs: t.epochs,
            batch_labeled: t.batch_labeled,
            batch_unlabeled: t.batch_unlabeled,
            optimizer: t.optimizer,
            seed,
            n_bins: self.report.n_bins,
            bin_report_epoch: self.report.bin_report_epoch,
        }
    }

    /// Copy of the config with a different run seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Loads or generates the data and splits it for `seed`.
    pub fn prepare_split(&self, seed: u64) -> Result<SemiSupervisedSplit> {
        let cfg = self.with_seed(seed);
        let data = match (&cfg.task.synthetic, &cfg.task.csv) {
            (Some(s), _) => data::generate_synthetic(&cfg.synthetic_spec(s))?,
            (None, Some(c)) => data::load_csv(&c.path, &c.schema)?,
            (None, None) => unreachable!("validated"),
        };
        let mut rng = RngState::substream(seed, STREAM_SPLIT);
        data::split_semi_supervised(
            &data,
            cfg.split.label_fraction,
            cfg.split.val_fraction,
            cfg.split.test_fraction,
            &mut rng,
        )
    }
}

/// Metrics file contents: the run result (which carries the seed) plus the
/// config hash.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    /// Fields computed from unlabeled ground truth, which training never reads.
    pub oracle_fields: Vec<String>,
    #[serde(flatten)]
    pub result: ExperimentResult,
}

const ORACLE_FIELDS: [&str; 3] = [
    "oracle_pseudo_label_mae",
    "oracle_uncertainty_spearman",
    "oracle_bin_report",
];

pub struct TrainRun {
    pub config_hash: String,
    pub outcome: ExperimentOutcome,
}

impl TrainRun {
    pub fn metrics(&self) -> MetricsRecord {
        MetricsRecord {
            config_hash: self.config_hash.clone(),
            oracle_fields: ORACLE_FIELDS.iter().map(|s| s.to_string()).collect(),
            result: self.outcome.result.clone(),
        }
    }
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let split = cfg.prepare_split(cfg.seed)?;
    let outcome = training::run_experiment(&cfg.train_config(cfg.seed), &split)?;
    Ok(TrainRun {
        config_hash: cfg.hash(),
        outcome,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `step,reg_lb,unc_lb,reg_ulb,unc_ulb,w_ulb,total,config_hash,seed`.
pub fn history_csv(history: &[LossBreakdown], hash: &str, seed: u64) -> String {
    let mut out = String::from("step,reg_lb,unc_lb,reg_ulb,unc_ulb,w_ulb,total,config_hash,seed\n");
    for (i, h) in history.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{hash},{seed}",
            h.reg_lb, h.unc_lb, h.reg_ulb, h.unc_ulb, h.w_ulb, h.total
        )
        .expect("writing to a String");
    }
    out
}

/// Bin report CSV with provenance columns appended to every row.
pub fn bin_report_csv(report: &evaluation::BinReport, hash: &str, seed: u64) -> String {
    let mut lines = report.to_csv().lines().map(str::to_owned).collect::<Vec<_>>();
    lines[0].push_str(",config_hash,seed");
    for l in lines.iter_mut().skip(1) {
        write!(l, ",{hash},{seed}").expect("writing to a String");
    }
    lines.join("\n") + "\n"
}

#[derive(Serialize)]
struct CheckpointManifest<'a> {
    config_hash: &'a str,
    seed: u64,
    best_epoch: usize,
    model_a: &'a str,
    model_b: &'a str,
}

/// Writes metrics, loss history, bin report, checkpoints and the resolved
/// config into `dir`.
pub fn write_train_artifacts(cfg: &ExperimentConfig, run: &TrainRun, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let hash = &run.config_hash;
    let seed = cfg.seed;
    let metrics = serde_json::to_string_pretty(&run.metrics())? + "\n";
    write(&dir.join(METRICS_FILE), metrics)?;
    write(
        &dir.join(HISTORY_FILE),
        history_csv(&run.outcome.result.history, hash, seed),
    )?;
    let bins = match &run.outcome.result.oracle_bin_report {
        Some(r) => bin_report_csv(r, hash, seed),
        None => "bin_index,mean_uncertainty,pseudo_label_mse,count,config_hash,seed\n".into(),
    };
    write(&dir.join(BIN_REPORT_FILE), bins)?;
    run.outcome.model_a.save(dir.join(CHECKPOINT_A))?;
    run.outcome.model_b.save(dir.join(CHECKPOINT_B))?;
    let manifest = CheckpointManifest {
        config_hash: hash,
        seed,
        best_epoch: run.outcome.result.best_epoch,
        model_a: CHECKPOINT_A,
        model_b: CHECKPOINT_B,
    };
    write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    write(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

/// One variant × seed cell of an ablation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub test_mae: Option<f64>,
    pub test_r2: Option<f64>,
    pub oracle_uncertainty_spearman: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub result: Option<ExperimentResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub n_runs: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (m, s)
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .expect("every variant has a row")
    }

    /// Successful runs of one variant, in seed order.
    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// `variant,consistency,ensembling,mae_mean,mae_std,r2_mean,r2_std,n_runs,n_failed,config_hash,seeds`
    /// with one row per variant in the order baseline, +con, +ens, full.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,consistency,ensembling,mae_mean,mae_std,r2_mean,r2_std,n_runs,n_failed,config_hash,seeds\n",
        );
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.variant,
                r.variant.uses_consistency(),
                r.variant.uses_ensembling(),
                r.mae_mean,
                r.mae_std,
                r.r2_mean,
                r.r2_std,
                r.n_runs,
                r.n_failed,
                self.config_hash,
                seeds
            )
            .expect("writing to a String");
        }
        out
    }

    /// `variant,seed,test_mae,test_r2,oracle_uncertainty_spearman,error,config_hash`.
    pub fn runs_csv(&self) -> String {
        let mut out =
            String::from("variant,seed,test_mae,test_r2,oracle_uncertainty_spearman,error,config_hash\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.runs {
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                opt(r.test_mae),
                opt(r.test_r2),
                opt(r.oracle_uncertainty_spearman),
                err,
                self.config_hash
            )
            .expect("writing to a String");
        }
        out
    }

    /// Human-readable table with `mean ± std` cells.
    pub fn display(&self) -> String {
        let mut out = format!("{:<14} {:>5} {:>5}  {:>20}  {:>20}\n", "method", "con", "ens", "MAE", "R2");
        for r in &self.rows {
            let mark = |b: bool| if b { "x" } else { "" };
            writeln!(
                out,
                "{:<14} {:>5} {:>5}  {:>20}  {:>20}",
                r.variant.name(),
                mark(r.variant.uses_consistency()),
                mark(r.variant.uses_ensembling()),
                format!("{:.4} ± {:.4}", r.mae_mean, r.mae_std),
                format!("{:.4} ± {:.4}", r.r2_mean, r.r2_std),
            )
            .expect("writing to a String");
        }
        out
    }
}

fn run_cell(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> AblationRun {
    let outcome = cfg.prepare_split(seed).and_then(|split| {
        let mut tc = cfg.train_config(seed);
        tc.variant = variant;
        training::run_experiment(&tc, &split)
    });
    match outcome {
        Ok(o) => AblationRun {
            variant,
            seed,
            test_mae: Some(o.result.test_mae),
            test_r2: Some(o.result.test_r2),
            oracle_uncertainty_spearman: o.result.oracle_uncertainty_spearman,
            error: None,
            result: Some(o.result),
        },
        Err(e) => AblationRun {
            variant,
            seed,
            test_mae: None,
            test_r2: None,
            oracle_uncertainty_spearman: None,
            error: Some(e.to_string()),
            result: None,
        },
    }
}

fn ablation_seeds(cfg: &ExperimentConfig) -> (Vec<u64>, bool) {
    match &cfg.ablation {
        Some(a) => (a.seeds.clone(), a.parallel),
        None => (vec![cfg.seed], false),
    }
}

fn run_cells(cfg: &ExperimentConfig, cells: &[(Variant, u64)], parallel: bool) -> Vec<AblationRun> {
    if parallel {
        cells.par_iter().map(|&(v, s)| run_cell(cfg, v, s)).collect()
    } else {
        cells.iter().map(|&(v, s)| run_cell(cfg, v, s)).collect()
    }
}

/// Runs one variant over `ablation.seeds` (or the config seed alone).
pub fn run_seed_sweep(cfg: &ExperimentConfig, variant: Variant) -> Result<Vec<AblationRun>> {
    cfg.validate()?;
    let (seeds, parallel) = ablation_seeds(cfg);
    let cells: Vec<(Variant, u64)> = seeds.iter().map(|&s| (variant, s)).collect();
    Ok(run_cells(cfg, &cells, parallel))
}

/// Runs all four variants over `ablation.seeds` (or the config seed alone).
/// A failing cell is recorded, not fatal.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let (seeds, parallel) = ablation_seeds(cfg);
    let cells: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = run_cells(cfg, &cells, parallel);
    let rows = Variant::ALL
        .iter()
        .map(|&v| {
            let ok: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v && r.error.is_none()).collect();
            let maes: Vec<f64> = ok.iter().filter_map(|r| r.test_mae).collect();
            let r2s: Vec<f64> = ok.iter().filter_map(|r| r.test_r2).collect();
            let (mae_mean, mae_std) = mean_std(&maes);
            let (r2_mean, r2_std) = mean_std(&r2s);
            AblationRow {
                variant: v,
                mae_mean,
                mae_std,
                r2_mean,
                r2_std,
                n_runs: ok.len(),
                n_failed: seeds.len() - ok.len(),
            }
        })
        .collect();
    Ok(AblationTable {
        config_hash: cfg.hash(),
        seeds,
        rows,
        runs,
    })
}

pub fn write_ablation_artifacts(table: &AblationTable, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write(&dir.join(ABLATION_FILE), table.to_csv())?;
    write(&dir.join(ABLATION_RUNS_FILE), table.runs_csv())
}

/// Contents of `variance_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceDemo {
    pub config_hash: String,
    pub seed: u64,
    pub dropout_p: f64,
    /// Evaluation rows: the test partition, standardized units.
    pub n_samples: usize,
    pub rows: Vec<VarianceReport>,
}

impl VarianceDemo {
    /// `mse_ensemble` is non-increasing along `rows` up to `k` standard
    /// errors of the paired single-vs-ensemble gap.
    pub fn mse_non_increasing(&self, k: f64) -> bool {
        self.rows.windows(2).all(|w| {
            let slack = k * w[0].mse_gap_se.max(w[1].mse_gap_se);
            w[1].mse_ensemble <= w[0].mse_ensemble + slack
        })
    }
}

/// Trains a model pair with the demo dropout rate, then runs the Monte-Carlo
/// bias–variance check on the test rows for each `T` in `variance.t_values`.
pub fn run_variance_demo(cfg: &ExperimentConfig) -> Result<VarianceDemo> {
    cfg.validate()?;
    let section = cfg.variance.clone().unwrap_or(VarianceSection {
        t_values: vec![1, 2, 5, 20],
        reruns: 200,
        dropout_p: None,
        epochs: None,
    });
    let split = cfg.prepare_split(cfg.seed)?;
    let mut tc = cfg.train_config(cfg.seed);
    if let Some(p) = section.dropout_p {
        tc.dropout_p = p;
    }
    if let Some(e) = section.epochs {
        tc.epochs = e;
    }
    let outcome = training::run_experiment(&tc, &split)?;
    let test = outcome.normalizer.transform(&split.test)?;
    let truth = test.require_targets("test set")?;
    let mut rng = RngState::substream(cfg.seed, STREAM_VARIANCE);
    let rows = section
        .t_values
        .iter()
        .map(|&t| {
            vme::variance_reduction_check(
                &outcome.model_a,
                &outcome.model_b,
                &test.features,
                truth,
                t,
                section.reruns,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VarianceDemo {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        dropout_p: tc.dropout_p,
        n_samples: test.len(),
        rows,
    })
}

pub fn write_variance_artifacts(demo: &VarianceDemo, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write(&dir.join(VARIANCE_FILE), serde_json::to_string_pretty(demo)? + "\n")
}

/// Test metrics of a saved model pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub config_hash: String,
    pub seed: u64,
    pub n_test: usize,
    pub test_mae: f64,
    pub test_r2: f64,
}

/// Loads `model_a.ckpt`/`model_b.ckpt` from `checkpoint_dir`, rebuilds the
/// split and normalizer from the config, and scores the test rows.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint_dir: &Path) -> Result<EvaluationRecord> {
    cfg.validate()?;
    let a = MlpModel::load(checkpoint_dir.join(CHECKPOINT_A))?;
    let b = MlpModel::load(checkpoint_dir.join(CHECKPOINT_B))?;
    let split = cfg.prepare_split(cfg.seed)?;
    let norm = data::Normalizer::fit(&split.labeled)?;
    let tc = cfg.train_config(cfg.seed);
    let mut rng = RngState::substream(cfg.seed, training::STREAM_EVAL);
    let pred = training::predict_original_units(&a, &b, &norm, &split.test.features, tc.t_draws, &mut rng)?;
    let truth = split.test.require_targets("test set")?;
    Ok(EvaluationRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        n_test: truth.len(),
        test_mae: evaluation::mae(&pred, truth)?,
        test_r2: evaluation::r_squared(&pred, truth)?,
    })
}

pub fn write_evaluation(record: &EvaluationRecord, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write(&dir.join(EVALUATION_FILE), serde_json::to_string_pretty(record)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::benchmark(3);
        if let Some(s) = c.task.synthetic.as_mut() {
            s.n_samples = 200;
        }
        c.train.epochs = 2;
        c.train.hidden_dims = vec![8];
        c
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = tiny();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.with_seed(4).hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = tiny().to_toml().replace("w_ulb = 10.0", "w_ulb = 10.0\nw_ulbb = 3.0");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("w_ulbb"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let text = tiny().to_toml().replace("w_ulb = 10.0", "w_ulb = -1.0");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("w_ulb"), "{err}");
        let text = tiny().to_toml().replace("label_fraction = 0.1", "label_fraction = 1.5");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("split.label_fraction"), "{err}");
    }

    #[test]
    fn split_is_reproducible() {
        let c = tiny();
        assert_eq!(c.prepare_split(1).unwrap(), c.prepare_split(1).unwrap());
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
