//! Datasets, synthetic task generation, CSV ingestion, semi-supervised
//! splitting and standardization.
//!
//! # Synthetic tasks
//!
//! Inputs are drawn `x_j ~ U(-1, 1)` independently. Targets are
//! `y = f(x) + ε` with `ε ~ N(0, σ(x)²)`, where (with `a_j = 1 / (j + 1)`):
//!
//! | `target_function` | `f(x)`                                   |
//! |-------------------|------------------------------------------|
//! | `linear`          | `Σ_j a_j x_j`                            |
//! | `sinusoidal`      | `Σ_j a_j sin(π x_j)`                     |
//! | `piecewise`       | `Σ_j a_j g(x_j)`, `g(u) = clamp(3u, -1, 1)` |
//!
//! | `noise_model`     | `σ(x)`                                   |
//! |-------------------|------------------------------------------|
//! | `constant`        | `noise_scale`                            |
//! | `input_dependent` | `noise_scale · (0.1 + 1.9 · ((x_0 + 1) / 2)²)` |
//!
//! so input-dependent noise grows smoothly from `0.1·s` at `x_0 = -1` to
//! `2·s` at `x_0 = 1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub features: Matrix,
    pub targets: Option<Vec<f64>>,
    /// Ground-truth noise standard deviation per row (synthetic data only).
    pub true_noise_sigma: Option<Vec<f64>>,
}

impl RegressionDataset {
    pub fn new(features: Matrix, targets: Option<Vec<f64>>) -> Result<Self> {
        if let Some(t) = &targets {
            if t.len() != features.rows() {
                return Err(Error::shape("RegressionDataset", features.rows(), t.len()));
            }
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                what: "features".into(),
            });
        }
        Ok(Self {
            features,
            targets,
            true_noise_sigma: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Targets, or an error naming `what` when the dataset is unlabeled.
    pub fn require_targets(&self, what: &str) -> Result<&[f64]> {
        self.targets
            .as_deref()
            .ok_or_else(|| Error::Usage(format!("{what} requires targets")))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            features: self.features.select_rows(indices),
            targets: self.targets.as_ref().map(pick),
            true_noise_sigma: self.true_noise_sigma.as_ref().map(pick),
        }
    }

    fn without_targets(mut self) -> Self {
        self.targets = None;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFunction {
    Linear,
    Sinusoidal,
    Piecewise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Constant,
    InputDependent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub input_dim: usize,
    pub target_function: TargetFunction,
    pub noise_model: NoiseModel,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 40 {
            return Err(Error::param("n_samples", format!("must be >= 40, got {}", self.n_samples)));
        }
        if self.input_dim == 0 {
            return Err(Error::param("input_dim", "must be >= 1"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::param(
                "noise_scale",
                format!("must be finite and >= 0, got {}", self.noise_scale),
            ));
        }
        Ok(())
    }

    /// Noise-free target `f(x)`.
    pub fn target(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(j, &u)| {
                let a = 1.0 / (j + 1) as f64;
                a * match self.target_function {
                    TargetFunction::Linear => u,
                    TargetFunction::Sinusoidal => (std::f64::consts::PI * u).sin(),
                    TargetFunction::Piecewise => (3.0 * u).clamp(-1.0, 1.0),
                }
            })
            .sum()
    }

    /// Noise standard deviation `σ(x)`.
    pub fn noise_sigma(&self, x: &[f64]) -> f64 {
        match self.noise_model {
            NoiseModel::Constant => self.noise_scale,
            NoiseModel::InputDependent => {
                let u = (x[0] + 1.0) / 2.0;
                self.noise_scale * (0.1 + 1.9 * u * u)
            }
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RegressionDataset> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let (n, d) = (spec.n_samples, spec.input_dim);
    let mut features = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let sigma = spec.noise_sigma(&x);
        targets.push(rng.gaussian(spec.target(&x), sigma)?);
        sigmas.push(sigma);
        features.extend(x);
    }
    Ok(RegressionDataset {
        features: Matrix::new(n, d, features)?,
        targets: Some(targets),
        true_noise_sigma: Some(sigmas),
    })
}

/// Column layout of a CSV file.
///
/// With `has_header` the columns are referenced by header name; without it,
/// by zero-based position written as a decimal string (`"0"`, `"1"`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub target_column: Option<String>,
    #[serde(default = "yes")]
    pub has_header: bool,
}

fn yes() -> bool {
    true
}

/// Reads a comma-separated file of decimal reals.
///
/// Cell errors report the 1-based line number in the file and the 1-based
/// field position.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<RegressionDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(input: R, schema: &CsvSchema) -> Result<RegressionDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_reader(input);

    let headers: Option<Vec<String>> = if schema.has_header {
        let h = reader.headers()?;
        if h.is_empty() {
            return Err(Error::Empty("csv file has no header".into()));
        }
        Some(h.iter().map(str::to_owned).collect())
    } else {
        None
    };
    let resolve = |name: &str| -> Result<usize> {
        match &headers {
            Some(h) => h
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::MissingColumn(name.to_owned())),
            None => name
                .parse::<usize>()
                .map_err(|_| Error::MissingColumn(name.to_owned())),
        }
    };
    if schema.feature_columns.is_empty() {
        return Err(Error::param("feature_columns", "at least one feature column is required"));
    }
    let feature_idx = schema
        .feature_columns
        .iter()
        .map(|c| resolve(c))
        .collect::<Result<Vec<_>>>()?;
    let target_idx = schema.target_column.as_deref().map(resolve).transpose()?;

    let first_line = if schema.has_header { 2 } else { 1 };
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = first_line + i;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).ok_or_else(|| Error::Cell {
                row: line,
                column: col + 1,
                reason: "missing field".into(),
            })?;
            let v: f64 = raw.parse().map_err(|_| Error::Cell {
                row: line,
                column: col + 1,
                reason: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Cell {
                    row: line,
                    column: col + 1,
                    reason: format!("`{raw}` is not finite"),
                });
            }
            Ok(v)
        };
        for &c in &feature_idx {
            features.push(cell(c)?);
        }
        if let Some(c) = target_idx {
            targets.push(cell(c)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("csv file has no data rows".into()));
    }
    RegressionDataset::new(
        Matrix::new(rows, feature_idx.len(), features)?,
        target_idx.map(|_| targets),
    )
}

/// Writes `x0,...,x{D-1}[,y]` with a header row. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn save_csv(data: &RegressionDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    if data.targets.is_some() {
        header.push("y".into());
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(t) = &data.targets {
            rec.push(t[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Schema matching the files written by [`save_csv`].
pub fn default_schema(dim: usize, with_target: bool) -> CsvSchema {
    CsvSchema {
        feature_columns: (0..dim).map(|j| format!("x{j}")).collect(),
        target_column: with_target.then(|| "y".to_owned()),
        has_header: true,
    }
}

/// Disjoint train/validation/test partition with the training part further
/// split into labeled and unlabeled rows.
///
/// Unlabeled rows carry no targets. Their ground truth is kept privately and
/// is reachable only through [`SemiSupervisedSplit::oracle_unlabeled_targets`],
/// which exists for evaluation diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiSupervisedSplit {
    pub labeled: RegressionDataset,
    pub unlabeled: RegressionDataset,
    pub validation: RegressionDataset,
    pub test: RegressionDataset,
    pub label_fraction: f64,
    /// Source row indices of each partition, in partition order.
    pub indices: SplitIndices,
    unlabeled_truth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SemiSupervisedSplit {
    /// Ground-truth targets of the unlabeled rows. Evaluation only.
    pub fn oracle_unlabeled_targets(&self) -> &[f64] {
        &self.unlabeled_truth
    }
}

/// Sizes: `n_test = round(test_fraction·N)`, `n_val = round(val_fraction·N)`,
/// the remaining `n_train` rows give `round(label_fraction·n_train)` labeled
/// rows and the rest unlabeled. Rows are assigned by a seeded shuffle.
pub fn split_semi_supervised(
    data: &RegressionDataset,
    label_fraction: f64,
    val_fraction: f64,
    test_fraction: f64,
    rng: &mut RngState,
) -> Result<SemiSupervisedSplit> {
    let targets = data.require_targets("split_semi_supervised")?;
    for (name, f) in [
        ("label_fraction", label_fraction),
        ("val_fraction", val_fraction),
        ("test_fraction", test_fraction),
    ] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::param(name, format!("must lie in (0, 1], got {f}")));
        }
    }
    if val_fraction + test_fraction >= 1.0 {
        return Err(Error::param(
            "val_fraction + test_fraction",
            format!("must be < 1, got {}", val_fraction + test_fraction),
        ));
    }
    let n = data.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_val = (val_fraction * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_test + n_val);
    let n_lab = (label_fraction * n_train as f64).round() as usize;
    if n_test == 0 || n_val == 0 || n_lab == 0 {
        return Err(Error::param(
            "fractions",
            format!("{n} rows give {n_lab} labeled / {n_val} validation / {n_test} test rows; each must be nonempty"),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let (test_idx, rest) = order.split_at(n_test);
    let (val_idx, train_idx) = rest.split_at(n_val);
    let (lab_idx, unl_idx) = train_idx.split_at(n_lab);

    let unlabeled_truth = unl_idx.iter().map(|&i| targets[i]).collect();
    Ok(SemiSupervisedSplit {
        labeled: data.select(lab_idx),
        unlabeled: data.select(unl_idx).without_targets(),
        validation: data.select(val_idx),
        test: data.select(test_idx),
        label_fraction,
        indices: SplitIndices {
            labeled: lab_idx.to_vec(),
            unlabeled: unl_idx.to_vec(),
            validation: val_idx.to_vec(),
            test: test_idx.to_vec(),
        },
        unlabeled_truth,
    })
}

/// Per-feature and target standardization fitted on labeled training rows.
///
/// Statistics use the population standard deviation. A feature (or target)
/// with zero variance is passed through unchanged and a warning is recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub warnings: Vec<String>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Normalizer {
    pub fn fit(source: &RegressionDataset) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Empty("normalizer source has no rows".into()));
        }
        let mut warnings = Vec::new();
        let d = source.dim();
        let mut feature_mean = Vec::with_capacity(d);
        let mut feature_std = Vec::with_capacity(d);
        for j in 0..d {
            let col = (0..source.len()).map(|i| source.features.get(i, j));
            let (m, s) = mean_std(col);
            if s > 0.0 {
                feature_mean.push(m);
                feature_std.push(s);
            } else {
                let msg = format!("feature {j} has zero variance; passed through unchanged");
                log::warn!("{msg}");
                warnings.push(msg);
                feature_mean.push(0.0);
                feature_std.push(1.0);
            }
        }
        let (target_mean, target_std) = match &source.targets {
            Some(t) => {
                let (m, s) = mean_std(t.iter().copied());
                if s > 0.0 {
                    (m, s)
                } else {
                    let msg = "target has zero variance; passed through unchanged".to_owned();
                    log::warn!("{msg}");
                    warnings.push(msg);
                    (0.0, 1.0)
                }
            }
            None => (0.0, 1.0),
        };
        Ok(Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
            warnings,
        })
    }

    pub fn transform_features(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.feature_mean.len() {
            return Err(Error::shape("transform_features", self.feature_mean.len(), x.cols()));
        }
        let mut out = x.clone();
        let d = x.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.feature_mean[j]) / self.feature_std[j];
        }
        Ok(out)
    }

    pub fn transform_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.target_mean) / self.target_std).collect()
    }

    pub fn inverse_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.target_std + self.target_mean).collect()
    }

    pub fn inverse_features(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        let d = x.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = *v * self.feature_std[j] + self.feature_mean[j];
        }
        out
    }

    pub fn transform(&self, data: &RegressionDataset) -> Result<RegressionDataset> {
        Ok(RegressionDataset {
            features: self.transform_features(&data.features)?,
            targets: data.targets.as_ref().map(|t| self.transform_targets(t)),
            true_noise_sigma: data
                .true_noise_sigma
                .as_ref()
                .map(|s| s.iter().map(|v| v / self.target_std).collect()),
        })
    }
}

/// Fits a [`Normalizer`] on the labeled rows and standardizes every
/// partition with it.
pub fn normalize(split: &SemiSupervisedSplit) -> Result<(Normalizer, SemiSupervisedSplit)> {
    let norm = Normalizer::fit(&split.labeled)?;
    let out = SemiSupervisedSplit {
        labeled: norm.transform(&split.labeled)?,
        unlabeled: norm.transform(&split.unlabeled)?,
        validation: norm.transform(&split.validation)?,
        test: norm.transform(&split.test)?,
        label_fraction: split.label_fraction,
        indices: split.indices.clone(),
        unlabeled_truth: norm.transform_targets(&split.unlabeled_truth),
    };
    Ok((norm, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(f: TargetFunction, noise: NoiseModel, scale: f64, n: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: n,
            input_dim: 2,
            target_function: f,
            noise_model: noise,
            noise_scale: scale,
            seed: 5,
        }
    }

    #[test]
    fn noiseless_targets_are_exact() {
        let s = spec(TargetFunction::Sinusoidal, NoiseModel::InputDependent, 0.0, 100);
        let d = generate_synthetic(&s).unwrap();
        let t = d.targets.as_ref().unwrap();
        for i in 0..d.len() {
            assert_eq!(t[i], s.target(d.features.row(i)));
        }
    }

    #[test]
    fn ols_recovers_linear_slope() {
        let mut s = spec(TargetFunction::Linear, NoiseModel::Constant, 0.5, 10_000);
        s.input_dim = 1;
        let d = generate_synthetic(&s).unwrap();
        let x: Vec<f64> = d.features.data().to_vec();
        let y = d.targets.unwrap();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        let se = (rss / (n - 2.0) / sxx).sqrt();
        assert!((slope - 1.0).abs() < 3.0 * se, "slope {slope} se {se}");
    }

    #[test]
    fn input_dependent_noise_is_larger_where_sigma_is_larger() {
        let s = spec(TargetFunction::Linear, NoiseModel::InputDependent, 1.0, 20_000);
        let d = generate_synthetic(&s).unwrap();
        let y = d.targets.as_ref().unwrap();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for i in 0..d.len() {
            let x = d.features.row(i);
            let r = y[i] - s.target(x);
            if x[0] < -0.5 {
                lo.push(r * r)
            } else if x[0] > 0.5 {
                hi.push(r * r)
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&hi) > mean(&lo));
    }

    #[test]
    fn spec_validation() {
        assert!(generate_synthetic(&spec(TargetFunction::Linear, NoiseModel::Constant, 1.0, 39)).is_err());
        assert!(generate_synthetic(&spec(TargetFunction::Linear, NoiseModel::Constant, -1.0, 40)).is_err());
    }

    #[test]
    fn minimal_csv_parse() {
        let schema = CsvSchema {
            feature_columns: vec!["x".into()],
            target_column: Some("y".into()),
            has_header: true,
        };
        let d = read_csv("x,y\n1,2\n3,4".as_bytes(), &schema).unwrap();
        assert_eq!(d.features, Matrix::from_rows(&[[1.0], [3.0]]).unwrap());
        assert_eq!(d.targets, Some(vec![2.0, 4.0]));
    }

    #[test]
    fn csv_without_header_uses_positions() {
        let schema = CsvSchema {
            feature_columns: vec!["1".into()],
            target_column: Some("0".into()),
            has_header: false,
        };
        let d = read_csv("2,1\n4,3\n".as_bytes(), &schema).unwrap();
        assert_eq!(d.features.data(), &[1.0, 3.0]);
        assert_eq!(d.targets, Some(vec![2.0, 4.0]));
    }

    #[test]
    fn csv_errors() {
        let schema = default_schema(1, true);
        match read_csv("x0,y\n1,2\n3,NaN\n".as_bytes(), &schema) {
            Err(Error::Cell { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("{other:?}"),
        }
        match read_csv("x0,y\n1,abc\n".as_bytes(), &schema) {
            Err(Error::Cell { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("{other:?}"),
        }
        match read_csv("a,y\n1,2\n".as_bytes(), &schema) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "x0"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_csv("".as_bytes(), &schema), Err(Error::Empty(_))));
        assert!(matches!(read_csv("x0,y\n".as_bytes(), &schema), Err(Error::Empty(_))));
    }

    #[test]
    fn csv_round_trip() {
        let d = generate_synthetic(&spec(TargetFunction::Piecewise, NoiseModel::Constant, 0.3, 50)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&d, &path).unwrap();
        let back = load_csv(&path, &default_schema(2, true)).unwrap();
        assert_eq!(back.features, d.features);
        assert_eq!(back.targets, d.targets);
    }

    fn rows(n: usize) -> RegressionDataset {
        let x = Matrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        RegressionDataset::new(x, Some((0..n).map(|i| 2.0 * i as f64).collect())).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = split_semi_supervised(&rows(1250), 0.1, 0.1, 0.1, &mut RngState::new(0)).unwrap();
        assert_eq!(s.labeled.len(), 100);
        assert_eq!(s.unlabeled.len(), 900);
        assert_eq!(s.validation.len(), 125);
        assert_eq!(s.test.len(), 125);
        assert!(s.unlabeled.targets.is_none());
        assert_eq!(s.oracle_unlabeled_targets().len(), 900);
    }

    #[test]
    fn split_full_label_fraction_has_no_unlabeled() {
        let s = split_semi_supervised(&rows(100), 1.0, 0.1, 0.1, &mut RngState::new(0)).unwrap();
        assert_eq!(s.labeled.len(), 80);
        assert!(s.unlabeled.is_empty());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let d = rows(100);
        let mut rng = RngState::new(0);
        assert!(split_semi_supervised(&d, 1.2, 0.1, 0.1, &mut rng).is_err());
        assert!(split_semi_supervised(&d, 0.1, 0.6, 0.5, &mut rng).is_err());
        assert!(split_semi_supervised(&d, 0.0, 0.1, 0.1, &mut rng).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        for seed in 0..20u64 {
            let d = rows(200);
            let a = split_semi_supervised(&d, 0.2, 0.15, 0.1, &mut RngState::new(seed)).unwrap();
            let b = split_semi_supervised(&d, 0.2, 0.15, 0.1, &mut RngState::new(seed)).unwrap();
            assert_eq!(a, b);
            let mut all: Vec<usize> = [
                &a.indices.labeled,
                &a.indices.unlabeled,
                &a.indices.validation,
                &a.indices.test,
            ]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
            all.sort_unstable();
            assert_eq!(all, (0..200).collect::<Vec<_>>());
            // Oracle targets line up with source rows.
            for (k, &i) in a.indices.unlabeled.iter().enumerate() {
                assert_eq!(a.oracle_unlabeled_targets()[k], 2.0 * i as f64);
            }
        }
    }

    #[test]
    fn normalize_inverse_and_identity() {
        let d = generate_synthetic(&spec(TargetFunction::Sinusoidal, NoiseModel::Constant, 0.2, 200)).unwrap();
        let n = Normalizer::fit(&d).unwrap();
        let t = n.transform(&d).unwrap();
        let back = n.inverse_features(&t.features);
        for (a, b) in back.data().iter().zip(d.features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let yb = n.inverse_targets(t.targets.as_ref().unwrap());
        for (a, b) in yb.iter().zip(d.targets.as_ref().unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Standardized data is a fixed point.
        let n2 = Normalizer::fit(&t).unwrap();
        let t2 = n2.transform(&t).unwrap();
        for (a, b) in t2.features.data().iter().zip(t.features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_feature_passes_through() {
        let x = Matrix::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap();
        let d = RegressionDataset::new(x, Some(vec![1.0, 2.0, 4.0])).unwrap();
        let n = Normalizer::fit(&d).unwrap();
        assert_eq!(n.warnings.len(), 1);
        let t = n.transform_features(&d.features).unwrap();
        for i in 0..3 {
            assert_eq!(t.get(i, 1), 5.0);
        }
    }
}
