use ucvme::data::{self, NoiseModel, SyntheticSpec, TargetFunction};
use ucvme::evaluation;
use ucvme::model::{MlpConfig, MlpModel};
use ucvme::numeric::{Matrix, RngState};
use ucvme::vme;

fn net(seed: u64, p: f64) -> MlpModel {
    MlpModel::init(MlpConfig::new(3, vec![16, 16], p), &mut RngState::new(seed)).unwrap()
}

fn inputs(n: usize) -> Matrix {
    let mut rng = RngState::new(12);
    Matrix::new(n, 3, (0..n * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

#[test]
fn pseudo_labels_are_symmetric_in_the_two_models() {
    let x = inputs(20);
    // Without dropout, swapping models is exact.
    let (a, b) = (net(1, 0.0), net(2, 0.0));
    let p = vme::generate_pseudo_labels(&a, &b, &x, 4, &mut RngState::new(0)).unwrap();
    let q = vme::generate_pseudo_labels(&b, &a, &x, 4, &mut RngState::new(0)).unwrap();
    assert_eq!(p.y_tilde(), q.y_tilde());
    assert_eq!(p.z_tilde(), q.z_tilde());
    // With dropout, the average is symmetric in the draws it is given.
    let (a, b) = (net(1, 0.3), net(2, 0.3));
    let p = vme::generate_pseudo_labels_with_draws(&a, &b, &x, 4, &mut RngState::new(0)).unwrap();
    let d = p.draws().unwrap();
    assert_eq!(vme::average_draws(&d.y_b, &d.y_a).unwrap(), p.y_tilde());
    assert_eq!(vme::average_draws(&d.z_b, &d.z_a).unwrap(), p.z_tilde());
}

#[test]
fn ensemble_equals_mean_of_draws() {
    let (a, b) = (net(3, 0.2), net(4, 0.2));
    let x = inputs(7);
    let p = vme::generate_pseudo_labels_with_draws(&a, &b, &x, 5, &mut RngState::new(1)).unwrap();
    let d = p.draws().unwrap();
    for i in 0..7 {
        let manual: f64 = (0..5).map(|t| (d.y_a[t][i] + d.y_b[t][i]) / 2.0).sum::<f64>() / 5.0;
        assert!((manual - p.y_tilde()[i]).abs() < 1e-14);
    }
}

#[test]
fn no_dropout_collapses_to_deterministic_average() {
    let (a, b) = (net(5, 0.0), net(6, 0.0));
    let x = inputs(9);
    let p = vme::generate_pseudo_labels(&a, &b, &x, 5, &mut RngState::new(2)).unwrap();
    let ya = a.forward(&x, ucvme::model::Mode::Deterministic).unwrap();
    let yb = b.forward(&x, ucvme::model::Mode::Deterministic).unwrap();
    for i in 0..9 {
        assert!((p.y_tilde()[i] - (ya.y_hat[i] + yb.y_hat[i]) / 2.0).abs() < 1e-14);
        assert!((p.z_tilde()[i] - (ya.z_hat[i] + yb.z_hat[i]) / 2.0).abs() < 1e-14);
    }
    let truth = vec![0.0; 9];
    let r = vme::variance_reduction_check(&a, &b, &x, &truth, 5, 30, &mut RngState::new(3)).unwrap();
    assert_eq!(r.var_single, 0.0);
    assert_eq!(r.var_ensemble, 0.0);
    assert_eq!(r.mse_single, r.mse_ensemble);
    assert_eq!(r.bias_single, r.bias_ensemble);
}

#[test]
fn ensemble_variance_shrinks_with_more_draws() {
    let (a, b) = (net(7, 0.25), net(8, 0.25));
    let x = inputs(40);
    let truth: Vec<f64> = (0..40).map(|i| x.get(i, 0)).collect();
    let mut rng = RngState::new(4);
    let rows: Vec<vme::VarianceReport> = [1, 2, 5, 20]
        .iter()
        .map(|&t| vme::variance_reduction_check(&a, &b, &x, &truth, t, 200, &mut rng).unwrap())
        .collect();
    for w in rows.windows(2) {
        assert!(w[1].var_ensemble < w[0].var_ensemble, "{:?}", rows);
        assert!(w[1].ensemble_not_worse(2.0));
    }
    for r in &rows {
        assert!(r.biases_agree(2.0), "{r:?}");
        let sum = r.bias_ensemble + r.var_ensemble;
        assert!((sum - r.mse_ensemble).abs() < 1e-12 * r.mse_ensemble.max(1.0));
    }
    // Variance of a T-draw mean of independent draws is ~ var(T=1)/T.
    let ratio = rows[3].var_ensemble / rows[0].var_ensemble;
    assert!(ratio > 0.5 / 20.0 && ratio < 2.0 / 20.0, "ratio {ratio}");
}

#[test]
fn per_sample_spread_shrinks_from_five_to_hundred_draws() {
    let (a, b) = (net(9, 0.25), net(10, 0.25));
    let x = inputs(10);
    let mut rng = RngState::new(5);
    let spread = |t: usize, rng: &mut RngState| -> Vec<f64> {
        let runs: Vec<Vec<f64>> = (0..50)
            .map(|_| vme::predict(&a, &b, &x, t, rng).unwrap().0)
            .collect();
        (0..10)
            .map(|i| {
                let v: Vec<f64> = runs.iter().map(|r| r[i]).collect();
                let m = v.iter().sum::<f64>() / 50.0;
                (v.iter().map(|p| (p - m).powi(2)).sum::<f64>() / 49.0).sqrt()
            })
            .collect()
    };
    let s5 = spread(5, &mut rng);
    let s100 = spread(100, &mut rng);
    for (lo, hi) in s100.iter().zip(&s5) {
        assert!(lo < hi, "{s100:?} vs {s5:?}");
    }
}

#[test]
fn too_few_reruns_is_rejected() {
    let (a, b) = (net(1, 0.1), net(2, 0.1));
    let x = inputs(3);
    let err = vme::variance_reduction_check(&a, &b, &x, &[0.0; 3], 5, 5, &mut RngState::new(0)).unwrap_err();
    assert!(err.to_string().contains("reruns"), "{err}");
}

#[test]
fn synthetic_noise_is_calibrated() {
    let spec = SyntheticSpec {
        n_samples: 20_000,
        input_dim: 2,
        target_function: TargetFunction::Sinusoidal,
        noise_model: NoiseModel::InputDependent,
        noise_scale: 0.5,
        seed: 17,
    };
    let ds = data::generate_synthetic(&spec).unwrap();
    let y = ds.require_targets("synthetic").unwrap();
    let sigma = ds.true_noise_sigma.as_ref().unwrap();
    let resid: Vec<f64> = (0..ds.len()).map(|i| y[i] - spec.target(ds.features.row(i))).collect();
    // Bin by true log-variance; each bin's mean σ² should track its residual variance.
    let log_var: Vec<f64> = sigma.iter().map(|s| (s * s).ln()).collect();
    let report = evaluation::uncertainty_binning(&log_var, &resid, &vec![0.0; resid.len()], 20).unwrap();
    let r = evaluation::pearson_corr(&report.mean_uncertainty, &report.pseudo_label_mse).unwrap();
    assert!(r > 0.8, "correlation {r}");
}

#[test]
fn monotone_error_gives_increasing_bins() {
    let z: Vec<f64> = (0..100).map(|i| i as f64 / 10.0 - 5.0).collect();
    let pred: Vec<f64> = z.iter().map(|v| (v + 6.0).sqrt()).collect();
    let truth = vec![0.0; 100];
    let r = evaluation::uncertainty_binning(&z, &pred, &truth, 10).unwrap();
    for w in r.pseudo_label_mse.windows(2) {
        assert!(w[0] < w[1]);
    }
    assert_eq!(r.counts, vec![10; 10]);
}
