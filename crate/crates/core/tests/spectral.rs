mod common;

use common::{max_abs_diff, random_labels, random_matrix, triple_product};
use proptest::prelude::*;
use slora::spectral::{ablation_forgetting, project, report_rows, write_report};
use slora::train::Model;
use slora::{
    component_importance, evaluate, feature_space_delta, param_space_delta, svd, weighted_summary, Activation,
    DenseMatrix, Error, ImportanceProfile, LabeledDataset, ModelSpec, Space, SpectralDelta,
};

/// `|diag(σ) − Lᵀ M R|` from the plain loop product.
fn oracle_delta(l: &DenseMatrix, m: &DenseMatrix, r: &DenseMatrix, sigma: &[f64]) -> DenseMatrix {
    let p = triple_product(l, m, r);
    DenseMatrix::from_fn(p.rows(), p.cols(), |i, j| {
        let s = if i == j { sigma[i] } else { 0.0 };
        (s - p.get(i, j)).abs()
    })
}

fn all_zero(d: &SpectralDelta, tol: f64) -> bool {
    d.diag.iter().chain(&d.offdiag_row_norms).all(|v| *v <= tol)
}

#[test]
fn unchanged_weights_have_zero_delta() {
    let w = random_matrix(1, 9, 6);
    assert!(all_zero(&param_space_delta(&w, &w).unwrap(), 1e-12));
    let x0 = random_matrix(2, 30, 9);
    assert!(all_zero(&feature_space_delta(&x0, &w, &w).unwrap(), 1e-12));
}

#[test]
fn large_unchanged_weights() {
    for (m, n) in [(256, 192), (512, 512)] {
        let w = random_matrix(3, m, n);
        let d = param_space_delta(&w, &w).unwrap();
        assert_eq!(d.k(), n);
        // zero up to rounding, relative to the largest singular value
        assert!(all_zero(&d, 1e-12 * svd(&w).unwrap().sigma[0]));
    }
}

#[test]
fn rank_one_bump_along_a_component() {
    let w0 = random_matrix(4, 7, 5);
    let f = svd(&w0).unwrap();
    for i in 0..f.k() {
        let (u, v) = (f.left_vector(i), f.right_vector(i).to_vec());
        let w_ft = w0.add(&DenseMatrix::from_fn(7, 5, |a, b| 0.5 * u[a] * v[b])).unwrap();
        let d = param_space_delta(&w0, &w_ft).unwrap();
        for (j, &v) in d.diag.iter().enumerate() {
            let want = if j == i { 0.5 } else { 0.0 };
            assert!((v - want).abs() <= 1e-10, "component {i}, index {j}: {v}");
        }
        assert!(d.offdiag_row_norms.iter().all(|&v| v <= 1e-10));
    }
}

#[test]
fn parameter_delta_matches_triple_product() {
    let w0 = random_matrix(5, 8, 8);
    let w_ft = w0.add(&random_matrix(6, 8, 8).scale(0.2)).unwrap();
    let d = param_space_delta(&w0, &w_ft).unwrap();
    let f = svd(&w0).unwrap();
    let oracle = oracle_delta(&f.u, &w_ft, &f.vt.transpose(), &f.sigma);
    assert!(max_abs_diff(d.full.as_ref().unwrap(), &oracle) <= 1e-12);
    for i in 0..8 {
        assert!((d.diag[i] - oracle.get(i, i)).abs() <= 1e-12);
        let off: f64 = (0..8).filter(|&j| j != i).map(|j| oracle.get(i, j).powi(2)).sum::<f64>().sqrt();
        assert!((d.offdiag_row_norms[i] - off).abs() <= 1e-12);
    }
    assert_eq!(d.space, Space::Parameter);
}

#[test]
fn feature_delta_matches_triple_product() {
    let x0 = random_matrix(7, 100, 16);
    let w0 = random_matrix(8, 16, 16);
    let w_ft = w0.add(&random_matrix(9, 16, 16).scale(0.1)).unwrap();
    let d = feature_space_delta(&x0, &w0, &w_ft).unwrap();
    let fy = svd(&x0.matmul(&w0).unwrap()).unwrap();
    let y_ft = common::naive_matmul(&x0, &w_ft);
    let oracle = oracle_delta(&fy.u, &y_ft, &fy.vt.transpose(), &fy.sigma);
    assert!(max_abs_diff(d.full.as_ref().unwrap(), &oracle) <= 1e-12);
    assert_eq!(d.space, Space::Feature);
    assert_eq!(d.k(), 16);
}

#[test]
fn feature_delta_with_few_probe_rows() {
    let x0 = random_matrix(1, 3, 6);
    let w0 = random_matrix(2, 6, 5);
    let d = feature_space_delta(&x0, &w0, &w0.scale(1.1)).unwrap();
    assert_eq!(d.k(), 3);
}

#[test]
fn identity_probe_matches_parameter_space() {
    let w0 = random_matrix(10, 6, 4);
    let w_ft = w0.add(&random_matrix(11, 6, 4).scale(0.3)).unwrap();
    let p = param_space_delta(&w0, &w_ft).unwrap();
    let f = feature_space_delta(&DenseMatrix::identity(6), &w0, &w_ft).unwrap();
    assert!(max_abs_diff(p.full.as_ref().unwrap(), f.full.as_ref().unwrap()) <= 1e-10);
}

#[test]
fn delta_shape_errors() {
    let w = random_matrix(1, 4, 3);
    assert!(matches!(param_space_delta(&w, &random_matrix(1, 3, 4)), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(
        feature_space_delta(&random_matrix(1, 5, 5), &w, &w),
        Err(Error::ShapeMismatch { .. })
    ));
}

/// `x` is `(±1, noise)`; the label is 0 when the first coordinate is positive.
fn sign_task(n: usize, flip: bool) -> LabeledDataset {
    let noise = random_matrix(12, n, 1);
    let x = DenseMatrix::from_fn(n, 2, |i, j| if j == 0 { if i % 2 == 0 { 1.0 } else { -1.0 } } else { noise.get(i, 0) });
    let y = (0..n).map(|i| (i % 2 == 1) as usize ^ flip as usize).collect();
    LabeledDataset::new(x, y, 2).unwrap()
}

/// Layer 0 is diag(10, 0.01); the readout only looks at coordinate 0.
fn diagnostic_model() -> Model {
    let spec = ModelSpec::new(vec![2, 2, 2], Activation::Identity);
    let readout = DenseMatrix::from_rows(&[[1.0, -1.0], [0.0, 0.0]]);
    Model::from_weights(&spec, vec![DenseMatrix::from_diag(&[10.0, 0.01]), readout]).unwrap()
}

#[test]
fn importance_of_the_used_component() {
    let model = diagnostic_model();
    let data = sign_task(40, false);
    assert_eq!(evaluate(&model, &data).unwrap(), 1.0);
    // removing component 0 zeroes both logits, ties go to class 0: half correct
    let prof = component_importance(&model, &data, 0).unwrap();
    assert_eq!(prof.raw_f, vec![0.5, 0.0]);
    assert_eq!(prof.p, vec![1.0, 0.0]);

    // zero baseline: f_i is the ablated accuracy itself
    let flipped = sign_task(40, true);
    assert_eq!(evaluate(&model, &flipped).unwrap(), 0.0);
    assert_eq!(ablation_forgetting(&model, &flipped, 0).unwrap(), vec![0.5, 0.0]);
}

#[test]
fn ablations_match_explicit_weight_edits() {
    let spec = ModelSpec::new(vec![5, 6, 4, 3], Activation::Relu);
    let model = Model::init(&spec, 13).unwrap();
    let data = random_labels(200, 5, 3, 14);
    let base = evaluate(&model, &data).unwrap();
    for layer in 0..3 {
        let got = ablation_forgetting(&model, &data, layer).unwrap();
        let f = svd(&model.weight(layer)).unwrap();
        for (i, g) in got.iter().enumerate() {
            let (u, v) = (f.left_vector(i), f.right_vector(i).to_vec());
            let mut edited = model.clone();
            let w = model.weight(layer);
            let w_i = DenseMatrix::from_fn(w.rows(), w.cols(), |a, b| w.get(a, b) - f.sigma[i] * u[a] * v[b]);
            edited.layers[layer].weight = slora::train::LayerWeight::Dense(w_i);
            let want = (base - evaluate(&edited, &data).unwrap()).abs();
            assert!((g - want).abs() <= 1e-12, "layer {layer} component {i}: {g} vs {want}");
        }
    }
}

#[test]
fn unused_layer_is_degenerate() {
    let spec = ModelSpec::new(vec![2, 2, 2], Activation::Identity);
    let model = Model::from_weights(&spec, vec![DenseMatrix::identity(2), DenseMatrix::zeros(2, 2)]).unwrap();
    assert!(matches!(component_importance(&model, &sign_task(10, false), 0), Err(Error::DegenerateProfile)));
}

#[test]
fn weighted_summary_matches_dot_products() {
    let d = random_matrix(15, 3, 8);
    let delta = SpectralDelta {
        diag: d.row(0).iter().map(|v| v.abs()).collect(),
        offdiag_row_norms: d.row(1).iter().map(|v| v.abs()).collect(),
        space: Space::Parameter,
        full: None,
    };
    let prof = ImportanceProfile::new(d.row(2).iter().map(|v| v.abs()).collect());
    let (a, b) = weighted_summary(&delta, &prof).unwrap();
    let mut da = 0.0;
    let mut db = 0.0;
    for i in (0..8).rev() {
        da += prof.p[i] * delta.diag[i];
        db += prof.p[i] * delta.offdiag_row_norms[i];
    }
    assert!((a - da).abs() <= 1e-14 && (b - db).abs() <= 1e-14);
}

#[test]
fn report_files() {
    let dir = tempfile::tempdir().unwrap();
    let w = random_matrix(16, 4, 4);
    let d = param_space_delta(&w, &w.scale(1.5)).unwrap();
    let prof = ImportanceProfile::new(vec![0.4, 0.2, 0.0, 0.1]);
    let csv = dir.path().join("r.csv");
    let json = dir.path().join("r.json");
    let sum = write_report(&csv, Some(&json), &d, &prof).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("component_index,diag_delta,offdiag_row_norm,p,space"));
    assert_eq!(lines.count(), 4);
    assert!(text.contains(",parameter"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["k"], 4);
    assert_eq!(v["space"], "parameter");
    assert_eq!(v["diag_sum"].as_f64().unwrap(), sum.diag_sum);
    assert_eq!(report_rows(&d, &prof)[0].p, 1.0);
}

fn sizes() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=24, 1usize..=24, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_change_identity((m, n, seed) in sizes()) {
        let w = random_matrix(seed, m, n);
        let d = param_space_delta(&w, &w).unwrap();
        prop_assert!(all_zero(&d, 1e-12 * (1.0 + w.frobenius_norm())));
        let x0 = random_matrix(seed ^ 7, 5, m);
        prop_assert!(all_zero(&feature_space_delta(&x0, &w, &w).unwrap(), 1e-12 * (1.0 + w.frobenius_norm()) * 10.0));
    }

    #[test]
    fn rescaling_moves_only_the_diagonal((m, n, seed) in sizes(), c in -2.0f64..2.0) {
        let w = random_matrix(seed, m, n);
        let d = param_space_delta(&w, &w.scale(1.0 + c)).unwrap();
        let f = svd(&w).unwrap();
        for i in 0..f.k() {
            prop_assert!((d.diag[i] - c.abs() * f.sigma[i]).abs() <= 1e-10);
            prop_assert!(d.offdiag_row_norms[i] <= 1e-10);
        }
    }

    #[test]
    fn full_delta_matches_oracle((m, n, seed) in (1usize..=64, 1usize..=64, any::<u64>())) {
        let w0 = random_matrix(seed, m, n);
        let w_ft = w0.add(&random_matrix(seed ^ 3, m, n).scale(0.5)).unwrap();
        let d = param_space_delta(&w0, &w_ft).unwrap();
        let f = svd(&w0).unwrap();
        prop_assert_eq!(project(&f, &w_ft).unwrap().shape(), (f.k(), f.k()));
        let oracle = oracle_delta(&f.u, &w_ft, &f.vt.transpose(), &f.sigma);
        let tol = 1e-12 * (1.0 + w_ft.frobenius_norm());
        prop_assert!(max_abs_diff(d.full.as_ref().unwrap(), &oracle) <= tol);
    }

    #[test]
    fn profile_is_normalized(raw in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let p = ImportanceProfile::new(raw);
        let max = p.p.iter().copied().fold(0.0, f64::max);
        prop_assert!(max == 0.0 || max == 1.0);
        prop_assert!(p.p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

