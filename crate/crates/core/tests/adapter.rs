mod common;

use common::{max_abs_diff, naive_matmul, random_matrix, rel_frob};
use proptest::prelude::*;
use slora::{
    adapter_forward, init_slice_adapter, merge, milora_init, pissa_init, svd, AdapterState, DenseMatrix, Error,
    SliceSpec,
};

fn bits(st: &AdapterState) -> Vec<u64> {
    [&st.w_p, &st.a, &st.b]
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|v| v.to_bits()))
        .collect()
}

/// Projector onto the column space of `m` (orthonormal basis from the oracle SVD).
fn column_projector(basis: &DenseMatrix) -> DenseMatrix {
    basis.matmul_t(basis).unwrap()
}

#[test]
fn diag_examples() {
    let w = DenseMatrix::from_diag(&[4.0, 1.0]);
    let top = init_slice_adapter(&w, SliceSpec::new(0, 1)).unwrap();
    assert_eq!(top.a, DenseMatrix::from_rows(&[[2.0], [0.0]]));
    assert_eq!(top.b, DenseMatrix::from_rows(&[[2.0, 0.0]]));
    assert_eq!(top.w_p, DenseMatrix::from_diag(&[0.0, 1.0]));

    let low = init_slice_adapter(&w, SliceSpec::new(1, 1)).unwrap();
    assert_eq!(low.a, DenseMatrix::from_rows(&[[0.0], [1.0]]));
    assert_eq!(low.b, DenseMatrix::from_rows(&[[0.0, 1.0]]));
    assert_eq!(low.w_p, DenseMatrix::from_diag(&[4.0, 0.0]));

    assert_eq!(bits(&pissa_init(&w, 1, 1.0).unwrap()), bits(&top));
    assert_eq!(bits(&milora_init(&w, 1, 1.0).unwrap()), bits(&low));
}

#[test]
fn window_out_of_range() {
    let w = random_matrix(1, 5, 8);
    for spec in [SliceSpec::new(0, 6), SliceSpec::new(3, 3), SliceSpec::new(0, 0)] {
        assert!(matches!(init_slice_adapter(&w, spec), Err(Error::SliceOutOfRange { .. })));
    }
    assert!(matches!(milora_init(&w, 6, 6.0), Err(Error::SliceOutOfRange { .. })));
}

#[test]
fn vit_base_scale_windows() {
    // k = 768, r = 32: the PiSSA window starts at 0 and the MiLoRA window at 736.
    let (k, r) = (768usize, 32usize);
    let grid = [0, 32, 64, 128, 256, 512, 736];
    assert_eq!(grid[0], 0);
    assert_eq!(*grid.last().unwrap(), k - r);
    assert!(grid.iter().all(|s| SliceSpec::new(*s, r).validate(k).is_ok()));
    assert!(SliceSpec::new(737, r).validate(k).is_err());
}

#[test]
fn pissa_spans_top_directions() {
    let w = random_matrix(7, 8, 8);
    let st = pissa_init(&w, 2, 2.0).unwrap();
    let f = svd(&w).unwrap();
    let oracle = column_projector(&f.u.columns(0, 2));
    // orthonormal basis of span(a) via its own SVD
    let fa = svd(&st.a).unwrap();
    let got = column_projector(&fa.u);
    assert!(max_abs_diff(&got, &oracle) <= 1e-9);
}

#[test]
fn milora_carries_minor_values() {
    let w = random_matrix(8, 8, 8);
    let st = milora_init(&w, 2, 2.0).unwrap();
    let f = svd(&w).unwrap();
    let ab = svd(&st.a.matmul(&st.b).unwrap()).unwrap();
    assert!((ab.sigma[0] - f.sigma[6]).abs() <= 1e-9);
    assert!((ab.sigma[1] - f.sigma[7]).abs() <= 1e-9);
}

#[test]
fn full_rank_window() {
    let w = random_matrix(3, 6, 6);
    let p = pissa_init(&w, 6, 6.0).unwrap();
    assert!(p.w_p.frobenius_norm() <= 1e-10);
    assert_eq!(bits(&p), bits(&milora_init(&w, 6, 6.0).unwrap()));
}

#[test]
fn forward_examples() {
    let w = random_matrix(5, 6, 4);
    let mut st = init_slice_adapter(&w, SliceSpec::new(1, 2)).unwrap();
    assert!(max_abs_diff(&adapter_forward(&DenseMatrix::identity(6), &st).unwrap(), &w) <= 1e-10);

    let x = random_matrix(6, 9, 6);
    let dense = naive_matmul(&x, &st.w_p.add(&naive_matmul(&st.a, &st.b).scale(st.scale)).unwrap());
    assert!(max_abs_diff(&adapter_forward(&x, &st).unwrap(), &dense) <= 1e-12);

    st.a = DenseMatrix::zeros(6, 2);
    assert_eq!(adapter_forward(&x, &st).unwrap(), x.matmul(&st.w_p).unwrap());
    assert_eq!(merge(&st), st.w_p);
    assert!(matches!(adapter_forward(&random_matrix(1, 2, 5), &st), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn scale_other_than_one() {
    let w = random_matrix(9, 5, 5);
    let st = init_slice_adapter(&w, SliceSpec::with_alpha(1, 2, 4.0)).unwrap();
    assert_eq!(st.scale, 2.0);
    // The factors still carry √σ; the residual removes the unscaled window.
    let f = svd(&w).unwrap();
    let ab = svd(&st.a.matmul(&st.b).unwrap()).unwrap();
    assert!((ab.sigma[0] - f.sigma[1]).abs() < 1e-9);
    assert!(SliceSpec::with_alpha(0, 1, 0.0).validate(3).is_err());
}

#[test]
fn zero_singular_values_in_window() {
    let w = DenseMatrix::from_diag(&[2.0, 0.0, 0.0]);
    let st = milora_init(&w, 2, 2.0).unwrap();
    assert_eq!(st.a.frobenius_norm(), 0.0);
    assert!(max_abs_diff(&st.merge(), &w) <= 1e-15);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let st = init_slice_adapter(&random_matrix(2, 7, 5), SliceSpec::with_alpha(2, 3, 1.5)).unwrap();
    st.save(dir.path()).unwrap();
    let back = AdapterState::load(dir.path()).unwrap();
    assert_eq!(bits(&back), bits(&st));
    assert_eq!(back.spec, st.spec);
    let man: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["format"], "SMX1");
    assert_eq!(man["s"], 2);
    assert_eq!(man["r"], 3);
    assert!(matches!(
        AdapterState::load(&dir.path().join("nothing")),
        Err(Error::MissingCheckpoint(_))
    ));
}

fn case() -> impl Strategy<Value = (DenseMatrix, usize, usize)> {
    (2usize..=12, 2usize..=12, any::<u64>()).prop_flat_map(|(m, n, seed)| {
        let k = m.min(n);
        (Just(random_matrix(seed, m, n)), 0..k).prop_flat_map(move |(w, s)| (Just(w), Just(s), 1..=(k - s)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_at_init((w, s, r) in case()) {
        let st = init_slice_adapter(&w, SliceSpec::new(s, r)).unwrap();
        prop_assert!(rel_frob(&st.merge(), &w) <= 1e-10);
    }

    #[test]
    fn adapter_values_are_the_window((w, s, r) in case()) {
        let st = init_slice_adapter(&w, SliceSpec::new(s, r)).unwrap();
        let f = svd(&w).unwrap();
        let ab = svd(&st.a.matmul(&st.b).unwrap()).unwrap();
        for j in 0..r {
            prop_assert!((ab.sigma[j] - f.sigma[s + j]).abs() <= 1e-9);
        }
    }

    #[test]
    fn residual_is_disjoint_from_window((w, s, r) in case()) {
        let st = init_slice_adapter(&w, SliceSpec::new(s, r)).unwrap();
        let f = svd(&w).unwrap();
        let proj = f.u.t_matmul(&st.w_p).unwrap().matmul_t(&f.vt).unwrap();
        for i in 0..f.k() {
            let want = if (s..s + r).contains(&i) { 0.0 } else { f.sigma[i] };
            prop_assert!((proj.get(i, i) - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn update_rank_is_bounded((w, s, r) in case(), seed in any::<u64>()) {
        let mut st = init_slice_adapter(&w, SliceSpec::new(s, r)).unwrap();
        // arbitrary "trained" factors
        st.a = st.a.add(&random_matrix(seed, st.a.rows(), r)).unwrap();
        st.b = st.b.add(&random_matrix(seed ^ 1, r, st.b.cols())).unwrap();
        let d = svd(&st.merge().sub(&st.w_p).unwrap()).unwrap();
        let tol = 1e-8 * d.sigma[0];
        prop_assert!(d.sigma.iter().skip(r).all(|&v| v <= tol));
    }

    #[test]
    fn special_cases_are_byte_identical((w, _s, r) in case()) {
        let k = w.rows().min(w.cols());
        let alpha = r as f64;
        prop_assert_eq!(bits(&pissa_init(&w, r, alpha).unwrap()), bits(&init_slice_adapter(&w, SliceSpec::new(0, r)).unwrap()));
        prop_assert_eq!(bits(&milora_init(&w, r, alpha).unwrap()), bits(&init_slice_adapter(&w, SliceSpec::new(k - r, r)).unwrap()));
    }
}
