use faer::Mat;
use gasket_ids::gasket::GasketMesh;
use gasket_ids::operators::*;

/// `exp(-t A)` by scaling and squaring of a truncated Taylor series.
fn expm_neg(a: &Mat<f64>, t: f64) -> Mat<f64> {
    let n = a.nrows();
    let norm = (0..n).map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max) * t;
    let squarings = (norm.max(1.0).log2().ceil() as i32 + 4).max(0);
    let h = t / 2f64.powi(squarings);
    let b = Mat::<f64>::from_fn(n, n, |i, j| -h * a[(i, j)]);
    let mut sum = Mat::<f64>::identity(n, n);
    let mut term = Mat::<f64>::identity(n, n);
    for k in 1..30 {
        term = &term * &b * (1.0 / k as f64);
        sum = &sum + &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut m = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

fn small() -> (GeneratorMatrix, EigenDecomposition) {
    let mesh = GasketMesh::build(1, 1).unwrap();
    let gen = laplacian_ambient(&mesh);
    let d = EigenDecomposition::of(&gen).unwrap();
    (gen, d)
}

#[test]
fn identity_subordination_reproduces_generator() {
    let (gen, d) = small();
    let a = subordinate_generator(&d, &SubordinatorSpec::Identity);
    assert!(max_abs_diff(&a, &gen.matrix) < 1e-10 * time_scale(1));
}

#[test]
fn heat_matches_taylor_oracle() {
    let (gen, d) = small();
    for t in [0.01, 0.1, 0.5] {
        let diff = max_abs_diff(&heat_matrix(&d, t), &expm_neg(&gen.matrix, t));
        assert!(diff < 1e-10, "t = {t}: {diff:e}");
    }
}

#[test]
fn subordinate_semigroups_are_markov() {
    let (_, d) = small();
    let specs = [
        SubordinatorSpec::stable_gamma(0.5),
        SubordinatorSpec::Relativistic { alpha: 1.0, mass: 0.7 },
        SubordinatorSpec::StableMixture { alphas: vec![0.6, 1.5] },
        SubordinatorSpec::StableWithDrift { alpha: 1.2, drift: 0.3 },
    ];
    for spec in &specs {
        let sub = d.subordinate(spec);
        let (ps, pt, pst) = (sub.heat(0.3), sub.heat(0.7), sub.heat(1.0));
        assert!(max_abs_diff(&(&ps * &pt), &pst) < 1e-10, "{spec:?} semigroup");
        for x in 0..d.dim() {
            let mut row = 0.0;
            for y in 0..d.dim() {
                assert!((pst[(x, y)] - pst[(y, x)]).abs() < 1e-14);
                let p = d.to_transition(pst[(x, y)], x, y);
                assert!(p > -1e-12, "{spec:?} negative entry {p}");
                row += p;
            }
            assert!((row - 1.0).abs() < 1e-10, "{spec:?} row sum {row}");
        }
        // A commutes with L
        let a = subordinate_generator(&d, spec);
        let l = d.apply(|l| l);
        let scale = max_abs_diff(&a, &Mat::zeros(d.dim(), d.dim())) * max_abs_diff(&l, &Mat::zeros(d.dim(), d.dim()));
        assert!(max_abs_diff(&(&a * &l), &(&l * &a)) <= 1e-9 * scale);
    }
}

#[test]
fn spectral_gap_renormalizes_by_five() {
    let gap = |n: u32| {
        let g = laplacian_ambient(&GasketMesh::build(0, n).unwrap());
        eigvalsh(&g.matrix).unwrap()[1] / time_scale(n)
    };
    let gaps: Vec<f64> = (2..=5).map(gap).collect();
    for w in gaps.windows(2) {
        let r = w[0] / w[1];
        assert!((r - 5.0).abs() <= 0.25, "ratio {r}");
    }
}

#[test]
fn quotient_identities_hold() {
    let pair = KernelPair::build(1, 2, 2).unwrap();
    for spec in [SubordinatorSpec::Identity, SubordinatorSpec::stable_gamma(0.5)] {
        for t in [0.25, 1.0] {
            assert!(pair.fiber_sum_residual(&spec, t) < 1e-10);
            assert!(pair.rotation_residual(&spec, t) < 1e-10);
        }
    }
}

#[test]
fn verlog_closed_forms() {
    let v = verlog_bound(&SubordinatorSpec::stable_gamma(0.5), 1.0).unwrap();
    assert!((v - (2.0 + (-1f64).exp())).abs() < 1e-6);
    let v = verlog_bound(&SubordinatorSpec::stable_gamma(0.25), 2.0).unwrap();
    assert!((v - (8.0 + (-1f64).exp())).abs() < 1e-6);
}
