use gasket_ids::gasket::{project, GasketMesh, LatticePoint};
use gasket_ids::potentials::*;

fn families() -> Vec<ProfileSpec> {
    vec![
        ProfileSpec::Cellwise {
            m0: 1,
            resolution: 1,
            psi: (0..9).map(|k| 0.5 + (k % 4) as f64).collect(),
        },
        ProfileSpec::Radial {
            range: 1.0,
            profile: RadialShape::Tent { height: 1.0 },
        },
        ProfileSpec::Shellwise {
            coefficients: vec![1.0, 0.25, 0.05],
            tail: Some(GeometricTail { scale: 1.0, ratio: 0.2 }),
        },
    ]
}

#[test]
fn w3_holds_for_the_example_families() {
    for spec in families() {
        let r = check_w3(&spec, &[1, 2], 1, 2).unwrap();
        assert!(r.holds, "{spec:?}: {:?}", r.witnesses);
        assert!(r.pairs_checked > 0);
    }
}

#[test]
fn w3_counterexample_fails_with_pinned_witness() {
    let r = check_w3(&ProfileSpec::w3_counterexample(), &[1, 2], 1, 2).unwrap();
    assert!(!r.holds);
    let w = &r.witnesses[0];
    assert_eq!((w.x, w.y, w.level), (LatticePoint::new(0, 5, 1), LatticePoint::new(1, 4, 2), 1));
    // e^{-2} against e^{-5/2}
    assert!((w.lhs - (-2f64).exp()).abs() < 1e-14);
    assert!((w.rhs - (-2.5f64).exp()).abs() < 1e-14);
}

#[test]
fn periodized_potential_is_fiber_constant() {
    let base = GasketMesh::build(1, 2).unwrap();
    let target = GasketMesh::build(3, 2).unwrap();
    let cloud = sample_cloud(1.0, &base, 3).unwrap();
    let tent = &families()[1];
    let v = potential_on_mesh(&cloud, tent, &base).unwrap();
    assert!(v.values.iter().all(|x| *x >= 0.0));
    let p = periodize_usual(&v, &base, &target).unwrap();
    for (k, x) in target.vertices().iter().enumerate() {
        let q = project(x, 1).unwrap();
        assert_eq!(p.values[k], v.values[base.index_of(&q).unwrap()]);
    }
}

#[test]
fn sznitman_potential_sees_fiber_copies() {
    let base = GasketMesh::build(1, 2).unwrap();
    let tent = &families()[1];
    let mut cloud = PoissonCloud::empty(1.0, 1, 2);
    // a point next to the corner (2, 0), whose fiber copy lies across it
    cloud.points.push(LatticePoint::new(15, 0, 3));
    let plain = potential_on_mesh(&cloud, tent, &base).unwrap();
    let star = periodize_sznitman(&cloud, tent, 1, 1, &base).unwrap();
    let corner = base.corner_indices()[1];
    assert!(star.values[corner] >= plain.values[corner]);
    assert!(star.values.iter().zip(&plain.values).all(|(s, p)| s >= p));
}

#[test]
fn cloud_json_round_trip() {
    let window = GasketMesh::build(1, 2).unwrap();
    let cloud = sample_cloud(2.0, &window, 8).unwrap();
    assert_eq!(PoissonCloud::from_json(&cloud.to_json()).unwrap(), cloud);
}
