use std::collections::HashSet;

use gasket_ids::gasket::*;
use num_rational::Ratio;
use proptest::prelude::*;

/// Cell (I, J) of depth `d`, decided by descending the three IFS maps.
fn ifs_member(mut i: u64, mut j: u64, depth: u32) -> bool {
    for k in (0..depth).rev() {
        let h = 1u64 << k;
        match (i >= h, j >= h) {
            (true, true) => return false,
            (true, false) => i -= h,
            (false, true) => j -= h,
            (false, false) => {}
        }
        if i + j >= h {
            return false;
        }
    }
    true
}

#[test]
fn membership_matches_ifs_to_depth_8() {
    for depth in 0..=8u32 {
        let side = 1u64 << depth;
        for i in 0..side {
            for j in 0..side - i {
                assert_eq!(cell_is_in_gasket(i, j), ifs_member(i, j, depth), "({i},{j}) depth {depth}");
            }
        }
    }
}

#[test]
fn counts_and_mass() {
    for m in 0..=3u32 {
        for n in 0..=3u32 {
            let mesh = GasketMesh::build(m, n).unwrap();
            assert_eq!(mesh.vertex_count(), (3usize.pow(m + n + 1) + 3) / 2);
            assert_eq!(mesh.cell_count(), 3usize.pow(m + n));
            assert_eq!(mesh.total_mass_exact(), Ratio::from_integer(3i128.pow(m)));
        }
    }
}

#[test]
fn tower_identity_on_mesh_vertices() {
    for m in 0..=2u32 {
        for n in 0..=2u32 {
            let mesh = GasketMesh::build(m + 3, n).unwrap();
            for p in mesh.vertices() {
                let two = project(&project(p, m + 1).unwrap(), m).unwrap();
                assert_eq!(two, project(p, m).unwrap(), "p = {p:?}, M = {m}");
            }
        }
    }
}

#[test]
fn labels_distinct_on_every_cell() {
    for m in 0..=3u32 {
        for n in 0..=4u32 {
            // every size-2^M cell of G_{M+4}
            let s = 1u64 << (m + n);
            for ci in 0..16u64 {
                for cj in 0..16 - ci {
                    if !cell_is_in_gasket(ci, cj) {
                        continue;
                    }
                    let corners = [(ci * s, cj * s), ((ci + 1) * s, cj * s), (ci * s, (cj + 1) * s)];
                    let labels: HashSet<_> = corners
                        .iter()
                        .map(|&(i, j)| vertex_label(&LatticePoint::new(i, j, n), m).unwrap())
                        .collect();
                    assert_eq!(labels.len(), 3, "cell ({ci},{cj}) M={m} n={n}");
                }
            }
        }
    }
}

#[test]
fn k1_fibers_have_at_most_three_points() {
    let base = GasketMesh::build(1, 2).unwrap();
    for q in base.vertices() {
        let f = fiber(q, 1, 1).unwrap();
        assert!(f.points.len() <= 3, "{q:?}");
        assert_eq!(f.total_multiplicity(), 3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn distance_to_origin_is_i_plus_j(m in 0u32..5, n in 0u32..3, k in 0usize..1_000_000) {
        let mesh = GasketMesh::build(m, n).unwrap();
        let p = mesh.vertex(k % mesh.vertex_count());
        prop_assert_eq!(gasket_distance(&p, &LatticePoint::ORIGIN), Ratio::new((p.i + p.j) as i128, 1i128 << n));
    }

    #[test]
    fn bfs_matches_exact_distance(m in 0u32..3, n in 0u32..3, a in 0usize..10_000, b in 0usize..10_000) {
        let mesh = GasketMesh::build(m, n).unwrap();
        let p = mesh.vertex(a % mesh.vertex_count());
        let q = mesh.vertex(b % mesh.vertex_count());
        prop_assert_eq!(geodesic_distance(&p, &q, &mesh).unwrap(), gasket_distance(&p, &q));
    }

    #[test]
    fn projection_is_idempotent_and_exact(m in 0u32..3, n in 0u32..3, k in 0usize..100_000) {
        let mesh = GasketMesh::build(m + 2, n).unwrap();
        let base = GasketMesh::build(m, n).unwrap();
        let p = mesh.vertex(k % mesh.vertex_count());
        let q = project(&p, m).unwrap();
        prop_assert!(base.contains(&q));
        prop_assert_eq!(project(&q, m).unwrap(), q);
        if let Ok(l) = vertex_label(&p, m) {
            prop_assert_eq!(vertex_label(&q, m).unwrap(), l);
        }
    }

    #[test]
    fn fibers_project_back(m in 0u32..3, n in 0u32..2, k in 0usize..10_000, shells in 1u32..3) {
        let base = GasketMesh::build(m, n).unwrap();
        let q = base.vertex(k % base.vertex_count());
        let f = fiber(&q, m, shells).unwrap();
        prop_assert_eq!(f.total_multiplicity(), 3u64.pow(shells));
        for fp in &f.points {
            prop_assert_eq!(project(&fp.point, m).unwrap(), q);
        }
    }
}

#[test]
fn collar_binary_radii() {
    let one = Ratio::from_integer(1);
    assert_eq!(collar_measure(1, one).unwrap(), Ratio::from_integer(2));
    assert_eq!(collar_measure(2, one).unwrap(), Ratio::from_integer(4));
    assert_eq!(collar_measure(1, Ratio::new(1, 2)).unwrap(), Ratio::new(4, 3));
}
