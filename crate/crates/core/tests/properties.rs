use aerograph_core::archive::{ArchiveMeta, RolloutArchive};
use aerograph_core::consts::L_REF;
use aerograph_core::coupling::IdwStencil;
use aerograph_core::eval::{ke_ratio, mde, metric_series, msd_dispersion_from, summarize, time_average};
use aerograph_core::mesh::graph::N_STATE;
use aerograph_core::mesh::room::{build_room_mesh, RoomSpec};
use aerograph_core::mesh::{build_eulerian_graph, parse_polymesh, write_polymesh, EulerianGraph};
use aerograph_core::nn::optim::cosine_lr;
use aerograph_core::parcel::{build_radius_graph, local_frame, radius_graph_brute, Frame};
use aerograph_core::physics::{
    cunningham, nondim_groups, stokes_drag, wells_evaporate, AirProperties, CcConvention, DropletProperties,
    RoomGeometry, RosinRammler,
};
use aerograph_core::projection::{project_velocity, GraphOperators};
use aerograph_core::rollout::verlet_step;
use aerograph_core::spatial::PointGrid;
use aerograph_core::Vec2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec2(lo: f64, hi: f64) -> impl Strategy<Value = Vec2> {
    (lo..hi, lo..hi).prop_map(|(x, y)| Vec2::new(x, y))
}

fn box_graph(nx: usize, ny: usize) -> EulerianGraph {
    let mesh = build_room_mesh(&RoomSpec::open_box(nx, ny, 1.0, 0.8)).unwrap();
    let n = mesh.n_cells();
    build_eulerian_graph(&mesh, vec![[0.0; N_STATE]; n], Vec2::new(0.0, -0.1)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn polymesh_round_trip(nx in 2usize..10, ny in 2usize..10, obstacles in any::<bool>()) {
        let spec = RoomSpec { obstacles, ..RoomSpec::with_cells(nx * 2, ny * 2) };
        let mesh = build_room_mesh(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_polymesh(&mesh, dir.path()).unwrap();
        prop_assert_eq!(parse_polymesh(dir.path()).unwrap(), mesh);
    }

    #[test]
    fn directed_edges_are_antisymmetric(nx in 2usize..9, ny in 2usize..9) {
        let g = box_graph(nx, ny);
        let idx: std::collections::HashMap<(u32, u32), usize> =
            g.edges.iter().enumerate().map(|(k, &e)| (e, k)).collect();
        prop_assert_eq!(idx.len(), g.edges.len());
        for (k, &(i, j)) in g.edges.iter().enumerate() {
            let r = idx[&(j, i)];
            let (a, b) = (g.edge_geom[k], g.edge_geom[r]);
            for c in [0, 1, 4, 5] {
                prop_assert_eq!(a[c], -b[c]);
            }
            prop_assert_eq!(a[2], b[2]);
            prop_assert_eq!(a[3], b[3]);
        }
    }

    #[test]
    fn radius_graph_matches_brute_force(
        pts in prop::collection::vec(vec2(0.0, 3.0), 0..300),
        seed in any::<u64>(),
        r_c in 0.05f64..0.6,
    ) {
        let alive: Vec<bool> = (0..pts.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i % 3 == 0).collect();
        let mut fast = build_radius_graph(&pts, &alive, r_c).unwrap().edges;
        let mut slow = radius_graph_brute(&pts, &alive, r_c);
        fast.sort_unstable();
        slow.sort_unstable();
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn local_frame_is_se2_invariant(
        xi in vec2(-2.0, 2.0),
        vi in vec2(-1.0, 1.0),
        d in vec2(-0.1, 0.1),
        angle in -3.2f64..3.2,
        shift in vec2(-5.0, 5.0),
    ) {
        prop_assume!(vi.norm() > 1e-3);
        let xj = xi + d;
        let a = local_frame(xi, vi, xj, 0.1);
        let b = local_frame(xi.rotate(angle) + shift, vi.rotate(angle), xj.rotate(angle) + shift, 0.1);
        for c in 0..3 {
            prop_assert!((a[c] - b[c]).abs() < 1e-12, "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn idw_is_linear_bounded_and_finite(
        cells in prop::collection::vec(vec2(0.0, 2.0), 4..60),
        queries in prop::collection::vec(vec2(0.0, 2.0), 1..20),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..cells.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..cells.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut qs = queries.clone();
        qs.push(cells[0]);
        let grid = PointGrid::new(cells.clone());
        let st = IdwStencil::build(&grid, &qs);
        let mix: Vec<f64> = f.iter().zip(&g).map(|(a, b)| alpha * a + beta * b).collect();
        let (fi, gi, mi) = (st.interpolate(&f), st.interpolate(&g), st.interpolate(&mix));
        for p in 0..qs.len() {
            prop_assert!((mi[p] - (alpha * fi[p] + beta * gi[p])).abs() < 1e-12);
            prop_assert!(fi[p].is_finite());
            let vals: Vec<f64> = st.cells[p * st.k..(p + 1) * st.k].iter().map(|&c| f[c]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fi[p] >= lo - 1e-12 && fi[p] <= hi + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cunningham_above_one_and_decreasing(d in 1e-8f64..1e-4, f in 1.001f64..3.0) {
        let air = AirProperties::default();
        let (a, b) = (cunningham(d, &air).unwrap(), cunningham(d * f, &air).unwrap());
        prop_assert!(a > 1.0 && b > 1.0);
        prop_assert!(a > b);
    }

    #[test]
    fn wells_monotone_and_floored(d0 in 1e-6f64..1e-4, t in 0.0f64..10.0, dt in 0.0f64..10.0, k in 1e-10f64..1e-8) {
        let (a, b) = (wells_evaporate(d0, t, k), wells_evaporate(d0, t + dt, k));
        prop_assert!(b <= a);
        prop_assert!(b >= d0 / 2.0 * (1.0 - 1e-15));
    }

    #[test]
    fn drag_is_parallel_to_slip(d in 1e-6f64..5e-5, slip in vec2(-1e-3, 1e-3), s in 1.5f64..3.0) {
        prop_assume!(slip.norm() > 1e-9);
        let (air, drop) = (AirProperties::default(), DropletProperties::default());
        let a = stokes_drag(d, slip, &air, &drop, CcConvention::Physical).unwrap();
        prop_assert!(a.cross(slip).abs() <= 1e-12 * a.norm() * slip.norm());
        prop_assert!(a.dot(slip) > 0.0);
        // Near-Stokes: the finite-Re correction only adds drag.
        let a2 = stokes_drag(d, slip * s, &air, &drop, CcConvention::Physical).unwrap();
        prop_assert!(a2.norm() >= s * a.norm() * (1.0 - 1e-12));
        prop_assert!(rel(a2.norm(), s * a.norm()) < 0.02);
    }

    #[test]
    fn rosin_rammler_samples_in_range(seed in any::<u64>()) {
        let rr = RosinRammler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let d = rr.sample(&mut rng);
            prop_assert!((1e-6..=50e-6).contains(&d));
        }
    }

    #[test]
    fn peclet_independent_of_inlet_speed(v1 in 0.05f64..1.0, v2 in 0.05f64..1.0, u in 5.0f64..60.0) {
        let (geo, air, drop) = (RoomGeometry::default(), AirProperties::default(), DropletProperties::default());
        let a = nondim_groups(v1, u, 21.7e-6, &geo, &air, &drop).pe_t;
        let b = nondim_groups(v2, u, 21.7e-6, &geo, &air, &drop).pe_t;
        prop_assert!(rel(a, b) < 1e-3);
    }

    #[test]
    fn cosine_schedule_endpoints(lr0 in 1e-6f64..1e-2, n in 2usize..400) {
        prop_assert_eq!(cosine_lr(lr0, 0.01, 0, n), lr0);
        prop_assert!((cosine_lr(lr0, 0.01, n - 1, n) - 0.01 * lr0).abs() <= 1e-12 * lr0);
        for e in 1..n {
            prop_assert!(cosine_lr(lr0, 0.01, e, n) <= cosine_lr(lr0, 0.01, e - 1, n));
        }
    }

    #[test]
    fn verlet_linear_map_is_symplectic(k in 0.01f64..50.0, dt in 0.001f64..0.2) {
        // One step of x'' = -k x applied to the unit basis gives the map's columns.
        let step = |x: f64, v: f64| {
            let a = [Vec2::new(-k * x, 0.0)];
            let (x1, v1, _) =
                verlet_step(&[Vec2::new(x, 0.0)], &[Vec2::new(v, 0.0)], &a, |p| Ok(vec![p[0] * -k]), dt, 1.0).unwrap();
            (x1[0].x, v1[0].x)
        };
        let (m00, m10) = step(1.0, 0.0);
        let (m01, m11) = step(0.0, 1.0);
        prop_assert!((m00 * m11 - m01 * m10 - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn poisson_matrix_symmetric(nx in 3usize..9, ny in 3usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let ops = GraphOperators::new(&box_graph(nx, ny));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..ops.n_cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..ops.n_cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let (ax, ay) = (ops.poisson.matvec(&x), ops.poisson.matvec(&y));
        let (l, r) = (dot(&ax, &y), dot(&x, &ay));
        prop_assert!((l - r).abs() <= 1e-12 * l.abs().max(r.abs()).max(1.0));
    }

    #[test]
    fn projection_is_idempotent(nx in 3usize..8, ny in 3usize..8, seed in any::<u64>()) {
        use rand::Rng;
        let ops = GraphOperators::new(&box_graph(nx, ny));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<Vec2> = (0..ops.n_cells).map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let p1 = project_velocity(&ops, &u, 500, 1.0).unwrap().velocity;
        let p2 = project_velocity(&ops, &p1, 500, 1.0).unwrap().velocity;
        let n1: f64 = p1.iter().map(|v| v.norm_sq()).sum::<f64>().sqrt();
        let d: f64 = p1.iter().zip(&p2).map(|(a, b)| (*a - *b).norm_sq()).sum::<f64>().sqrt();
        prop_assert!(d <= 1e-6 * n1.max(1e-300));
    }
}

/// Random-walk archive of `n` parcels over `m` frames with some deaths.
fn walk_archive(n: usize, m: usize, seed: u64, shift: Vec2) -> RolloutArchive {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random_range(1.0..3.0), rng.random_range(1.0..2.0))).collect();
    let death: Vec<usize> = (0..n).map(|_| rng.random_range(m / 2..m + 5)).collect();
    let meta = ArchiveMeta {
        v_in: 0.1,
        u_mag: 30.0,
        theta: 20.0,
        seed,
        variant: "reference".into(),
        tracked: n as u32,
        extra: serde_json::Value::Null,
    };
    let mut a = RolloutArchive::new(meta);
    for f in 0..m {
        let alive: Vec<bool> = death.iter().map(|&d| f < d).collect();
        a.frames.push(Frame {
            time: 2.0 + 0.1 * f as f64,
            orig_id: (0..n as u32).collect(),
            position: pos.iter().map(|&p| p + shift).collect(),
            velocity: vec![Vec2::ZERO; n],
            diameter: vec![1e-5; n],
            alive,
            eulerian: None,
        });
        for p in &mut pos {
            *p = *p + Vec2::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        }
    }
    a
}

fn perturbed(a: &RolloutArchive, seed: u64, shift: Vec2) -> RolloutArchive {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = a.clone();
    b.meta.variant = "ELGIN".into();
    for f in &mut b.frames {
        for p in &mut f.position {
            *p = *p + shift + Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        }
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn msd_zero_at_origin_and_translation_invariant(seed in any::<u64>(), shift in vec2(-0.5, 0.5)) {
        let a = walk_archive(30, 25, seed, Vec2::ZERO);
        let b = walk_archive(30, 25, seed, shift);
        let (da, db) = (msd_dispersion_from(&a, 0.1, 3.0, 2.0).unwrap(), msd_dispersion_from(&b, 0.1, 3.0, 2.0).unwrap());
        prop_assert_eq!(da.msd_l[0], 0.0);
        prop_assert_eq!(da.msd_t[0], 0.0);
        for k in 0..da.msd_l.len() {
            prop_assert!((da.msd_l[k] - db.msd_l[k]).abs() < 1e-12);
            prop_assert!((da.msd_t[k] - db.msd_t[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn ke_ratio_invariant_under_rigid_translation(
        pts in prop::collection::vec((vec2(0.0, 4.0), vec2(-0.1, 0.1), vec2(-0.1, 0.1)), 1..40),
        shift in vec2(-2.0, 2.0),
    ) {
        let gp: Vec<Vec2> = pts.iter().map(|t| t.0).collect();
        let g: Vec<Vec2> = pts.iter().map(|t| t.0 + t.1).collect();
        let pp: Vec<Vec2> = pts.iter().map(|t| t.0 + t.2).collect();
        let p: Vec<Vec2> = pts.iter().map(|t| t.0 + t.1 + t.2 * 0.5).collect();
        let mask = vec![true; pts.len()];
        let s = |v: &[Vec2]| -> Vec<Vec2> { v.iter().map(|&x| x + shift).collect() };
        let a = ke_ratio(&pp, &p, &gp, &g, &mask, 0.1);
        let b = ke_ratio(&s(&pp), &s(&p), &s(&gp), &s(&g), &mask, 0.1);
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!(rel(a, b) < 1e-9),
            (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
        }
    }

    #[test]
    fn masking_a_parcel_only_removes_its_term(
        pts in prop::collection::vec((vec2(0.0, 4.0), vec2(-0.2, 0.2)), 2..40),
        k in any::<prop::sample::Index>(),
    ) {
        let gt: Vec<Vec2> = pts.iter().map(|t| t.0).collect();
        let pred: Vec<Vec2> = pts.iter().map(|t| t.0 + t.1).collect();
        let k = k.index(pts.len());
        let mut mask = vec![true; pts.len()];
        mask[k] = false;
        let drop = |v: &[Vec2]| -> Vec<Vec2> { v.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, &x)| x).collect() };
        let a = mde(&pred, &gt, &mask, L_REF).unwrap();
        let b = mde(&drop(&pred), &drop(&gt), &vec![true; pts.len() - 1], L_REF).unwrap();
        prop_assert!(rel(a, b) < 1e-12);
    }

    #[test]
    fn time_average_matches_unmasked_frames(seed in any::<u64>()) {
        let gt = walk_archive(20, 15, seed, Vec2::ZERO);
        let pred = perturbed(&gt, seed ^ 1, Vec2::new(0.01, 0.0));
        let s = metric_series(&pred, &gt, 0.1).unwrap();
        let sum = summarize(&s, &pred);
        let kept: Vec<Option<f64>> = s.mde.iter().zip(&s.masked).map(|(v, &m)| if m { None } else { *v }).collect();
        let direct = time_average(&kept);
        prop_assert_eq!(sum.mde_mean.is_some(), direct.is_some());
        if let (Some(a), Some(b)) = (sum.mde_mean, direct) {
            prop_assert!(rel(a, b) < 1e-12);
        }
    }
}
