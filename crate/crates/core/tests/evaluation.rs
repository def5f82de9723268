use nalgebra::{Matrix4, Vector3, Vector4};
use pointpose_core::evaluation::{add_error, adds_error, auc, chamfer, EvalError};
use pointpose_core::geometry::{Pose, Twist};
use pointpose_core::tsdf::TriangleMesh;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut v = || Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    Pose::exp(&Twist::new(v(), v()))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1))).collect()
}

fn homogeneous(p: &Pose) -> Matrix4<f64> {
    Matrix4::from_row_slice(&p.to_row_major())
}

fn apply(m: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
    Vector3::new(h.x, h.y, h.z)
}

fn icosphere(radius: f64, levels: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|a| Vector3::new(a[0], a[1], a[2]).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..levels {
        let mut cache = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, v: &mut Vec<Vector3<f64>>| {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let (ab, bc, ca) = (mid(a, b, &mut v), mid(b, c, &mut v), mid(c, a, &mut v));
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    TriangleMesh { vertices: v.into_iter().map(|p| p * radius).collect(), triangles: f, colors: Vec::new() }
}

#[test]
fn add_is_zero_for_identical_poses() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = random_points(&mut rng, 50);
    let p = random_pose(&mut rng);
    assert_eq!(add_error(&model, &p, &p).unwrap(), 0.0);
    assert_eq!(adds_error(&model, &p, &p).unwrap(), 0.0);
}

#[test]
fn add_of_one_centimeter_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = random_points(&mut rng, 100);
    let gt = random_pose(&mut rng);
    let est = Pose::from_translation(Vector3::new(0.0, 0.01, 0.0)).compose(&gt);
    assert!((add_error(&model, &est, &gt).unwrap() - 0.01).abs() < 1e-15);
}

#[test]
fn add_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let model = random_points(&mut rng, 100);
        let (est, gt) = (random_pose(&mut rng), random_pose(&mut rng));
        let (me, mg) = (homogeneous(&est), homogeneous(&gt));
        let mut sum = 0.0;
        for p in &model {
            let d = apply(&me, p) - apply(&mg, p);
            sum += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        }
        assert!((add_error(&model, &est, &gt).unwrap() - sum / 100.0).abs() < 1e-12);
    }
}

#[test]
fn adds_matches_brute_force_nearest_neighbor() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let model = random_points(&mut rng, 100);
        let (est, gt) = (random_pose(&mut rng), random_pose(&mut rng));
        let (me, mg) = (homogeneous(&est), homogeneous(&gt));
        let mut sum = 0.0;
        for p in &model {
            let q = apply(&me, p);
            let mut best = f64::INFINITY;
            for r in &model {
                best = best.min((q - apply(&mg, r)).norm());
            }
            sum += best;
        }
        assert!((adds_error(&model, &est, &gt).unwrap() - sum / 100.0).abs() < 1e-12);
    }
}

#[test]
fn symmetric_pair_swap() {
    let model = vec![Vector3::new(0.05, 0.0, 0.0), Vector3::new(-0.05, 0.0, 0.0)];
    let gt = Pose::identity();
    let est = Pose::from_axis_angle(Vector3::new(0.0, 0.0, std::f64::consts::PI), Vector3::zeros());
    assert!(add_error(&model, &est, &gt).unwrap() > 0.09);
    assert!(adds_error(&model, &est, &gt).unwrap() < 1e-15);
}

#[test]
fn empty_model_is_rejected() {
    let p = Pose::identity();
    assert!(matches!(add_error(&[], &p, &p), Err(EvalError::EmptyModel)));
    assert!(matches!(adds_error(&[], &p, &p), Err(EvalError::EmptyModel)));
}

#[test]
fn auc_extremes() {
    assert_eq!(auc(&[0.0; 10], 0.1), 100.0);
    assert_eq!(auc(&[0.1, 0.5, 3.0], 0.1), 0.0);
}

#[test]
fn auc_of_uniform_errors_is_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let errors: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..0.1)).collect();
    assert!((auc(&errors, 0.1) - 50.0).abs() < 1.0);
}

#[test]
fn chamfer_of_mesh_with_itself() {
    let m = icosphere(1.0, 3);
    assert!(chamfer(&m, &m, 2000, 9).unwrap() < 1e-12);
}

#[test]
fn chamfer_of_offset_spheres() {
    let (a, b) = (icosphere(1.0, 4), icosphere(1.01, 4));
    let d = chamfer(&a, &b, 5000, 10).unwrap();
    assert!((d - 0.01).abs() < 0.001, "chamfer {d}");
}

#[test]
fn chamfer_invariant_to_joint_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (icosphere(0.1, 2), icosphere(0.12, 2));
    let d0 = chamfer(&a, &b, 1000, 12).unwrap();
    let g = random_pose(&mut rng);
    let d1 = chamfer(&a.transformed(&g), &b.transformed(&g), 1000, 12).unwrap();
    assert!((d0 - d1).abs() < 1e-9);
}

#[test]
fn chamfer_rejects_empty_mesh() {
    let empty = TriangleMesh { vertices: Vec::new(), triangles: Vec::new(), colors: Vec::new() };
    assert!(matches!(chamfer(&empty, &icosphere(1.0, 0), 10, 0), Err(EvalError::EmptyMesh)));
}

proptest! {
    #[test]
    fn adds_never_exceeds_add(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_points(&mut rng, 40);
        let (est, gt) = (random_pose(&mut rng), random_pose(&mut rng));
        prop_assert!(adds_error(&model, &est, &gt).unwrap() <= add_error(&model, &est, &gt).unwrap() + 1e-15);
    }

    #[test]
    fn auc_monotone_in_each_error(
        errors in prop::collection::vec(0.0f64..0.2, 1..40),
        idx in any::<prop::sample::Index>(),
        bump in 0.0f64..0.1,
    ) {
        let i = idx.index(errors.len());
        let mut worse = errors.clone();
        worse[i] += bump;
        prop_assert!(auc(&worse, 0.1) <= auc(&errors, 0.1) + 1e-12);
        let a = auc(&errors, 0.1);
        prop_assert!((0.0..=100.0).contains(&a));
    }
}
