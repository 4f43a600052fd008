use pose6d::geometry::rot_z;
use pose6d::meshes;
use pose6d::registration::{kabsch_points, nearest_neighbor_linear, KdTree};
use pose6d::render::{render, render_window, PixelRect};
use pose6d::{CameraIntrinsics, Pose, Vec3};
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(1.0), 0.0..std::f64::consts::PI, vec3(500.0)).prop_filter_map(
        "zero axis",
        |(axis, angle, t)| {
            (axis.norm() > 1e-3).then(|| Pose::from_axis_angle(&axis.normalize(), angle, t))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn compose_with_inverse_is_identity(p in pose(), x in vec3(200.0)) {
        let q = p.compose(&p.inverse());
        prop_assert!((q.apply(&x) - x).norm() < 1e-9);
        prop_assert!((p.inverse().apply(&p.apply(&x)) - x).norm() < 1e-9);
    }

    #[test]
    fn compose_applies_right_first(a in pose(), b in pose(), x in vec3(200.0)) {
        prop_assert!((a.compose(&b).apply(&x) - a.apply(&b.apply(&x))).norm() < 1e-9);
    }

    #[test]
    fn row_major_round_trip(p in pose()) {
        let q = Pose::from_row_major(&p.to_row_major()).unwrap();
        prop_assert_eq!(p.to_row_major(), q.to_row_major());
    }

    #[test]
    fn kabsch_recovers_exact_pose(p in pose(), pts in prop::collection::vec(vec3(100.0), 4..40)) {
        let dst: Vec<Vec3> = pts.iter().map(|x| p.apply(x)).collect();
        let est = kabsch_points(&pts, &dst).unwrap();
        for (s, d) in pts.iter().zip(&dst) {
            prop_assert!((est.apply(s) - d).norm() < 1e-6);
        }
    }

    #[test]
    fn kabsch_never_reflects(
        src in prop::collection::vec(vec3(100.0), 3..20),
        dst in prop::collection::vec(vec3(100.0), 20),
    ) {
        if let Ok(p) = kabsch_points(&src, &dst[..src.len()]) {
            prop_assert!((p.rotation().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kd_tree_matches_linear_scan(
        pts in prop::collection::vec(vec3(50.0), 1..200),
        q in vec3(80.0),
    ) {
        let tree = KdTree::build(&pts);
        prop_assert_eq!(tree.nearest(&q).unwrap(), nearest_neighbor_linear(&pts, &q).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn window_render_matches_full_frame(
        angle in 0.0..std::f64::consts::TAU,
        x in -60.0..60.0f64,
        u0 in 0usize..150,
        v0 in 0usize..110,
        w in 1usize..170,
        h in 1usize..130,
    ) {
        let intr = CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
        let model = meshes::cuboid(1, 60.0, 40.0, 30.0, 2);
        let p = Pose::from_translation(Vec3::new(x, 5.0, 500.0)).compose(&rot_z(angle));
        let full = render(&model, &p, &intr, true).unwrap();
        let rect = PixelRect { u0, v0, u1: (u0 + w - 1).min(319), v1: (v0 + h - 1).min(239) };
        let win = render_window(&model, &p, &intr, rect, true);
        let oc = full.object_coords.as_ref().unwrap();
        for v in rect.v0..=rect.v1 {
            for u in rect.u0..=rect.u1 {
                prop_assert_eq!(win.depth_at(u, v), full.depth.get(u, v));
                prop_assert_eq!(win.coord_at(u, v), oc.get(u, v));
            }
        }
    }
}
