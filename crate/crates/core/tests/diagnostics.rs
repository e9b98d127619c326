use proptest::prelude::*;
use voxrecon::diagnostics::{probe_junction, CircleExperiment, JunctionFace, TRACE_HEADER};
use voxrecon::{GradientEstimator, SdfGrid, Vec3};

const RES: usize = 5;
const SPACING: f64 = 0.25;

fn grid_with(values: Vec<f32>) -> SdfGrid {
    SdfGrid::new(3, &[RES; 3], &[0.0; 3], SPACING).unwrap().with_values(values).unwrap()
}

fn face_point(axis: usize, index: usize, t: [f64; 2]) -> Vec3 {
    let mut p = Vec3::zeros();
    let mut k = 0;
    for a in 0..3 {
        p[a] = if a == axis {
            index as f64 * SPACING
        } else {
            k += 1;
            t[k - 1] * (RES - 1) as f64 * SPACING
        };
    }
    p
}

fn face_strategy() -> impl Strategy<Value = (Vec<f32>, usize, usize, [f64; 2])> {
    (
        prop::collection::vec(-1.0f32..1.0, RES * RES * RES),
        0..3usize,
        1..RES - 1,
        [0.01f64..0.99, 0.01f64..0.99],
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolated_limits_agree((values, axis, index, t) in face_strategy()) {
        let grid = grid_with(values);
        let normals = grid.vertex_gradients().unwrap();
        let probe = probe_junction(&grid, &normals, JunctionFace { axis, index }, &face_point(axis, index, t)).unwrap();
        prop_assert!(probe.interpolated_gap() < 1e-12);
    }

    #[test]
    fn analytical_jump_is_normal_only((values, axis, index, t) in face_strategy()) {
        let grid = grid_with(values);
        let normals = grid.vertex_gradients().unwrap();
        let probe = probe_junction(&grid, &normals, JunctionFace { axis, index }, &face_point(axis, index, t)).unwrap();
        let jump = probe.analytical_upper - probe.analytical_lower;
        for a in (0..3).filter(|&a| a != axis) {
            prop_assert!(jump[a].abs() < 1e-9, "tangential jump {} on axis {a}", jump[a]);
        }
    }

    #[test]
    fn analytical_limits_match_one_sided_differences((values, axis, index, t) in face_strategy()) {
        let grid = grid_with(values);
        let normals = grid.vertex_gradients().unwrap();
        let p = face_point(axis, index, t);
        let probe = probe_junction(&grid, &normals, JunctionFace { axis, index }, &p).unwrap();
        let h = 1e-6 * SPACING;
        let mut e = Vec3::zeros();
        e[axis] = h;
        let f0 = grid.value_at(&p).unwrap();
        let below = (f0 - grid.value_at(&(p - e)).unwrap()) / h;
        let above = (grid.value_at(&(p + e)).unwrap() - f0) / h;
        prop_assert!((below - probe.analytical_lower[axis]).abs() < 1e-5);
        prop_assert!((above - probe.analytical_upper[axis]).abs() < 1e-5);
    }
}

#[test]
fn probe_lists_cube_corners() {
    let grid = grid_with((0..RES * RES * RES).map(|i| i as f32).collect());
    let normals = grid.vertex_gradients().unwrap();
    let p = face_point(2, 2, [0.3, 0.6]);
    let probe = probe_junction(&grid, &normals, JunctionFace { axis: 2, index: 2 }, &p).unwrap();
    assert_eq!(probe.on_face.len(), 4);
    assert_eq!(probe.lower_off_face.len(), 4);
    assert_eq!(probe.upper_off_face.len(), 4);
    for &v in &probe.on_face {
        assert_eq!(grid.coords(v)[2], 2);
    }
    for &v in &probe.lower_off_face {
        assert_eq!(grid.coords(v)[2], 1);
    }
    for &v in &probe.upper_off_face {
        assert_eq!(grid.coords(v)[2], 3);
    }
    // a linear field has no jump at all
    assert!(probe.analytical_gap() < 1e-9);
}

#[test]
fn probe_rejects_off_face_points() {
    let grid = grid_with(vec![0.0; RES * RES * RES]);
    let normals = grid.vertex_gradients().unwrap();
    let p = face_point(0, 2, [0.5, 0.5]) + Vec3::new(0.1, 0.0, 0.0);
    assert!(probe_junction(&grid, &normals, JunctionFace { axis: 0, index: 2 }, &p).is_err());
}

#[test]
fn circle_trace_shape() {
    let ex = CircleExperiment::new().unwrap();
    let trace = ex.trace(96, true).unwrap();
    assert_eq!(trace.len(), 96);
    assert!(trace.t.windows(2).all(|w| w[0] < w[1]));
    for est in [GradientEstimator::Analytical, GradientEstimator::Interpolated] {
        let w = trace.weights(est);
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
        // the ray crosses the circle, so most of its weight is deposited
        assert!(w.iter().sum::<f64>() > 0.9);
    }
    let csv = trace.to_csv();
    assert_eq!(csv.lines().next(), Some(TRACE_HEADER));
    assert_eq!(csv.lines().count(), 97);
}
