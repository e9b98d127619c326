use std::collections::HashSet;

use proptest::prelude::*;
use voxrecon::geometry::{Aabb, Vec3};
use voxrecon::meshing::{chamfer, marching_cubes, mean_distance_to, sample_surface, KdTree};
use voxrecon::scene_synth::{bake_grid, sample_analytic_surface};
use voxrecon::{AnalyticScene, SdfGrid, TriangleMesh};

fn euler_characteristic(mesh: &TriangleMesh) -> i64 {
    let mut edges = HashSet::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            edges.insert((a.min(b), a.max(b)));
        }
    }
    mesh.vertices.len() as i64 - edges.len() as i64 + mesh.triangles.len() as i64
}

fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (one(a, b) + one(b, a))
}

#[test]
fn sphere_mesh_lies_on_the_surface() {
    let grid = SdfGrid::from_fn(3, &[64; 3], &[-1.0; 3], 2.0 / 63.0, |p| p.norm() - 0.5).unwrap();
    let eps = grid.spacing();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    let worst = mesh.vertices.iter().map(|v| (v.norm() - 0.5).abs()).fold(0.0, f64::max);
    assert!(worst < eps * eps, "{worst} vs eps² {}", eps * eps);
    assert_eq!(mesh.non_manifold_edges(), 0);
    assert_eq!(euler_characteristic(&mesh), 2);
    let area = mesh.total_area();
    let exact = 4.0 * std::f64::consts::PI * 0.25;
    assert!((area - exact).abs() / exact < 0.01);
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(t);
        assert!(mesh.face_normal(t).dot(&((a + b + c) / 3.0)) > 0.0);
    }
}

#[test]
fn torus_has_genus_one() {
    let scene = AnalyticScene::torus();
    let grid = bake_grid(&scene, 48).unwrap();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    assert_eq!(mesh.non_manifold_edges(), 0);
    assert_eq!(euler_characteristic(&mesh), 0);
}

#[test]
fn level_shift_moves_the_surface() {
    let grid = SdfGrid::from_fn(3, &[40; 3], &[-1.0; 3], 2.0 / 39.0, |p| p.norm() - 0.5).unwrap();
    let mesh = marching_cubes(&grid, 0.1).unwrap();
    let mean = mesh.vertices.iter().map(|v| v.norm()).sum::<f64>() / mesh.vertices.len() as f64;
    assert!((mean - 0.6).abs() < 2e-3);
}

#[test]
fn reconstruction_of_baked_scene_is_close() {
    let scene = AnalyticScene::rounded_box();
    let grid = bake_grid(&scene, 48).unwrap();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    let a = sample_surface(&mesh, 5000, 1).unwrap();
    let b = sample_analytic_surface(&scene, 5000, 2).unwrap();
    assert!(chamfer(&a, &b).unwrap() < grid.spacing());
}

#[test]
fn ply_file_round_trip() {
    let grid = SdfGrid::from_fn(3, &[12; 3], &[-1.0; 3], 2.0 / 11.0, |p| p.norm() - 0.6).unwrap();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ply");
    mesh.save_ply(&path).unwrap();
    let back = TriangleMesh::load_ply(&path).unwrap();
    assert_eq!(back.triangles, mesh.triangles);
    for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
        assert!((a - b).norm() < 1e-6);
    }
}

#[test]
fn area_weighted_sampling_passes_chi_square() {
    // two triangles with areas in ratio 1:3
    let mesh = TriangleMesh {
        vertices: vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(2.0, 2.0, 0.0),
        ],
        triangles: vec![[0, 1, 2], [3, 4, 5]],
        normals: None,
    };
    let n = 20000;
    let pts = sample_surface(&mesh, n, 11).unwrap();
    let first = pts.iter().filter(|p| p.x < 1.5).count() as f64;
    let expected = [n as f64 / 7.0, 6.0 * n as f64 / 7.0];
    let observed = [first, n as f64 - first];
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    // 1 degree of freedom, p = 0.001
    assert!(chi2 < 10.83, "chi² = {chi2}");
    for p in &pts {
        let in_first = p.x >= 0.0 && p.y >= 0.0 && p.x + p.y <= 1.0 + 1e-12;
        let in_second = p.x >= 2.0 && p.y >= 0.0 && p.y <= 2.0 * (5.0 - p.x) / 3.0 + 1e-12;
        assert!(in_first || in_second);
    }
}

#[test]
fn chamfer_edge_cases() {
    let a = vec![Vec3::new(0.0, 0.0, 0.0)];
    assert!(chamfer(&a, &[]).is_err());
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    let b = vec![Vec3::new(3.0, 4.0, 0.0)];
    assert_eq!(chamfer(&a, &b).unwrap(), 5.0);
    assert!(mean_distance_to(&[], &b).is_err());
}

fn arb_points(n: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..n)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
}

proptest! {
    #[test]
    fn kd_tree_matches_brute_force(pts in arb_points(200), qs in arb_points(20)) {
        let tree = KdTree::new(&pts);
        for q in &qs {
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(tree.nearest_distance(q), brute);
        }
    }

    #[test]
    fn chamfer_matches_brute_force(a in arb_points(100), b in arb_points(100)) {
        let c = chamfer(&a, &b).unwrap();
        prop_assert!((c - brute_chamfer(&a, &b)).abs() < 1e-12);
        prop_assert!((c - chamfer(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mesh_vertices_stay_in_the_grid_box(r in 4usize..12, cx in -0.3f64..0.3, rad in 0.2f64..0.6) {
        let grid = SdfGrid::from_fn(3, &[r; 3], &[-1.0; 3], 2.0 / (r - 1) as f64, |p| (p - Vec3::new(cx, 0.0, 0.0)).norm() - rad).unwrap();
        let mesh = marching_cubes(&grid, 0.0).unwrap();
        mesh.validate().unwrap();
        let bb = Aabb::cube([0.0; 3], 1.0);
        prop_assert!(mesh.vertices.iter().all(|v| bb.contains(v, 1e-12)));
    }
}
