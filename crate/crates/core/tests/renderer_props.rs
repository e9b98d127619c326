use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxrecon::geometry::{Aabb, Ray, Vec3};
use voxrecon::renderer::{self, alpha_with_grad, composite, neus_alpha, GradientEstimator, RenderConfig};
use voxrecon::scene_synth::bake_grid;
use voxrecon::{AnalyticScene, Error, RadianceConfig, RadianceParams};

proptest! {
    #[test]
    fn alpha_is_a_probability(
        f in -2.0f64..2.0,
        cos in -3.0f64..3.0,
        delta in 1e-4f64..0.5,
        s in 0.1f64..5e3,
    ) {
        let a = neus_alpha(f, cos, delta, s);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn weights_sum_to_at_most_one(alphas in prop::collection::vec(-0.5f64..1.5, 1..64)) {
        let colors = vec![[0.5; 3]; alphas.len()];
        let c = composite(&alphas, &colors, [0.0; 3]).unwrap();
        prop_assert!(c.weights.iter().sum::<f64>() <= 1.0 + 1e-6);
        prop_assert!(c.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(c.transmittance.windows(2).all(|t| t[1] <= t[0]));
        prop_assert_eq!(c.transmittance[0], 1.0);
    }

    #[test]
    fn alpha_partials_match_differences(
        f in -0.3f64..0.3,
        cos in -1.0f64..-0.05,
        delta in 0.005f64..0.05,
        s in 5.0f64..200.0,
    ) {
        let g = alpha_with_grad(f, cos, delta, s);
        prop_assume!(g.alpha > 1e-6 && g.alpha < 1.0 - 1e-6);
        let h = 1e-7;
        let df = (neus_alpha(f + h, cos, delta, s) - neus_alpha(f - h, cos, delta, s)) / (2.0 * h);
        let dc = (neus_alpha(f, cos + h, delta, s) - neus_alpha(f, cos - h, delta, s)) / (2.0 * h);
        let ds = (neus_alpha(f, cos, delta, s + h * s) - neus_alpha(f, cos, delta, s - h * s)) / (2.0 * h * s);
        let tol = |x: f64| 1e-4 * (1.0 + x.abs());
        prop_assert!((g.d_f - df).abs() < tol(df), "{} vs {}", g.d_f, df);
        prop_assert!((g.d_cos - dc).abs() < tol(dc), "{} vs {}", g.d_cos, dc);
        prop_assert!((g.d_s - ds).abs() < tol(ds), "{} vs {}", g.d_s, ds);
    }
}

#[test]
fn composite_examples() {
    let c = composite(&[1.0, 0.7], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [0.0, 0.0, 1.0]).unwrap();
    assert_eq!(c.color, [1.0, 0.0, 0.0]);
    assert_eq!(c.weights, vec![1.0, 0.0]);
    let e = composite(&[0.0; 4], &[[0.3; 3]; 4], [0.1, 0.2, 0.3]).unwrap();
    assert_eq!(e.color, [0.1, 0.2, 0.3]);
    assert_eq!(e.opacity, 0.0);
}

fn sphere_setup() -> (voxrecon::SdfGrid, RadianceParams) {
    let scene = AnalyticScene::sphere();
    let grid = bake_grid(&scene, 32).unwrap();
    let cfg = RadianceConfig {
        levels: 2,
        log2_table_size: 8,
        ..RadianceConfig::default()
    };
    let radiance = RadianceParams::new(cfg, scene.aabb, 5).unwrap();
    (grid, radiance)
}

#[test]
fn weight_peak_sits_at_the_surface() {
    let (grid, radiance) = sphere_setup();
    let normals = grid.vertex_gradients().unwrap();
    let config = RenderConfig {
        n_samples: 256,
        ..RenderConfig::default()
    };
    for (origin, target) in [
        (Vec3::new(-2.0, 0.1, 0.05), Vec3::zeros()),
        (Vec3::new(1.5, 1.2, -0.9), Vec3::new(0.1, -0.1, 0.0)),
    ] {
        let ray = Ray::new(origin, target - origin);
        let r = renderer::render_ray::<ChaCha8Rng>(&grid, &normals, &radiance, 300f64.ln(), &ray, &config, None)
            .unwrap();
        let hit = AnalyticScene::sphere().trace(&ray).unwrap();
        let (k, _) = r
            .weights()
            .enumerate()
            .fold((0, -1.0), |best, (i, w)| if w > best.1 { (i, w) } else { best });
        let delta = r.segments.delta[k];
        assert!((r.segments.t[k] - hit).abs() <= delta, "peak {} vs hit {hit}", r.segments.t[k]);
        assert!(r.opacity > 0.99);
    }
}

#[test]
fn miss_and_outside_rays() {
    let (grid, radiance) = sphere_setup();
    let normals = grid.vertex_gradients().unwrap();
    let config = RenderConfig {
        background: [0.25, 0.5, 0.75],
        ..RenderConfig::default()
    };
    let outside = Ray::new(Vec3::new(-3.0, 2.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
    let r = renderer::render_ray::<ChaCha8Rng>(&grid, &normals, &radiance, 100f64.ln(), &outside, &config, None);
    assert!(matches!(r, Err(Error::NoIntersection)));
    let grazing = Ray::new(Vec3::new(-2.0, 0.9, 0.0), Vec3::new(1.0, 0.0, 0.0));
    let r = renderer::render_ray::<ChaCha8Rng>(&grid, &normals, &radiance, 100f64.ln(), &grazing, &config, None)
        .unwrap();
    assert!(r.opacity < 1e-3);
    for k in 0..3 {
        assert!((r.color[k] - config.background[k]).abs() < 1e-3);
    }
}

#[test]
fn rendering_is_deterministic() {
    let (grid, radiance) = sphere_setup();
    let normals = grid.vertex_gradients().unwrap();
    let ray = Ray::new(Vec3::new(-2.0, 0.2, 0.3), Vec3::new(1.0, -0.1, -0.1));
    for est in [GradientEstimator::Analytical, GradientEstimator::Interpolated] {
        let config = RenderConfig {
            gradient: est,
            ..RenderConfig::default()
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            renderer::render_ray(&grid, &normals, &radiance, 50f64.ln(), &ray, &config, Some(&mut rng)).unwrap()
        };
        let (a, b, c) = (run(3), run(3), run(4));
        assert_eq!(a.color, b.color);
        assert_eq!(a.segments.t, b.segments.t);
        assert_ne!(a.segments.t, c.segments.t);
    }
}

#[test]
fn stratified_samples_stay_in_their_strata() {
    let aabb = Aabb::cube([0.0; 3], 1.0);
    let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seg = renderer::sample_ray(&ray, &aabb, 3, 64, Some(&mut rng)).unwrap();
    assert!((seg.near - 1.0).abs() < 1e-12 && (seg.far - 3.0).abs() < 1e-12);
    for (i, t) in seg.t.iter().enumerate() {
        let lo = seg.near + i as f64 * seg.delta[i];
        assert!(*t > lo && *t < lo + seg.delta[i]);
    }
}
