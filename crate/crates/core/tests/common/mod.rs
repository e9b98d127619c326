//! Finite-difference oracles shared by the gradient tests and the
//! acceptance suite. Each returns the largest error relative to the
//! max-norm of the reference gradient.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxrecon::geometry::{Aabb, Ray, Vec3};
use voxrecon::radiance_field::{RadianceConfig, RadianceGrad, RadianceParams};
use voxrecon::regularizer;
use voxrecon::renderer::{self, GeometryGradList, GradientEstimator, RenderConfig};
use voxrecon::sdf_grid::SdfGrid;

pub fn rel_err(got: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(got.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    got.iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// Sphere SDF plus noise on an `r³` grid over `[-1, 1]³`.
pub fn noisy_sphere_grid(r: usize, noise: f64, seed: u64) -> SdfGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = SdfGrid::over_aabb(&Aabb::cube([0.0; 3], 1.0), r, 3).unwrap();
    g.fill_with(|p| p.norm() - 0.5);
    for v in g.values_mut() {
        *v += rng.gen_range(-noise..noise) as f32;
    }
    g
}

/// Central differences of `f` with respect to f32 parameters. The step is
/// divided by the perturbation actually stored, so f32 rounding of the
/// perturbed value does not bias the quotient.
pub fn fd_f32(params: &mut [f32], indices: &[usize], h: f64, mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let orig = params[i];
            params[i] = (orig as f64 + h) as f32;
            let hi = params[i] as f64;
            let lp = f(params);
            params[i] = (orig as f64 - h) as f32;
            let lo = params[i] as f64;
            let lm = f(params);
            params[i] = orig;
            (lp - lm) / (hi - lo)
        })
        .collect()
}

/// FD over grid values, rebuilding a grid for each evaluation.
pub fn fd_grid(grid: &SdfGrid, indices: &[usize], h: f64, f: impl Fn(&SdfGrid) -> f64) -> Vec<f64> {
    let mut g = grid.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = g.values()[i];
            g.values_mut()[i] = (orig as f64 + h) as f32;
            let hi = g.values()[i] as f64;
            let lp = f(&g);
            g.values_mut()[i] = (orig as f64 - h) as f32;
            let lo = g.values()[i] as f64;
            let lm = f(&g);
            g.values_mut()[i] = orig;
            (lp - lm) / (hi - lo)
        })
        .collect()
}

/// Analytical trilinear gradient against position differences at random
/// points kept away from cube faces.
pub fn oracle_analytical_gradient(seed: u64) -> f64 {
    let g = noisy_sphere_grid(6, 0.05, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
    let eps = g.spacing();
    let h = 1e-6 * eps;
    let mut got = Vec::new();
    let mut fd = Vec::new();
    for _ in 0..50 {
        let mut p = Vec3::zeros();
        for a in 0..3 {
            let cell = rng.gen_range(0..5) as f64;
            p[a] = -1.0 + (cell + rng.gen_range(0.1..0.9)) * eps;
        }
        let a = g.analytical_gradient(&p).unwrap();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let d = (g.value_at(&(p + e)).unwrap() - g.value_at(&(p - e)).unwrap()) / (2.0 * h);
            got.push(a[k]);
            fd.push(d);
        }
    }
    rel_err(&got, &fd)
}

/// `L = u · ∇ᵢf(x)` differentiated with respect to every vertex value.
pub fn oracle_interpolated_backprop(seed: u64) -> f64 {
    let g = noisy_sphere_grid(6, 0.05, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let p = Vec3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
        let u = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let grad = g.backprop_interpolated_gradient(&p, u).unwrap().to_dense(g.len());
        let all: Vec<usize> = (0..g.len()).collect();
        let fd = fd_grid(&g, &all, 1e-3, |gg| {
            let n = gg.vertex_gradients().unwrap();
            gg.interpolated_gradient(&p, &n).unwrap().dot(&u)
        });
        worst = worst.max(rel_err(&grad, &fd));
    }
    worst
}

fn all_vertices(g: &SdfGrid) -> Vec<usize> {
    (0..g.len()).collect()
}

pub fn oracle_eikonal(seed: u64) -> f64 {
    let g = noisy_sphere_grid(6, 0.1, seed);
    let verts = all_vertices(&g);
    let term = regularizer::eikonal(&g, &g.vertex_gradients().unwrap(), &verts);
    let grad = term.grad.to_dense(g.len());
    let fd = fd_grid(&g, &verts, 1e-4, |gg| {
        regularizer::eikonal(gg, &gg.vertex_gradients().unwrap(), &verts).loss
    });
    rel_err(&grad, &fd)
}

pub fn oracle_curvature(seed: u64) -> f64 {
    let g = noisy_sphere_grid(6, 0.1, seed);
    let verts = all_vertices(&g);
    let grad = regularizer::curvature(&g, &verts).grad.to_dense(g.len());
    let fd = fd_grid(&g, &verts, 1e-3, |gg| regularizer::curvature(gg, &verts).loss);
    rel_err(&grad, &fd)
}

pub fn toy_radiance_config() -> RadianceConfig {
    RadianceConfig {
        levels: 2,
        log2_table_size: 6,
        features_per_level: 2,
        base_resolution: 2,
        max_resolution: 4,
        hidden_width: 8,
    }
}

/// Errors of one full render backprop against FD, per parameter group.
#[derive(Clone, Copy, Debug)]
pub struct RenderOracle {
    pub grid: f64,
    pub log_s: f64,
    pub tables: f64,
    pub decoder: f64,
}

impl RenderOracle {
    pub fn worst(&self) -> f64 {
        self.grid.max(self.log_s).max(self.tables).max(self.decoder)
    }
}

/// `L = u · color + u_op · opacity` for one ray through an 8³ grid.
pub fn oracle_render_backprop(seed: u64, estimator: GradientEstimator, normalize_cos: bool) -> RenderOracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = noisy_sphere_grid(8, 0.02, seed);
    let aabb = Aabb::cube([0.0; 3], 1.0);
    let radiance = RadianceParams::new(toy_radiance_config(), aabb, seed).unwrap();
    let log_s = 8.0f64.ln();
    let config = RenderConfig {
        n_samples: 48,
        gradient: estimator,
        normalize_cos,
        normal_grad: true,
        background: [0.2, 0.3, 0.4],
        transmittance_cutoff: 0.0,
    };
    let target = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let origin = Vec3::new(-1.8, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let ray = Ray::new(origin, target - origin);
    let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let u_op: f64 = rng.gen_range(-1.0..1.0);

    let eval = |g: &SdfGrid, rad: &RadianceParams, ls: f64| {
        let n = g.vertex_gradients().unwrap();
        let r = renderer::render_ray::<ChaCha8Rng>(g, &n, rad, ls, &ray, &config, None).unwrap();
        u[0] * r.color[0] + u[1] * r.color[1] + u[2] * r.color[2] + u_op * r.opacity
    };

    let normals = grid.vertex_gradients().unwrap();
    let render = renderer::render_ray::<ChaCha8Rng>(&grid, &normals, &radiance, log_s, &ray, &config, None).unwrap();
    let mut sink = GeometryGradList::default();
    let mut rg = RadianceGrad::new(&radiance);
    let d_log_s = renderer::backprop_ray(&radiance, &render, u, u_op, &config, &mut sink, &mut rg);
    let grid_grad = sink.resolve(&grid).to_dense(grid.len());

    let all: Vec<usize> = (0..grid.len()).collect();
    let fd_g = fd_grid(&grid, &all, 1e-5, |g| eval(g, &radiance, log_s));
    let h = 1e-6;
    let fd_s = (eval(&grid, &radiance, log_s + h) - eval(&grid, &radiance, log_s - h)) / (2.0 * h);

    let entries: Vec<usize> = rg.table_entries().iter().map(|e| e.0).collect();
    let got_t: Vec<f64> = entries.iter().map(|&i| rg.tables[i]).collect();
    let mut tables = radiance.tables().to_vec();
    let fd_t = fd_f32(&mut tables, &entries, 1e-5, |t| {
        let mut r = radiance.clone();
        r.tables_mut().copy_from_slice(t);
        eval(&grid, &r, log_s)
    });
    let dec_idx: Vec<usize> = (0..radiance.decoder().len()).collect();
    let mut dec = radiance.decoder().to_vec();
    let fd_d = fd_f32(&mut dec, &dec_idx, 1e-5, |d| {
        let mut r = radiance.clone();
        r.update_decoder(|x| x.copy_from_slice(d));
        eval(&grid, &r, log_s)
    });
    RenderOracle {
        grid: rel_err(&grid_grad, &fd_g),
        log_s: rel_err(&[d_log_s], &[fd_s]),
        tables: rel_err(&got_t, &fd_t),
        decoder: rel_err(&rg.decoder, &fd_d),
    }
}

/// Radiance head alone: `L = u · c(x, v, n)` against FD in tables,
/// decoder weights and the normal.
pub fn oracle_radiance_backprop(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aabb = Aabb::cube([0.0; 3], 1.0);
    let params = RadianceParams::new(toy_radiance_config(), aabb, seed).unwrap();
    let x = Vec3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
    let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0).normalize();
    let n = Vec3::new(rng.gen_range(-1.0..1.0), 1.0, rng.gen_range(-1.0..1.0)).normalize();
    let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let eval = |p: &RadianceParams, n: &Vec3| {
        let c = p.shade(&x, &v, n).unwrap();
        u[0] * c[0] + u[1] * c[1] + u[2] * c[2]
    };

    let mut cache = Default::default();
    params.shade_into(&x, &v, &n, &mut cache).unwrap();
    let mut rg = RadianceGrad::new(&params);
    let dn = params.backprop_shade(&cache, u, &mut rg);

    let entries: Vec<usize> = rg.table_entries().iter().map(|e| e.0).collect();
    let got_t: Vec<f64> = entries.iter().map(|&i| rg.tables[i]).collect();
    let mut tables = params.tables().to_vec();
    let fd_t = fd_f32(&mut tables, &entries, 1e-5, |t| {
        let mut r = params.clone();
        r.tables_mut().copy_from_slice(t);
        eval(&r, &n)
    });
    let dec_idx: Vec<usize> = (0..params.decoder().len()).collect();
    let mut dec = params.decoder().to_vec();
    let fd_d = fd_f32(&mut dec, &dec_idx, 1e-5, |d| {
        let mut r = params.clone();
        r.update_decoder(|x| x.copy_from_slice(d));
        eval(&r, &n)
    });
    let h = 1e-6;
    let fd_n: Vec<f64> = (0..3)
        .map(|k| {
            let mut e = Vec3::zeros();
            e[k] = h;
            (eval(&params, &(n + e)) - eval(&params, &(n - e))) / (2.0 * h)
        })
        .collect();
    rel_err(&got_t, &fd_t)
        .max(rel_err(&rg.decoder, &fd_d))
        .max(rel_err(&[dn.x, dn.y, dn.z], &fd_n))
}

/// Outcome of running sparse Adam next to a textbook dense Adam.
#[derive(Clone, Copy, Debug)]
pub struct AdamComparison {
    /// Largest difference on vertices touched every step.
    pub always_touched_diff: f64,
    pub untouched_identical: bool,
}

/// 100 steps on 64 parameters: a quarter receive a gradient every step, a
/// quarter intermittently, the rest never.
pub fn oracle_sparse_adam(seed: u64) -> AdamComparison {
    use voxrecon::training::{AdamHyper, SparseAdam};
    use voxrecon::SparseGrad;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 64;
    let init: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let hp = AdamHyper::with_lr(1e-2);
    let mut sparse = init.clone();
    let mut state = SparseAdam::new(n, hp);
    let mut dense = init.clone();
    let (mut m, mut v) = (vec![0.0f64; n], vec![0.0f64; n]);
    for t in 1..=100 {
        let mut g = vec![0.0f64; n];
        for (i, gi) in g.iter_mut().enumerate() {
            if i < n / 4 || (i < n / 2 && rng.gen_bool(0.3)) {
                *gi = rng.gen_range(-1.0..1.0);
            }
        }
        state.step(&mut sparse, &SparseGrad::from_dense(&g));
        for i in 0..n {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.99f64.powi(t));
            dense[i] = (dense[i] as f64 - 1e-2 * mh / (vh.sqrt() + 1e-15)) as f32;
        }
    }
    AdamComparison {
        always_touched_diff: (0..n / 4)
            .map(|i| (sparse[i] as f64 - dense[i] as f64).abs())
            .fold(0.0, f64::max),
        untouched_identical: (n / 2..n).all(|i| sparse[i].to_bits() == init[i].to_bits()),
    }
}
