//! Continuity probes on cube faces and the 2D ray experiment comparing the
//! analytical and interpolated gradient estimators.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};
use crate::renderer::{neus_alpha, GradientEstimator};
use crate::scene_synth::{bake_grid_dim, AnalyticScene};
use crate::sdf_grid::{interpolated_gradient_of, SdfGrid, VertexGradients};

/// Offset along the face normal, in units of the spacing, used to pick the
/// cube on each side of a face.
pub const PROBE_OFFSET: f64 = 1e-9;

/// The lattice plane `u[axis] = index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JunctionFace {
    pub axis: usize,
    pub index: usize,
}

/// One-sided gradient limits at a point on a face shared by two cubes.
#[derive(Clone, Debug, PartialEq)]
pub struct JunctionProbe {
    pub face: JunctionFace,
    pub point: Vec3,
    /// Corners on the face.
    pub on_face: Vec<usize>,
    /// Off-face corners of the lower cube.
    pub lower_off_face: Vec<usize>,
    /// Off-face corners of the upper cube.
    pub upper_off_face: Vec<usize>,
    pub analytical_lower: Vec3,
    pub analytical_upper: Vec3,
    pub interpolated_lower: Vec3,
    pub interpolated_upper: Vec3,
}

impl JunctionProbe {
    pub fn analytical_gap(&self) -> f64 {
        (self.analytical_upper - self.analytical_lower).norm()
    }

    pub fn interpolated_gap(&self) -> f64 {
        (self.interpolated_upper - self.interpolated_lower).norm()
    }
}

/// Both one-sided limits of both estimators at `point` on `face`.
///
/// The cube on each side is the owner of `point ∓ PROBE_OFFSET·ε` along the
/// face normal; each cube's closed-form interpolant is then evaluated on the
/// face itself, which gives the exact one-sided limit.
pub fn probe_junction(
    grid: &SdfGrid,
    normals: &VertexGradients,
    face: JunctionFace,
    point: &Vec3,
) -> Result<JunctionProbe> {
    let r = grid.resolution();
    if face.axis >= grid.dim() {
        return Err(Error::InvalidConfig(format!("axis {} out of range", face.axis)));
    }
    if face.index == 0 || face.index + 1 >= r[face.axis] {
        return Err(Error::FaceOnBoundary);
    }
    let mut u = grid.to_lattice(point)?;
    if (u[face.axis] - face.index as f64).abs() > 1e-9 {
        return Err(Error::InvalidConfig("point does not lie on the face".into()));
    }
    u[face.axis] = face.index as f64;
    let mut offset = Vec3::zeros();
    offset[face.axis] = PROBE_OFFSET * grid.spacing();
    let lower = grid.interpolate(&(point - offset))?;
    let upper = grid.interpolate(&(point + offset))?;
    if lower.base[face.axis] + 1 != face.index || upper.base[face.axis] != face.index {
        return Err(Error::Numeric("probe offset did not separate the two cubes".into()));
    }
    let at_lower = grid.interpolate_in_cube(u, lower.base);
    let at_upper = grid.interpolate_in_cube(u, upper.base);
    let bit = |c: usize| c >> face.axis & 1;
    let on_face = (0..at_upper.n_corners)
        .filter(|&c| bit(c) == 0)
        .map(|c| at_upper.corners[c])
        .collect();
    let upper_off_face = (0..at_upper.n_corners)
        .filter(|&c| bit(c) == 1)
        .map(|c| at_upper.corners[c])
        .collect();
    let lower_off_face = (0..at_lower.n_corners)
        .filter(|&c| bit(c) == 0)
        .map(|c| at_lower.corners[c])
        .collect();
    Ok(JunctionProbe {
        face,
        point: *point,
        on_face,
        lower_off_face,
        upper_off_face,
        analytical_lower: grid.analytical_gradient_of(&at_lower),
        analytical_upper: grid.analytical_gradient_of(&at_upper),
        interpolated_lower: interpolated_gradient_of(&at_lower, normals),
        interpolated_upper: interpolated_gradient_of(&at_upper, normals),
    })
}

/// Summary of probes on random grids and faces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub trials: usize,
    pub max_interpolated_gap: f64,
    pub max_analytical_gap: f64,
    pub min_analytical_gap: f64,
    /// Fraction of trials with an analytical gap above `1e-3`.
    pub analytical_discontinuous_fraction: f64,
}

/// Probes one random interior face point on each of `trials` random grids
/// of `res^dim` vertices with values uniform in `[-1, 1]`.
pub fn continuity_study(trials: usize, dim: usize, res: usize, seed: u64) -> Result<ContinuityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ContinuityReport {
        trials,
        max_interpolated_gap: 0.0,
        max_analytical_gap: 0.0,
        min_analytical_gap: f64::INFINITY,
        analytical_discontinuous_fraction: 0.0,
    };
    let mut discontinuous = 0;
    let spacing = 1.0 / (res - 1) as f64;
    for _ in 0..trials {
        let n = res.pow(dim as u32);
        let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let grid = SdfGrid::new(dim, &vec![res; dim], &vec![0.0; dim], spacing)?.with_values(values)?;
        let normals = grid.vertex_gradients()?;
        let axis = rng.gen_range(0..dim);
        let index = rng.gen_range(1..res - 1);
        let mut p = Vec3::zeros();
        for a in 0..dim {
            p[a] = if a == axis {
                index as f64 * spacing
            } else {
                rng.gen_range(0.0..(res - 1) as f64) * spacing
            };
        }
        let probe = probe_junction(&grid, &normals, JunctionFace { axis, index }, &p)?;
        let (gi, ga) = (probe.interpolated_gap(), probe.analytical_gap());
        report.max_interpolated_gap = report.max_interpolated_gap.max(gi);
        report.max_analytical_gap = report.max_analytical_gap.max(ga);
        report.min_analytical_gap = report.min_analytical_gap.min(ga);
        if ga > 1e-3 {
            discontinuous += 1;
        }
    }
    report.analytical_discontinuous_fraction = discontinuous as f64 / trials.max(1) as f64;
    Ok(report)
}

/// Per-sample curves of one 2D ray for both estimators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayTrace2D {
    pub t: Vec<f64>,
    pub f: Vec<f64>,
    pub cos_a: Vec<f64>,
    pub cos_i: Vec<f64>,
    pub alpha_a: Vec<f64>,
    pub alpha_i: Vec<f64>,
    pub w_a: Vec<f64>,
    pub w_i: Vec<f64>,
    /// Owner cell of each sample.
    pub cell: Vec<[usize; 2]>,
}

pub const TRACE_HEADER: &str = "t,f,cos_a,cos_i,alpha_a,alpha_i,w_a,w_i";

impl RayTrace2D {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn weights(&self, estimator: GradientEstimator) -> &[f64] {
        match estimator {
            GradientEstimator::Analytical => &self.w_a,
            GradientEstimator::Interpolated => &self.w_i,
        }
    }

    pub fn cos(&self, estimator: GradientEstimator) -> &[f64] {
        match estimator {
            GradientEstimator::Analytical => &self.cos_a,
            GradientEstimator::Interpolated => &self.cos_i,
        }
    }

    /// Indices `i` where samples `i` and `i + 1` lie in different cells.
    pub fn boundary_pairs(&self) -> Vec<usize> {
        (0..self.len().saturating_sub(1))
            .filter(|&i| self.cell[i] != self.cell[i + 1])
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.t[i], self.f[i], self.cos_a[i], self.cos_i[i], self.alpha_a[i], self.alpha_i[i], self.w_a[i], self.w_i[i]
            );
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Marches `n` evenly spaced samples along a ray through a 2D grid and
/// records the opacity and blend-weight curves for both estimators. With
/// `normalize_cos` the cosine uses the unit gradient, otherwise the raw one.
pub fn trace_ray_2d(grid: &SdfGrid, ray: &Ray, n: usize, s: f64, normalize_cos: bool) -> Result<RayTrace2D> {
    if grid.dim() != 2 {
        return Err(Error::InvalidResolution("the ray trace needs a 2D grid".into()));
    }
    let (near, far) = ray.intersect(&grid.aabb(), 2).ok_or(Error::NoIntersection)?;
    let normals = grid.vertex_gradients()?;
    let delta = (far - near) / n as f64;
    let mut tr = RayTrace2D::default();
    let (mut ta, mut ti) = (1.0, 1.0);
    let cos_of = |g: Vec3| {
        let norm = g.norm();
        if norm < 1e-12 {
            -1.0
        } else if normalize_cos {
            g.dot(&ray.dir) / norm
        } else {
            g.dot(&ray.dir)
        }
    };
    for k in 0..n {
        let t = near + (k as f64 + 0.5) * delta;
        let sample = grid.interpolate(&ray.at(t))?;
        let ca = cos_of(grid.analytical_gradient_of(&sample));
        let ci = cos_of(interpolated_gradient_of(&sample, &normals));
        let aa = neus_alpha(sample.value, ca, delta, s);
        let ai = neus_alpha(sample.value, ci, delta, s);
        tr.t.push(t);
        tr.f.push(sample.value);
        tr.cos_a.push(ca);
        tr.cos_i.push(ci);
        tr.alpha_a.push(aa);
        tr.alpha_i.push(ai);
        tr.w_a.push(ta * aa);
        tr.w_i.push(ti * ai);
        tr.cell.push([sample.base[0], sample.base[1]]);
        ta *= 1.0 - aa;
        ti *= 1.0 - ai;
    }
    Ok(tr)
}

/// Largest blend-weight change between consecutive samples in different
/// cells, relative to the largest weight. Zero for an all-zero curve.
pub fn glitch_metric(trace: &RayTrace2D, estimator: GradientEstimator) -> f64 {
    let w = trace.weights(estimator);
    let max_w = w.iter().fold(0.0f64, |m, v| m.max(*v));
    if max_w <= 0.0 {
        return 0.0;
    }
    trace
        .boundary_pairs()
        .iter()
        .map(|&i| (w[i + 1] - w[i]).abs())
        .fold(0.0, f64::max)
        / max_w
}

/// Setup of the 2D circle experiment.
#[derive(Clone, Debug)]
pub struct CircleExperiment {
    pub grid: SdfGrid,
    pub ray: Ray,
    pub s: f64,
}

impl CircleExperiment {
    /// 16² grid over the circle scene, `s·ε = 4`, and an oblique ray aimed
    /// at the circle center.
    pub fn new() -> Result<Self> {
        Self::with_scene(&AnalyticScene::circle_2d())
    }

    /// Same setup over any scene, sliced at z = 0.
    pub fn with_scene(scene: &AnalyticScene) -> Result<Self> {
        let grid = bake_grid_dim(scene, 16, 2)?;
        let s = 4.0 / grid.spacing();
        let c = scene.aabb.center();
        let origin = Vec3::new(scene.aabb.min[0], c.y - 0.55 * scene.aabb.half_extent(), 0.0);
        let ray = Ray::new(origin, Vec3::new(c.x, c.y, 0.0) - origin);
        Ok(Self { grid, ray, s })
    }

    pub fn trace(&self, n: usize, normalize_cos: bool) -> Result<RayTrace2D> {
        trace_ray_2d(&self.grid, &self.ray, n, self.s, normalize_cos)
    }
}
