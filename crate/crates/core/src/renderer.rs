//! NeuS volume rendering through the SDF grid, with a hand-written adjoint.
//!
//! Forward: stratified samples along the ray, per-sample opacity from the SDF
//! value and the cosine between the surface normal and the ray, front-to-back
//! compositing over a solid background. Backward: the pixel-loss derivative
//! reaches grid vertices through the SDF value, through the gradient used
//! for the cosine, and through the normal handed to the color decoder.

use rand::rngs::StdRng;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Ray, Vec3};
use crate::image::Image;
use crate::radiance_field::{RadianceGrad, RadianceParams, ShadeCache};
use crate::scene_synth::Camera;
use crate::sdf_grid::{interpolated_gradient_of, InterpolationSample, SdfGrid, VertexGradients};

/// Denominator floor of the opacity ratio.
pub const ALPHA_DENOM_FLOOR: f64 = 1e-6;
/// Gradients shorter than this are treated as zero.
const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Which spatial gradient of the grid drives opacity and shading.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientEstimator {
    /// Exact derivative of the trilinear interpolant.
    Analytical,
    /// Trilinear blend of per-vertex central differences.
    Interpolated,
}

impl std::str::FromStr for GradientEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytical" => Ok(Self::Analytical),
            "interpolated" => Ok(Self::Interpolated),
            other => Err(Error::InvalidConfig(format!("unknown gradient estimator '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub gradient: GradientEstimator,
    /// Use the unit normal in the opacity cosine; otherwise the raw gradient.
    pub normalize_cos: bool,
    /// Let color gradients reach the grid through the decoder's normal input.
    pub normal_grad: bool,
    pub background: [f64; 3],
    pub transmittance_cutoff: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_samples: 128,
            gradient: GradientEstimator::Interpolated,
            normalize_cos: true,
            normal_grad: true,
            background: [0.0; 3],
            transmittance_cutoff: 1e-4,
        }
    }
}

/// Sample layout along a ray clipped to a box.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySegments {
    pub near: f64,
    pub far: f64,
    /// Segment mid-points, strictly increasing.
    pub t: Vec<f64>,
    /// Segment lengths.
    pub delta: Vec<f64>,
}

/// Uniform stratified samples in `[near, far]`. Without a jitter source the
/// stratum centers are used.
pub fn sample_ray<R: Rng + ?Sized>(
    ray: &Ray,
    aabb: &Aabb,
    dim: usize,
    n: usize,
    jitter: Option<&mut R>,
) -> Result<RaySegments> {
    let mut out = RaySegments::default();
    sample_ray_into(ray, aabb, dim, n, jitter, &mut out)?;
    Ok(out)
}

fn sample_ray_into<R: Rng + ?Sized>(
    ray: &Ray,
    aabb: &Aabb,
    dim: usize,
    n: usize,
    jitter: Option<&mut R>,
    out: &mut RaySegments,
) -> Result<()> {
    let (near, far) = ray.intersect(aabb, dim).ok_or(Error::NoIntersection)?;
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one sample per ray".into()));
    }
    let delta = (far - near) / n as f64;
    out.near = near;
    out.far = far;
    out.t.clear();
    out.delta.clear();
    match jitter {
        Some(rng) => {
            for i in 0..n {
                // keep strictly inside the stratum so t stays increasing
                let u: f64 = rng.gen_range(0.001..0.999);
                out.t.push(near + (i as f64 + u) * delta);
                out.delta.push(delta);
            }
        }
        None => {
            for i in 0..n {
                out.t.push(near + (i as f64 + 0.5) * delta);
                out.delta.push(delta);
            }
        }
    }
    Ok(())
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `Φ_s(z) = 1 / (1 + e^{−sz})`.
#[inline]
pub fn phi(s: f64, z: f64) -> f64 {
    sigmoid(s * z)
}

/// Discrete opacity of one segment.
pub fn neus_alpha(f: f64, cos: f64, delta: f64, s: f64) -> f64 {
    alpha_with_grad(f, cos, delta, s).alpha
}

/// Opacity and its partial derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlphaGrad {
    pub alpha: f64,
    pub d_f: f64,
    pub d_cos: f64,
    pub d_s: f64,
}

pub fn alpha_with_grad(f: f64, cos: f64, delta: f64, s: f64) -> AlphaGrad {
    let a = f - 0.5 * delta * cos;
    let b = f + 0.5 * delta * cos;
    let (pa, qa) = (sigmoid(s * a), sigmoid(-s * a));
    let (pb, qb) = (sigmoid(s * b), sigmoid(-s * b));
    let floored = pa < ALPHA_DENOM_FLOOR;
    let denom = if floored { ALPHA_DENOM_FLOOR } else { pa };
    let raw = (pa - pb) / denom;
    if !(raw > 0.0) {
        return AlphaGrad::default();
    }
    if raw >= 1.0 {
        return AlphaGrad {
            alpha: 1.0,
            ..Default::default()
        };
    }
    let (d_pa, d_pb) = if floored {
        (1.0 / denom, -1.0 / denom)
    } else {
        (pb / (pa * pa), -1.0 / pa)
    };
    let ja = pa * qa;
    let jb = pb * qb;
    AlphaGrad {
        alpha: raw,
        d_f: d_pa * s * ja + d_pb * s * jb,
        d_cos: -0.5 * delta * d_pa * s * ja + 0.5 * delta * d_pb * s * jb,
        d_s: d_pa * a * ja + d_pb * b * jb,
    }
}

/// Result of front-to-back compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    /// `Σ wᵢ`.
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `Tᵢ`, with `T₁ = 1`.
    pub transmittance: Vec<f64>,
}

/// `Ĉ = Σ Tᵢ αᵢ cᵢ + T_{n+1} · background`.
pub fn composite(alphas: &[f64], colors: &[[f64; 3]], background: [f64; 3]) -> Result<Composite> {
    if alphas.len() != colors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} opacities vs {} colors",
            alphas.len(),
            colors.len()
        )));
    }
    let mut t = 1.0;
    let mut out = Composite {
        color: [0.0; 3],
        opacity: 0.0,
        weights: Vec::with_capacity(alphas.len()),
        transmittance: Vec::with_capacity(alphas.len()),
    };
    for (a, c) in alphas.iter().zip(colors) {
        let a = a.clamp(0.0, 1.0);
        let w = t * a;
        out.transmittance.push(t);
        out.weights.push(w);
        for k in 0..3 {
            out.color[k] += w * c[k];
        }
        out.opacity += w;
        t *= 1.0 - a;
    }
    for k in 0..3 {
        out.color[k] += t * background[k];
    }
    Ok(out)
}

/// Forward state of one ray sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleState {
    pub t: f64,
    pub delta: f64,
    pub pos: Vec3,
    pub interp: InterpolationSample,
    pub f: f64,
    /// Raw estimator gradient.
    pub grad: Vec3,
    pub grad_norm: f64,
    /// Unit normal; `−v` when the gradient vanishes.
    pub normal: Vec3,
    pub cos: f64,
    pub alpha: AlphaGrad,
    pub trans: f64,
    pub weight: f64,
    pub color: [f64; 3],
}

/// Everything the backward pass needs about one rendered ray.
#[derive(Clone, Debug, Default)]
pub struct RayRender {
    pub ray: Option<Ray>,
    pub segments: RaySegments,
    pub samples: Vec<SampleState>,
    caches: Vec<ShadeCache>,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Transmittance left after the last evaluated sample.
    pub residual: f64,
    pub log_s: f64,
}

impl RayRender {
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.weight)
    }
}

/// Receives derivatives with respect to grid quantities.
pub trait GeometryGradSink {
    /// `∂L/∂f[v]`.
    fn value(&mut self, vertex: usize, g: f64);
    /// `∂L/∂n[v]`, to be chained through the finite-difference stencil.
    fn vertex_normal(&mut self, vertex: usize, g: [f64; 3]);
}

/// Appends raw contributions; resolve against the grid afterwards.
#[derive(Clone, Debug, Default)]
pub struct GeometryGradList {
    pub values: Vec<(u32, f64)>,
    pub normals: Vec<(u32, [f64; 3])>,
}

impl GeometryGradList {
    pub fn clear(&mut self) {
        self.values.clear();
        self.normals.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty() && self.normals.is_empty()
    }

    /// Chains normal contributions through the stencil and returns
    /// `∂L/∂f` per vertex.
    pub fn resolve(&self, grid: &SdfGrid) -> crate::sparse::SparseGrad {
        let mut raw: Vec<(usize, f64)> = self.values.iter().map(|&(v, g)| (v as usize, g)).collect();
        for &(v, adj) in &self.normals {
            grid.scatter_vertex_gradient_adjoint(v as usize, adj, |u, g| raw.push((u, g)));
        }
        crate::sparse::SparseGrad::from_unsorted(raw)
    }
}

impl GeometryGradSink for GeometryGradList {
    #[inline]
    fn value(&mut self, vertex: usize, g: f64) {
        self.values.push((vertex as u32, g));
    }

    #[inline]
    fn vertex_normal(&mut self, vertex: usize, g: [f64; 3]) {
        self.normals.push((vertex as u32, g));
    }
}

fn estimator_gradient(
    grid: &SdfGrid,
    normals: &VertexGradients,
    s: &InterpolationSample,
    estimator: GradientEstimator,
) -> Vec3 {
    match estimator {
        GradientEstimator::Interpolated => interpolated_gradient_of(s, normals),
        GradientEstimator::Analytical => grid.analytical_gradient_of(s),
    }
}

/// Renders one ray. With `jitter = None` the samples sit at stratum centers.
#[allow(clippy::too_many_arguments)]
pub fn render_ray<R: Rng + ?Sized>(
    grid: &SdfGrid,
    normals: &VertexGradients,
    radiance: &RadianceParams,
    log_s: f64,
    ray: &Ray,
    config: &RenderConfig,
    jitter: Option<&mut R>,
) -> Result<RayRender> {
    let mut out = RayRender::default();
    render_ray_into(grid, normals, radiance, log_s, ray, config, jitter, &mut out)?;
    Ok(out)
}

/// Like [`render_ray`] but reuses the buffers of `out`.
#[allow(clippy::too_many_arguments)]
pub fn render_ray_into<R: Rng + ?Sized>(
    grid: &SdfGrid,
    normals: &VertexGradients,
    radiance: &RadianceParams,
    log_s: f64,
    ray: &Ray,
    config: &RenderConfig,
    jitter: Option<&mut R>,
    out: &mut RayRender,
) -> Result<()> {
    sample_ray_into(ray, &grid.aabb(), grid.dim(), config.n_samples, jitter, &mut out.segments)?;
    let s = log_s.exp();
    out.ray = Some(*ray);
    out.log_s = log_s;
    out.samples.clear();
    if out.caches.len() < config.n_samples {
        out.caches.resize_with(config.n_samples, ShadeCache::default);
    }
    let v = ray.dir;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut opacity = 0.0;
    for i in 0..out.segments.t.len() {
        let t = out.segments.t[i];
        let delta = out.segments.delta[i];
        let pos = ray.at(t);
        let interp = grid.interpolate(&pos)?;
        let f = interp.value;
        let grad = estimator_gradient(grid, normals, &interp, config.gradient);
        let grad_norm = grad.norm();
        let (normal, cos) = if grad_norm < GRAD_NORM_FLOOR {
            (-v, -1.0)
        } else {
            let n = grad / grad_norm;
            let cos = if config.normalize_cos { n.dot(&v) } else { grad.dot(&v) };
            (n, cos)
        };
        let alpha = alpha_with_grad(f, cos, delta, s);
        let weight = trans * alpha.alpha;
        let c = if alpha.alpha > 0.0 {
            radiance.shade_into(&pos, &v, &normal, &mut out.caches[i])?
        } else {
            [0.0; 3]
        };
        for k in 0..3 {
            color[k] += weight * c[k];
        }
        opacity += weight;
        out.samples.push(SampleState {
            t,
            delta,
            pos,
            interp,
            f,
            grad,
            grad_norm,
            normal,
            cos,
            alpha,
            trans,
            weight,
            color: c,
        });
        trans *= 1.0 - alpha.alpha;
        if trans < config.transmittance_cutoff {
            break;
        }
    }
    for k in 0..3 {
        color[k] += trans * config.background[k];
    }
    out.color = color;
    out.opacity = opacity;
    out.residual = trans;
    Ok(())
}

/// Scatters `∂L/∂grad` at one sample through the chosen estimator.
#[inline]
fn scatter_grad<S: GeometryGradSink>(
    s: &SampleState,
    d_grad: Vec3,
    estimator: GradientEstimator,
    sink: &mut S,
) {
    let ip = &s.interp;
    match estimator {
        GradientEstimator::Interpolated => {
            for c in 0..ip.n_corners {
                let w = ip.weights[c];
                if w != 0.0 {
                    sink.vertex_normal(ip.corners[c], [w * d_grad[0], w * d_grad[1], w * d_grad[2]]);
                }
            }
        }
        GradientEstimator::Analytical => {
            for c in 0..ip.n_corners {
                let gw = ip.weight_grads[c];
                sink.value(ip.corners[c], gw[0] * d_grad[0] + gw[1] * d_grad[1] + gw[2] * d_grad[2]);
            }
        }
    }
}

/// Color pass of the adjoint: `∂L/∂cᵢ = wᵢ · upstream` into the radiance
/// parameters and, when `config.normal_grad` is set, through the shading
/// normal into the grid.
pub fn backprop_radiance_pass<S: GeometryGradSink>(
    radiance: &RadianceParams,
    render: &RayRender,
    upstream: [f64; 3],
    config: &RenderConfig,
    sink: &mut S,
    radiance_grad: &mut RadianceGrad,
) {
    if upstream == [0.0; 3] {
        return;
    }
    for (i, s) in render.samples.iter().enumerate() {
        if s.weight == 0.0 {
            continue;
        }
        let dc = [s.weight * upstream[0], s.weight * upstream[1], s.weight * upstream[2]];
        let dn = radiance.backprop_shade(&render.caches[i], dc, radiance_grad);
        if !config.normal_grad || s.grad_norm < GRAD_NORM_FLOOR {
            continue;
        }
        let n = s.normal;
        let d_grad = (dn - n * n.dot(&dn)) / s.grad_norm;
        scatter_grad(s, d_grad, config.gradient, sink);
    }
}

/// Opacity pass of the adjoint. `upstream_opacity` is `∂L/∂(Σwᵢ)`.
/// Returns `∂L/∂(ln s)`.
pub fn backprop_geometry_pass<S: GeometryGradSink>(
    render: &RayRender,
    upstream: [f64; 3],
    upstream_opacity: f64,
    config: &RenderConfig,
    sink: &mut S,
) -> f64 {
    let s_val = render.log_s.exp();
    // color and opacity seen just behind the current sample, at unit
    // transmittance
    let mut behind = [config.background[0], config.background[1], config.background[2], 0.0];
    let up = [upstream[0], upstream[1], upstream[2], upstream_opacity];
    let mut d_log_s = 0.0;
    for s in render.samples.iter().rev() {
        let a = s.alpha.alpha;
        let here = [s.color[0], s.color[1], s.color[2], 1.0];
        let mut d_alpha = 0.0;
        for k in 0..4 {
            d_alpha += up[k] * (here[k] - behind[k]);
        }
        d_alpha *= s.trans;
        for k in 0..4 {
            behind[k] = a * here[k] + (1.0 - a) * behind[k];
        }
        if d_alpha == 0.0 || (s.alpha.d_f == 0.0 && s.alpha.d_cos == 0.0 && s.alpha.d_s == 0.0) {
            continue;
        }
        let d_f = d_alpha * s.alpha.d_f;
        let d_cos = d_alpha * s.alpha.d_cos;
        d_log_s += d_alpha * s.alpha.d_s * s_val;
        let ip = &s.interp;
        for c in 0..ip.n_corners {
            let w = ip.weights[c];
            if w != 0.0 {
                sink.value(ip.corners[c], w * d_f);
            }
        }
        if s.grad_norm < GRAD_NORM_FLOOR || d_cos == 0.0 {
            continue;
        }
        let v = render.ray.map(|r| r.dir).unwrap_or_else(Vec3::zeros);
        let d_grad = if config.normalize_cos {
            let n = s.normal;
            (v - n * s.cos) * (d_cos / s.grad_norm)
        } else {
            v * d_cos
        };
        scatter_grad(s, d_grad, config.gradient, sink);
    }
    d_log_s
}

/// Full adjoint of [`render_ray`]. Returns `∂L/∂(ln s)`.
#[allow(clippy::too_many_arguments)]
pub fn backprop_ray<S: GeometryGradSink>(
    radiance: &RadianceParams,
    render: &RayRender,
    upstream: [f64; 3],
    upstream_opacity: f64,
    config: &RenderConfig,
    sink: &mut S,
    radiance_grad: &mut RadianceGrad,
) -> f64 {
    backprop_radiance_pass(radiance, render, upstream, config, sink, radiance_grad);
    backprop_geometry_pass(render, upstream, upstream_opacity, config, sink)
}

/// Renders a full view with stratum-center samples. Returns the image and
/// the per-pixel accumulated opacity.
pub fn render_image(
    grid: &SdfGrid,
    normals: &VertexGradients,
    radiance: &RadianceParams,
    log_s: f64,
    camera: &Camera,
    config: &RenderConfig,
) -> Result<(Image, Vec<f64>)> {
    let rows: Vec<Result<Vec<([f64; 3], f64)>>> = (0..camera.height)
        .into_par_iter()
        .map(|y| {
            let mut r = RayRender::default();
            (0..camera.width)
                .map(|x| {
                    let ray = camera.pixel_ray(x, y);
                    match render_ray_into::<StdRng>(grid, normals, radiance, log_s, &ray, config, None, &mut r) {
                        Ok(()) => Ok((r.color, r.opacity)),
                        Err(Error::NoIntersection) => Ok((config.background, 0.0)),
                        Err(e) => Err(e),
                    }
                })
                .collect()
        })
        .collect();
    let mut img = Image::new(camera.width, camera.height, [0.0; 3]);
    let mut opacity = Vec::with_capacity(camera.width * camera.height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, o)) in row?.into_iter().enumerate() {
            img.set(x, y, [c[0] as f32, c[1] as f32, c[2] as f32]);
            opacity.push(o);
        }
    }
    Ok((img, opacity))
}
