//! Dense signed-distance grid with d-linear interpolation and two spatial
//! gradient estimators.
//!
//! Values live on the vertices of a regular lattice with uniform spacing `ε`.
//! A query point is owned by the cube whose base index is `⌊x⌋` clamped to
//! `R − 2`, so points exactly on a junction face belong to the cube on the
//! larger-index side.
//!
//! Two gradients are offered:
//! * the analytical gradient, i.e. the exact derivative of the d-linear
//!   interpolant, which is discontinuous across cube faces;
//! * the interpolated gradient, a d-linear blend of per-vertex
//!   central-difference gradients, which is continuous everywhere.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::sparse::SparseGrad;

/// Maximum number of cube corners (3D).
pub const MAX_CORNERS: usize = 8;

/// Lattice-space slack for points grazing the bounding box.
const CLAMP_TOL: f64 = 1e-9;

const MAGIC: &[u8; 4] = b"SDFG";

/// Dense d-dimensional grid of signed distances, `d ∈ {2, 3}`.
///
/// Values are stored x-fastest. In 2D the third axis has resolution 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    dim: usize,
    resolution: [usize; 3],
    spacing: f64,
    origin: [f64; 3],
    values: Vec<f32>,
}

/// Corners, weights and weight gradients of one d-linear query.
#[derive(Clone, Copy, Debug)]
pub struct InterpolationSample {
    pub x: Vec3,
    /// Base (lowest) vertex of the owning cube.
    pub base: [usize; 3],
    /// Position inside the owning cube, each component in `[0, 1]`.
    pub local: [f64; 3],
    pub n_corners: usize,
    /// Flat vertex indices of the cube corners. Corner `i` is offset by bit
    /// `a` of `i` along axis `a`.
    pub corners: [usize; MAX_CORNERS],
    pub weights: [f64; MAX_CORNERS],
    /// `∇ₓ wᵢ` in world units.
    pub weight_grads: [[f64; 3]; MAX_CORNERS],
    pub value: f64,
}

impl InterpolationSample {
    pub fn corners(&self) -> &[usize] {
        &self.corners[..self.n_corners]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights[..self.n_corners]
    }
}

/// Per-vertex gradient estimates `n[·]` from finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexGradients {
    dim: usize,
    resolution: [usize; 3],
    data: Vec<[f64; 3]>,
}

impl VertexGradients {
    pub fn at(&self, vertex: usize) -> [f64; 3] {
        self.data[vertex]
    }

    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl SdfGrid {
    /// Creates a zero-filled grid. `resolution` and `origin` must have `dim`
    /// entries.
    pub fn new(dim: usize, resolution: &[usize], origin: &[f64], spacing: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidResolution(format!("dimension {dim} not in {{2, 3}}")));
        }
        if resolution.len() != dim || origin.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {dim} resolution/origin entries"
            )));
        }
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::GridTooSmall {
                min: 2,
                got: resolution.to_vec(),
            });
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidResolution(format!("spacing {spacing} must be positive")));
        }
        let mut res = [1usize; 3];
        let mut org = [0.0; 3];
        res[..dim].copy_from_slice(resolution);
        org[..dim].copy_from_slice(origin);
        let n = res.iter().product();
        Ok(Self {
            dim,
            resolution: res,
            spacing,
            origin: org,
            values: vec![0.0; n],
        })
    }

    /// Grid with `resolution` vertices per axis spanning a cubic `aabb`.
    pub fn over_aabb(aabb: &Aabb, resolution: usize, dim: usize) -> Result<Self> {
        let ext = aabb.extent();
        let spacing = ext[0] / (resolution as f64 - 1.0);
        for a in 1..dim {
            if (ext[a] - ext[0]).abs() > 1e-9 * ext[0] {
                return Err(Error::InvalidResolution(
                    "bounding box must be cubic for a uniform grid".into(),
                ));
            }
        }
        Self::new(dim, &vec![resolution; dim], &aabb.min[..dim], spacing)
    }

    /// Fills every vertex from a world-space function.
    pub fn from_fn(
        dim: usize,
        resolution: &[usize],
        origin: &[f64],
        spacing: f64,
        f: impl Fn(Vec3) -> f64 + Sync,
    ) -> Result<Self> {
        let mut g = Self::new(dim, resolution, origin, spacing)?;
        g.fill_with(f);
        Ok(g)
    }

    pub fn fill_with(&mut self, f: impl Fn(Vec3) -> f64 + Sync) {
        let this = self.clone_meta();
        self.values
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = f(this.vertex_position(i)) as f32);
    }

    fn clone_meta(&self) -> SdfGrid {
        SdfGrid {
            dim: self.dim,
            resolution: self.resolution,
            spacing: self.spacing,
            origin: self.origin,
            values: Vec::new(),
        }
    }

    /// Replaces the stored values. The length must match.
    pub fn with_values(mut self, values: Vec<f32>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("grid values must be finite".into()));
        }
        self.values = values;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// World-space bounding box `[origin, origin + (R−1)ε]`.
    pub fn aabb(&self) -> Aabb {
        let mut max = self.origin;
        for (a, m) in max.iter_mut().enumerate().take(self.dim) {
            *m += (self.resolution[a] - 1) as f64 * self.spacing;
        }
        Aabb::new(self.origin, max)
    }

    /// Flat-index stride of each axis.
    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [1, self.resolution[0], self.resolution[0] * self.resolution[1]]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [rx, ry, _] = self.resolution;
        [index % rx, (index / rx) % ry, index / (rx * ry)]
    }

    pub fn vertex_position(&self, index: usize) -> Vec3 {
        let c = self.coords(index);
        let mut p = Vec3::zeros();
        for a in 0..self.dim {
            p[a] = self.origin[a] + c[a] as f64 * self.spacing;
        }
        p
    }

    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        self.values[index] as f64
    }

    /// Converts a world point to lattice coordinates, clamping points within
    /// `1e-9` lattice units outside the box.
    pub fn to_lattice(&self, x: &Vec3) -> Result<[f64; 3]> {
        let mut u = [0.0; 3];
        for a in 0..self.dim {
            let mut ua = (x[a] - self.origin[a]) / self.spacing;
            let top = (self.resolution[a] - 1) as f64;
            if !ua.is_finite() {
                return Err(Error::QueryOutsideGrid([x[0], x[1], x[2]]));
            }
            if ua < 0.0 {
                if ua < -CLAMP_TOL {
                    return Err(Error::QueryOutsideGrid([x[0], x[1], x[2]]));
                }
                ua = 0.0;
            } else if ua > top {
                if ua > top + CLAMP_TOL {
                    return Err(Error::QueryOutsideGrid([x[0], x[1], x[2]]));
                }
                ua = top;
            }
            u[a] = ua;
        }
        Ok(u)
    }

    /// d-linear interpolation at a world point.
    pub fn interpolate(&self, x: &Vec3) -> Result<InterpolationSample> {
        let u = self.to_lattice(x)?;
        let mut s = self.interpolate_lattice(u);
        s.x = *x;
        Ok(s)
    }

    /// d-linear interpolation at lattice coordinates already inside the box.
    pub fn interpolate_lattice(&self, u: [f64; 3]) -> InterpolationSample {
        let mut base = [0usize; 3];
        for a in 0..self.dim {
            base[a] = (u[a].floor() as usize).min(self.resolution[a] - 2);
        }
        self.interpolate_in_cube(u, base)
    }

    /// Evaluates the interpolant of the cube with lower corner `base` at
    /// lattice coordinates `u`. Used for one-sided limits on cube faces;
    /// `u` should lie in or on that cube.
    pub fn interpolate_in_cube(&self, u: [f64; 3], base: [usize; 3]) -> InterpolationSample {
        let mut local = [0.0; 3];
        for a in 0..self.dim {
            local[a] = u[a] - base[a] as f64;
        }
        let strides = self.strides();
        let base_index = base[0] + strides[1] * base[1] + strides[2] * base[2];
        let n_corners = 1 << self.dim;
        let inv_eps = 1.0 / self.spacing;

        let mut s = InterpolationSample {
            x: Vec3::zeros(),
            base,
            local,
            n_corners,
            corners: [0; MAX_CORNERS],
            weights: [0.0; MAX_CORNERS],
            weight_grads: [[0.0; 3]; MAX_CORNERS],
            value: 0.0,
        };
        for c in 0..n_corners {
            let mut idx = base_index;
            // per-axis factor and its derivative
            let mut fac = [1.0; 3];
            let mut dfac = [0.0; 3];
            for a in 0..self.dim {
                if c >> a & 1 == 1 {
                    idx += strides[a];
                    fac[a] = local[a];
                    dfac[a] = inv_eps;
                } else {
                    fac[a] = 1.0 - local[a];
                    dfac[a] = -inv_eps;
                }
            }
            let w = fac[0] * fac[1] * fac[2];
            let mut gw = [0.0; 3];
            for (k, g) in gw.iter_mut().enumerate().take(self.dim) {
                let mut p = dfac[k];
                for a in 0..self.dim {
                    if a != k {
                        p *= fac[a];
                    }
                }
                *g = p;
            }
            s.corners[c] = idx;
            s.weights[c] = w;
            s.weight_grads[c] = gw;
            s.value += w * self.values[idx] as f64;
        }
        s
    }

    pub fn value_at(&self, x: &Vec3) -> Result<f64> {
        Ok(self.interpolate(x)?.value)
    }

    /// Exact derivative of the d-linear interpolant (world units).
    pub fn analytical_gradient(&self, x: &Vec3) -> Result<Vec3> {
        Ok(self.analytical_gradient_of(&self.interpolate(x)?))
    }

    pub fn analytical_gradient_of(&self, s: &InterpolationSample) -> Vec3 {
        let mut g = Vec3::zeros();
        for c in 0..s.n_corners {
            let f = self.values[s.corners[c]] as f64;
            for a in 0..3 {
                g[a] += s.weight_grads[c][a] * f;
            }
        }
        g
    }

    /// Central-difference gradient at every vertex; one-sided differences on
    /// the boundary.
    pub fn vertex_gradients(&self) -> Result<VertexGradients> {
        if self.resolution[..self.dim].iter().any(|&r| r < 3) {
            return Err(Error::GridTooSmall {
                min: 3,
                got: self.resolution[..self.dim].to_vec(),
            });
        }
        let mut data = vec![[0.0; 3]; self.values.len()];
        let plane = self.resolution[0] * self.resolution[1];
        data.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(k, chunk)| {
                for (local, n) in chunk.iter_mut().enumerate() {
                    *n = self.vertex_gradient(k * plane + local);
                }
            });
        Ok(VertexGradients {
            dim: self.dim,
            resolution: self.resolution,
            data,
        })
    }

    /// Gradient estimate `n[v]` at one vertex.
    pub fn vertex_gradient(&self, v: usize) -> [f64; 3] {
        let c = self.coords(v);
        let strides = self.strides();
        let mut n = [0.0; 3];
        for a in 0..self.dim {
            let s = strides[a];
            let top = self.resolution[a] - 1;
            n[a] = if c[a] == 0 {
                (self.get(v + s) - self.get(v)) / self.spacing
            } else if c[a] == top {
                (self.get(v) - self.get(v - s)) / self.spacing
            } else {
                (self.get(v + s) - self.get(v - s)) / (2.0 * self.spacing)
            };
        }
        n
    }

    /// Visits `∂(adjᵀ n[v]) / ∂f[u]` for every vertex `u` in the stencil of `v`.
    #[inline]
    pub fn scatter_vertex_gradient_adjoint(
        &self,
        v: usize,
        adj: [f64; 3],
        mut out: impl FnMut(usize, f64),
    ) {
        let c = self.coords(v);
        let strides = self.strides();
        for a in 0..self.dim {
            if adj[a] == 0.0 {
                continue;
            }
            let s = strides[a];
            let top = self.resolution[a] - 1;
            if c[a] == 0 {
                let g = adj[a] / self.spacing;
                out(v + s, g);
                out(v, -g);
            } else if c[a] == top {
                let g = adj[a] / self.spacing;
                out(v, g);
                out(v - s, -g);
            } else {
                let g = adj[a] / (2.0 * self.spacing);
                out(v + s, g);
                out(v - s, -g);
            }
        }
    }

    fn check_normals(&self, n: &VertexGradients) -> Result<()> {
        if n.resolution != self.resolution || n.dim != self.dim {
            return Err(Error::ShapeMismatch(
                "vertex-gradient field does not match grid".into(),
            ));
        }
        Ok(())
    }

    /// `grad⁽ⁱ⁾(x) = Σ wᵢ(x) n[cᵢ(x)]`.
    pub fn interpolated_gradient(&self, x: &Vec3, n: &VertexGradients) -> Result<Vec3> {
        self.check_normals(n)?;
        Ok(interpolated_gradient_of(&self.interpolate(x)?, n))
    }

    /// Vertex contributions of `∂(upstream · grad⁽ⁱ⁾(x)) / ∂f[v]`, covering
    /// the finite-difference stencils of every cube corner.
    pub fn backprop_interpolated_gradient(&self, x: &Vec3, upstream: Vec3) -> Result<SparseGrad> {
        let s = self.interpolate(x)?;
        let mut raw = Vec::with_capacity(4 * MAX_CORNERS);
        for c in 0..s.n_corners {
            let w = s.weights[c];
            let adj = [w * upstream[0], w * upstream[1], w * upstream[2]];
            self.scatter_vertex_gradient_adjoint(s.corners[c], adj, |v, g| raw.push((v, g)));
        }
        Ok(SparseGrad::from_unsorted(raw))
    }

    /// Vertex contributions of `∂(upstream · grad⁽ᵃ⁾(x)) / ∂f[v]`.
    pub fn backprop_analytical_gradient(&self, x: &Vec3, upstream: Vec3) -> Result<SparseGrad> {
        let s = self.interpolate(x)?;
        let raw = (0..s.n_corners)
            .map(|c| {
                let gw = s.weight_grads[c];
                (s.corners[c], gw[0] * upstream[0] + gw[1] * upstream[1] + gw[2] * upstream[2])
            })
            .collect();
        Ok(SparseGrad::from_unsorted(raw))
    }

    /// Vertex contributions of `∂(upstream · f(x)) / ∂f[v]`, i.e. `upstream · wᵢ`.
    pub fn backprop_value(&self, x: &Vec3, upstream: f64) -> Result<SparseGrad> {
        let s = self.interpolate(x)?;
        let raw = (0..s.n_corners)
            .map(|c| (s.corners[c], upstream * s.weights[c]))
            .collect();
        Ok(SparseGrad::from_unsorted(raw))
    }

    /// Resamples onto a finer lattice spanning the same box.
    pub fn upsample(&self, new_resolution: &[usize]) -> Result<SdfGrid> {
        if new_resolution.len() != self.dim {
            return Err(Error::InvalidResolution(format!(
                "expected {} axes, got {}",
                self.dim,
                new_resolution.len()
            )));
        }
        for a in 0..self.dim {
            if new_resolution[a] <= self.resolution[a] {
                return Err(Error::InvalidResolution(format!(
                    "axis {a}: {} is not larger than {}",
                    new_resolution[a], self.resolution[a]
                )));
            }
        }
        let ratio = |a: usize| (self.resolution[a] - 1) as f64 / (new_resolution[a] - 1) as f64;
        for a in 1..self.dim {
            if (ratio(a) - ratio(0)).abs() > 1e-12 {
                return Err(Error::InvalidResolution(
                    "axes would end up with different spacings".into(),
                ));
            }
        }
        let spacing = self.spacing * ratio(0);
        let mut out = SdfGrid::new(self.dim, new_resolution, &self.origin[..self.dim], spacing)?;
        let old_top: Vec<usize> = (0..self.dim).map(|a| self.resolution[a] - 1).collect();
        let new_top: Vec<usize> = new_resolution.iter().map(|r| r - 1).collect();
        let meta = out.clone_meta();
        out.values.par_iter_mut().enumerate().for_each(|(i, v)| {
            let c = meta.coords(i);
            let mut u = [0.0; 3];
            for a in 0..self.dim {
                // exact when the new vertex coincides with an old one
                u[a] = (c[a] * old_top[a]) as f64 / new_top[a] as f64;
            }
            *v = self.interpolate_lattice(u).value as f32;
        });
        Ok(out)
    }

    /// Separable truncated Gaussian with radius `⌈2σ/ε⌉` taps and clamped
    /// edges. `sigma` is in world units; zero returns an identical grid.
    pub fn gaussian_filter(&self, sigma: f64) -> SdfGrid {
        if sigma <= 0.0 {
            return self.clone();
        }
        let sl = sigma / self.spacing;
        let radius = (2.0 * sl).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|j| (-(j * j) as f64 / (2.0 * sl * sl)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);

        let mut cur: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        let strides = self.strides();
        for a in 0..self.dim {
            let n = self.resolution[a] as isize;
            let s = strides[a];
            let next: Vec<f64> = (0..cur.len())
                .into_par_iter()
                .map(|i| {
                    let c = self.coords(i)[a] as isize;
                    let row = i - c as usize * s;
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(t, k)| {
                            let j = (c + t as isize - radius).clamp(0, n - 1) as usize;
                            k * cur[row + j * s]
                        })
                        .sum()
                })
                .collect();
            cur = next;
        }
        let mut out = self.clone();
        out.values = cur.into_iter().map(|v| v as f32).collect();
        out
    }

    /// Writes the little-endian binary form: magic `SDFG`, `u32` dim, `u32`
    /// resolutions, `f64` origin, `f64` spacing, then `f32` values x-fastest.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for a in 0..self.dim {
            w.write_all(&(self.resolution[a] as u32).to_le_bytes())?;
        }
        for a in 0..self.dim {
            w.write_all(&self.origin[a].to_le_bytes())?;
        }
        w.write_all(&self.spacing.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<SdfGrid> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad grid magic".into()));
        }
        let dim = read_u32(r)? as usize;
        if dim != 2 && dim != 3 {
            return Err(Error::Format(format!("bad grid dimension {dim}")));
        }
        let mut res = Vec::with_capacity(dim);
        for _ in 0..dim {
            res.push(read_u32(r)? as usize);
        }
        let mut origin = Vec::with_capacity(dim);
        for _ in 0..dim {
            origin.push(read_f64(r)?);
        }
        let spacing = read_f64(r)?;
        let grid = SdfGrid::new(dim, &res, &origin, spacing)
            .map_err(|e| Error::Format(format!("bad grid header: {e}")))?;
        let mut buf = vec![0u8; grid.len() * 4];
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        grid.with_values(values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SdfGrid> {
        SdfGrid::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Interpolated gradient from an already computed sample.
#[inline]
pub fn interpolated_gradient_of(s: &InterpolationSample, n: &VertexGradients) -> Vec3 {
    let mut g = Vec3::zeros();
    for c in 0..s.n_corners {
        let w = s.weights[c];
        let nv = n.data[s.corners[c]];
        g[0] += w * nv[0];
        g[1] += w * nv[1];
        g[2] += w * nv[2];
    }
    g
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
