//! Eikonal and curvature losses on grid vertices with closed-form gradients.
//!
//! Both losses are means over the interior vertices of a vertex set `V_R`
//! (corners of every cube touched by a batch of samples). Vertices whose
//! central stencil would leave the grid are skipped.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::Vec3;
use crate::sdf_grid::{SdfGrid, VertexGradients};
use crate::sparse::{DenseAccumulator, SparseGrad};

/// Gradient-norm floor before inversion.
pub const NORM_FLOOR: f64 = 1e-12;

/// Vertices handled per parallel work item.
const CHUNK: usize = 4096;

/// Sorted unique corner indices of every cube touched by `points`.
pub fn collect_vertices(grid: &SdfGrid, points: &[Vec3]) -> Result<Vec<usize>> {
    let mut marked = vec![false; grid.len()];
    let mut out = Vec::new();
    for p in points {
        let s = grid.interpolate(p)?;
        for &c in s.corners() {
            if !marked[c] {
                marked[c] = true;
                out.push(c);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// True when every active axis has a neighbor on both sides.
#[inline]
pub fn is_interior(grid: &SdfGrid, v: usize) -> bool {
    let c = grid.coords(v);
    let r = grid.resolution();
    (0..grid.dim()).all(|a| c[a] > 0 && c[a] + 1 < r[a])
}

/// Interior members of `vertices`.
pub fn interior_vertices(grid: &SdfGrid, vertices: &[usize]) -> Vec<usize> {
    vertices.iter().copied().filter(|&v| is_interior(grid, v)).collect()
}

/// Per-vertex second differences `(∂²f/∂x², ∂²f/∂y², ∂²f/∂z²)`.
#[inline]
pub fn laplacian(grid: &SdfGrid, v: usize) -> [f64; 3] {
    let strides = grid.strides();
    let inv = 1.0 / (grid.spacing() * grid.spacing());
    let f0 = grid.get(v);
    let mut lap = [0.0; 3];
    for a in 0..grid.dim() {
        let s = strides[a];
        lap[a] = (grid.get(v + s) - 2.0 * f0 + grid.get(v - s)) * inv;
    }
    lap
}

#[inline]
fn eikonal_adjoint(n: [f64; 3], scale: f64) -> (f64, [f64; 3]) {
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let r = norm - 1.0;
    let k = scale * (1.0 - 1.0 / norm.max(NORM_FLOOR));
    (r * r, [k * n[0], k * n[1], k * n[2]])
}

/// Loss value and gradient of one regularizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegTerm {
    pub loss: f64,
    pub grad: SparseGrad,
    /// Number of interior vertices the mean runs over.
    pub count: usize,
}

/// Per-vertex work items, evaluated serially or in deterministic chunks.
fn per_vertex<T: Send>(
    vertices: &[usize],
    parallel: bool,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Vec<T> {
    if parallel {
        vertices
            .par_chunks(CHUNK)
            .flat_map_iter(|c| c.iter().map(|&v| f(v)).collect::<Vec<_>>())
            .collect()
    } else {
        vertices.iter().map(|&v| f(v)).collect()
    }
}

/// Adds `scale · ∂L_eik/∂f` into `out`; returns `L_eik`.
///
/// `L_eik = (1/|V|) Σ (‖n[v]‖ − 1)²` over the interior vertices of
/// `vertices`, chained through the central-difference stencil.
pub fn eikonal_into(
    grid: &SdfGrid,
    normals: &VertexGradients,
    vertices: &[usize],
    scale: f64,
    parallel: bool,
    mut out: impl FnMut(usize, f64),
) -> (f64, usize) {
    let interior = interior_vertices(grid, vertices);
    if interior.is_empty() {
        return (0.0, 0);
    }
    let m = interior.len() as f64;
    let terms = per_vertex(&interior, parallel, |v| eikonal_adjoint(normals.at(v), 2.0 * scale / m));
    let mut loss = 0.0;
    for (&v, (l, adj)) in interior.iter().zip(&terms) {
        loss += l;
        grid.scatter_vertex_gradient_adjoint(v, *adj, &mut out);
    }
    (loss / m, interior.len())
}

pub fn eikonal(grid: &SdfGrid, normals: &VertexGradients, vertices: &[usize]) -> RegTerm {
    let mut raw = Vec::new();
    let (loss, count) = eikonal_into(grid, normals, vertices, 1.0, false, |v, g| raw.push((v, g)));
    RegTerm {
        loss,
        grad: SparseGrad::from_unsorted(raw),
        count,
    }
}

/// Adds `scale · ∂L_curv/∂f` into `out`; returns `L_curv`.
///
/// `L_curv = (1/|V|) Σ ‖∇²f[v]‖²` with `{1, −2, 1}/ε²` second differences.
pub fn curvature_into(
    grid: &SdfGrid,
    vertices: &[usize],
    scale: f64,
    parallel: bool,
    mut out: impl FnMut(usize, f64),
) -> (f64, usize) {
    let interior = interior_vertices(grid, vertices);
    if interior.is_empty() {
        return (0.0, 0);
    }
    let m = interior.len() as f64;
    let laps = per_vertex(&interior, parallel, |v| laplacian(grid, v));
    let strides = grid.strides();
    let k = 2.0 * scale / (m * grid.spacing() * grid.spacing());
    let mut loss = 0.0;
    for (&v, lap) in interior.iter().zip(&laps) {
        for a in 0..grid.dim() {
            loss += lap[a] * lap[a];
            let g = k * lap[a];
            if g != 0.0 {
                out(v + strides[a], g);
                out(v, -2.0 * g);
                out(v - strides[a], g);
            }
        }
    }
    (loss / m, interior.len())
}

pub fn curvature(grid: &SdfGrid, vertices: &[usize]) -> RegTerm {
    let mut raw = Vec::new();
    let (loss, count) = curvature_into(grid, vertices, 1.0, false, |v, g| raw.push((v, g)));
    RegTerm {
        loss,
        grad: SparseGrad::from_unsorted(raw),
        count,
    }
}

/// `𝒢 + w_eik 𝒢_eik + w_curv 𝒢_curv`.
pub fn accumulate(
    base: &SparseGrad,
    eik: &SparseGrad,
    curv: &SparseGrad,
    w_eik: f64,
    w_curv: f64,
) -> SparseGrad {
    base.add_scaled(eik, w_eik).add_scaled(curv, w_curv)
}

/// How the combined regularizer gradient is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegMode {
    /// Generic reverse-mode tape over the whole expression.
    TapeOracle,
    ManualSerial,
    ManualParallel,
}

impl std::str::FromStr for RegMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tape-oracle" => Ok(Self::TapeOracle),
            "manual-serial" => Ok(Self::ManualSerial),
            "manual-parallel" => Ok(Self::ManualParallel),
            other => Err(crate::Error::InvalidConfig(format!("unknown regularizer mode '{other}'"))),
        }
    }
}

/// Combined regularizer output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegOutput {
    pub l_eik: f64,
    pub l_curv: f64,
    /// `w_eik ∂L_eik/∂f + w_curv ∂L_curv/∂f`.
    pub grad: SparseGrad,
}

/// Both regularizers weighted and summed, computed in the given mode.
pub fn regularize(
    grid: &SdfGrid,
    normals: &VertexGradients,
    vertices: &[usize],
    w_eik: f64,
    w_curv: f64,
    mode: RegMode,
) -> RegOutput {
    match mode {
        RegMode::TapeOracle => tape_regularize(grid, vertices, w_eik, w_curv),
        RegMode::ManualSerial | RegMode::ManualParallel => {
            let parallel = mode == RegMode::ManualParallel;
            let mut acc = DenseAccumulator::new(grid.len());
            let (l_eik, _) = eikonal_into(grid, normals, vertices, w_eik, parallel, |v, g| acc.add(v, g));
            let (l_curv, _) = curvature_into(grid, vertices, w_curv, parallel, |v, g| acc.add(v, g));
            RegOutput {
                l_eik,
                l_curv,
                grad: acc.to_sparse(),
            }
        }
    }
}

/// Minimal scalar reverse-mode tape.
mod tape {
    #[derive(Clone, Copy)]
    struct Node {
        parents: [(usize, f64); 2],
        arity: u8,
    }

    #[derive(Default)]
    pub struct Tape {
        nodes: Vec<Node>,
        values: Vec<f64>,
    }

    impl Tape {
        fn push(&mut self, value: f64, parents: [(usize, f64); 2], arity: u8) -> usize {
            self.nodes.push(Node { parents, arity });
            self.values.push(value);
            self.values.len() - 1
        }

        pub fn leaf(&mut self, value: f64) -> usize {
            self.push(value, [(0, 0.0); 2], 0)
        }

        pub fn value(&self, a: usize) -> f64 {
            self.values[a]
        }

        pub fn add(&mut self, a: usize, b: usize) -> usize {
            self.push(self.values[a] + self.values[b], [(a, 1.0), (b, 1.0)], 2)
        }

        pub fn mul(&mut self, a: usize, b: usize) -> usize {
            let (x, y) = (self.values[a], self.values[b]);
            self.push(x * y, [(a, y), (b, x)], 2)
        }

        /// `k_a · a + k_b · b`.
        pub fn lin(&mut self, a: usize, ka: f64, b: usize, kb: f64) -> usize {
            self.push(ka * self.values[a] + kb * self.values[b], [(a, ka), (b, kb)], 2)
        }

        pub fn offset(&mut self, a: usize, c: f64) -> usize {
            self.push(self.values[a] + c, [(a, 1.0), (0, 0.0)], 1)
        }

        pub fn scale(&mut self, a: usize, k: f64) -> usize {
            self.push(self.values[a] * k, [(a, k), (0, 0.0)], 1)
        }

        pub fn sqrt(&mut self, a: usize, floor: f64) -> usize {
            let r = self.values[a].sqrt();
            self.push(r, [(a, 0.5 / r.max(floor)), (0, 0.0)], 1)
        }

        pub fn backward(&self, out: usize) -> Vec<f64> {
            let mut adj = vec![0.0; self.values.len()];
            adj[out] = 1.0;
            for i in (0..=out).rev() {
                let g = adj[i];
                if g == 0.0 {
                    continue;
                }
                let n = self.nodes[i];
                for &(p, d) in &n.parents[..n.arity as usize] {
                    adj[p] += g * d;
                }
            }
            adj
        }
    }
}

/// Reference implementation on a generic tape. Slow; used as an oracle and
/// as the baseline of the regularizer benchmark.
fn tape_regularize(grid: &SdfGrid, vertices: &[usize], w_eik: f64, w_curv: f64) -> RegOutput {
    let interior = interior_vertices(grid, vertices);
    if interior.is_empty() {
        return RegOutput::default();
    }
    let mut t = tape::Tape::default();
    let mut leaves: HashMap<usize, usize> = HashMap::new();
    let mut leaf = |t: &mut tape::Tape, v: usize| *leaves.entry(v).or_insert_with(|| t.leaf(grid.get(v)));
    let strides = grid.strides();
    let h = grid.spacing();
    let m = interior.len() as f64;
    let zero = t.leaf(0.0);
    let mut eik_sum = zero;
    let mut curv_sum = zero;
    for &v in &interior {
        let center = leaf(&mut t, v);
        let mut sq = zero;
        let mut lap_sq = zero;
        for a in 0..grid.dim() {
            let plus = leaf(&mut t, v + strides[a]);
            let minus = leaf(&mut t, v - strides[a]);
            let n = t.lin(plus, 0.5 / h, minus, -0.5 / h);
            let n2 = t.mul(n, n);
            sq = t.add(sq, n2);
            let side = t.add(plus, minus);
            let lap = t.lin(side, 1.0 / (h * h), center, -2.0 / (h * h));
            let l2 = t.mul(lap, lap);
            lap_sq = t.add(lap_sq, l2);
        }
        let norm = t.sqrt(sq, NORM_FLOOR);
        let r = t.offset(norm, -1.0);
        let r2 = t.mul(r, r);
        eik_sum = t.add(eik_sum, r2);
        curv_sum = t.add(curv_sum, lap_sq);
    }
    let l_eik = t.scale(eik_sum, 1.0 / m);
    let l_curv = t.scale(curv_sum, 1.0 / m);
    let total = t.lin(l_eik, w_eik, l_curv, w_curv);
    let adj = t.backward(total);
    let raw: Vec<(usize, f64)> = leaves.iter().map(|(&v, &node)| (v, adj[node])).collect();
    let mut grad = SparseGrad::from_unsorted(raw);
    if grad.entries().iter().any(|e| e.1 == 0.0) {
        grad = SparseGrad::from_unsorted(grad.iter().filter(|e| e.1 != 0.0).collect());
    }
    RegOutput {
        l_eik: t.value(l_eik),
        l_curv: t.value(l_curv),
        grad,
    }
}
