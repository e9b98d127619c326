//! Marching cubes, ASCII PLY I/O, area-weighted surface sampling and the
//! Chamfer distance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::sdf_grid::SdfGrid;

/// Triangles with a smaller area are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-14;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unnormalized normal `(b − a) × (c − a)`; its length is twice the area.
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self, t: usize) -> f64 {
        0.5 * self.face_normal(t).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Format("triangle index out of range".into()));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Format("non-finite vertex position".into()));
        }
        Ok(())
    }

    /// Undirected edges used by a number of triangles other than two.
    pub fn non_manifold_edges(&self) -> usize {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c != 2).count()
    }

    pub fn write_ply(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "ply\nformat ascii 1.0")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        writeln!(w, "property double x\nproperty double y\nproperty double z")?;
        writeln!(w, "element face {}", self.triangles.len())?;
        writeln!(w, "property list uchar int vertex_indices\nend_header")?;
        for v in &self.vertices {
            writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Reads the ASCII PLY subset written by [`Self::write_ply`]: a vertex
    /// element whose first three properties are x, y, z and a face element
    /// of triangles.
    pub fn read_ply(r: &mut impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format("unexpected end of PLY".into()))?
                .map_err(Error::from)
        };
        if next()?.trim() != "ply" {
            return Err(Error::Format("missing ply magic".into()));
        }
        let (mut n_vert, mut n_face, mut n_props) = (0usize, 0usize, 0usize);
        let mut current = String::new();
        loop {
            let line = next()?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => {
                    return Err(Error::Format(format!("unsupported PLY format '{fmt}'")))
                }
                ["element", name, n] => {
                    let n: usize = n.parse().map_err(|_| Error::Format("bad element count".into()))?;
                    current = name.to_string();
                    match *name {
                        "vertex" => n_vert = n,
                        "face" => n_face = n,
                        _ => {}
                    }
                }
                ["property", ..] if current == "vertex" => n_props += 1,
                ["end_header"] => break,
                _ => {}
            }
        }
        if n_vert > 0 && n_props < 3 {
            return Err(Error::Format("vertex element lacks x y z".into()));
        }
        let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number '{s}'"))) };
        let mut vertices = Vec::with_capacity(n_vert);
        for _ in 0..n_vert {
            let line = next()?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 3 {
                return Err(Error::Format("short vertex line".into()));
            }
            vertices.push(Vec3::new(parse(tok[0])?, parse(tok[1])?, parse(tok[2])?));
        }
        let mut triangles = Vec::with_capacity(n_face);
        for _ in 0..n_face {
            let line = next()?;
            let idx: Vec<u32> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| Error::Format(format!("bad index '{s}'"))))
                .collect::<Result<_>>()?;
            if idx.first() != Some(&3) || idx.len() != 4 {
                return Err(Error::Format("only triangle faces are supported".into()));
            }
            triangles.push([idx[1], idx[2], idx[3]]);
        }
        let mesh = Self {
            vertices,
            triangles,
            normals: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_ply(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_ply(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_ply(&mut BufReader::new(File::open(path)?))
    }
}

/// Corner pair of each of the 12 cube edges; corner bit `a` is the offset
/// along axis `a`.
const EDGES: [(u8, u8); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn edge_of(a: u8, b: u8) -> usize {
    let (a, b) = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == (a, b)).expect("corners share an edge")
}

/// Triangles per inside-corner mask, as cube-edge indices.
fn case_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256u32).map(|m| build_case(m as u8)).collect())
}

/// Traces the iso-contour on every cube face, chains the segments into
/// loops and fans them. On a face with two diagonal inside corners the
/// inside corners are kept apart; neighbouring cubes see the same face
/// pattern, so shared faces get matching contours.
fn build_case(mask: u8) -> Vec<[u8; 3]> {
    let inside = |c: u8| mask >> c & 1 == 1;
    let mut next: [Option<u8>; 12] = [None; 12];
    for axis in 0..3u8 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2u8 {
            let at = |u: u8, v: u8| (side << axis) | (u << b) | (v << c);
            // counter-clockwise seen from outside the cube
            let mut cycle = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)];
            if side == 0 {
                cycle.reverse();
            }
            let mut entering = Vec::new();
            let mut crossings = Vec::new();
            for i in 0..4 {
                let (p, q) = (cycle[i], cycle[(i + 1) % 4]);
                if inside(p) != inside(q) {
                    crossings.push(edge_of(p, q) as u8);
                    entering.push(inside(q));
                }
            }
            let n = crossings.len();
            for i in 0..n {
                if entering[i] {
                    // the next crossing along the cycle leaves the inside run
                    let j = (i + 1) % n;
                    next[crossings[i] as usize] = Some(crossings[j]);
                }
            }
        }
    }
    let mut tris = Vec::new();
    let mut used = [false; 12];
    for start in 0..12u8 {
        if used[start as usize] || next[start as usize].is_none() {
            continue;
        }
        let mut ring = vec![start];
        used[start as usize] = true;
        let mut e = next[start as usize].expect("checked above");
        while e != start {
            ring.push(e);
            used[e as usize] = true;
            e = next[e as usize].expect("contour loops close");
        }
        for k in 1..ring.len() - 1 {
            tris.push([ring[0], ring[k], ring[k + 1]]);
        }
    }
    tris
}

/// Zero-level (or `level`) surface with vertices on grid edges by linear
/// interpolation; triangles face toward larger values.
pub fn marching_cubes(grid: &SdfGrid, level: f64) -> Result<TriangleMesh> {
    if grid.dim() != 3 {
        return Err(Error::InvalidResolution("marching cubes needs a 3D grid".into()));
    }
    let r = grid.resolution();
    if r.iter().any(|&n| n < 2) {
        return Err(Error::GridTooSmall { min: 2, got: r.to_vec() });
    }
    let table = case_table();
    let strides = grid.strides();
    let corner_index = |base: usize, c: u8| {
        base + (c & 1) as usize * strides[0] + (c >> 1 & 1) as usize * strides[1] + (c >> 2 & 1) as usize * strides[2]
    };
    // global edge key: lower vertex index · 3 + axis
    let edge_key = |base: usize, e: u8| {
        let (a, b) = EDGES[e as usize];
        let axis = (a ^ b).trailing_zeros() as usize;
        corner_index(base, a) * 3 + axis
    };
    let slabs: Vec<Vec<[usize; 3]>> = (0..r[2] - 1)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::new();
            for j in 0..r[1] - 1 {
                for i in 0..r[0] - 1 {
                    let base = grid.index(i, j, k);
                    let mut mask = 0u8;
                    for c in 0..8u8 {
                        if grid.get(corner_index(base, c)) < level {
                            mask |= 1 << c;
                        }
                    }
                    for t in &table[mask as usize] {
                        out.push([edge_key(base, t[0]), edge_key(base, t[1]), edge_key(base, t[2])]);
                    }
                }
            }
            out
        })
        .collect();
    let mut ids: HashMap<usize, u32> = HashMap::new();
    let mut mesh = TriangleMesh::default();
    for slab in slabs {
        for tri in slab {
            let mut idx = [0u32; 3];
            for (k, key) in tri.iter().enumerate() {
                idx[k] = *ids.entry(*key).or_insert_with(|| {
                    let v = key / 3;
                    let axis = key % 3;
                    let p = grid.vertex_position(v);
                    let q = grid.vertex_position(v + strides[axis]);
                    let (fp, fq) = (grid.get(v), grid.get(v + strides[axis]));
                    let t = (level - fp) / (fq - fp);
                    mesh.vertices.push(p + (q - p) * t);
                    (mesh.vertices.len() - 1) as u32
                });
            }
            mesh.triangles.push(idx);
        }
    }
    mesh.triangles.retain(|t| {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm() >= MIN_TRIANGLE_AREA
    });
    Ok(mesh)
}

/// `n` points uniform by area, deterministic per seed.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.area(t);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect())
}

/// Static 3D kd-tree for nearest-neighbour distance queries.
pub struct KdTree {
    points: Vec<Vec3>,
    /// Implicit balanced tree over `points` reordered in place; node `lo..hi`
    /// splits at `mid` along `axes[mid]`.
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut pts = points.to_vec();
        let mut axes = vec![0u8; pts.len()];
        Self::build(&mut pts, &mut axes, 0, points.len());
        Self { points: pts, axes }
    }

    fn build(pts: &mut [Vec3], axes: &mut [u8], lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let slice = &pts[lo..hi];
        let mut min = slice[0];
        let mut max = slice[0];
        for p in slice {
            min = min.inf(p);
            max = max.sup(p);
        }
        let ext = max - min;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (lo + hi) / 2;
        pts[lo..hi].select_nth_unstable_by(mid - lo, |a, b| a[axis].total_cmp(&b[axis]));
        axes[mid] = axis as u8;
        Self::build(pts, axes, lo, mid);
        Self::build(pts, axes, mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance from `q` to the nearest stored point.
    pub fn nearest_distance(&self, q: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.points.len(), &mut best);
        best.sqrt()
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = &self.points[mid];
        let d2 = (p - q).norm_squared();
        if d2 < *best {
            *best = d2;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff < *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn mean_nearest(from: &[Vec3], tree: &KdTree) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|p| tree.nearest_distance(p)).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// `½ (mean_a min_b ‖a − b‖ + mean_b min_a ‖a − b‖)`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    Ok(0.5 * (mean_nearest(a, &tb) + mean_nearest(b, &ta)))
}

/// One-sided mean distance from `a` to its nearest neighbour in `b`.
pub fn mean_distance_to(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(mean_nearest(a, &KdTree::new(b)))
}
