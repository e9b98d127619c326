//! View-dependent color model, parameterized independently of the SDF grid.
//!
//! Position goes through a multi-resolution hashed feature grid; the features,
//! a polynomial view-direction encoding and the surface normal feed a small
//! two-hidden-layer decoder with sigmoid output. The only path from color back
//! to geometry is the normal input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::sdf_grid::{read_f64, read_u32};

const MAGIC: &[u8; 4] = b"RADF";
const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
/// Powers of each view-direction component fed to the decoder.
pub const VIEW_DEGREE: usize = 4;
const VIEW_FEATURES: usize = 3 * VIEW_DEGREE;

/// Hash-grid and decoder sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadianceConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub hidden_width: usize,
}

impl Default for RadianceConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            log2_table_size: 14,
            features_per_level: 2,
            base_resolution: 16,
            max_resolution: 256,
            hidden_width: 32,
        }
    }
}

impl RadianceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidConfig("radiance sizes must be positive".into()));
        }
        if self.base_resolution < 1 || self.max_resolution < self.base_resolution {
            return Err(Error::InvalidConfig(
                "radiance resolutions must satisfy 1 <= base <= max".into(),
            ));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 24 {
            return Err(Error::InvalidConfig("log2_table_size must be in 1..=24".into()));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    pub fn feature_len(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn input_len(&self) -> usize {
        self.feature_len() + VIEW_FEATURES + 3
    }

    /// Per-level lattice resolutions, geometric between base and max.
    pub fn level_resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.base_resolution];
        }
        let growth = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln())
            / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|l| {
                let r = self.base_resolution as f64 * (growth * l as f64).exp();
                // guard against 255.9999 style rounding
                (r + 1e-9).floor().max(1.0) as usize
            })
            .collect()
    }

    fn decoder_layout(&self) -> DecoderLayout {
        let i = self.input_len();
        let h = self.hidden_width;
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + 3 * h;
        DecoderLayout {
            input: i,
            hidden: h,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DecoderLayout {
    input: usize,
    hidden: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

/// Trainable radiance parameters: hashed feature tables and decoder weights.
#[derive(Clone, Debug)]
pub struct RadianceParams {
    config: RadianceConfig,
    aabb: Aabb,
    level_res: Vec<usize>,
    dense_level: Vec<bool>,
    layout: DecoderLayout,
    tables: Vec<f32>,
    decoder: Vec<f32>,
    decoder64: Vec<f64>,
}

impl PartialEq for RadianceParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.aabb == other.aabb
            && self.tables == other.tables
            && self.decoder == other.decoder
    }
}

/// Forward intermediates of one `shade` call, reused by the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ShadeCache {
    pub input: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub color: [f64; 3],
    /// `(flat offset of the entry's first feature, interpolation weight)` for
    /// every level and corner.
    pub entries: Vec<(usize, f64)>,
}

/// Gradient accumulator for [`RadianceParams`].
///
/// Table gradients are kept dense with a list of touched entries so that
/// clearing and merging cost only what was written.
#[derive(Clone, Debug)]
pub struct RadianceGrad {
    pub tables: Vec<f64>,
    pub decoder: Vec<f64>,
    touched: Vec<usize>,
    mark: Vec<bool>,
    features: usize,
}

impl RadianceGrad {
    pub fn new(params: &RadianceParams) -> Self {
        let f = params.config.features_per_level;
        Self {
            tables: vec![0.0; params.tables.len()],
            decoder: vec![0.0; params.decoder.len()],
            touched: Vec::new(),
            mark: vec![false; params.tables.len() / f],
            features: f,
        }
    }

    #[inline]
    fn add_entry(&mut self, offset: usize, grads: &[f64]) {
        let e = offset / self.features;
        if !self.mark[e] {
            self.mark[e] = true;
            self.touched.push(e);
        }
        for (k, g) in grads.iter().enumerate() {
            self.tables[offset + k] += g;
        }
    }

    /// Touched table entries (entry index, not flat offset), sorted.
    pub fn touched_entries(&self) -> Vec<usize> {
        let mut t = self.touched.clone();
        t.sort_unstable();
        t
    }

    /// Sparse `(flat offset, gradient)` view of the table gradient, sorted.
    pub fn table_entries(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.touched.len() * self.features);
        for e in self.touched_entries() {
            for k in 0..self.features {
                let i = e * self.features + k;
                out.push((i, self.tables[i]));
            }
        }
        out
    }

    pub fn clear(&mut self) {
        for &e in &self.touched {
            self.mark[e] = false;
            for k in 0..self.features {
                self.tables[e * self.features + k] = 0.0;
            }
        }
        self.touched.clear();
        self.decoder.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `self` into `other`.
    pub fn merge_into(&self, other: &mut RadianceGrad) {
        for &e in &self.touched {
            let off = e * self.features;
            other.add_entry(off, &self.tables[off..off + self.features]);
        }
        for (o, g) in other.decoder.iter_mut().zip(&self.decoder) {
            *o += g;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for &e in &self.touched {
            for k in 0..self.features {
                self.tables[e * self.features + k] *= s;
            }
        }
        self.decoder.iter_mut().for_each(|g| *g *= s);
    }
}

impl RadianceParams {
    /// All-zero parameters.
    pub fn zeros(config: RadianceConfig, aabb: Aabb) -> Result<Self> {
        config.validate()?;
        let level_res = config.level_resolutions();
        let t = config.table_size();
        let dense_level = level_res.iter().map(|&n| (n + 1).pow(3) <= t).collect();
        let layout = config.decoder_layout();
        let tables = vec![0.0; config.levels * t * config.features_per_level];
        Ok(Self {
            level_res,
            dense_level,
            layout,
            tables,
            decoder: vec![0.0; layout.len],
            decoder64: vec![0.0; layout.len],
            config,
            aabb,
        })
    }

    /// Random initialization: tables uniform in `±1e-4`, decoder weights
    /// He-uniform, biases zero.
    pub fn new(config: RadianceConfig, aabb: Aabb, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config, aabb)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in p.tables.iter_mut() {
            *v = rng.gen_range(-1e-4f32..1e-4);
        }
        let l = p.layout;
        let mut init = |start: usize, count: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            for w in &mut p.decoder[start..start + count] {
                *w = rng.gen_range(-bound..bound);
            }
        };
        init(l.w1, l.hidden * l.input, l.input, &mut rng);
        init(l.w2, l.hidden * l.hidden, l.hidden, &mut rng);
        init(l.w3, 3 * l.hidden, l.hidden, &mut rng);
        p.sync_decoder();
        Ok(p)
    }

    pub fn config(&self) -> &RadianceConfig {
        &self.config
    }

    pub fn aabb(&self) -> Aabb {
        self.aabb
    }

    pub fn level_resolutions(&self) -> &[usize] {
        &self.level_res
    }

    pub fn tables(&self) -> &[f32] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [f32] {
        &mut self.tables
    }

    pub fn decoder(&self) -> &[f32] {
        &self.decoder
    }

    /// Mutates decoder weights and refreshes the cached f64 copy.
    pub fn update_decoder(&mut self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.decoder);
        self.sync_decoder();
    }

    fn sync_decoder(&mut self) {
        for (d, s) in self.decoder64.iter_mut().zip(&self.decoder) {
            *d = *s as f64;
        }
    }

    /// Decoder weight/bias offsets: `(w1, b1, w2, b2, w3, b3)`.
    pub fn decoder_offsets(&self) -> [usize; 6] {
        let l = self.layout;
        [l.w1, l.b1, l.w2, l.b2, l.w3, l.b3]
    }

    /// Table index of a lattice vertex on one level.
    #[inline]
    fn table_index(&self, level: usize, c: [u32; 3]) -> usize {
        let t = self.config.table_size();
        if self.dense_level[level] {
            let n = self.level_res[level] + 1;
            c[0] as usize + n * (c[1] as usize + n * c[2] as usize)
        } else {
            let h = c[0].wrapping_mul(PRIMES[0])
                ^ c[1].wrapping_mul(PRIMES[1])
                ^ c[2].wrapping_mul(PRIMES[2]);
            h as usize & (t - 1)
        }
    }

    fn normalized(&self, x: &Vec3) -> Result<[f64; 3]> {
        let mut u = [0.0; 3];
        for a in 0..3 {
            let ext = self.aabb.max[a] - self.aabb.min[a];
            let mut ua = (x[a] - self.aabb.min[a]) / ext;
            if !(-1e-9..=1.0 + 1e-9).contains(&ua) {
                return Err(Error::QueryOutsideGrid([x[0], x[1], x[2]]));
            }
            ua = ua.clamp(0.0, 1.0);
            u[a] = ua;
        }
        Ok(u)
    }

    /// Writes hash-grid features of `x` into `cache.input[..L·F]` and records
    /// the touched entries.
    pub fn encode_into(&self, x: &Vec3, cache: &mut ShadeCache) -> Result<()> {
        let u = self.normalized(x)?;
        let f = self.config.features_per_level;
        let t = self.config.table_size();
        cache.input.resize(self.layout.input, 0.0);
        cache.entries.clear();
        for (level, &n) in self.level_res.iter().enumerate() {
            let mut base = [0u32; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let s = u[a] * n as f64;
                let b = (s.floor() as usize).min(n - 1);
                base[a] = b as u32;
                frac[a] = s - b as f64;
            }
            let feats = &mut cache.input[level * f..(level + 1) * f];
            feats.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..8u32 {
                let mut w = 1.0;
                let mut corner = base;
                for a in 0..3 {
                    if c >> a & 1 == 1 {
                        corner[a] += 1;
                        w *= frac[a];
                    } else {
                        w *= 1.0 - frac[a];
                    }
                }
                let off = (level * t + self.table_index(level, corner)) * f;
                for (k, v) in feats.iter_mut().enumerate() {
                    *v += w * self.tables[off + k] as f64;
                }
                cache.entries.push((off, w));
            }
        }
        Ok(())
    }

    /// Hash-grid feature vector of length `L·F`.
    pub fn encode(&self, x: &Vec3) -> Result<Vec<f64>> {
        let mut cache = ShadeCache::default();
        self.encode_into(x, &mut cache)?;
        cache.input.truncate(self.config.feature_len());
        Ok(cache.input)
    }

    /// Color at `x` seen along unit direction `v` with unit normal `n`.
    pub fn shade(&self, x: &Vec3, v: &Vec3, n: &Vec3) -> Result<[f64; 3]> {
        let mut cache = ShadeCache::default();
        self.shade_into(x, v, n, &mut cache)
    }

    pub fn shade_into(&self, x: &Vec3, v: &Vec3, n: &Vec3, cache: &mut ShadeCache) -> Result<[f64; 3]> {
        self.encode_into(x, cache)?;
        let fl = self.config.feature_len();
        {
            let view = &mut cache.input[fl..fl + VIEW_FEATURES];
            for a in 0..3 {
                let mut p = 1.0;
                for d in 0..VIEW_DEGREE {
                    p *= v[a];
                    view[a * VIEW_DEGREE + d] = p;
                }
            }
            let nn = &mut cache.input[fl + VIEW_FEATURES..];
            nn.copy_from_slice(&[n[0], n[1], n[2]]);
        }
        let l = self.layout;
        let w = &self.decoder64;
        cache.h1.resize(l.hidden, 0.0);
        cache.h2.resize(l.hidden, 0.0);
        for h in 0..l.hidden {
            let row = &w[l.w1 + h * l.input..l.w1 + (h + 1) * l.input];
            let z = w[l.b1 + h] + dot(row, &cache.input);
            cache.h1[h] = z.max(0.0);
        }
        for h in 0..l.hidden {
            let row = &w[l.w2 + h * l.hidden..l.w2 + (h + 1) * l.hidden];
            let z = w[l.b2 + h] + dot(row, &cache.h1);
            cache.h2[h] = z.max(0.0);
        }
        for c in 0..3 {
            let row = &w[l.w3 + c * l.hidden..l.w3 + (c + 1) * l.hidden];
            let z = w[l.b3 + c] + dot(row, &cache.h2);
            cache.color[c] = sigmoid(z);
        }
        Ok(cache.color)
    }

    /// Accumulates parameter gradients of `upstream · color` into `grad` and
    /// returns `∂(upstream · color)/∂n`.
    pub fn backprop_shade(&self, cache: &ShadeCache, upstream: [f64; 3], grad: &mut RadianceGrad) -> Vec3 {
        if upstream == [0.0; 3] {
            return Vec3::zeros();
        }
        let l = self.layout;
        let w = &self.decoder64;
        let dw = &mut grad.decoder;
        let mut dz3 = [0.0; 3];
        for c in 0..3 {
            let col = cache.color[c];
            dz3[c] = upstream[c] * col * (1.0 - col);
        }
        let mut dh2 = vec![0.0; l.hidden];
        for c in 0..3 {
            let g = dz3[c];
            dw[l.b3 + c] += g;
            let roff = l.w3 + c * l.hidden;
            for h in 0..l.hidden {
                dw[roff + h] += g * cache.h2[h];
                dh2[h] += g * w[roff + h];
            }
        }
        let mut dh1 = vec![0.0; l.hidden];
        for h in 0..l.hidden {
            if cache.h2[h] <= 0.0 {
                continue;
            }
            let g = dh2[h];
            dw[l.b2 + h] += g;
            let roff = l.w2 + h * l.hidden;
            axpy(g, &cache.h1, &mut dw[roff..roff + l.hidden]);
            axpy(g, &w[roff..roff + l.hidden], &mut dh1);
        }
        let mut dinput = vec![0.0; l.input];
        for h in 0..l.hidden {
            if cache.h1[h] <= 0.0 {
                continue;
            }
            let g = dh1[h];
            dw[l.b1 + h] += g;
            let roff = l.w1 + h * l.input;
            axpy(g, &cache.input, &mut dw[roff..roff + l.input]);
            axpy(g, &w[roff..roff + l.input], &mut dinput);
        }
        let f = self.config.features_per_level;
        let mut tmp = [0.0; 8];
        for (k, &(off, wt)) in cache.entries.iter().enumerate() {
            let level = k / 8;
            for j in 0..f {
                tmp[j] = wt * dinput[level * f + j];
            }
            grad.add_entry(off, &tmp[..f]);
        }
        let ns = self.config.feature_len() + VIEW_FEATURES;
        Vec3::new(dinput[ns], dinput[ns + 1], dinput[ns + 2])
    }

    /// Writes `RADF` + config + box + `f32` tables + `f32` decoder weights.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let c = &self.config;
        for v in [
            c.levels as u32,
            c.log2_table_size,
            c.features_per_level as u32,
            c.base_resolution as u32,
            c.max_resolution as u32,
            c.hidden_width as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.aabb.min.iter().chain(&self.aabb.max) {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * (self.tables.len() + self.decoder.len()));
        for v in self.tables.iter().chain(&self.decoder) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad radiance magic".into()));
        }
        let mut h = [0u32; 6];
        for v in h.iter_mut() {
            *v = read_u32(r)?;
        }
        let config = RadianceConfig {
            levels: h[0] as usize,
            log2_table_size: h[1],
            features_per_level: h[2] as usize,
            base_resolution: h[3] as usize,
            max_resolution: h[4] as usize,
            hidden_width: h[5] as usize,
        };
        let mut b = [0.0; 6];
        for v in b.iter_mut() {
            *v = read_f64(r)?;
        }
        let aabb = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]);
        let mut p = Self::zeros(config, aabb).map_err(|e| Error::Format(e.to_string()))?;
        let n = p.tables.len() + p.decoder.len();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)?;
        let mut vals = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for v in p.tables.iter_mut().chain(p.decoder.iter_mut()) {
            *v = vals.next().unwrap_or(0.0);
        }
        if p.tables.iter().chain(&p.decoder).any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite radiance parameter".into()));
        }
        p.sync_decoder();
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
