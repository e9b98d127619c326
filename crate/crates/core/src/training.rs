//! Optimization loop: photometric and mask losses, sparse Adam, weight
//! schedules, s-gradient amplification and coarse-to-fine grid upsampling.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radiance_field::{RadianceConfig, RadianceGrad, RadianceParams};
use crate::regularizer;
use crate::renderer::{self, GeometryGradList, RayRender, RenderConfig};
use crate::scene_synth::Dataset;
use crate::sdf_grid::{read_f64, read_u32, SdfGrid, VertexGradients};
use crate::sparse::{DenseAccumulator, SparseGrad};

/// Opacity clamp inside the mask cross-entropy.
pub const MASK_CLAMP: f64 = 1e-6;
/// Rays per parallel work item. Fixed so results do not depend on the
/// thread count.
const CHUNK_RAYS: usize = 32;

/// Output of [`loss`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub l_rgb: f64,
    pub l_mask: f64,
    /// `∂L/∂Ĉ` per ray.
    pub d_color: Vec<[f64; 3]>,
    /// `∂L/∂(Σwᵢ)` per ray.
    pub d_opacity: Vec<f64>,
}

/// L1 color error and binary cross-entropy of one ray, with derivatives
/// scaled for a batch mean over `batch` rays.
#[inline]
fn ray_loss(
    pred: [f64; 3],
    target: [f64; 3],
    mask: Option<(f64, f64)>,
    w_mask: f64,
    batch: f64,
) -> (f64, f64, [f64; 3], f64) {
    let mut l1 = 0.0;
    let mut d = [0.0; 3];
    for k in 0..3 {
        let r = pred[k] - target[k];
        l1 += r.abs() / 3.0;
        d[k] = if r > 0.0 {
            1.0 / (3.0 * batch)
        } else if r < 0.0 {
            -1.0 / (3.0 * batch)
        } else {
            0.0
        };
    }
    let (mut bce, mut d_op) = (0.0, 0.0);
    if let (Some((o, m)), true) = (mask, w_mask > 0.0) {
        let oc = o.clamp(MASK_CLAMP, 1.0 - MASK_CLAMP);
        bce = -(m * oc.ln() + (1.0 - m) * (1.0 - oc).ln());
        if oc == o {
            d_op = w_mask * (-m / oc + (1.0 - m) / (1.0 - oc)) / batch;
        }
    }
    (l1, bce, d, d_op)
}

/// `L = L_RGB + w_mask · L_mask`, both means over the batch.
pub fn loss(
    preds: &[[f64; 3]],
    targets: &[[f64; 3]],
    masks: Option<(&[f64], &[f64])>,
    w_mask: f64,
) -> Result<LossOutput> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    if let Some((o, m)) = masks {
        if o.len() != preds.len() || m.len() != preds.len() {
            return Err(Error::ShapeMismatch("mask arrays differ in length from the batch".into()));
        }
    }
    let b = preds.len().max(1) as f64;
    let mut out = LossOutput {
        d_color: Vec::with_capacity(preds.len()),
        d_opacity: Vec::with_capacity(preds.len()),
        ..Default::default()
    };
    for i in 0..preds.len() {
        let mask = masks.map(|(o, m)| (o[i], m[i]));
        let (l1, bce, d, d_op) = ray_loss(preds[i], targets[i], mask, w_mask, b);
        out.l_rgb += l1 / b;
        out.l_mask += bce / b;
        out.d_color.push(d);
        out.d_opacity.push(d_op);
    }
    out.total = out.l_rgb + if w_mask > 0.0 { w_mask * out.l_mask } else { 0.0 };
    if w_mask <= 0.0 {
        out.l_mask = 0.0;
    }
    Ok(out)
}

/// Scales a negative `∂L/∂(ln s)` by `k`, leaving non-negative values alone.
pub fn amplify_s_gradient(g: f64, k: f64) -> f64 {
    if g < 0.0 {
        k * g
    } else {
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

/// One Adam update of a scalar; `t` is the 1-based update count.
#[inline]
pub fn adam_update(p: f64, g: f64, m: &mut f64, v: &mut f64, t: u32, hp: &AdamHyper) -> f64 {
    *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
    *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
    let mh = *m / (1.0 - hp.beta1.powi(t as i32));
    let vh = *v / (1.0 - hp.beta2.powi(t as i32));
    p - hp.lr * mh / (vh.sqrt() + hp.eps)
}

/// Adam that visits only entries with a nonzero gradient. Bias correction
/// uses each entry's own update count.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdam {
    pub hyper: AdamHyper,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub touches: Vec<u32>,
}

impl SparseAdam {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            m: vec![0.0; len],
            v: vec![0.0; len],
            touches: vec![0; len],
        }
    }

    pub fn reset(&mut self, len: usize) {
        *self = Self::new(len, self.hyper);
    }

    #[inline]
    pub fn update_one(&mut self, params: &mut [f32], i: usize, g: f64) {
        if g == 0.0 {
            return;
        }
        self.touches[i] += 1;
        let p = adam_update(params[i] as f64, g, &mut self.m[i], &mut self.v[i], self.touches[i], &self.hyper);
        params[i] = p as f32;
    }

    pub fn step(&mut self, params: &mut [f32], grads: &SparseGrad) {
        for &(i, g) in grads.entries() {
            self.update_one(params, i, g);
        }
    }
}

/// See [`SparseAdam`].
pub fn sparse_adam_step(params: &mut [f32], grads: &SparseGrad, state: &mut SparseAdam) {
    state.step(params, grads);
}

/// Plain Adam with one global step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseAdam {
    pub hyper: AdamHyper,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl DenseAdam {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_f32(&mut self, params: &mut [f32], grads: &[f64]) {
        self.t += 1;
        for i in 0..params.len() {
            params[i] = adam_update(params[i] as f64, grads[i], &mut self.m[i], &mut self.v[i], self.t, &self.hyper) as f32;
        }
    }

    pub fn step_f64(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        for i in 0..params.len() {
            params[i] = adam_update(params[i], grads[i], &mut self.m[i], &mut self.v[i], self.t, &self.hyper);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub grid: f64,
    pub tables: f64,
    pub decoder: f64,
    pub log_s: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            grid: 1e-2,
            tables: 1e-2,
            decoder: 1e-3,
            log_s: 1e-3,
        }
    }
}

/// Resolution ladder, loss weights and optimizer settings.
///
/// The weight schedules are defined on fractions of the total step count:
/// `w_eik` holds until `hold_frac` then falls linearly until `ramp_end_frac`;
/// `w_curv` holds, rises linearly over the same window, then decays
/// geometrically to its final value at the last step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    pub resolutions: Vec<usize>,
    pub milestones: Vec<usize>,
    pub eik_start: f64,
    pub eik_end: f64,
    pub curv_start: f64,
    pub curv_peak: f64,
    pub curv_end: f64,
    pub hold_frac: f64,
    pub ramp_end_frac: f64,
    pub amplify_k: f64,
    pub w_mask: f64,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            resolutions: vec![32, 64, 96],
            milestones: vec![0, 1000, 2000],
            eik_start: 1e-2,
            eik_end: 1e-3,
            curv_start: 1e-8,
            curv_peak: 5e-6,
            curv_end: 5e-7,
            hold_frac: 11.0 / 40.0,
            ramp_end_frac: 21.0 / 40.0,
            amplify_k: 5.0,
            w_mask: 0.0,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-15,
        }
    }
}

/// Weights in effect at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleTick {
    pub w_eik: f64,
    pub w_curv: f64,
    /// Set when the grid must be resampled before this step.
    pub resolution_change: Option<usize>,
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.resolutions.is_empty() || self.resolutions.len() != self.milestones.len() {
            return bad("resolutions and milestones must be non-empty and equally long");
        }
        if self.milestones[0] != 0 {
            return bad("the first milestone must be step 0");
        }
        if self.milestones.windows(2).any(|w| w[1] <= w[0]) || self.resolutions.windows(2).any(|w| w[1] <= w[0]) {
            return bad("milestones and resolutions must be strictly increasing");
        }
        if self.resolutions[0] < 3 {
            return bad("grid resolution must be at least 3");
        }
        if self.amplify_k < 1.0 {
            return bad("amplification factor k must be at least 1");
        }
        let weights = [
            self.eik_start,
            self.eik_end,
            self.curv_start,
            self.curv_peak,
            self.curv_end,
            self.w_mask,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if self.curv_peak <= 0.0 || self.curv_end <= 0.0 {
            return bad("curvature peak and end weights must be positive for geometric decay");
        }
        if !(0.0 <= self.hold_frac && self.hold_frac <= self.ramp_end_frac && self.ramp_end_frac <= 1.0) {
            return bad("schedule fractions must satisfy 0 <= hold <= ramp_end <= 1");
        }
        let lr = self.lr;
        if [lr.grid, lr.tables, lr.decoder, lr.log_s].iter().any(|v| !(*v >= 0.0)) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyperparameters");
        }
        Ok(())
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Grid resolution in effect at `step`.
    pub fn resolution_at(&self, step: usize) -> usize {
        let mut r = self.resolutions[0];
        for (m, res) in self.milestones.iter().zip(&self.resolutions) {
            if step >= *m {
                r = *res;
            }
        }
        r
    }

    /// Step at which the linear phases end.
    pub fn ramp_end_step(&self, total: usize) -> f64 {
        self.ramp_end_frac * total as f64
    }

    pub fn w_eik(&self, step: usize, total: usize) -> f64 {
        let (t0, t1) = (self.hold_frac * total as f64, self.ramp_end_frac * total as f64);
        let s = step as f64;
        if s <= t0 {
            self.eik_start
        } else if s >= t1 {
            self.eik_end
        } else {
            self.eik_start + (self.eik_end - self.eik_start) * (s - t0) / (t1 - t0)
        }
    }

    pub fn w_curv(&self, step: usize, total: usize) -> f64 {
        let (t0, t1) = (self.hold_frac * total as f64, self.ramp_end_frac * total as f64);
        let last = (total.max(1) - 1) as f64;
        let s = step as f64;
        if s <= t0 {
            self.curv_start
        } else if s <= t1 {
            self.curv_start + (self.curv_peak - self.curv_start) * (s - t0) / (t1 - t0)
        } else if last <= t1 || s >= last {
            self.curv_end
        } else {
            let u = (s - t1) / (last - t1);
            self.curv_peak * (self.curv_end / self.curv_peak).powf(u)
        }
    }
}

/// Weights at `step` of a `total`-step run, plus the upsampling event due
/// at this step, if any.
pub fn schedule_tick(s: &Schedules, step: usize, total: usize) -> ScheduleTick {
    let resolution_change = s
        .milestones
        .iter()
        .zip(&s.resolutions)
        .skip(1)
        .find(|(m, _)| **m == step)
        .map(|(_, r)| *r);
    ScheduleTick {
        w_eik: s.w_eik(step, total),
        w_curv: s.w_curv(step, total),
        resolution_change,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub seed: u64,
    pub init_s: f64,
    /// Radius of the initial sphere SDF as a fraction of the box side.
    pub init_radius_frac: f64,
    pub render: RenderConfig,
    pub radiance: RadianceConfig,
    pub schedules: Schedules,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_rays: 1024,
            seed: 0,
            init_s: 20.0,
            init_radius_frac: 0.3,
            render: RenderConfig::default(),
            radiance: RadianceConfig::default(),
            schedules: Schedules::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::InvalidConfig("batch_rays must be positive".into()));
        }
        if !(self.init_s > 0.0) {
            return Err(Error::InvalidConfig("init_s must be positive".into()));
        }
        if !(self.init_radius_frac > 0.0 && self.init_radius_frac < 0.5) {
            return Err(Error::InvalidConfig("init_radius_frac must lie in (0, 0.5)".into()));
        }
        if self.render.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        self.radiance.validate()?;
        self.schedules.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_rgb: f64,
    pub l_eik: f64,
    pub l_curv: f64,
    pub s: f64,
    pub psnr: f64,
}

pub const METRICS_HEADER: &str = "step,l_rgb,l_eik,l_curv,s,psnr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.l_rgb, self.l_eik, self.l_curv, self.s, self.psnr
        )
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[StepMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("unexpected metrics header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("bad metrics row '{l}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number '{s}'")));
            Ok(StepMetrics {
                step: f[0].parse().map_err(|_| Error::Format(format!("bad step '{}'", f[0])))?,
                l_rgb: num(f[1])?,
                l_eik: num(f[2])?,
                l_curv: num(f[3])?,
                s: num(f[4])?,
                psnr: num(f[5])?,
            })
        })
        .collect()
}

/// Model parameters plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub grid: SdfGrid,
    pub radiance: RadianceParams,
    pub log_s: f64,
    /// Number of completed steps.
    pub step: usize,
    pub seed: u64,
    pub grid_adam: SparseAdam,
    pub table_adam: SparseAdam,
    pub decoder_adam: DenseAdam,
    pub log_s_adam: DenseAdam,
}

impl TrainState {
    /// Sphere SDF centered in the box and freshly initialized radiance.
    pub fn init(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let aabb = dataset.scene.aabb;
        let mut grid = SdfGrid::over_aabb(&aabb, cfg.schedules.resolutions[0], 3)?;
        let c = aabb.center();
        let e = aabb.extent();
        let r = cfg.init_radius_frac * e.x.max(e.y).max(e.z);
        grid.fill_with(|p| (p - c).norm() - r);
        let radiance = RadianceParams::new(cfg.radiance.clone(), aabb, cfg.seed)?;
        let s = &cfg.schedules;
        Ok(Self {
            grid_adam: SparseAdam::new(grid.len(), s.hyper(s.lr.grid)),
            table_adam: SparseAdam::new(radiance.tables().len(), s.hyper(s.lr.tables)),
            decoder_adam: DenseAdam::new(radiance.decoder().len(), s.hyper(s.lr.decoder)),
            log_s_adam: DenseAdam::new(1, s.hyper(s.lr.log_s)),
            grid,
            radiance,
            log_s: cfg.init_s.ln(),
            step: 0,
            seed: cfg.seed,
        })
    }

    pub fn s(&self) -> f64 {
        self.log_s.exp()
    }

    /// Writes `grid.sdfg`, `radiance.radf` and `optimizer.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.grid.save(dir.join("grid.sdfg"))?;
        self.radiance.save(dir.join("radiance.radf"))?;
        let mut w = BufWriter::new(File::create(dir.join("optimizer.bin"))?);
        w.write_all(b"TRST")?;
        w.write_all(&(self.step as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.log_s.to_le_bytes())?;
        for a in [&self.grid_adam, &self.table_adam] {
            write_sparse_adam(&mut w, a)?;
        }
        for a in [&self.decoder_adam, &self.log_s_adam] {
            write_dense_adam(&mut w, a)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let grid = SdfGrid::load(dir.join("grid.sdfg"))?;
        let radiance = RadianceParams::load(dir.join("radiance.radf"))?;
        let mut r = BufReader::new(File::open(dir.join("optimizer.bin"))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"TRST" {
            return Err(Error::Format("not an optimizer-state file".into()));
        }
        let step = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let log_s = read_f64(&mut r)?;
        let grid_adam = read_sparse_adam(&mut r)?;
        let table_adam = read_sparse_adam(&mut r)?;
        let decoder_adam = read_dense_adam(&mut r)?;
        let log_s_adam = read_dense_adam(&mut r)?;
        if grid_adam.m.len() != grid.len()
            || table_adam.m.len() != radiance.tables().len()
            || decoder_adam.m.len() != radiance.decoder().len()
        {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            grid,
            radiance,
            log_s,
            step,
            seed,
            grid_adam,
            table_adam,
            decoder_adam,
            log_s_adam,
        })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_hyper(w: &mut impl Write, h: &AdamHyper) -> Result<()> {
    for v in [h.lr, h.beta1, h.beta2, h.eps] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_hyper(r: &mut impl Read) -> Result<AdamHyper> {
    Ok(AdamHyper {
        lr: read_f64(r)?,
        beta1: read_f64(r)?,
        beta2: read_f64(r)?,
        eps: read_f64(r)?,
    })
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
        .collect())
}

fn write_sparse_adam(w: &mut impl Write, a: &SparseAdam) -> Result<()> {
    write_hyper(w, &a.hyper)?;
    write_f64s(w, &a.m)?;
    write_f64s(w, &a.v)?;
    let mut buf = Vec::with_capacity(a.touches.len() * 4);
    for t in &a.touches {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_sparse_adam(r: &mut impl Read) -> Result<SparseAdam> {
    let hyper = read_hyper(r)?;
    let m = read_f64s(r)?;
    let v = read_f64s(r)?;
    if v.len() != m.len() {
        return Err(Error::Format("moment arrays differ in length".into()));
    }
    let touches = (0..m.len()).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    Ok(SparseAdam { hyper, m, v, touches })
}

fn write_dense_adam(w: &mut impl Write, a: &DenseAdam) -> Result<()> {
    write_hyper(w, &a.hyper)?;
    write_f64s(w, &a.m)?;
    write_f64s(w, &a.v)?;
    w.write_all(&a.t.to_le_bytes())?;
    Ok(())
}

fn read_dense_adam(r: &mut impl Read) -> Result<DenseAdam> {
    let hyper = read_hyper(r)?;
    let m = read_f64s(r)?;
    let v = read_f64s(r)?;
    let t = read_u32(r)?;
    Ok(DenseAdam { hyper, m, v, t })
}

/// One sampled training ray.
#[derive(Clone, Copy, Debug)]
struct RaySample {
    view: usize,
    pixel: usize,
    jitter_seed: u64,
}

/// Gradients and statistics of one chunk of rays.
struct ChunkOut {
    geo: GeometryGradList,
    radiance: RadianceGrad,
    d_log_s: f64,
    l_rgb: f64,
    sq_err: f64,
    vertices: Vec<u32>,
}

/// Per-step scratch buffers.
struct Scratch {
    grid_acc: DenseAccumulator,
    normal_acc: Vec<[f64; 3]>,
    normal_mark: Vec<bool>,
    normal_touched: Vec<usize>,
    vertex_mark: Vec<bool>,
    radiance_total: RadianceGrad,
    pool: Mutex<Vec<RadianceGrad>>,
}

impl Scratch {
    fn new(grid_len: usize, radiance: &RadianceParams) -> Self {
        Self {
            grid_acc: DenseAccumulator::new(grid_len),
            normal_acc: vec![[0.0; 3]; grid_len],
            normal_mark: vec![false; grid_len],
            normal_touched: Vec::new(),
            vertex_mark: vec![false; grid_len],
            radiance_total: RadianceGrad::new(radiance),
            pool: Mutex::new(Vec::new()),
        }
    }

    fn resize_grid(&mut self, len: usize) {
        self.grid_acc.reset(len);
        self.normal_acc = vec![[0.0; 3]; len];
        self.normal_mark = vec![false; len];
        self.normal_touched.clear();
        self.vertex_mark = vec![false; len];
    }
}

/// Runs the optimization over a dataset.
pub struct Trainer<'a> {
    pub data: &'a Dataset,
    pub config: TrainConfig,
    pub state: TrainState,
    scratch: Scratch,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let state = TrainState::init(data, &config)?;
        Self::resume(data, config, state)
    }

    /// Continues from a saved state.
    pub fn resume(data: &'a Dataset, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if data.images.is_empty() {
            return Err(Error::InvalidConfig("dataset has no views".into()));
        }
        let scratch = Scratch::new(state.grid.len(), &state.radiance);
        Ok(Self {
            data,
            config,
            state,
            scratch,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    fn sample_batch(&self, step: usize) -> Vec<RaySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(step as u64);
        let sizes: Vec<usize> = self.data.images.iter().map(|im| im.pixels.len()).collect();
        let total: usize = sizes.iter().sum();
        (0..self.config.batch_rays)
            .map(|_| {
                let mut k = rng.gen_range(0..total);
                let mut view = 0;
                while k >= sizes[view] {
                    k -= sizes[view];
                    view += 1;
                }
                RaySample {
                    view,
                    pixel: k,
                    jitter_seed: rng.gen(),
                }
            })
            .collect()
    }

    fn process_chunk(&self, rays: &[RaySample], normals: &VertexGradients, batch: f64) -> Result<ChunkOut> {
        let st = &self.state;
        let cfg = &self.config;
        let radiance_grad = self
            .scratch
            .pool
            .lock()
            .map_err(|_| Error::Numeric("gradient pool poisoned".into()))?
            .pop()
            .unwrap_or_else(|| RadianceGrad::new(&st.radiance));
        let mut out = ChunkOut {
            geo: GeometryGradList::default(),
            radiance: radiance_grad,
            d_log_s: 0.0,
            l_rgb: 0.0,
            sq_err: 0.0,
            vertices: Vec::new(),
        };
        let mut render = RayRender::default();
        let use_mask = cfg.schedules.w_mask > 0.0;
        for r in rays {
            let cam = &self.data.cameras[r.view];
            let (x, y) = (r.pixel % cam.width, r.pixel / cam.width);
            let ray = cam.pixel_ray(x, y);
            let gt = self.data.images[r.view].pixels[r.pixel];
            let target = [gt[0] as f64, gt[1] as f64, gt[2] as f64];
            let mask = if self.data.masks[r.view][r.pixel] { 1.0 } else { 0.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(r.jitter_seed);
            match renderer::render_ray_into(
                &st.grid,
                normals,
                &st.radiance,
                st.log_s,
                &ray,
                &cfg.render,
                Some(&mut rng),
                &mut render,
            ) {
                Ok(()) => {}
                Err(Error::NoIntersection) => continue,
                Err(e) => return Err(e),
            }
            let (l1, _bce, d_color, d_op) = ray_loss(
                render.color,
                target,
                use_mask.then_some((render.opacity, mask)),
                cfg.schedules.w_mask,
                batch,
            );
            out.l_rgb += l1;
            for k in 0..3 {
                out.sq_err += (render.color[k] - target[k]).powi(2);
            }
            out.d_log_s += renderer::backprop_ray(
                &st.radiance,
                &render,
                d_color,
                d_op,
                &cfg.render,
                &mut out.geo,
                &mut out.radiance,
            );
            for &t in &render.segments.t {
                let s = st.grid.interpolate(&ray.at(t))?;
                out.vertices.extend(s.corners().iter().map(|&c| c as u32));
            }
        }
        Ok(out)
    }

    /// Runs one optimization step and returns its metrics.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let total = self.config.steps;
        let tick = schedule_tick(&self.config.schedules, step, total);
        if let Some(res) = tick.resolution_change {
            self.upsample(res)?;
        }
        let normals = self.state.grid.vertex_gradients()?;
        let batch = self.sample_batch(step);
        let b = batch.len() as f64;
        let this = &*self;
        let chunks: Vec<Result<ChunkOut>> = batch
            .par_chunks(CHUNK_RAYS)
            .map(|c| this.process_chunk(c, &normals, b))
            .collect();

        let sc = &mut self.scratch;
        sc.grid_acc.clear();
        sc.radiance_total.clear();
        let mut d_log_s = 0.0;
        let mut l_rgb = 0.0;
        let mut sq_err = 0.0;
        let mut vr = Vec::new();
        for c in chunks {
            let c = c?;
            d_log_s += c.d_log_s;
            l_rgb += c.l_rgb;
            sq_err += c.sq_err;
            for &(v, g) in &c.geo.values {
                sc.grid_acc.add(v as usize, g);
            }
            for &(v, g) in &c.geo.normals {
                let v = v as usize;
                if !sc.normal_mark[v] {
                    sc.normal_mark[v] = true;
                    sc.normal_touched.push(v);
                }
                let n = &mut sc.normal_acc[v];
                n[0] += g[0];
                n[1] += g[1];
                n[2] += g[2];
            }
            for &v in &c.vertices {
                let v = v as usize;
                if !sc.vertex_mark[v] {
                    sc.vertex_mark[v] = true;
                    vr.push(v);
                }
            }
            c.radiance.merge_into(&mut sc.radiance_total);
            let mut rg = c.radiance;
            rg.clear();
            sc.pool
                .lock()
                .map_err(|_| Error::Numeric("gradient pool poisoned".into()))?
                .push(rg);
        }
        let grid = &self.state.grid;
        for &v in &sc.normal_touched {
            let adj = sc.normal_acc[v];
            let acc = &mut sc.grid_acc;
            grid.scatter_vertex_gradient_adjoint(v, adj, |u, g| acc.add(u, g));
            sc.normal_acc[v] = [0.0; 3];
            sc.normal_mark[v] = false;
        }
        sc.normal_touched.clear();
        for &v in &vr {
            sc.vertex_mark[v] = false;
        }
        vr.sort_unstable();

        let acc = &mut sc.grid_acc;
        let (l_eik, _) = regularizer::eikonal_into(grid, &normals, &vr, tick.w_eik, false, |v, g| acc.add(v, g));
        let (l_curv, _) = regularizer::curvature_into(grid, &vr, tick.w_curv, false, |v, g| acc.add(v, g));

        let st = &mut self.state;
        {
            let values = st.grid.values_mut();
            let mut touched = sc.grid_acc.touched().to_vec();
            touched.sort_unstable();
            for i in touched {
                st.grid_adam.update_one(values, i, sc.grid_acc.get(i));
            }
        }
        {
            let entries = sc.radiance_total.table_entries();
            let tables = st.radiance.tables_mut();
            for (i, g) in entries {
                st.table_adam.update_one(tables, i, g);
            }
        }
        let dec_grad = sc.radiance_total.decoder.clone();
        let adam = &mut st.decoder_adam;
        st.radiance.update_decoder(|d| adam.step_f32(d, &dec_grad));
        let g_s = amplify_s_gradient(d_log_s, self.config.schedules.amplify_k);
        let mut ls = [st.log_s];
        st.log_s_adam.step_f64(&mut ls, &[g_s]);
        st.log_s = ls[0];
        st.step += 1;

        let mse = sq_err / (3.0 * b);
        Ok(StepMetrics {
            step,
            l_rgb: l_rgb / b,
            l_eik,
            l_curv,
            s: st.log_s.exp(),
            psnr: -10.0 * mse.max(1e-20).log10(),
        })
    }

    fn upsample(&mut self, res: usize) -> Result<()> {
        let grid = self.state.grid.upsample(&[res; 3])?;
        self.state.grid_adam.reset(grid.len());
        self.scratch.resize_grid(grid.len());
        self.state.grid = grid;
        Ok(())
    }

    /// Runs until the configured step count, calling `on_step` after every
    /// step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::with_capacity(self.config.steps.saturating_sub(self.state.step));
        while !self.is_done() {
            let m = self.step()?;
            on_step(&m);
            log.push(m);
        }
        Ok(log)
    }
}

/// Trains from scratch and returns the final state with the metrics log.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(TrainState, Vec<StepMetrics>)> {
    let mut t = Trainer::new(data, config.clone())?;
    let log = t.run(|_| {})?;
    Ok((t.state, log))
}
