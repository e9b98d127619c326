//! Synthetic scenes with exact SDFs, procedural textures and camera rigs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Ray, Vec3};
use crate::image::Image;
use crate::sdf_grid::SdfGrid;

/// Sphere-tracing step limit.
pub const TRACE_STEPS: usize = 256;
/// Hit threshold as a fraction of the largest box side.
pub const HIT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half: [f64; 3] },
    RoundedBox { center: [f64; 3], half: [f64; 3], radius: f64 },
    /// Ring in the xz-plane around the y axis.
    Torus { center: [f64; 3], major: f64, minor: f64 },
    /// Half-space `n·x ≤ offset`; `normal` need not be unit length.
    Plane { normal: [f64; 3], offset: f64 },
    Union { shapes: Vec<Shape> },
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn box_sdf(q: Vec3, half: Vec3) -> f64 {
    let d = q.abs() - half;
    let outside = Vec3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
    outside + d.x.max(d.y).max(d.z).min(0.0)
}

impl Shape {
    /// Signed distance, negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - v3(*center)).norm() - radius,
            Shape::Box { center, half } => box_sdf(p - v3(*center), v3(*half)),
            Shape::RoundedBox { center, half, radius } => {
                box_sdf(p - v3(*center), v3(*half) - Vec3::repeat(*radius)) - radius
            }
            Shape::Torus { center, major, minor } => {
                let q = p - v3(*center);
                let ring = (q.x * q.x + q.z * q.z).sqrt() - major;
                (ring * ring + q.y * q.y).sqrt() - minor
            }
            Shape::Plane { normal, offset } => {
                let n = v3(*normal);
                let len = n.norm();
                (n.dot(p) - offset) / len
            }
            Shape::Union { shapes } => shapes.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min),
        }
    }

    /// Outward unit normal from central differences of the SDF.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let h = 1e-6;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            g[a] = (self.sdf(&(p + e)) - self.sdf(&(p - e))) / (2.0 * h);
        }
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        }
    }

    /// Surface area, where the surface is closed and bounded.
    pub fn area(&self) -> Result<f64> {
        match self {
            Shape::Sphere { radius, .. } => Ok(4.0 * PI * radius * radius),
            Shape::Box { half: h, .. } => Ok(8.0 * (h[0] * h[1] + h[1] * h[2] + h[2] * h[0])),
            Shape::RoundedBox { half, radius, .. } => {
                let a: Vec<f64> = half.iter().map(|h| h - radius).collect();
                Ok(8.0 * (a[0] * a[1] + a[1] * a[2] + a[2] * a[0])
                    + 4.0 * PI * radius * (a[0] + a[1] + a[2])
                    + 4.0 * PI * radius * radius)
            }
            Shape::Torus { major, minor, .. } => Ok(4.0 * PI * PI * major * minor),
            Shape::Plane { .. } | Shape::Union { .. } => Err(Error::InvalidConfig(
                "surface area is only defined for closed primitives".into(),
            )),
        }
    }

    /// Uniform-by-area sample on the surface of a closed shape.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec3> {
        match self {
            Shape::Sphere { center, radius } => Ok(v3(*center) + unit_vector(rng) * *radius),
            Shape::Box { center, half } => Ok(v3(*center) + sample_box_face(rng, v3(*half))),
            Shape::RoundedBox { center, half, radius } => {
                let a = v3(*half) - Vec3::repeat(*radius);
                let r = *radius;
                let faces = 8.0 * (a.x * a.y + a.y * a.z + a.z * a.x);
                let edges = 4.0 * PI * r * (a.x + a.y + a.z);
                let corners = 4.0 * PI * r * r;
                let u = rng.gen::<f64>() * (faces + edges + corners);
                let local = if u < faces {
                    let p = sample_box_face(rng, a);
                    // push the flat face out by r along its axis
                    let axis = (0..3).find(|&k| (p[k].abs() - a[k]).abs() < 1e-12).unwrap_or(0);
                    let mut q = p;
                    q[axis] += r * p[axis].signum();
                    q
                } else if u < faces + edges {
                    // pick an axis weighted by edge length, then a quarter cylinder
                    let w = rng.gen::<f64>() * (a.x + a.y + a.z);
                    let axis = if w < a.x {
                        0
                    } else if w < a.x + a.y {
                        1
                    } else {
                        2
                    };
                    let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
                    let theta = rng.gen::<f64>() * 0.5 * PI;
                    let (sb, sc) = (rand_sign(rng), rand_sign(rng));
                    let mut q = Vec3::zeros();
                    q[axis] = rng.gen_range(-1.0..1.0) * a[axis];
                    q[b] = sb * (a[b] + r * theta.cos());
                    q[c] = sc * (a[c] + r * theta.sin());
                    q
                } else {
                    let d = unit_vector(rng);
                    Vec3::new(
                        d.x.signum() * a.x + r * d.x,
                        d.y.signum() * a.y + r * d.y,
                        d.z.signum() * a.z + r * d.z,
                    )
                };
                Ok(v3(*center) + local)
            }
            Shape::Torus { center, major, minor } => {
                // area density ∝ (R + r cos φ); rejection on φ
                let (big, small) = (*major, *minor);
                loop {
                    let phi = rng.gen::<f64>() * 2.0 * PI;
                    if rng.gen::<f64>() * (big + small) <= big + small * phi.cos() {
                        let theta = rng.gen::<f64>() * 2.0 * PI;
                        let rho = big + small * phi.cos();
                        let local = Vec3::new(rho * theta.cos(), small * phi.sin(), rho * theta.sin());
                        return Ok(v3(*center) + local);
                    }
                }
            }
            Shape::Plane { .. } => Err(Error::InvalidConfig("cannot sample an unbounded plane".into())),
            Shape::Union { shapes } => {
                let areas: Vec<f64> = shapes.iter().map(|s| s.area()).collect::<Result<_>>()?;
                let total: f64 = areas.iter().sum();
                for _ in 0..100_000 {
                    let mut u = rng.gen::<f64>() * total;
                    let mut pick = shapes.len() - 1;
                    for (i, a) in areas.iter().enumerate() {
                        if u < *a {
                            pick = i;
                            break;
                        }
                        u -= a;
                    }
                    let p = shapes[pick].sample_surface(rng)?;
                    let hidden = shapes
                        .iter()
                        .enumerate()
                        .any(|(i, s)| i != pick && s.sdf(&p) < 0.0);
                    if !hidden {
                        return Ok(p);
                    }
                }
                Err(Error::Numeric("union surface sampling did not converge".into()))
            }
        }
    }
}

fn rand_sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.gen::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi = rng.gen::<f64>() * 2.0 * PI;
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Area-uniform point on the faces of the box `[-h, h]`.
fn sample_box_face<R: Rng + ?Sized>(rng: &mut R, h: Vec3) -> Vec3 {
    let areas = [h.y * h.z, h.z * h.x, h.x * h.y];
    let total: f64 = areas.iter().sum();
    let u = rng.gen::<f64>() * total;
    let axis = if u < areas[0] {
        0
    } else if u < areas[0] + areas[1] {
        1
    } else {
        2
    };
    let mut p = Vec3::zeros();
    for k in 0..3 {
        p[k] = if k == axis {
            rand_sign(rng) * h[k]
        } else {
            rng.gen_range(-1.0..1.0) * h[k]
        };
    }
    p
}

/// Selects the face of an axis-aligned shape whose outward normal is
/// `sign · e_axis`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceSelector {
    pub axis: usize,
    pub sign: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Texture {
    Constant {
        color: [f64; 3],
    },
    Checker {
        a: [f64; 3],
        b: [f64; 3],
        size: f64,
    },
    /// Wavy high-contrast bands along `axis`, optionally only on one face.
    Stripes {
        a: [f64; 3],
        b: [f64; 3],
        period: f64,
        axis: usize,
        #[serde(default)]
        face: Option<FaceSelector>,
        #[serde(default = "default_base")]
        base: [f64; 3],
    },
}

fn default_base() -> [f64; 3] {
    [0.6, 0.6, 0.6]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

impl Texture {
    /// Albedo at surface point `p` with outward normal `n`.
    pub fn color(&self, p: &Vec3, n: &Vec3) -> [f64; 3] {
        match self {
            Texture::Constant { color } => *color,
            Texture::Checker { a, b, size } => {
                let k: i64 = (0..3).map(|i| (p[i] / size).floor() as i64).sum();
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Stripes {
                a,
                b,
                period,
                axis,
                face,
                base,
            } => {
                if let Some(f) = face {
                    if n[f.axis] * f.sign < 0.9 {
                        return *base;
                    }
                }
                let other = (axis + 1) % 3;
                let u = p[*axis] + 0.15 * period * (2.0 * PI * p[other] / (3.0 * period)).sin();
                let w = 0.5 + 0.5 * (2.0 * PI * u / period).sin();
                let t = w * w * (3.0 - 2.0 * w);
                lerp(*a, *b, t)
            }
        }
    }
}

/// Shape, texture, lighting and bounds of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub shape: Shape,
    pub texture: Texture,
    #[serde(default)]
    pub background: [f64; 3],
    pub aabb: Aabb,
    /// Adds a view-dependent specular lobe.
    #[serde(default)]
    pub glossy: bool,
    #[serde(default = "default_light")]
    pub light: [f64; 3],
}

fn default_light() -> [f64; 3] {
    [0.3, 0.8, 0.5]
}

impl AnalyticScene {
    pub fn new(shape: Shape, texture: Texture) -> Self {
        Self {
            shape,
            texture,
            background: [0.0; 3],
            aabb: Aabb::cube([0.0; 3], 1.0),
            glossy: false,
            light: default_light(),
        }
    }

    /// Sphere of radius 0.5 with a checker texture.
    pub fn sphere() -> Self {
        Self::new(
            Shape::Sphere {
                center: [0.0; 3],
                radius: 0.5,
            },
            Texture::Checker {
                a: [0.85, 0.55, 0.3],
                b: [0.3, 0.45, 0.8],
                size: 0.25,
            },
        )
    }

    /// Box whose top face carries high-contrast stripes; the rest is plain.
    pub fn textured_box() -> Self {
        Self::new(
            Shape::Box {
                center: [0.0; 3],
                half: [0.5, 0.4, 0.5],
            },
            Texture::Stripes {
                a: [0.95, 0.85, 0.6],
                b: [0.25, 0.12, 0.05],
                period: 0.2,
                axis: 0,
                face: Some(FaceSelector { axis: 1, sign: 1.0 }),
                base: [0.55, 0.6, 0.65],
            },
        )
    }

    pub fn torus() -> Self {
        Self::new(
            Shape::Torus {
                center: [0.0; 3],
                major: 0.5,
                minor: 0.2,
            },
            Texture::Checker {
                a: [0.8, 0.8, 0.3],
                b: [0.3, 0.6, 0.4],
                size: 0.2,
            },
        )
    }

    pub fn rounded_box() -> Self {
        Self::new(
            Shape::RoundedBox {
                center: [0.0; 3],
                half: [0.5, 0.4, 0.45],
                radius: 0.12,
            },
            Texture::Constant { color: [0.7, 0.5, 0.4] },
        )
    }

    pub fn union() -> Self {
        Self::new(
            Shape::Union {
                shapes: vec![
                    Shape::Sphere {
                        center: [-0.25, 0.0, 0.0],
                        radius: 0.4,
                    },
                    Shape::Box {
                        center: [0.3, 0.0, 0.0],
                        half: [0.3, 0.3, 0.3],
                    },
                ],
            },
            Texture::Checker {
                a: [0.9, 0.4, 0.4],
                b: [0.4, 0.4, 0.9],
                size: 0.25,
            },
        )
    }

    /// Disk of radius `0.35 · extent` for the 2D experiments; query at z = 0.
    pub fn circle_2d() -> Self {
        let aabb = Aabb::cube([0.0; 3], 1.0);
        let r = 0.35 * (aabb.max[0] - aabb.min[0]);
        Self {
            aabb,
            ..Self::new(
                Shape::Sphere {
                    center: [0.0; 3],
                    radius: r,
                },
                Texture::Constant { color: [1.0; 3] },
            )
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sphere" => Ok(Self::sphere()),
            "textured-box" | "textured-plane" => Ok(Self::textured_box()),
            "torus" => Ok(Self::torus()),
            "rounded-box" => Ok(Self::rounded_box()),
            "union" => Ok(Self::union()),
            "circle-2d" => Ok(Self::circle_2d()),
            other => Err(Error::InvalidConfig(format!("unknown scene preset '{other}'"))),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["sphere", "textured-box", "torus", "rounded-box", "union", "circle-2d"]
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.aabb.max[a] > self.aabb.min[a]) {
                return Err(Error::InvalidConfig("scene box must have positive extent".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let scene: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.shape.sdf(p)
    }

    /// Largest side of the scene box.
    pub fn extent(&self) -> f64 {
        let e = self.aabb.extent();
        e.x.max(e.y).max(e.z)
    }

    /// Shaded color of a surface point seen along `view`.
    pub fn shade(&self, p: &Vec3, view: &Vec3) -> [f64; 3] {
        let n = self.shape.normal(p);
        let l = v3(self.light).normalize();
        let albedo = self.texture.color(p, &n);
        let diffuse = 0.35 + 0.65 * n.dot(&l).max(0.0);
        let mut c = [albedo[0] * diffuse, albedo[1] * diffuse, albedo[2] * diffuse];
        if self.glossy {
            let r = 2.0 * n.dot(&l) * n - l;
            let spec = 0.35 * r.dot(&(-view)).max(0.0).powi(24);
            for v in &mut c {
                *v += spec;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Sphere-traces `ray` inside the scene box. Returns the hit distance.
    pub fn trace(&self, ray: &Ray) -> Option<f64> {
        let (near, far) = ray.intersect(&self.aabb, 3)?;
        let tol = HIT_TOL * self.extent();
        let mut t = near;
        for _ in 0..TRACE_STEPS {
            let d = self.sdf(&ray.at(t));
            if d < tol {
                return Some(t);
            }
            t += d;
            if t > far {
                return None;
            }
        }
        None
    }

    /// Color and hit flag for one ray.
    pub fn render_ray(&self, ray: &Ray) -> ([f64; 3], bool) {
        match self.trace(ray) {
            Some(t) => (self.shade(&ray.at(t), &ray.dir), true),
            None => (self.background, false),
        }
    }
}

/// Vertex values are the exact SDF at vertex positions.
pub fn bake_grid(scene: &AnalyticScene, resolution: usize) -> Result<SdfGrid> {
    bake_grid_dim(scene, resolution, 3)
}

/// Like [`bake_grid`]; in 2D the grid covers the xy-face of the box at z = 0.
pub fn bake_grid_dim(scene: &AnalyticScene, resolution: usize, dim: usize) -> Result<SdfGrid> {
    let mut grid = SdfGrid::over_aabb(&scene.aabb, resolution, dim)?;
    grid.fill_with(|p| scene.sdf(&p));
    Ok(grid)
}

/// Pinhole camera looking at `look_at`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in degrees.
    pub vfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Right, true-up and forward unit vectors.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let fwd = (v3(self.look_at) - v3(self.position)).normalize();
        let right = fwd.cross(&v3(self.up)).normalize();
        let up = right.cross(&fwd);
        (right, up, fwd)
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.vfov_deg.to_radians()).tan()
    }

    /// `[fx, fy, cx, cy]`.
    pub fn intrinsics(&self) -> [f64; 4] {
        let f = self.focal();
        [f, f, 0.5 * self.width as f64, 0.5 * self.height as f64]
    }

    /// Row-major camera-to-world matrix with columns right, down, forward,
    /// position (the usual computer-vision convention).
    pub fn camera_to_world(&self) -> [[f64; 4]; 4] {
        let (r, u, f) = self.basis();
        let p = self.position;
        [
            [r.x, -u.x, f.x, p[0]],
            [r.y, -u.y, f.y, p[1]],
            [r.z, -u.z, f.z, p[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Ray through continuous pixel coordinates; `(x + 0.5, y + 0.5)` is the
    /// center of pixel `(x, y)` with y pointing down.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let (r, u, f) = self.basis();
        let [fx, fy, cx, cy] = self.intrinsics();
        let d = f + r * ((px - cx) / fx) - u * ((py - cy) / fy);
        Ray::new(v3(self.position), d)
    }

    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.ray(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Pixel coordinates of a world point in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let (r, u, f) = self.basis();
        let d = p - v3(self.position);
        let z = d.dot(&f);
        if z <= 0.0 {
            return None;
        }
        let [fx, fy, cx, cy] = self.intrinsics();
        Some([cx + fx * d.dot(&r) / z, cy - fy * d.dot(&u) / z])
    }
}

/// Cameras on a Fibonacci sphere of radius `2.5 ×` the box half-extent, all
/// aimed at the box center, with a shared field of view that keeps every box
/// corner inside every image.
pub fn make_rig(scene: &AnalyticScene, n_views: usize, width: usize, height: usize) -> Result<Vec<Camera>> {
    if n_views < 2 {
        return Err(Error::InvalidConfig("a rig needs at least two views".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig("image size must be positive".into()));
    }
    let center = scene.aabb.center();
    let radius = 2.5 * scene.aabb.half_extent();
    let golden = PI * (3.0 - 5f64.sqrt());
    let aspect = width as f64 / height as f64;
    let mut cams: Vec<Camera> = (0..n_views)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_views as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            let dir = Vec3::new(r * phi.cos(), y, r * phi.sin());
            let up = if dir.y.abs() > 0.99 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
            let pos = center + dir * radius;
            Camera {
                position: [pos.x, pos.y, pos.z],
                look_at: [center.x, center.y, center.z],
                up,
                vfov_deg: 90.0,
                width,
                height,
            }
        })
        .collect();
    let mut tan_half: f64 = 0.0;
    for cam in &cams {
        let (r, u, f) = cam.basis();
        for c in scene.aabb.corners() {
            let d = c - v3(cam.position);
            let z = d.dot(&f);
            if z <= 0.0 {
                return Err(Error::InvalidConfig("camera inside the scene box".into()));
            }
            tan_half = tan_half.max((d.dot(&u) / z).abs()).max((d.dot(&r) / z).abs() / aspect);
        }
    }
    let vfov = 2.0 * (tan_half * 1.05).atan().to_degrees();
    for cam in &mut cams {
        cam.vfov_deg = vfov;
    }
    Ok(cams)
}

/// Ground-truth image and hit mask by sphere tracing.
pub fn render_ground_truth(scene: &AnalyticScene, camera: &Camera) -> (Image, Vec<bool>) {
    let w = camera.width;
    let rows: Vec<Vec<([f64; 3], bool)>> = (0..camera.height)
        .into_par_iter()
        .map(|y| (0..w).map(|x| scene.render_ray(&camera.pixel_ray(x, y))).collect())
        .collect();
    let mut img = Image::new(w, camera.height, [0.0; 3]);
    let mut mask = Vec::with_capacity(w * camera.height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, hit)) in row.into_iter().enumerate() {
            img.set(x, y, [c[0] as f32, c[1] as f32, c[2] as f32]);
            mask.push(hit);
        }
    }
    (img, mask)
}

/// Posed images with foreground masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: AnalyticScene,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    #[serde(flatten)]
    camera: Camera,
    intrinsics: [f64; 4],
    camera_to_world: [[f64; 4]; 4],
    image: String,
    mask: String,
}

impl Dataset {
    pub fn generate(scene: &AnalyticScene, n_views: usize, width: usize, height: usize) -> Result<Self> {
        scene.validate()?;
        let cameras = make_rig(scene, n_views, width, height)?;
        let (images, masks) = cameras.iter().map(|c| render_ground_truth(scene, c)).unzip();
        Ok(Self {
            scene: scene.clone(),
            cameras,
            images,
            masks,
        })
    }

    /// Writes `images/NNN.ppm`, `masks/NNN.ppm`, `cameras.json`, `scene.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut records = Vec::new();
        for (i, cam) in self.cameras.iter().enumerate() {
            let image = format!("images/{i:03}.ppm");
            let mask = format!("masks/{i:03}.ppm");
            self.images[i].save_ppm(dir.join(&image))?;
            let mut m = Image::new(cam.width, cam.height, [0.0; 3]);
            for (p, &hit) in m.pixels.iter_mut().zip(&self.masks[i]) {
                if hit {
                    *p = [1.0; 3];
                }
            }
            m.save_ppm(dir.join(&mask))?;
            records.push(CameraRecord {
                camera: cam.clone(),
                intrinsics: cam.intrinsics(),
                camera_to_world: cam.camera_to_world(),
                image,
                mask,
            });
        }
        fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&records)?)?;
        self.scene.save(dir.join("scene.json"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let records: Vec<CameraRecord> = serde_json::from_str(&fs::read_to_string(dir.join("cameras.json"))?)?;
        let scene = AnalyticScene::load(dir.join("scene.json"))?;
        let mut cameras = Vec::new();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for r in records {
            let img = Image::load_ppm(dir.join(&r.image))?;
            if img.width != r.camera.width || img.height != r.camera.height {
                return Err(Error::ShapeMismatch(format!("{} does not match its camera", r.image)));
            }
            let m = Image::load_ppm(dir.join(&r.mask))?;
            masks.push(m.pixels.iter().map(|p| p[0] > 0.5).collect());
            images.push(img);
            cameras.push(r.camera);
        }
        if cameras.is_empty() {
            return Err(Error::InvalidConfig("dataset has no views".into()));
        }
        Ok(Self {
            scene,
            cameras,
            images,
            masks,
        })
    }
}

/// `n` area-uniform points on the analytic surface.
pub fn sample_analytic_surface(scene: &AnalyticScene, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scene.shape.sample_surface(&mut rng)).collect()
}
