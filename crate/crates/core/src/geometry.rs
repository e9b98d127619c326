//! Small geometric primitives shared by the grid, renderer and scene code.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn cube(center: [f64; 3], half: f64) -> Self {
        Self {
            min: [center[0] - half, center[1] - half, center[2] - half],
            max: [center[0] + half, center[1] + half, center[2] + half],
        }
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.min_v() + self.max_v()) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max_v() - self.min_v()
    }

    /// Largest half extent over the three axes.
    pub fn half_extent(&self) -> f64 {
        self.extent().max() * 0.5
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (c, o) in out.iter_mut().enumerate() {
            for a in 0..3 {
                o[a] = if c >> a & 1 == 1 { self.max[a] } else { self.min[a] };
            }
        }
        out
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }
}

/// A ray `p(t) = o + t v` with unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing the direction.
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self {
            origin,
            dir: dir.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }

    /// Slab intersection with `aabb` restricted to `t >= 0`, over the first
    /// `dim` axes. Returns `(near, far)` with `near < far`.
    pub fn intersect(&self, aabb: &Aabb, dim: usize) -> Option<(f64, f64)> {
        let mut near = 0.0f64;
        let mut far = f64::INFINITY;
        for a in 0..dim {
            let o = self.origin[a];
            let d = self.dir[a];
            if d.abs() < 1e-300 {
                if o < aabb.min[a] || o > aabb.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut t0 = (aabb.min[a] - o) * inv;
            let mut t1 = (aabb.max[a] - o) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            near = near.max(t0);
            far = far.min(t1);
        }
        (near < far).then_some((near, far))
    }
}
