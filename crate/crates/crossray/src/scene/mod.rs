//! Analytic scenes, cameras, and photometric appearance variants for the
//! procedural photo-collection generator.
//!
//! World frame: x right, y **down**, z forward (so "up" is −y). Cameras are
//! pinhole models storing a camera-to-world rigid transform; rays go through
//! pixel centers. Everything is f64 and deterministic.

mod dataset;

pub use dataset::{
    composite_transients, generate_dataset, gt_render, read_mask_png, read_rgb_png,
    write_mask_png, write_rgb_png, Dataset, DatasetView,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> SceneError {
    SceneError::Io { path: path.display().to_string(), source }
}

// ------------------------------------------------------------------ vectors

/// Plain 3-vector, f64.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn z(&self) -> f64 {
        self.0[2]
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        assert!(n > 1e-12, "normalizing near-zero vector");
        self.scale(1.0 / n)
    }
}

/// A camera ray tagged with the integer pixel it traverses.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    /// (row, col) of the pixel this ray was cast through.
    pub pixel: (usize, usize),
}

// ------------------------------------------------------------------- scene

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
        density: f64,
    },
    /// Axis-aligned box given by center and half-extents.
    AxisBox {
        center: [f64; 3],
        extents: [f64; 3],
        albedo: [f64; 3],
        density: f64,
    },
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::AxisBox { albedo, .. } => *albedo,
        }
    }

    pub fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::AxisBox { density, .. } => *density,
        }
    }

    /// Nearest intersection with t in [t_min, t_max]: (t, outward normal).
    pub fn intersect(&self, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Option<(f64, Vec3)> {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let c = Vec3(center);
                let oc = origin.sub(c);
                let b = oc.dot(dir);
                let disc = b * b - (oc.dot(oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [-b - sq, -b + sq]
                    .into_iter()
                    .find(|&t| t >= t_min && t <= t_max)?;
                let n = origin.add(dir.scale(t)).sub(c).normalized();
                Some((t, n))
            }
            Primitive::AxisBox { center, extents, .. } => {
                // slab test, tracking which axis bounds the entry point
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                let mut enter_axis = 0usize;
                for ax in 0..3 {
                    let (lo, hi) = (center[ax] - extents[ax], center[ax] + extents[ax]);
                    let d = dir.0[ax];
                    if d.abs() < 1e-15 {
                        if origin.0[ax] < lo || origin.0[ax] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((lo - origin.0[ax]) / d, (hi - origin.0[ax]) / d);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_enter {
                        t_enter = t0;
                        enter_axis = ax;
                    }
                    t_exit = t_exit.min(t1);
                }
                if t_enter > t_exit {
                    return None;
                }
                let t = if t_enter >= t_min && t_enter <= t_max {
                    t_enter
                } else if t_exit >= t_min && t_exit <= t_max && t_enter < t_min {
                    // entered before t_min (origin inside the slab range)
                    t_exit
                } else {
                    return None;
                };
                let mut n = [0.0; 3];
                n[enter_axis] = -dir.0[enter_axis].signum();
                Some((t, Vec3(n)))
            }
        }
    }

    /// Point inside the primitive (for the volumetric density oracle).
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Primitive::Sphere { center, radius, .. } => p.sub(Vec3(center)).norm() <= radius,
            Primitive::AxisBox { center, extents, .. } => (0..3)
                .all(|ax| (p.0[ax] - center[ax]).abs() <= extents[ax]),
        }
    }
}

/// Analytic scene: primitives + background color + the near/far planes the
/// learnable field integrates between.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.t_near > 0.0) {
            return Err(SceneError::Invalid(format!("t_near must be > 0, got {}", self.t_near)));
        }
        if !(self.t_far > self.t_near) {
            return Err(SceneError::Invalid(format!(
                "t_far {} must exceed t_near {}",
                self.t_far, self.t_near
            )));
        }
        let all_albedos = self
            .primitives
            .iter()
            .map(|p| p.albedo())
            .chain(std::iter::once(self.background));
        for a in all_albedos {
            if a.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(SceneError::Invalid(format!("albedo {a:?} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Radius of a sphere at the origin enclosing all primitives.
    pub fn bounding_radius(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| match *p {
                Primitive::Sphere { center, radius, .. } => Vec3(center).norm() + radius,
                Primitive::AxisBox { center, extents, .. } => {
                    Vec3(center).norm() + Vec3(extents).norm()
                }
            })
            .fold(0.0, f64::max)
    }

    /// The default desk-scale scene: a matte ground slab (y down ⇒ ground at
    /// positive y), two spheres, and a box, inside a radius ≲ 1.6 ball.
    pub fn demo() -> SceneSpec {
        SceneSpec {
            primitives: vec![
                Primitive::AxisBox {
                    center: [0.0, 1.1, 0.0],
                    extents: [2.4, 0.25, 2.4],
                    albedo: [0.62, 0.6, 0.55],
                    density: 40.0,
                },
                Primitive::Sphere {
                    center: [-0.55, 0.35, 0.25],
                    radius: 0.5,
                    albedo: [0.85, 0.25, 0.2],
                    density: 40.0,
                },
                Primitive::Sphere {
                    center: [0.65, 0.5, -0.35],
                    radius: 0.35,
                    albedo: [0.2, 0.4, 0.85],
                    density: 40.0,
                },
                Primitive::AxisBox {
                    center: [0.25, 0.62, 0.78],
                    extents: [0.28, 0.24, 0.22],
                    albedo: [0.25, 0.75, 0.3],
                    density: 40.0,
                },
            ],
            background: [0.55, 0.68, 0.82],
            t_near: 2.0,
            t_far: 6.5,
        }
    }
}

// ----------------------------------------------------------------- variant

/// Per-image photometric variation: gain → tint → (optional) gamma, with a
/// screen-space vertical sky gradient on background pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppearanceVariant {
    pub id: usize,
    pub gain: [f64; 3],
    pub tint: [f64; 3],
    pub gamma: f64,
    /// Vertical modulation strength of the background color, in [−0.3, 0.3].
    pub sky_strength: f64,
}

impl AppearanceVariant {
    pub fn identity(id: usize) -> Self {
        AppearanceVariant { id, gain: [1.0; 3], tint: [0.0; 3], gamma: 1.0, sky_strength: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.gain == [1.0; 3] && self.tint == [0.0; 3] && self.gamma == 1.0 && self.sky_strength == 0.0
    }

    /// Map one base color to its varied color. `v_frac` is the pixel's
    /// vertical position in [0,1] (used only when `is_background`).
    pub fn apply(&self, base: [f64; 3], is_background: bool, v_frac: f64) -> [f64; 3] {
        let sky = if is_background {
            1.0 + self.sky_strength * (0.5 - v_frac)
        } else {
            1.0
        };
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let mut v = base[ch] * sky * self.gain[ch] + self.tint[ch];
            v = v.clamp(0.0, 1.0);
            // skipping pow at gamma == 1 keeps the identity variant bit-exact
            if self.gamma != 1.0 {
                v = v.powf(self.gamma);
            }
            out[ch] = v;
        }
        out
    }
}

// --------------------------------------------------------------- transient

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Occluder {
    /// Disk in pixel coordinates (row, col center; radius in pixels).
    Disk { row: f64, col: f64, radius: f64, fill: [f64; 3] },
    /// Axis-aligned rectangle, half-open pixel ranges [r0, r1) × [c0, c1).
    Rect { r0: usize, c0: usize, r1: usize, c1: usize, fill: [f64; 3] },
}

/// The transient content of a single image.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TransientSpec {
    pub occluders: Vec<Occluder>,
}

// ------------------------------------------------------------------ camera

/// Pinhole camera: intrinsics in pixels plus a camera-to-world transform
/// (rows of `pose` are world-frame rows; columns of the rotation block are
/// the camera axes x-right, y-down, z-forward).
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub h: usize,
    pub w: usize,
    /// 4×4 row-major camera-to-world.
    pub pose: [f64; 16],
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::Invalid(format!("focal lengths must be > 0: {} {}", self.fx, self.fy)));
        }
        // rotation block orthonormality
        let r = |i: usize, j: usize| self.pose[i * 4 + j];
        let mut worst = 0.0f64;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| r(k, a) * r(k, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        if worst > 1e-8 {
            return Err(SceneError::Invalid(format!("rotation not orthonormal: deviation {worst:.3e}")));
        }
        if self.pose[12..16] != [0.0, 0.0, 0.0, 1.0] {
            return Err(SceneError::Invalid("pose last row must be 0 0 0 1".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, roll chosen so the image "down"
    /// direction aligns with world +y (the world is y-down).
    pub fn look_at(eye: Vec3, target: Vec3, fx: f64, fy: f64, h: usize, w: usize) -> CameraModel {
        let z = target.sub(eye).normalized();
        let down = Vec3::new(0.0, 1.0, 0.0);
        let y = down.sub(z.scale(down.dot(z))).normalized();
        let x = y.cross(z);
        let mut pose = [0.0; 16];
        for i in 0..3 {
            pose[i * 4] = x.0[i];
            pose[i * 4 + 1] = y.0[i];
            pose[i * 4 + 2] = z.0[i];
            pose[i * 4 + 3] = eye.0[i];
        }
        pose[15] = 1.0;
        CameraModel {
            fx,
            fy,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            h,
            w,
            pose,
        }
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::new(self.pose[3], self.pose[7], self.pose[11])
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let p = &self.pose;
        Vec3::new(
            p[0] * v.x() + p[1] * v.y() + p[2] * v.z(),
            p[4] * v.x() + p[5] * v.y() + p[6] * v.z(),
            p[8] * v.x() + p[9] * v.y() + p[10] * v.z(),
        )
    }

    /// The ray through the center of pixel (row, col), direction normalized.
    pub fn ray_for_pixel(&self, row: usize, col: usize) -> Ray {
        let xc = (col as f64 + 0.5 - self.cx) / self.fx;
        let yc = (row as f64 + 0.5 - self.cy) / self.fy;
        let dir = self.rotate(Vec3::new(xc, yc, 1.0).normalized());
        Ray { origin: self.origin(), dir, pixel: (row, col) }
    }

    /// All H·W rays in row-major pixel order.
    pub fn all_rays(&self) -> Vec<Ray> {
        (0..self.h)
            .flat_map(|r| (0..self.w).map(move |c| (r, c)))
            .map(|(r, c)| self.ray_for_pixel(r, c))
            .collect()
    }
}

/// One line of `cameras.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    /// 16 row-major floats, camera-to-world.
    pub pose: Vec<f64>,
    pub split: String,
    pub variant_id: usize,
}

impl CameraRecord {
    pub fn to_model(&self) -> Result<CameraModel, SceneError> {
        if self.pose.len() != 16 {
            return Err(SceneError::Invalid(format!("pose must have 16 entries, got {}", self.pose.len())));
        }
        let mut pose = [0.0; 16];
        pose.copy_from_slice(&self.pose);
        let m = CameraModel {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            h: self.h,
            w: self.w,
            pose,
        };
        m.validate()?;
        Ok(m)
    }
}

// ------------------------------------------------------------------- image

/// Planar channels-first RGB image: `data[ch·H·W + r·W + c]`, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(h: usize, w: usize) -> Self {
        ImageBuf { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn at(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[(ch * self.h + r) * self.w + c]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        for (ch, &v) in rgb.iter().enumerate() {
            self.data[(ch * self.h + r) * self.w + c] = v;
        }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        [self.at(0, r, c), self.at(1, r, c), self.at(2, r, c)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_rotation_is_orthonormal() {
        let cam = CameraModel::look_at(
            Vec3::new(2.0, -2.5, 3.0),
            Vec3::ZERO,
            70.0,
            70.0,
            64,
            64,
        );
        cam.validate().unwrap();
    }

    #[test]
    fn center_ray_points_at_target() {
        let eye = Vec3::new(0.0, -1.0, -4.0);
        let cam = CameraModel::look_at(eye, Vec3::ZERO, 80.0, 80.0, 64, 64);
        // cx = 32: pixel centers straddle the axis, so take the forward axis
        // directly from the pose instead
        let fwd = cam.rotate(Vec3::new(0.0, 0.0, 1.0));
        let want = Vec3::ZERO.sub(eye).normalized();
        assert!(fwd.sub(want).norm() < 1e-12);
    }

    #[test]
    fn sphere_intersection_from_outside() {
        let s = Primitive::Sphere { center: [0.0, 0.0, 0.0], radius: 1.0, albedo: [1.0; 3], density: 1.0 };
        let (t, n) = s
            .intersect(Vec3::new(0.0, 0.0, -4.0), Vec3::new(0.0, 0.0, 1.0), 0.0, 10.0)
            .unwrap();
        assert!((t - 3.0).abs() < 1e-12);
        assert!(n.sub(Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn box_intersection_reports_entry_face() {
        let b = Primitive::AxisBox {
            center: [0.0, 0.0, 0.0],
            extents: [1.0, 2.0, 3.0],
            albedo: [1.0; 3],
            density: 1.0,
        };
        let (t, n) = b
            .intersect(Vec3::new(-5.0, 0.1, 0.2), Vec3::new(1.0, 0.0, 0.0), 0.0, 100.0)
            .unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert_eq!(n.0, [-1.0, 0.0, 0.0]);
        assert!(b.contains(Vec3::new(0.5, -1.5, 2.5)));
        assert!(!b.contains(Vec3::new(0.0, 0.0, 3.5)));
    }

    #[test]
    fn identity_variant_is_bit_exact() {
        let v = AppearanceVariant::identity(0);
        for base in [[0.0, 0.5, 1.0], [0.123456789, 0.9, 0.000001]] {
            assert_eq!(v.apply(base, true, 0.37), base);
            assert_eq!(v.apply(base, false, 0.9), base);
        }
    }

    #[test]
    fn variant_output_stays_in_unit_range() {
        let v = AppearanceVariant {
            id: 1,
            gain: [1.6, 0.4, 1.2],
            tint: [0.2, -0.2, 0.1],
            gamma: 0.7,
            sky_strength: 0.3,
        };
        for base in [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.4, 0.8, 0.2]] {
            for &bg in &[false, true] {
                let out = v.apply(base, bg, 0.1);
                assert!(out.iter().all(|&c| (0.0..=1.0).contains(&c)), "{out:?}");
            }
        }
    }

    #[test]
    fn demo_scene_validates_and_is_visible() {
        let s = SceneSpec::demo();
        s.validate().unwrap();
        // a camera at the orbit radius sees geometry within [t_near, t_far]
        // (center pixels) and sky at the top of the frame
        let r = 0.5 * (s.t_near + s.t_far);
        let eye = Vec3::new(0.6 * r, -0.55 * r, 0.58 * r);
        let cam = CameraModel::look_at(eye, Vec3::ZERO, 70.0, 70.0, 16, 16);
        let img = gt_render(&s, &cam, &AppearanceVariant::identity(0)).unwrap();
        assert_ne!(img.pixel(8, 8), s.background, "center should hit geometry");
        assert_eq!(img.pixel(0, 8), s.background, "top row should be sky");
    }

    #[test]
    fn scene_validation_rejects_bad_bounds() {
        let mut s = SceneSpec::demo();
        s.t_near = -1.0;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::demo();
        s.t_far = s.t_near;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::demo();
        s.background = [1.2, 0.0, 0.0];
        assert!(s.validate().is_err());
    }
}
