//! Rigid-body poses, quaternions, and the pinhole camera.
//!
//! Conventions used throughout the crate:
//! - right-handed frames, world up is `+z`;
//! - a camera looks along its local `-z`, with `+x` right and `+y` up;
//! - a [`Pose`] maps camera coordinates to world coordinates,
//!   `x_world = R * x_cam + t`;
//! - pixel `(u, v)` has its center at image coordinate `(u, v)`, with `v`
//!   growing downward.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn component_min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn component_max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Rotation stored as a unit quaternion with `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)` and flips it into the `w >= 0` hemisphere.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            UnitQuaternion {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            UnitQuaternion { w, x, y, z }
        }
    }

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (angle * 0.5).sin_cos();
        Self::renormalized(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map from a rotation vector (axis times angle).
    pub fn exp(omega: Vec3) -> Self {
        let theta = omega.norm();
        if theta < 1e-8 {
            // second-order Taylor expansion of cos(θ/2), sin(θ/2)/θ
            let k = 0.5 - theta * theta / 48.0;
            return Self::renormalized(1.0 - theta * theta / 8.0, omega.x * k, omega.y * k, omega.z * k);
        }
        Self::from_axis_angle(omega, theta)
    }

    /// Rotation vector of this quaternion; inverse of [`UnitQuaternion::exp`].
    pub fn log(self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-12 {
            return v * 2.0;
        }
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(self) -> f64 {
        let s = Vec3::new(self.x, self.y, self.z).norm();
        2.0 * s.atan2(self.w.abs())
    }

    pub fn inverse(self) -> Self {
        UnitQuaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(self, o: UnitQuaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Builds the rotation whose matrix has the given columns.
    pub fn from_rotation_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        let (m00, m01, m02) = (c0.x, c1.x, c2.x);
        let (m10, m11, m12) = (c0.y, c1.y, c2.y);
        let (m20, m21, m22) = (c0.z, c1.z, c2.z);
        let trace = m00 + m11 + m22;
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m21 - m12) / s;
            y = (m02 - m20) / s;
            z = (m10 - m01) / s;
        } else if m00 > m11 && m00 > m22 {
            let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
            w = (m21 - m12) / s;
            x = 0.25 * s;
            y = (m01 + m10) / s;
            z = (m02 + m20) / s;
        } else if m11 > m22 {
            let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
            w = (m02 - m20) / s;
            x = (m01 + m10) / s;
            y = 0.25 * s;
            z = (m12 + m21) / s;
        } else {
            let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
            w = (m10 - m01) / s;
            x = (m02 + m20) / s;
            y = (m12 + m21) / s;
            z = 0.25 * s;
        }
        Self::renormalized(w, x, y, z)
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, o: UnitQuaternion) -> UnitQuaternion {
        let (a, b) = (self, o);
        UnitQuaternion::renormalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub translation: Vec3,
    pub rotation: UnitQuaternion,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        translation: Vec3::ZERO,
        rotation: UnitQuaternion::IDENTITY,
    };

    pub fn new(translation: Vec3, rotation: UnitQuaternion) -> Self {
        Pose {
            translation,
            rotation,
        }
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        let right = forward.cross(up);
        if forward.norm() < 1e-12 || right.norm() < 1e-12 {
            return Err(Error::invalid("look_at: degenerate eye/target/up"));
        }
        let forward = forward.normalized();
        let right = right.normalized();
        let cam_up = right.cross(forward);
        Ok(Pose::new(
            eye,
            UnitQuaternion::from_rotation_columns(right, cam_up, -forward),
        ))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            translation: self.rotation.rotate(other.translation) + self.translation,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            translation: -r.rotate(self.translation),
            rotation: r,
        }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// Parses `tx ty tz qw qx qy qz`.
    pub fn parse(text: &str) -> Result<Pose> {
        let vals = text
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad number `{s}` in pose")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 7 {
            return Err(Error::invalid(format!(
                "pose needs 7 values `tx ty tz qw qx qy qz`, got {}",
                vals.len()
            )));
        }
        let t = Vec3::new(vals[0], vals[1], vals[2]);
        if !t.is_finite() {
            return Err(Error::invalid("pose translation is not finite"));
        }
        Ok(Pose::new(
            t,
            UnitQuaternion::new(vals[3], vals[4], vals[5], vals[6])?,
        ))
    }
}

impl FromStr for Pose {
    type Err = Error;
    fn from_str(s: &str) -> Result<Pose> {
        Pose::parse(s)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        let q = self.rotation;
        write!(
            f,
            "{} {} {} {} {} {} {}",
            t.x, t.y, t.z, q.w, q.x, q.y, q.z
        )
    }
}

/// Reads a pose list, one pose per line; blank lines and `#` comments skipped.
pub fn parse_pose_list(text: &str) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(Pose::parse(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn format_pose_list(poses: &[Pose]) -> String {
    let mut s = String::from("# tx ty tz qw qx qy qz\n");
    for p in poses {
        s.push_str(&p.to_string());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let intr = CameraIntrinsics {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Focal length equal to the image width, principal point at the center.
    pub fn with_default_focal(width: u32, height: u32) -> Result<Self> {
        let f = width as f64;
        Self::new(width, height, f, f, width as f64 / 2.0, height as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("intrinsics: width and height must be >= 1"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("intrinsics: focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::invalid(
                "intrinsics: principal point must lie inside the raster",
            ));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Parses `WxH:fx,fy,cx,cy`, or bare `WxH` for the default focal length.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("intrinsics `{text}` is not `WxH[:fx,fy,cx,cy]`"));
        let (size, rest) = match text.split_once(':') {
            Some((s, r)) => (s, Some(r)),
            None => (text, None),
        };
        let (w, h) = size.split_once('x').ok_or_else(bad)?;
        let w: u32 = w.trim().parse().map_err(|_| bad())?;
        let h: u32 = h.trim().parse().map_err(|_| bad())?;
        match rest {
            None => Self::with_default_focal(w, h),
            Some(r) => {
                let v = r
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                if v.len() != 4 {
                    return Err(bad());
                }
                Self::new(w, h, v[0], v[1], v[2], v[3])
            }
        }
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, p_cam: Vec3) -> Option<(f64, f64)> {
        if p_cam.z >= 0.0 {
            return None;
        }
        let depth = -p_cam.z;
        Some((
            self.cx + self.fx * p_cam.x / depth,
            self.cy - self.fy * p_cam.y / depth,
        ))
    }
}

impl fmt::Display for CameraIntrinsics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}:{},{},{},{}",
            self.width, self.height, self.fx, self.fy, self.cx, self.cy
        )
    }
}

/// Integer pixel index, `u` along the row, `v` down the columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub u: u32,
    pub v: u32,
}

impl Pixel {
    pub fn new(u: u32, v: u32) -> Self {
        Pixel { u, v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalized(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// World-space ray through pixel `px`.
///
/// Without jitter the ray passes through the pixel center; a jitter of
/// `(jx, jy)` moves it to `(u + jx - 0.5, v + jy - 0.5)`.
pub fn ray_for_pixel(
    intr: &CameraIntrinsics,
    pose: &Pose,
    px: Pixel,
    jitter: Option<(f64, f64)>,
) -> Result<Ray> {
    if px.u >= intr.width || px.v >= intr.height {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) outside {}x{} raster",
            px.u, px.v, intr.width, intr.height
        )));
    }
    let (du, dv) = match jitter {
        None => (0.0, 0.0),
        Some((jx, jy)) => {
            if !(0.0..1.0).contains(&jx) || !(0.0..1.0).contains(&jy) {
                return Err(Error::invalid("pixel jitter must lie in [0, 1)"));
            }
            (jx - 0.5, jy - 0.5)
        }
    };
    Ok(pixel_ray_unchecked(intr, pose, px.u as f64 + du, px.v as f64 + dv))
}

pub(crate) fn pixel_ray_unchecked(intr: &CameraIntrinsics, pose: &Pose, u: f64, v: f64) -> Ray {
    let d_cam = Vec3::new((u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -1.0);
    Ray::new(pose.translation, pose.rotation.rotate(d_cam))
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")))
    }
}

/// Adds per-axis Gaussian noise to the translation and a tangent-space
/// Gaussian rotation (applied in the camera frame).
pub fn perturb_pose<R: Rng + ?Sized>(
    p: &Pose,
    sigma_t: f64,
    sigma_r: f64,
    rng: &mut R,
) -> Result<Pose> {
    check_nonneg("sigma_t", sigma_t)?;
    check_nonneg("sigma_r", sigma_r)?;
    let mut out = *p;
    if sigma_t > 0.0 {
        let n = Normal::new(0.0, sigma_t).expect("sigma checked");
        out.translation += Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    }
    if sigma_r > 0.0 {
        let n = Normal::new(0.0, sigma_r).expect("sigma checked");
        let omega = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        out.rotation = out.rotation * UnitQuaternion::exp(omega);
    }
    Ok(out)
}

fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniform translation in the solid ball of `radius_t` around `center`, and a
/// rotation offset of uniform angle in `[0, radius_r]` about a random axis.
pub fn sample_pose_in_ball<R: Rng + ?Sized>(
    center: &Pose,
    radius_t: f64,
    radius_r: f64,
    rng: &mut R,
) -> Result<Pose> {
    check_nonneg("radius_t", radius_t)?;
    check_nonneg("radius_r", radius_r)?;
    let mut out = *center;
    if radius_t > 0.0 {
        let r = radius_t * rng.random::<f64>().cbrt();
        out.translation += random_unit_vector(rng) * r;
    }
    if radius_r > 0.0 {
        let angle = radius_r * rng.random::<f64>();
        let axis = random_unit_vector(rng);
        out.rotation = out.rotation * UnitQuaternion::from_axis_angle(axis, angle);
    }
    Ok(out)
}

/// Weighted mean of poses: arithmetic mean of translations, sign-aligned
/// normalized mean of quaternions.
pub fn weighted_mean_pose(poses: &[Pose], weights: &[f64]) -> Result<Pose> {
    if poses.is_empty() {
        return Err(Error::invalid("weighted_mean_pose: no poses"));
    }
    if poses.len() != weights.len() {
        return Err(Error::invalid(format!(
            "weighted_mean_pose: {} poses but {} weights",
            poses.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weighted_mean_pose: weights must be finite and >= 0"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("weighted_mean_pose: weight sum is zero"));
    }

    // hemisphere reference: the first highest-weight quaternion
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    let reference = poses[best].rotation;

    let mut t = Vec3::ZERO;
    let mut q = [0.0f64; 4];
    for (p, &w) in poses.iter().zip(weights) {
        let w = w / total;
        t += p.translation * w;
        let sign = if p.rotation.dot(reference) < 0.0 { -w } else { w };
        let a = p.rotation.to_array();
        for k in 0..4 {
            q[k] += sign * a[k];
        }
    }
    let rotation = UnitQuaternion::new(q[0], q[1], q[2], q[3]).unwrap_or(reference);
    Ok(Pose::new(t, rotation))
}

/// Translation distance (m) and geodesic rotation angle (°) between poses.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PoseError {
    pub translation_err: f64,
    pub rotation_err: f64,
}

pub fn pose_error(a: &Pose, b: &Pose) -> PoseError {
    let translation_err = (a.translation - b.translation).norm();
    // equals 2·acos(|<qa, qb>|), evaluated through atan2 to stay accurate near 0
    let rel = a.rotation.inverse() * b.rotation;
    let rotation_err = rel.angle().to_degrees().min(180.0);
    PoseError {
        translation_err,
        rotation_err,
    }
}
