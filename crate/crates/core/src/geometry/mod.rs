//! Gaussian primitives, rigid transforms and pinhole cameras.

mod gset;

pub use gset::{read_gset, write_gset, GaussianSetJson};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit quaternion `(w, x, y, z)`.
///
/// Every constructor and update renormalizes, so a stored value is unit to
/// within a few ulps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n2 = w * w + x * x + y * y + z * z;
        if !n2.is_finite() || n2 < 1e-24 {
            return Err(Error::invalid(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        let q = Quaternion { w, x, y, z };
        Ok(if (n2 - 1.0).abs() > 4.0 * f64::EPSILON {
            q.scaled(1.0 / n2.sqrt())
        } else {
            q
        })
    }

    /// Accepts components already unit to within 1e-6 without rescaling
    /// them, so values decoded from f32 storage re-encode bit-identically.
    pub(crate) fn from_stored(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n2 = w * w + x * x + y * y + z * z;
        if (n2 - 1.0).abs() <= 1e-6 {
            Ok(Quaternion { w, x, y, z })
        } else {
            Quaternion::new(w, x, y, z)
        }
    }

    fn scaled(self, k: f64) -> Self {
        Quaternion {
            w: self.w * k,
            x: self.x * k,
            y: self.y * k,
            z: self.z * k,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n < 1e-12 {
            return Err(Error::invalid("rotation axis has zero length"));
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quaternion::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation about +z.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (0.5 * yaw).sin_cos();
        Quaternion {
            w: c,
            x: 0.0,
            y: 0.0,
            z: s,
        }
    }

    /// Quaternion of a rotation matrix, canonicalised to `w >= 0`.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z) = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            (
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let sign = if w < 0.0 { -1.0 } else { 1.0 };
        Quaternion::new(sign * w, sign * x, sign * y, sign * z).unwrap_or(Quaternion::IDENTITY)
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
        .expect("product of unit quaternions is normalizable")
    }

    pub fn conjugate(&self) -> Quaternion {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Quaternion { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Pulls a gradient w.r.t. the rotation matrix back to the raw quaternion
    /// components, through the normalization.
    pub fn rotation_matrix_vjp(&self, g: &Matrix3<f64>) -> [f64; 4] {
        let Quaternion { w, x, y, z } = *self;
        let gw = 2.0
            * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
                + x * g[(2, 1)]);
        let gx = 2.0
            * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - w * g[(1, 2)] + z * g[(2, 0)]
                + w * g[(2, 1)])
            - 4.0 * x * (g[(1, 1)] + g[(2, 2)]);
        let gy = 2.0
            * (x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
                + z * g[(2, 1)])
            - 4.0 * y * (g[(0, 0)] + g[(2, 2)]);
        let gz = 2.0
            * (-w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] + y * g[(1, 2)] + x * g[(2, 0)]
                + y * g[(2, 1)])
            - 4.0 * z * (g[(0, 0)] + g[(1, 1)]);
        // Project onto the tangent space of the unit sphere.
        let q = [w, x, y, z];
        let gq = [gw, gx, gy, gz];
        let dot: f64 = q.iter().zip(gq.iter()).map(|(a, b)| a * b).sum();
        let n = self.norm();
        [
            (gw - dot * w) / n,
            (gx - dot * x) / n,
            (gy - dot * y) / n,
            (gz - dot * z) / n,
        ]
    }
}

impl TryFrom<[f64; 4]> for Quaternion {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        q.to_array()
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let r = repr.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        Pose::new(rotation, Vector3::from(repr.translation)).map_err(serde::de::Error::custom)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) || !translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::invalid(format!(
                "pose rotation is not a proper rotation (orthonormality error {ortho:e}, det {det})"
            )));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_quaternion(q: &Quaternion, t: Vector3<f64>) -> Self {
        Pose {
            rotation: q.to_rotation_matrix(),
            translation: t,
        }
    }

    /// Yaw about +z followed by a translation.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> Quaternion {
        Quaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Heading of the x-axis in the xy-plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

/// `b_from_a`: maps frame-a coordinates into frame b.
pub fn relative_pose(world_from_a: &Pose, world_from_b: &Pose) -> Pose {
    world_from_b.inverse().compose(world_from_a)
}

/// One semantic 3D Gaussian.
///
/// Scale and opacity are stored unconstrained (log-scale and logit) and
/// mapped back on read.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: Quaternion,
    opacity_logit: f64,
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Gaussian {
    pub fn new(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Quaternion,
        opacity: f64,
        logits: Vec<f64>,
        feature: Vec<f64>,
    ) -> Result<Self> {
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("gaussian mean must be finite"));
        }
        if !scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!(
                "gaussian scale must be positive, got {:?}",
                scale.as_slice()
            )));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
        }
        if !logits.iter().chain(feature.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("logits and features must be finite"));
        }
        Ok(Gaussian {
            mean,
            log_scale: scale.map(f64::ln),
            rotation,
            opacity_logit: logit(opacity),
            logits,
            feature,
        })
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn log_scale(&self) -> Vector3<f64> {
        self.log_scale
    }

    pub fn set_log_scale(&mut self, log_scale: Vector3<f64>) {
        self.log_scale = log_scale;
    }

    pub fn rotation(&self) -> Quaternion {
        self.rotation
    }

    pub fn set_rotation(&mut self, q: Quaternion) {
        self.rotation = q;
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn opacity_logit(&self) -> f64 {
        self.opacity_logit
    }

    pub fn set_opacity_logit(&mut self, v: f64) {
        self.opacity_logit = v;
    }

    pub fn set_opacity(&mut self, opacity: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
        }
        self.opacity_logit = logit(opacity);
        Ok(())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        scale_rotation_covariance(&self.scale(), &self.rotation)
    }
}

fn scale_rotation_covariance(s: &Vector3<f64>, q: &Quaternion) -> Matrix3<f64> {
    let r = q.to_rotation_matrix();
    let s2 = Matrix3::from_diagonal(&s.map(|v| v * v));
    let sigma = r * s2 * r.transpose();
    // Exact symmetry.
    (sigma + sigma.transpose()) * 0.5
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance_from_scale_rotation(s: &Vector3<f64>, q: &Quaternion) -> Result<Matrix3<f64>> {
    if !s.iter().all(|&v| v > 0.0 && v.is_finite()) {
        return Err(Error::invalid(format!(
            "scale must be positive, got {:?}",
            s.as_slice()
        )));
    }
    Ok(scale_rotation_covariance(s, q))
}

/// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn evaluate_density(g: &Gaussian, x: &Vector3<f64>) -> f64 {
    // Σ⁻¹ = R S⁻² Rᵀ, so the quadratic form is ‖S⁻¹ Rᵀ (x-μ)‖².
    let r = g.rotation.to_rotation_matrix();
    let local = r.transpose() * (x - g.mean);
    let s = g.scale();
    let q = (local.x / s.x).powi(2) + (local.y / s.y).powi(2) + (local.z / s.z).powi(2);
    (-0.5 * q).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    gaussians: Vec<Gaussian>,
    class_count: usize,
    feature_dim: usize,
}

impl GaussianSet {
    pub fn new(class_count: usize, feature_dim: usize) -> Result<Self> {
        if class_count == 0 || feature_dim == 0 {
            return Err(Error::invalid("class_count and feature_dim must be positive"));
        }
        Ok(GaussianSet {
            gaussians: Vec::new(),
            class_count,
            feature_dim,
        })
    }

    pub fn from_gaussians(
        class_count: usize,
        feature_dim: usize,
        gaussians: Vec<Gaussian>,
    ) -> Result<Self> {
        let mut set = GaussianSet::new(class_count, feature_dim)?;
        for g in gaussians {
            set.push(g)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if g.logits.len() != self.class_count || g.feature.len() != self.feature_dim {
            return Err(Error::invalid(format!(
                "gaussian has {} logits / {} features, set expects {} / {}",
                g.logits.len(),
                g.feature.len(),
                self.class_count,
                self.feature_dim
            )));
        }
        self.gaussians.push(g);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    /// Mutable access for in-place parameter updates. Callers must keep the
    /// logit and feature lengths unchanged.
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn retain<F: FnMut(&Gaussian) -> bool>(&mut self, f: F) {
        self.gaussians.retain(f);
    }

    pub fn extend_from(&mut self, other: GaussianSet) -> Result<()> {
        for g in other.gaussians {
            self.push(g)?;
        }
        Ok(())
    }

    /// Copy with members in a canonical order (bitwise lexicographic over
    /// all parameters), so order-independent reductions can be made exact.
    pub fn canonical_order(&self) -> Vec<usize> {
        fn key(g: &Gaussian) -> Vec<u64> {
            let mut k: Vec<u64> = g.mean.iter().map(|v| v.to_bits()).collect();
            k.extend(g.log_scale.iter().map(|v| v.to_bits()));
            k.extend(g.rotation.to_array().iter().map(|v| v.to_bits()));
            k.push(g.opacity_logit.to_bits());
            k.extend(g.logits.iter().map(|v| v.to_bits()));
            k.extend(g.feature.iter().map(|v| v.to_bits()));
            k
        }
        let keys: Vec<Vec<u64>> = self.gaussians.iter().map(key).collect();
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
        idx
    }
}

impl GaussianSet {
    /// Number of raw (unconstrained) parameters per Gaussian:
    /// mean 3, log-scale 3, quaternion 4, opacity logit 1, logits C.
    pub fn params_per_gaussian(&self) -> usize {
        11 + self.class_count
    }

    /// Flat raw parameter vector in [`GaussianSet::params_per_gaussian`] layout.
    pub fn raw_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.params_per_gaussian());
        for g in &self.gaussians {
            out.extend(g.mean.iter());
            out.extend(g.log_scale.iter());
            out.extend(g.rotation.to_array());
            out.push(g.opacity_logit);
            out.extend(g.logits.iter());
        }
        out
    }

    /// Writes raw parameters back; quaternions are renormalized on write.
    pub fn set_raw_params(&mut self, params: &[f64]) -> Result<()> {
        let stride = self.params_per_gaussian();
        if params.len() != self.len() * stride {
            return Err(Error::invalid(format!(
                "expected {} raw parameters, got {}",
                self.len() * stride,
                params.len()
            )));
        }
        for (g, p) in self.gaussians.iter_mut().zip(params.chunks(stride)) {
            g.mean = Vector3::new(p[0], p[1], p[2]);
            g.log_scale = Vector3::new(p[3], p[4], p[5]);
            g.rotation = Quaternion::new(p[6], p[7], p[8], p[9])?;
            g.opacity_logit = p[10];
            g.logits.copy_from_slice(&p[11..]);
        }
        Ok(())
    }

    /// Human-readable name of raw parameter `i`.
    pub fn param_name(&self, i: usize) -> String {
        let stride = self.params_per_gaussian();
        let (k, j) = (i / stride, i % stride);
        let field = match j {
            0..=2 => format!("mean[{j}]"),
            3..=5 => format!("log_scale[{}]", j - 3),
            6..=9 => format!("rotation[{}]", j - 6),
            10 => "opacity_logit".to_string(),
            _ => format!("logits[{}]", j - 11),
        };
        format!("gaussian {k} {field}")
    }
}

/// Applies `T` to every member: `μ' = R μ + t`, `q' = q(R) q`.
pub fn transform_gaussian_set(set: &GaussianSet, t: &Pose) -> GaussianSet {
    let qt = t.quaternion();
    let gaussians = set
        .gaussians
        .iter()
        .map(|g| {
            let mut out = g.clone();
            out.mean = t.apply(&g.mean);
            out.rotation = qt.mul(&g.rotation);
            out
        })
        .collect();
    GaussianSet {
        gaussians,
        class_count: set.class_count,
        feature_dim: set.feature_dim,
    }
}

/// Pinhole camera; camera axes are x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_from_cam: Pose,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_from_cam: Pose,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_from_cam,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!(
                "camera needs fx, fy > 0 and non-empty image (fx={}, fy={}, {}x{})",
                self.fx, self.fy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Square-pixel camera with principal point at the image centre.
    pub fn with_horizontal_fov(
        width: usize,
        height: usize,
        hfov: f64,
        world_from_cam: Pose,
    ) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        Camera::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            world_from_cam,
        )
    }

    /// Camera pose at `eye` looking at `target`, with image-up roughly along `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Pose> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(Error::invalid("look_at target coincides with eye"));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::invalid("look_at up vector is parallel to view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Pose::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn cam_from_world(&self) -> Pose {
        self.world_from_cam.inverse()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Same intrinsics, different extrinsics.
    pub fn with_pose(&self, world_from_cam: Pose) -> Camera {
        Camera {
            world_from_cam,
            ..self.clone()
        }
    }
}

/// Pixel `(u, v)` samples the image plane at its centre `(u + 0.5, v + 0.5)`.
pub fn pixel_center(u: usize, v: usize) -> (f64, f64) {
    (u as f64 + 0.5, v as f64 + 0.5)
}
