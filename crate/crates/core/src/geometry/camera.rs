//! Pinhole and orthographic cameras, projection with Jacobians, and the
//! random view sampler used during optimization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result, Vec2, Vec3};

/// Camera distance as a multiple of the scene's bounding-box diagonal.
pub const DEFAULT_RADIUS_MULTIPLE: f64 = 8.0;

/// Vertical field of view (degrees) that frames a unit-diagonal scene seen
/// from [`DEFAULT_RADIUS_MULTIPLE`]: half-extent 0.6 at the target.
pub fn default_fov_deg() -> f64 {
    2.0 * (0.6f64 / DEFAULT_RADIUS_MULTIPLE).atan().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    #[default]
    Perspective,
    Orthographic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    /// Square image side in pixels.
    pub resolution: usize,
    pub near: f64,
    pub far: f64,
    #[serde(default)]
    pub projection: ProjectionKind,
}

/// Result of projecting a 3D point: normalized image coordinates (x right,
/// y down, principal point at (0.5, 0.5)) and depth along the view axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub uv: Vec2,
    pub depth: f64,
    /// False when the point lies at or behind the near plane.
    pub valid: bool,
}

/// Orthonormal camera frame.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl Camera {
    pub fn new(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, resolution: usize) -> Result<Self> {
        let cam = Self {
            eye,
            target,
            up,
            fov_y,
            resolution,
            near: 1e-3,
            far: 1e3,
            projection: ProjectionKind::Perspective,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.eye - self.target).norm() <= 0.0 {
            return Err(Error::InvalidArgument("camera eye equals target".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument("field of view must lie in (0, pi)".into()));
        }
        if self.resolution < 16 {
            return Err(Error::InvalidArgument("resolution must be at least 16".into()));
        }
        if (self.target - self.eye).cross(&self.up).norm() <= 1e-12 {
            return Err(Error::InvalidArgument("up vector parallel to view direction".into()));
        }
        Ok(())
    }

    pub fn with_projection(mut self, kind: ProjectionKind) -> Self {
        self.projection = kind;
        self
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn frame(&self) -> CameraFrame {
        let forward = (self.target - self.eye).normalize();
        let right = forward.cross(&self.up).normalize();
        let up = right.cross(&forward);
        CameraFrame { right, up, forward }
    }

    /// Image-plane scale: normalized units per unit of `x / z`.
    pub fn focal(&self) -> f64 {
        0.5 / (0.5 * self.fov_y).tan()
    }

    pub fn target_distance(&self) -> f64 {
        (self.target - self.eye).norm()
    }

    pub fn to_camera_space(&self, p: &Vec3) -> Vec3 {
        let f = self.frame();
        let d = p - self.eye;
        Vec3::new(d.dot(&f.right), d.dot(&f.up), d.dot(&f.forward))
    }

    pub fn project(&self, p: &Vec3) -> Projected {
        let q = self.to_camera_space(p);
        let s = self.focal();
        let valid = q.z > self.near;
        let denom = match self.projection {
            ProjectionKind::Perspective => q.z,
            ProjectionKind::Orthographic => self.target_distance(),
        };
        Projected {
            uv: Vec2::new(0.5 + s * q.x / denom, 0.5 - s * q.y / denom),
            depth: q.z,
            valid,
        }
    }

    /// Projection plus the 2x3 Jacobian `d uv / d p` (rows for u and v).
    pub fn project_with_jacobian(&self, p: &Vec3) -> (Projected, [Vec3; 2]) {
        let f = self.frame();
        let d = p - self.eye;
        let (x, y, z) = (d.dot(&f.right), d.dot(&f.up), d.dot(&f.forward));
        let s = self.focal();
        let valid = z > self.near;
        match self.projection {
            ProjectionKind::Perspective => {
                let du = (f.right / z - f.forward * (x / (z * z))) * s;
                let dv = -(f.up / z - f.forward * (y / (z * z))) * s;
                (
                    Projected {
                        uv: Vec2::new(0.5 + s * x / z, 0.5 - s * y / z),
                        depth: z,
                        valid,
                    },
                    [du, dv],
                )
            }
            ProjectionKind::Orthographic => {
                let d0 = self.target_distance();
                (
                    Projected {
                        uv: Vec2::new(0.5 + s * x / d0, 0.5 - s * y / d0),
                        depth: z,
                        valid,
                    },
                    [f.right * (s / d0), -f.up * (s / d0)],
                )
            }
        }
    }

    /// Normalized image coordinates to continuous pixel coordinates.
    pub fn to_pixels(&self, uv: &Vec2) -> Vec2 {
        uv * self.resolution as f64
    }

    /// Ray through normalized image coordinates: origin and unit direction.
    pub fn ray(&self, uv: &Vec2) -> (Vec3, Vec3) {
        let f = self.frame();
        let s = self.focal();
        let x = (uv.x - 0.5) / s;
        let y = -(uv.y - 0.5) / s;
        match self.projection {
            ProjectionKind::Perspective => (self.eye, (f.forward + f.right * x + f.up * y).normalize()),
            ProjectionKind::Orthographic => {
                let d0 = self.target_distance();
                (self.eye + (f.right * x + f.up * y) * d0, f.forward)
            }
        }
    }

    /// Short stable identifier for cache keys.
    pub fn key(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.eye, self.target, self.up] {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        h.update(self.fov_y.to_le_bytes());
        h.update((self.resolution as u64).to_le_bytes());
        h.update(self.near.to_le_bytes());
        h.update(self.far.to_le_bytes());
        h.update([self.projection as u8]);
        hex::encode(h.finalize())[..16].to_string()
    }
}

/// Eye position for the given angles. Azimuth 0 points along +x and grows
/// counter-clockwise about +y; elevation is measured from the xz-plane.
pub fn orbit_position(elevation_deg: f64, azimuth_deg: f64, radius: f64) -> Vec3 {
    let (el, az) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
    Vec3::new(radius * el.cos() * az.cos(), radius * el.sin(), -radius * el.cos() * az.sin())
}

/// Camera orbiting the origin with +y up.
pub fn orbit_camera(elevation_deg: f64, azimuth_deg: f64, radius: f64, fov_deg: f64, resolution: usize) -> Result<Camera> {
    let eye = orbit_position(elevation_deg, azimuth_deg, radius);
    // Straight-down views need a different up hint.
    let up = if elevation_deg.abs() >= 89.999 { Vec3::new(0.0, 0.0, -1.0) } else { Vec3::y() };
    Camera::new(eye, Vec3::zeros(), up, fov_deg.to_radians(), resolution)
}

/// Random orbit cameras for a normalized (unit-diagonal) scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSampler {
    pub elevation_deg: [f64; 2],
    pub azimuth_deg: [f64; 2],
    /// Camera distance as a multiple of the bounding-box diagonal.
    pub radius: f64,
    pub fov_deg: f64,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for ViewSampler {
    fn default() -> Self {
        Self {
            elevation_deg: [0.0, 30.0],
            azimuth_deg: [0.0, 360.0],
            radius: DEFAULT_RADIUS_MULTIPLE,
            fov_deg: default_fov_deg(),
            resolution: 224,
            seed: 0,
        }
    }
}

impl ViewSampler {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !ok(self.elevation_deg) || !ok(self.azimuth_deg) {
            return Err(Error::InvalidArgument("angle ranges must be ordered and finite".into()));
        }
        if self.radius <= 0.0 {
            return Err(Error::InvalidArgument("camera radius must be positive".into()));
        }
        Ok(())
    }

    fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
        if r[1] > r[0] {
            r[0] + (r[1] - r[0]) * rng.random::<f64>()
        } else {
            r[0]
        }
    }

    /// Draws one camera using the caller's random stream.
    pub fn sample(&self, rng: &mut impl Rng) -> Camera {
        let el = Self::uniform(rng, self.elevation_deg);
        let az = Self::uniform(rng, self.azimuth_deg);
        self.camera_at(el, az)
    }

    pub fn camera_at(&self, elevation_deg: f64, azimuth_deg: f64) -> Camera {
        orbit_camera(elevation_deg, azimuth_deg, self.radius, self.fov_deg, self.resolution)
            .expect("sampler produces valid cameras")
    }

    /// The first `n` cameras of this sampler's own seeded sequence.
    pub fn views(&self, n: usize) -> Vec<Camera> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    /// Recovers the (elevation, azimuth) in degrees of a camera's eye.
    pub fn angles_of(camera: &Camera) -> (f64, f64) {
        let e = camera.eye - camera.target;
        let r = e.norm();
        let el = (e.y / r).asin().to_degrees();
        let az = (-e.z).atan2(e.x).to_degrees().rem_euclid(360.0);
        (el, az)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mesh::Aabb;

    fn front_camera() -> Camera {
        orbit_camera(0.0, 0.0, 8.0, default_fov_deg(), 224).unwrap()
    }

    #[test]
    fn zero_angles_put_eye_on_positive_x() {
        let s = ViewSampler {
            elevation_deg: [0.0, 0.0],
            azimuth_deg: [0.0, 0.0],
            radius: 2.0,
            ..Default::default()
        };
        let cam = s.views(1).remove(0);
        assert!((cam.eye - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn sampler_is_deterministic() {
        let s = ViewSampler { seed: 42, ..Default::default() };
        assert_eq!(s.views(5), s.views(5));
    }

    #[test]
    fn target_projects_to_principal_point() {
        let cam = front_camera();
        let p = cam.project(&Vec3::zeros());
        assert!((p.uv - Vec2::new(0.5, 0.5)).norm() < 1e-15);
        assert!((p.depth - 8.0).abs() < 1e-12);
    }

    #[test]
    fn view_axis_point_at_half_distance() {
        let cam = front_camera();
        let p = cam.project(&Vec3::new(4.0, 0.0, 0.0));
        assert!((p.uv - Vec2::new(0.5, 0.5)).norm() < 1e-15);
        assert!((p.depth - 4.0).abs() < 1e-12);
    }

    #[test]
    fn orthographic_ignores_offset_along_view_axis() {
        let cam = front_camera().with_projection(ProjectionKind::Orthographic);
        let p = Vec3::new(0.1, 0.2, -0.15);
        let axis = cam.frame().forward;
        let a = cam.project(&p).uv;
        let b = cam.project(&(p + axis * 0.37)).uv;
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let cam = front_camera();
        assert!(!cam.project(&Vec3::new(9.0, 0.0, 0.0)).valid);
    }

    #[test]
    fn perspective_close_to_orthographic_at_far_radius() {
        let persp = front_camera();
        let ortho = persp.clone().with_projection(ProjectionKind::Orthographic);
        let h = 0.5 / 3f64.sqrt();
        let bb = Aabb {
            min: Vec3::repeat(-h),
            max: Vec3::repeat(h),
        };
        for el in [0.0, 15.0, 30.0] {
            for az in [0.0, 37.0, 123.0, 250.0] {
                let p = orbit_camera(el, az, 8.0, default_fov_deg(), 224).unwrap();
                let o = p.clone().with_projection(ProjectionKind::Orthographic);
                for c in bb.corners() {
                    assert!((p.project(&c).uv - o.project(&c).uv).norm() < 0.02);
                }
            }
        }
        let _ = (persp, ortho);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for kind in [ProjectionKind::Perspective, ProjectionKind::Orthographic] {
            let cam = orbit_camera(20.0, 75.0, 3.0, 40.0, 64).unwrap().with_projection(kind);
            let p = Vec3::new(0.2, -0.1, 0.3);
            let (_, jac) = cam.project_with_jacobian(&p);
            let h = 1e-6;
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let d = (cam.project(&(p + e)).uv - cam.project(&(p - e)).uv) / (2.0 * h);
                assert!((d.x - jac[0][k]).abs() < 1e-7);
                assert!((d.y - jac[1][k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn angles_round_trip() {
        let s = ViewSampler::default();
        let cam = s.camera_at(17.0, 211.0);
        let (el, az) = ViewSampler::angles_of(&cam);
        assert!((el - 17.0).abs() < 1e-9 && (az - 211.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_cameras_rejected() {
        assert!(Camera::new(Vec3::zeros(), Vec3::zeros(), Vec3::y(), 0.5, 64).is_err());
        assert!(Camera::new(Vec3::x(), Vec3::zeros(), Vec3::y(), 0.5, 8).is_err());
        assert!(Camera::new(Vec3::x(), Vec3::zeros(), Vec3::y(), 3.2, 64).is_err());
    }

    #[test]
    fn ray_hits_projected_point() {
        let cam = orbit_camera(10.0, 40.0, 8.0, default_fov_deg(), 224).unwrap();
        let p = Vec3::new(0.1, 0.05, -0.2);
        let pr = cam.project(&p);
        let (o, d) = cam.ray(&pr.uv);
        let t = (p - o).dot(&d);
        assert!(((o + d * t) - p).norm() < 1e-12);
    }
}
