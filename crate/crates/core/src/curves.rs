//! Cubic Bézier curves in 3D: evaluation, initialization, sampling,
//! projection into a view, the view regularizer, and the curve exchange
//! document.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Normalization};
use crate::{Error, Result, Vec2, Vec3};

/// Gradient with respect to the four control points of each curve.
pub type CurveGrads = Vec<[Vec3; 4]>;

/// Number of uniform `t` samples used by the view regularizer, in addition
/// to the four control points.
pub const NDC_T_GRID: usize = 16;

/// Default stroke width in pixels at 224².
pub const DEFAULT_STROKE_WIDTH: f64 = 1.5;

pub const CURVE_FORMAT: &str = "curveset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Geometry,
    Texture,
    Refinement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierCurve {
    pub control_points: [Vec3; 4],
    #[serde(default)]
    pub frozen: bool,
    pub stage: Stage,
}

/// Cubic Bernstein basis `(1-t)^3, 3(1-t)^2 t, 3(1-t) t^2, t^3`.
#[inline]
pub fn bernstein(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t]
}

fn clamp_t(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        log::warn!("curve parameter {t} outside [0, 1], clamping");
        t.clamp(0.0, 1.0)
    } else {
        t
    }
}

impl BezierCurve {
    pub fn new(control_points: [Vec3; 4], stage: Stage) -> Self {
        Self {
            control_points,
            frozen: false,
            stage,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.control_points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    pub fn eval(&self, t: f64) -> Vec3 {
        eval_bezier(self, t)
    }

    /// Tangent `dB/dt`.
    pub fn derivative(&self, t: f64) -> Vec3 {
        let t = clamp_t(t);
        let s = 1.0 - t;
        let p = &self.control_points;
        (p[1] - p[0]) * (3.0 * s * s) + (p[2] - p[1]) * (6.0 * s * t) + (p[3] - p[2]) * (3.0 * t * t)
    }

    pub fn map_points(&self, f: impl Fn(&Vec3) -> Vec3) -> BezierCurve {
        BezierCurve {
            control_points: self.control_points.each_ref().map(f),
            frozen: self.frozen,
            stage: self.stage,
        }
    }

    /// Points at `segments + 1` uniformly spaced parameters.
    pub fn tessellate(&self, segments: usize) -> Vec<Vec3> {
        (0..=segments)
            .map(|i| self.eval(i as f64 / segments as f64))
            .collect()
    }
}

/// Evaluates the curve with the cubic Bernstein basis. Parameters outside
/// `[0, 1]` are clamped.
pub fn eval_bezier(b: &BezierCurve, t: f64) -> Vec3 {
    let w = bernstein(clamp_t(t));
    let p = &b.control_points;
    p[0] * w[0] + p[1] * w[1] + p[2] * w[2] + p[3] * w[3]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveSetMetadata {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub created_stage: Option<Stage>,
    #[serde(default)]
    pub source_mesh_hash: Option<String>,
}

/// Ordered curve collection: the optimized artifact and the exchange
/// document shared by the CLI, service, evaluator and viewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    #[serde(default = "default_format")]
    pub format: String,
    pub stroke_width: f64,
    /// Maps source-mesh units into the frame the control points live in.
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub metadata: CurveSetMetadata,
    pub curves: Vec<BezierCurve>,
}

fn default_format() -> String {
    CURVE_FORMAT.to_string()
}

impl CurveSet {
    pub fn new(curves: Vec<BezierCurve>, stroke_width: f64) -> Self {
        Self {
            format: default_format(),
            stroke_width,
            normalization: Normalization::default(),
            metadata: CurveSetMetadata::default(),
            curves,
        }
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for c in &mut self.curves {
            c.frozen = true;
        }
    }

    pub fn extend(&mut self, other: CurveSet) {
        self.curves.extend(other.curves);
    }

    /// Flat copy of every control point, in order.
    pub fn control_points(&self) -> Vec<Vec3> {
        self.curves.iter().flat_map(|c| c.control_points).collect()
    }

    /// Control points mapped back to the source mesh's units.
    pub fn to_source_units(&self) -> CurveSet {
        let mut out = self.clone();
        for c in &mut out.curves {
            *c = c.map_points(|p| self.normalization.invert(p));
        }
        out.normalization = Normalization::default();
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.curves.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("curve {i} has non-finite control points")));
        }
        if !(self.stroke_width > 0.0) {
            return Err(Error::InvalidArgument("stroke width must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CurveSet> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: CurveSet = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

/// One curve per anchor; each control point is the anchor plus isotropic
/// Gaussian noise with standard deviation `sigma_init`.
pub fn init_curves(anchors: &[Vec3], sigma_init: f64, seed: u64, stage: Stage) -> Result<CurveSet> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("no anchor points for curve initialization".into()));
    }
    if !(sigma_init >= 0.0) {
        return Err(Error::InvalidArgument("sigma_init must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let curves = anchors
        .iter()
        .map(|a| {
            let cps = std::array::from_fn(|_| {
                a + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)) * sigma_init
            });
            BezierCurve::new(cps, stage)
        })
        .collect();
    let mut set = CurveSet::new(curves, DEFAULT_STROKE_WIDTH);
    set.metadata.seed = seed;
    set.metadata.created_stage = Some(stage);
    Ok(set)
}

/// Uniform random curve parameters.
pub fn sample_params(s: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..s).map(|_| rng.random::<f64>()).collect()
}

/// `s` points at uniformly random parameters.
pub fn sample_curve(b: &BezierCurve, s: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    sample_params(s, rng).into_iter().map(|t| b.eval(t)).collect()
}

/// Planar cubic Bézier in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bezier2 {
    pub points: [Vec2; 4],
}

impl Bezier2 {
    pub fn eval(&self, t: f64) -> Vec2 {
        let w = bernstein(t);
        let p = &self.points;
        p[0] * w[0] + p[1] * w[1] + p[2] * w[2] + p[3] * w[3]
    }

    pub fn translated(&self, d: Vec2) -> Bezier2 {
        Bezier2 {
            points: self.points.map(|p| p + d),
        }
    }
}

/// A curve seen from one camera.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedCurve {
    pub curve: Bezier2,
    /// `d uv / d p` for each control point.
    pub jacobians: [[Vec3; 2]; 4],
    /// False when any control point is at or behind the near plane; such
    /// curves are skipped for this view.
    pub valid: bool,
}

impl ProjectedCurve {
    /// Pulls a gradient on the 2D control points back to 3D.
    pub fn pullback(&self, grad2: &[Vec2; 4]) -> [Vec3; 4] {
        std::array::from_fn(|j| self.jacobians[j][0] * grad2[j].x + self.jacobians[j][1] * grad2[j].y)
    }
}

pub fn project_curve(b: &BezierCurve, cam: &Camera) -> ProjectedCurve {
    let mut points = [Vec2::zeros(); 4];
    let mut jacobians = [[Vec3::zeros(); 2]; 4];
    let mut valid = true;
    for j in 0..4 {
        let (p, jac) = cam.project_with_jacobian(&b.control_points[j]);
        points[j] = p.uv;
        jacobians[j] = jac;
        valid &= p.valid;
    }
    ProjectedCurve {
        curve: Bezier2 { points },
        jacobians,
        valid,
    }
}

/// Penalty `relu(c - 1) + relu(-c)` summed over both coordinates, and its
/// (sub)gradient.
pub fn ndc_penalty(uv: &Vec2) -> (f64, Vec2) {
    let mut value = 0.0;
    let mut grad = Vec2::zeros();
    for k in 0..2 {
        let c = uv[k];
        if c > 1.0 {
            value += c - 1.0;
            grad[k] = 1.0;
        } else if c < 0.0 {
            value += -c;
            grad[k] = -1.0;
        }
    }
    (value, grad)
}

#[derive(Debug, Clone)]
pub struct NdcLoss {
    pub value: f64,
    pub grads: CurveGrads,
}

/// View regularizer: penalizes projected curve points outside the unit
/// image square. Samples `t_grid` uniform parameters (endpoints included)
/// plus the four control points of every curve. Points behind the camera are
/// excluded.
pub fn ndc_loss(cs: &CurveSet, cam: &Camera, t_grid: usize) -> NdcLoss {
    let mut value = 0.0;
    let mut grads = vec![[Vec3::zeros(); 4]; cs.len()];
    let ts: Vec<f64> = if t_grid <= 1 {
        vec![0.5]
    } else {
        (0..t_grid).map(|i| i as f64 / (t_grid - 1) as f64).collect()
    };
    for (ci, curve) in cs.curves.iter().enumerate() {
        let g = &mut grads[ci];
        for &t in &ts {
            let w = bernstein(t);
            let p = curve.eval(t);
            let (proj, jac) = cam.project_with_jacobian(&p);
            if !proj.valid {
                continue;
            }
            let (v, d) = ndc_penalty(&proj.uv);
            if v > 0.0 {
                value += v;
                let gp = jac[0] * d.x + jac[1] * d.y;
                for j in 0..4 {
                    g[j] += gp * w[j];
                }
            }
        }
        for j in 0..4 {
            let (proj, jac) = cam.project_with_jacobian(&curve.control_points[j]);
            if !proj.valid {
                continue;
            }
            let (v, d) = ndc_penalty(&proj.uv);
            if v > 0.0 {
                value += v;
                g[j] += jac[0] * d.x + jac[1] * d.y;
            }
        }
    }
    NdcLoss { value, grads }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera::{default_fov_deg, orbit_camera};
    use crate::geometry::ProjectionKind;
    use proptest::prelude::*;
    use rand::Rng;

    fn curve(points: [[f64; 3]; 4]) -> BezierCurve {
        BezierCurve::new(points.map(Vec3::from), Stage::Geometry)
    }

    fn sample_curve_fixture() -> BezierCurve {
        curve([[0.1, -0.2, 0.3], [0.4, 0.5, -0.1], [-0.3, 0.2, 0.2], [0.25, -0.15, -0.35]])
    }

    #[test]
    fn endpoints_interpolated() {
        let b = sample_curve_fixture();
        assert_eq!(b.eval(0.0), b.control_points[0]);
        assert_eq!(b.eval(1.0), b.control_points[3]);
    }

    #[test]
    fn midpoint_closed_form() {
        let b = sample_curve_fixture();
        let p = &b.control_points;
        let expect = (p[0] + p[1] * 3.0 + p[2] * 3.0 + p[3]) / 8.0;
        assert!((b.eval(0.5) - expect).norm() < 1e-15);
    }

    #[test]
    fn constant_curve_is_constant() {
        let q = [0.3, -0.7, 1.1];
        let b = curve([q; 4]);
        for i in 0..=20 {
            assert!((b.eval(i as f64 / 20.0) - Vec3::from(q)).norm() < 1e-15);
        }
    }

    #[test]
    fn control_point_gradient_matches_finite_differences() {
        let b = sample_curve_fixture();
        let h = 1e-5;
        for &t in &[0.0, 0.2, 0.5, 0.77, 1.0] {
            let w = bernstein(t);
            for j in 0..4 {
                for k in 0..3 {
                    let mut plus = b.clone();
                    plus.control_points[j][k] += h;
                    let mut minus = b.clone();
                    minus.control_points[j][k] -= h;
                    let fd = (plus.eval(t) - minus.eval(t)) / (2.0 * h);
                    // d B_k / d p_jk = w_j, zero on the other axes.
                    let expect = w[j];
                    let err = (fd[k] - expect).abs() / expect.abs().max(1e-12);
                    assert!(expect == 0.0 && fd[k].abs() < 1e-9 || err < 1e-6);
                    for other in (0..3).filter(|&o| o != k) {
                        assert!(fd[other].abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_parameter_is_clamped() {
        let b = sample_curve_fixture();
        assert_eq!(b.eval(1.7), b.control_points[3]);
        assert_eq!(b.eval(-0.2), b.control_points[0]);
    }

    #[test]
    fn init_counts_and_zero_sigma() {
        let anchors: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let set = init_curves(&anchors, 0.0, 5, Stage::Geometry).unwrap();
        assert_eq!(set.len(), 20);
        for (c, a) in set.curves.iter().zip(&anchors) {
            assert!(c.control_points.iter().all(|p| p == a));
        }
        let a1 = init_curves(&anchors, 0.05, 5, Stage::Geometry).unwrap();
        let a2 = init_curves(&anchors, 0.05, 5, Stage::Geometry).unwrap();
        assert_eq!(a1, a2);
        assert!(init_curves(&[], 0.05, 5, Stage::Geometry).is_err());
    }

    #[test]
    fn sampling_degenerate_and_straight_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Vec3::new(0.2, 0.1, 0.0);
        let point_curve = curve([q.into(); 4]);
        assert!(sample_curve(&point_curve, 50, &mut rng).iter().all(|p| (p - q).norm() < 1e-15));

        let a = Vec3::new(0.0, 0.0, 0.0);
        let d = Vec3::new(1.0, 2.0, -1.0);
        let line = BezierCurve::new([a, a + d * 0.2, a + d * 0.7, a + d], Stage::Geometry);
        for p in sample_curve(&line, 1000, &mut rng) {
            let t = (p - a).dot(&d) / d.norm_squared();
            assert!((a + d * t - p).norm() < 1e-9 && (-1e-12..=1.0 + 1e-12).contains(&t));
        }
    }

    #[test]
    fn uniform_parameter_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ts = sample_params(100_000, &mut rng);
        let mean = ts.iter().sum::<f64>() / ts.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn orthographic_projection_commutes_with_evaluation() {
        let cam = orbit_camera(25.0, 140.0, 8.0, default_fov_deg(), 224)
            .unwrap()
            .with_projection(ProjectionKind::Orthographic);
        let b = sample_curve_fixture();
        let pc = project_curve(&b, &cam);
        for i in 0..=50 {
            let t = i as f64 / 50.0;
            let direct = cam.project(&b.eval(t)).uv;
            assert!((direct - pc.curve.eval(t)).norm() < 1e-9);
        }
    }

    #[test]
    fn perspective_projection_close_to_evaluation_at_far_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for k in 0..50 {
            let cam = orbit_camera(rng.random_range(0.0..30.0), rng.random_range(0.0..360.0), 8.0, default_fov_deg(), 224).unwrap();
            let b = BezierCurve::new(
                std::array::from_fn(|_| Vec3::new(rng.random_range(-0.29..0.29), rng.random_range(-0.29..0.29), rng.random_range(-0.29..0.29))),
                Stage::Geometry,
            );
            let pc = project_curve(&b, &cam);
            for i in 0..=32 {
                let t = i as f64 / 32.0;
                worst = worst.max((cam.project(&b.eval(t)).uv - pc.curve.eval(t)).norm());
            }
            let _ = k;
        }
        assert!(worst < 0.02, "max gap {worst}");
    }

    #[test]
    fn symmetric_curve_projects_symmetrically() {
        // Camera on +z looking at the origin.
        let cam = Camera::new(Vec3::new(0.0, 0.0, 8.0), Vec3::zeros(), Vec3::y(), default_fov_deg().to_radians(), 224).unwrap();
        let b = curve([[-0.2, 0.1, 0.0], [-0.1, -0.2, 0.05], [0.1, 0.2, 0.05], [0.2, -0.1, 0.0]]);
        let pc = project_curve(&b, &cam).curve;
        for j in 0..4 {
            let mirrored = Vec2::new(1.0, 1.0) - pc.points[3 - j];
            assert!((pc.points[j] - mirrored).norm() < 1e-12);
        }
    }

    #[test]
    fn ndc_penalty_values() {
        assert_eq!(ndc_penalty(&Vec2::new(0.3, 0.9)).0, 0.0);
        assert!((ndc_penalty(&Vec2::new(1.2, 0.5)).0 - 0.2).abs() < 1e-12);
        assert!((ndc_penalty(&Vec2::new(-0.1, 1.3)).0 - 0.4).abs() < 1e-12);
        assert_eq!(ndc_penalty(&Vec2::new(1.2, 0.5)).1, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn ndc_loss_zero_inside_positive_outside() {
        let cam = orbit_camera(10.0, 30.0, 8.0, default_fov_deg(), 224).unwrap();
        let inside = CurveSet::new(vec![sample_curve_fixture().map_points(|p| p * 0.5)], 1.5);
        assert_eq!(ndc_loss(&inside, &cam, NDC_T_GRID).value, 0.0);
        let outside = CurveSet::new(vec![sample_curve_fixture().map_points(|p| p * 3.0)], 1.5);
        assert!(ndc_loss(&outside, &cam, NDC_T_GRID).value > 0.0);
    }

    #[test]
    fn ndc_gradient_matches_finite_differences() {
        let cam = orbit_camera(10.0, 30.0, 8.0, default_fov_deg(), 224).unwrap();
        let set = CurveSet::new(vec![sample_curve_fixture().map_points(|p| p * 2.7 + Vec3::new(0.0, 0.3, 0.0))], 1.5);
        let base = ndc_loss(&set, &cam, NDC_T_GRID);
        assert!(base.value > 0.0);
        let h = 1e-7;
        for j in 0..4 {
            for k in 0..3 {
                let mut plus = set.clone();
                plus.curves[0].control_points[j][k] += h;
                let mut minus = set.clone();
                minus.curves[0].control_points[j][k] -= h;
                let fd = (ndc_loss(&plus, &cam, NDC_T_GRID).value - ndc_loss(&minus, &cam, NDC_T_GRID).value) / (2.0 * h);
                assert!((fd - base.grads[0][j][k]).abs() < 1e-5, "fd {fd} vs {}", base.grads[0][j][k]);
            }
        }
    }

    #[test]
    fn exchange_document_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = init_curves(&[Vec3::zeros(), Vec3::x()], 0.05, 3, Stage::Geometry).unwrap();
        set.curves[1].frozen = true;
        set.normalization = Normalization {
            center: [1.0, 2.0, 3.0],
            scale: 0.25,
        };
        let p = dir.path().join("curves.json");
        set.save(&p).unwrap();
        assert_eq!(CurveSet::load(&p).unwrap(), set);
    }

    proptest! {
        #[test]
        fn affine_equivariance(
            cps in prop::array::uniform4(prop::array::uniform3(-1.0f64..1.0)),
            m in prop::array::uniform9(-2.0f64..2.0),
            tr in prop::array::uniform3(-1.0f64..1.0),
            t in 0.0f64..1.0,
        ) {
            let a = nalgebra::Matrix3::from_row_slice(&m);
            let shift = Vec3::from(tr);
            let b = curve(cps);
            let mapped = b.map_points(|p| a * p + shift);
            let lhs = mapped.eval(t);
            let rhs = a * b.eval(t) + shift;
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn curve_points_in_convex_hull(
            cps in prop::array::uniform4(prop::array::uniform3(-1.0f64..1.0)),
            t in 0.0f64..1.0,
        ) {
            // The Bernstein weights are the barycentric coordinates; check
            // they are a valid convex combination reproducing the point.
            let b = curve(cps);
            let w = bernstein(t);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let p = b.eval(t);
            let bb = crate::geometry::Aabb::from_points(&b.control_points);
            prop_assert!(bb.distance_squared(&p) < 1e-18);
        }
    }
}
