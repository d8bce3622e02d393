//! Soft rasterization of projected 2D cubic Béziers into grayscale stroke
//! images (white background, dark strokes), with gradients with respect to
//! the 2D control points.

use serde::{Deserialize, Serialize};

use crate::curves::{bernstein, project_curve, Bezier2, CurveSet, ProjectedCurve};
use crate::geometry::Camera;
use crate::image::GrayImage;
use crate::{Error, Result, Vec2};

pub const FLATTEN_SEGMENTS: usize = 64;
pub const DEFAULT_SOFTNESS: f64 = 1.0;
/// Contributions below `exp(-CUTOFF_EXPONENT)` are dropped.
const CUTOFF_EXPONENT: f64 = 27.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterParams {
    pub resolution: usize,
    /// Stroke width in pixels.
    pub stroke_width: f64,
    pub softness: f64,
}

impl RasterParams {
    pub fn new(resolution: usize, stroke_width: f64) -> Self {
        Self {
            resolution,
            stroke_width,
            softness: DEFAULT_SOFTNESS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::InvalidArgument(format!("raster resolution {} below 16", self.resolution)));
        }
        if !(self.stroke_width > 0.0) || !(self.softness > 0.0) {
            return Err(Error::InvalidArgument("stroke width and softness must be positive".into()));
        }
        Ok(())
    }

    /// Gaussian variance in squared pixels.
    fn variance(&self) -> f64 {
        let half = self.stroke_width / 2.0;
        half * half * self.softness
    }
}

/// Vertices of a polyline approximating the curve at uniform `t`.
pub fn flatten_curve(b: &Bezier2, segments: usize) -> Vec<Vec2> {
    let segments = segments.max(1);
    (0..=segments).map(|i| b.eval(i as f64 / segments as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    curve: u32,
    segment: u32,
    u: f64,
}

/// Rasterized strokes plus the per-pixel nearest-segment record needed by
/// the backward pass.
#[derive(Debug, Clone)]
pub struct StrokeImage {
    pub image: GrayImage,
    hits: Vec<Option<Hit>>,
    segments: usize,
}

impl StrokeImage {
    pub fn resolution(&self) -> usize {
        self.image.width
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.image.save_png(path)
    }
}

fn closest_on_segment(c: Vec2, a: Vec2, b: Vec2) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let u = if len2 > 0.0 { ((c - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = a + ab * u;
    ((c - q).norm_squared(), u)
}

/// Core forward pass over polylines given in pixel units.
fn rasterize_polylines_px(lines: &[Vec<Vec2>], params: &RasterParams) -> (GrayImage, Vec<Option<Hit>>) {
    let r = params.resolution;
    let var = params.variance();
    let cutoff2 = 2.0 * var * CUTOFF_EXPONENT;
    let cutoff = cutoff2.sqrt();
    let mut best = vec![f64::INFINITY; r * r];
    let mut hits: Vec<Option<Hit>> = vec![None; r * r];
    for (ci, line) in lines.iter().enumerate() {
        for (si, w) in line.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            if !(a.iter().chain(b.iter()).all(|v| v.is_finite())) {
                continue;
            }
            let x0 = (a.x.min(b.x) - cutoff - 0.5).floor().max(0.0);
            let x1 = (a.x.max(b.x) + cutoff - 0.5).ceil().min(r as f64 - 1.0);
            let y0 = (a.y.min(b.y) - cutoff - 0.5).floor().max(0.0);
            let y1 = (a.y.max(b.y) + cutoff - 0.5).ceil().min(r as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for y in y0 as usize..=y1 as usize {
                for x in x0 as usize..=x1 as usize {
                    let c = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let (d2, u) = closest_on_segment(c, a, b);
                    let idx = y * r + x;
                    if d2 < best[idx] && d2 < cutoff2 {
                        best[idx] = d2;
                        hits[idx] = Some(Hit {
                            curve: ci as u32,
                            segment: si as u32,
                            u,
                        });
                    }
                }
            }
        }
    }
    let data = best
        .iter()
        .map(|&d2| if d2.is_finite() { 1.0 - (-d2 / (2.0 * var)).exp() } else { 1.0 })
        .collect();
    (
        GrayImage {
            width: r,
            height: r,
            data,
        },
        hits,
    )
}

/// Draws polylines given in normalized image coordinates with the same
/// stroke model as curves (forward only). Used for line-drawing targets.
pub fn rasterize_polylines(lines: &[Vec<Vec2>], params: &RasterParams) -> GrayImage {
    let scale = params.resolution as f64;
    let px: Vec<Vec<Vec2>> = lines.iter().map(|l| l.iter().map(|p| p * scale).collect()).collect();
    rasterize_polylines_px(&px, params).0
}

/// Differentiable rasterizer contract.
pub trait RasterBackend: Send + Sync {
    fn name(&self) -> &str;

    fn rasterize(&self, curves: &[Bezier2], params: &RasterParams) -> StrokeImage;

    /// Gradient of `Σ grad_image ⊙ image` with respect to each curve's 2D
    /// control points (normalized coordinates).
    fn backward(&self, curves: &[Bezier2], params: &RasterParams, forward: &StrokeImage, grad_image: &GrayImage) -> Vec<[Vec2; 4]>;
}

/// Self-contained reference backend: flattened polylines, Gaussian falloff
/// on distance, darkest stroke wins.
#[derive(Debug, Clone)]
pub struct ReferenceRasterizer {
    pub segments: usize,
}

impl Default for ReferenceRasterizer {
    fn default() -> Self {
        Self {
            segments: FLATTEN_SEGMENTS,
        }
    }
}

impl RasterBackend for ReferenceRasterizer {
    fn name(&self) -> &str {
        "reference"
    }

    fn rasterize(&self, curves: &[Bezier2], params: &RasterParams) -> StrokeImage {
        let scale = params.resolution as f64;
        let lines: Vec<Vec<Vec2>> = curves
            .iter()
            .map(|c| flatten_curve(c, self.segments).into_iter().map(|p| p * scale).collect())
            .collect();
        let (image, hits) = rasterize_polylines_px(&lines, params);
        StrokeImage {
            image,
            hits,
            segments: self.segments,
        }
    }

    fn backward(&self, curves: &[Bezier2], params: &RasterParams, forward: &StrokeImage, grad_image: &GrayImage) -> Vec<[Vec2; 4]> {
        let r = params.resolution;
        let scale = r as f64;
        let var = params.variance();
        let segs = forward.segments;
        let basis: Vec<[f64; 4]> = (0..=segs).map(|i| bernstein(i as f64 / segs as f64)).collect();
        let mut grads = vec![[Vec2::zeros(); 4]; curves.len()];
        for (idx, hit) in forward.hits.iter().enumerate() {
            let Some(hit) = hit else { continue };
            let g = grad_image.data[idx];
            if g == 0.0 {
                continue;
            }
            let (x, y) = (idx % r, idx / r);
            let c = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
            let curve = &curves[hit.curve as usize];
            let k = hit.segment as usize;
            let (wa, wb) = (&basis[k], &basis[k + 1]);
            let a = curve.eval(k as f64 / segs as f64) * scale;
            let b = curve.eval((k + 1) as f64 / segs as f64) * scale;
            let q = a + (b - a) * hit.u;
            let diff = c - q;
            let d2 = diff.norm_squared();
            // I = 1 - exp(-d2 / 2v); dI/dd2 = exp(-d2 / 2v) / 2v; dd2/dq = -2 diff.
            let di_dq = diff * (-2.0 * (-d2 / (2.0 * var)).exp() / (2.0 * var));
            let gq = di_dq * (g * scale);
            let out = &mut grads[hit.curve as usize];
            for j in 0..4 {
                out[j] += gq * ((1.0 - hit.u) * wa[j] + hit.u * wb[j]);
            }
        }
        grads
    }
}

/// Checks a backend against the reference behaviour: white empty scene,
/// zero intensity on the stroke, Gaussian falloff from a point stroke, and
/// nonzero gradients for a curve crossing the frame.
pub fn check_backend_conformance(backend: &dyn RasterBackend) -> std::result::Result<(), String> {
    let params = RasterParams::new(64, 1.5);
    let empty = backend.rasterize(&[], &params);
    if empty.image.data.iter().any(|&v| v != 1.0) {
        return Err("empty scene is not all white".into());
    }
    // Horizontal line through pixel centres of row 32.
    let y = 32.5 / 64.0;
    let line = Bezier2 {
        points: [Vec2::new(0.1, y), Vec2::new(0.3, y), Vec2::new(0.6, y), Vec2::new(0.9, y)],
    };
    let img = backend.rasterize(&[line], &params);
    if img.image.get(32, 32).abs() > 1e-9 {
        return Err(format!("on-stroke pixel intensity {}", img.image.get(32, 32)));
    }
    let mut sharp = params;
    sharp.softness = 1e-3;
    let c = 32.0 / 64.0;
    let dot = Bezier2 {
        points: [Vec2::new(c, c); 4],
    };
    let img = backend.rasterize(&[dot], &sharp);
    let centre = img.image.get(31, 31).min(img.image.get(32, 32));
    if (img.image.min() - centre).abs() > 1e-12 || (img.image.get(0, 0) - 1.0).abs() > 1e-9 {
        return Err("point stroke is not darkest at the centre".into());
    }
    let crossing = Bezier2 {
        points: [Vec2::new(-0.2, 0.3), Vec2::new(0.4, 0.6), Vec2::new(0.6, 0.4), Vec2::new(1.2, 0.7)],
    };
    let fwd = backend.rasterize(&[crossing], &params);
    let ones = GrayImage::filled(64, 64, 1.0);
    let g = backend.backward(&[crossing], &params, &fwd, &ones);
    if g[0].iter().all(|v| v.norm() == 0.0) {
        return Err("no gradient for a curve crossing the frame".into());
    }
    Ok(())
}

/// Projected and rasterized curve set for one view. Curves with a control
/// point behind the camera are left out; `drawn[i]` is the curve index of
/// `projected[i]`.
#[derive(Debug, Clone)]
pub struct CurveRender {
    pub strokes: StrokeImage,
    pub projected: Vec<ProjectedCurve>,
    pub drawn: Vec<usize>,
}

pub fn render_curve_set(cs: &CurveSet, cam: &Camera, backend: &dyn RasterBackend, params: &RasterParams) -> CurveRender {
    let mut projected = Vec::with_capacity(cs.len());
    let mut drawn = Vec::with_capacity(cs.len());
    for (i, c) in cs.curves.iter().enumerate() {
        let p = project_curve(c, cam);
        if p.valid {
            projected.push(p);
            drawn.push(i);
        }
    }
    let curves2d: Vec<Bezier2> = projected.iter().map(|p| p.curve).collect();
    CurveRender {
        strokes: backend.rasterize(&curves2d, params),
        projected,
        drawn,
    }
}

impl CurveRender {
    /// Pulls an image-space gradient back to 3D control points, one entry per
    /// curve of the set (zero for curves not drawn).
    pub fn backward(&self, curve_count: usize, backend: &dyn RasterBackend, params: &RasterParams, grad_image: &GrayImage) -> Vec<[crate::Vec3; 4]> {
        let curves2d: Vec<Bezier2> = self.projected.iter().map(|p| p.curve).collect();
        let g2 = backend.backward(&curves2d, params, &self.strokes, grad_image);
        let mut out = vec![[crate::Vec3::zeros(); 4]; curve_count];
        for ((p, g), &i) in self.projected.iter().zip(&g2).zip(&self.drawn) {
            out[i] = p.pullback(g);
        }
        out
    }
}
