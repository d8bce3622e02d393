//! Evaluation metrics: coverage (one-directional Chamfer distance from the
//! surface to the curves), patch similarity and encoder similarity over a
//! fixed held-out view set.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curves::CurveSet;
use crate::geometry::{sample_surface, Aabb, Camera, Mesh, ViewSampler};
use crate::image::GrayImage;
use crate::perception::{cosine, EncoderRegistry, PatchSimilarity, PerceptualEncoder};
use crate::raster::{render_curve_set, RasterParams, ReferenceRasterizer};
use crate::targets::{render_surface, RenderOptions};
use crate::{Error, Result, Vec3};

pub const COVERAGE_UNITS: &str = "bbox-diagonal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub encoder: String,
    pub patch_model: String,
    pub views: usize,
    /// Seed of the held-out camera set; distinct from the training stream.
    pub view_seed: u64,
    pub coverage_points: usize,
    pub samples_per_curve: usize,
    pub coverage_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            encoder: "ViT-B/32".into(),
            patch_model: "lpips-alex".into(),
            views: 30,
            view_seed: 0x5eed_e7a1,
            coverage_points: 100_000,
            samples_per_curve: 256,
            coverage_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn desk() -> Self {
        Self {
            encoder: "stub-eval".into(),
            patch_model: "stub-lpips-alex".into(),
            coverage_points: 10_000,
            ..Self::default()
        }
    }
}

/// Uniform-parameter samples of every curve, endpoints included.
pub fn curve_samples(cs: &CurveSet, samples_per_curve: usize) -> Vec<Vec3> {
    let n = samples_per_curve.max(2);
    cs.curves
        .iter()
        .flat_map(|c| (0..n).map(move |i| c.eval(i as f64 / (n - 1) as f64)))
        .collect()
}

/// Uniform grid over a point set for nearest-neighbour queries.
pub struct PointGrid {
    points: Vec<Vec3>,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// `starts[c]..starts[c+1]` indexes `order` for cell `c`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl PointGrid {
    pub fn new(points: Vec<Vec3>) -> Self {
        let bbox = Aabb::from_points(&points);
        let ext = bbox.max - bbox.min;
        let volume = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        // About two points per cell.
        let cell = (volume / (points.len().max(1) as f64 / 2.0)).cbrt().max(ext.max() / 256.0).max(1e-9);
        let dims = [0, 1, 2].map(|k| ((ext[k] / cell).floor() as usize + 1).min(512));
        let mut grid = Self {
            points,
            origin: bbox.min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let cells: Vec<usize> = grid.points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; cells.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|k| (((p[k] - self.origin[k]) / self.cell).floor().max(0.0) as usize).min(self.dims[k] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Distance from `q` to the nearest stored point.
    pub fn nearest_distance(&self, q: &Vec3) -> f64 {
        if self.points.is_empty() {
            return f64::INFINITY;
        }
        let c = self.cell_of(q);
        let mut best = f64::INFINITY;
        let mut r = 0usize;
        loop {
            let lo = c.map(|v| v.saturating_sub(r));
            let hi = [0, 1, 2].map(|k| (c[k] + r).min(self.dims[k] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        // Only the shell of the block is new at this radius.
                        let shell = x + r == c[0] || x == c[0] + r || y + r == c[1] || y == c[1] + r || z + r == c[2] || z == c[2] + r;
                        if r > 0 && !shell {
                            continue;
                        }
                        let f = self.flat([x, y, z]);
                        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
                            best = best.min((self.points[i] - q).norm_squared());
                        }
                    }
                }
            }
            // Points not yet visited lie beyond one of the block faces that
            // is not on the grid boundary.
            let mut bound = f64::INFINITY;
            for k in 0..3 {
                if lo[k] > 0 {
                    bound = bound.min((q[k] - (self.origin[k] + lo[k] as f64 * self.cell)).max(0.0));
                }
                if hi[k] < self.dims[k] - 1 {
                    bound = bound.min((self.origin[k] + (hi[k] + 1) as f64 * self.cell - q[k]).max(0.0));
                }
            }
            if bound.is_infinite() || best <= bound * bound {
                return best.sqrt();
            }
            r += 1;
        }
    }
}

fn coverage_inputs(mesh: &Mesh, cs: &CurveSet, n_points: usize, samples_per_curve: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if cs.is_empty() {
        return Err(Error::InvalidArgument("coverage of an empty curve set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface = sample_surface(mesh, n_points, &mut rng)?;
    Ok((surface, curve_samples(cs, samples_per_curve)))
}

/// Mean distance from area-weighted surface samples to the nearest curve
/// sample.
pub fn coverage(mesh: &Mesh, cs: &CurveSet, n_points: usize, samples_per_curve: usize, seed: u64) -> Result<f64> {
    let (surface, samples) = coverage_inputs(mesh, cs, n_points, samples_per_curve, seed)?;
    Ok(coverage_of_points(&surface, samples))
}

pub fn coverage_of_points(surface: &[Vec3], curve_samples: Vec<Vec3>) -> f64 {
    let grid = PointGrid::new(curve_samples);
    surface.iter().map(|p| grid.nearest_distance(p)).sum::<f64>() / surface.len() as f64
}

/// Pairwise reference for [`coverage`].
pub fn coverage_brute_force(mesh: &Mesh, cs: &CurveSet, n_points: usize, samples_per_curve: usize, seed: u64) -> Result<f64> {
    let (surface, samples) = coverage_inputs(mesh, cs, n_points, samples_per_curve, seed)?;
    let total: f64 = surface
        .iter()
        .map(|p| samples.iter().map(|q| (q - p).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .sum();
    Ok(total / surface.len() as f64)
}

fn check_pairs(curve_images: &[GrayImage], target_images: &[GrayImage]) -> Result<()> {
    if curve_images.is_empty() || curve_images.len() != target_images.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} curve images vs {} target images",
            curve_images.len(),
            target_images.len()
        )));
    }
    Ok(())
}

/// Mean over views of `(cos(global(curve), global(target)) + 1) / 2`.
pub fn encoder_similarity(e: &dyn PerceptualEncoder, curve_images: &[GrayImage], target_images: &[GrayImage]) -> Result<f64> {
    check_pairs(curve_images, target_images)?;
    let mut total = 0.0;
    for (c, t) in curve_images.iter().zip(target_images) {
        let a = e.encode(c)?.embedding;
        let b = e.encode(t)?.embedding;
        total += scaled_cosine(&a, &b);
    }
    Ok(total / curve_images.len() as f64)
}

pub fn scaled_cosine(a: &[f64], b: &[f64]) -> f64 {
    ((cosine(a, b) + 1.0) / 2.0).clamp(0.0, 1.0)
}

pub fn patch_score(ps: &PatchSimilarity, curve_images: &[GrayImage], target_images: &[GrayImage]) -> Result<f64> {
    check_pairs(curve_images, target_images)?;
    let mut total = 0.0;
    for (c, t) in curve_images.iter().zip(target_images) {
        total += ps.score(c, t)?;
    }
    Ok(total / curve_images.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewAngles {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub shape: String,
    pub coverage: f64,
    pub coverage_units: String,
    pub patch_similarity: f64,
    pub encoder_similarity: f64,
    pub encoder: String,
    pub patch_model: String,
    pub curve_count: usize,
    pub views: Vec<ViewAngles>,
    pub config_hash: String,
}

impl MetricReport {
    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: Option<&Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        std::fs::write(json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(json_path, e))?;
        if let Some(p) = csv_path {
            std::fs::write(p, self.csv()?).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    /// Header plus one row.
    pub fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(["shape", "coverage", "coverage_units", "patch_similarity", "encoder_similarity", "curves", "config_hash"])
            .map_err(io)?;
        w.write_record([
            self.shape.clone(),
            self.coverage.to_string(),
            self.coverage_units.clone(),
            self.patch_similarity.to_string(),
            self.encoder_similarity.to_string(),
            self.curve_count.to_string(),
            self.config_hash.clone(),
        ])
        .map_err(io)?;
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Held-out cameras: the training sampler's ranges with the evaluation seed.
pub fn eval_views(sampler: &ViewSampler, cfg: &EvalConfig) -> Vec<Camera> {
    ViewSampler {
        seed: cfg.view_seed,
        ..sampler.clone()
    }
    .views(cfg.views)
}

/// Full report for one shape.
pub fn evaluate(
    shape: &str,
    mesh: &Mesh,
    cs: &CurveSet,
    sampler: &ViewSampler,
    cfg: &EvalConfig,
    registry: &EncoderRegistry,
    config_hash: &str,
) -> Result<MetricReport> {
    let encoder = registry.encoder(&cfg.encoder)?;
    let ps = registry.patch_similarity(&cfg.patch_model)?;
    let views = eval_views(sampler, cfg);
    let res = encoder.input_resolution();
    let params = RasterParams::new(res, cs.stroke_width);
    let backend = ReferenceRasterizer::default();
    let opts = RenderOptions {
        stroke_width: cs.stroke_width,
        ..RenderOptions::default()
    };
    let mut curve_images = Vec::with_capacity(views.len());
    let mut target_images = Vec::with_capacity(views.len());
    let mut angles = Vec::with_capacity(views.len());
    for cam in &views {
        let cam = cam.clone().with_resolution(res);
        curve_images.push(render_curve_set(cs, &cam, &backend, &params).strokes.image);
        target_images.push(render_surface(mesh, &cam, &opts).image);
        let (el, az) = ViewSampler::angles_of(&cam);
        angles.push(ViewAngles {
            elevation_deg: el,
            azimuth_deg: az,
        });
    }
    Ok(MetricReport {
        shape: shape.to_string(),
        coverage: coverage(mesh, cs, cfg.coverage_points, cfg.samples_per_curve, cfg.coverage_seed)?,
        coverage_units: COVERAGE_UNITS.into(),
        patch_similarity: patch_score(&ps, &curve_images, &target_images)?,
        encoder_similarity: encoder_similarity(encoder.as_ref(), &curve_images, &target_images)?,
        encoder: cfg.encoder.clone(),
        patch_model: cfg.patch_model.clone(),
        curve_count: cs.len(),
        views: angles,
        config_hash: config_hash.to_string(),
    })
}
