//! Keypoints: detection by back-projecting encoder activations onto mesh
//! vertices and clustering them, z-buffered projection into views, Gaussian
//! weight maps and the keypoint-weighted encoder loss.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Mesh};
use crate::image::GrayImage;
use crate::perception::{area_pool, encoding_loss, PatchSimilarity, PerceptualEncoder, SemanticTerms};
use crate::sdf::DistanceOracle;
use crate::targets::{render_surface, DepthBuffer, RenderOptions};
use crate::{Error, Result, Vec2, Vec3};

/// Depth slack for the visibility test, in scene units.
pub const VISIBILITY_EPS: f64 = 1e-3;
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const MIN_BACKPROJECT_VIEWS: usize = 8;
pub const KMEANS_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointSource {
    User,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "KeypointRecord", into = "KeypointRecord")]
pub struct Keypoint {
    pub position: Vec3,
    pub source: KeypointSource,
    pub label: Option<String>,
}

/// Flat exchange form `{x, y, z, source, label}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointRecord {
    x: f64,
    y: f64,
    z: f64,
    #[serde(default = "default_source")]
    source: KeypointSource,
    #[serde(default)]
    label: Option<String>,
}

fn default_source() -> KeypointSource {
    KeypointSource::User
}

impl From<KeypointRecord> for Keypoint {
    fn from(r: KeypointRecord) -> Self {
        Keypoint {
            position: Vec3::new(r.x, r.y, r.z),
            source: r.source,
            label: r.label,
        }
    }
}

impl From<Keypoint> for KeypointRecord {
    fn from(k: Keypoint) -> Self {
        KeypointRecord {
            x: k.position.x,
            y: k.position.y,
            z: k.position.z,
            source: k.source,
            label: k.label,
        }
    }
}

impl Keypoint {
    pub fn user(position: Vec3) -> Self {
        Self {
            position,
            source: KeypointSource::User,
            label: None,
        }
    }

    /// Label if present, otherwise the index.
    pub fn describe(&self, index: usize) -> String {
        self.label.clone().unwrap_or_else(|| format!("#{index}"))
    }
}

/// Projects keypoints onto the surface.
pub fn snap_keypoints(kps: &mut [Keypoint], oracle: &DistanceOracle) {
    for k in kps {
        k.position = oracle.closest_point(&k.position);
    }
}

pub fn save_keypoints(kps: &[Keypoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(kps)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<Vec<Keypoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::parse(path, format!("{} at {}", e.inner(), e.path())))
}

/// Normalized image position of `p` if it is in front of the camera, inside
/// the frame, and not hidden behind the depth buffer.
///
/// The buffer is compared against the largest depth of the 3×3 pixel block
/// around the projection so that points on steep surfaces are not rejected
/// by the depth of the pixel centre.
pub fn visible_projection(p: &Vec3, cam: &Camera, depth: &DepthBuffer) -> Option<Vec2> {
    let proj = cam.project(p);
    if !proj.valid {
        return None;
    }
    let (w, h) = (depth.width as f64, depth.height as f64);
    let (px, py) = ((proj.uv.x * w).floor(), (proj.uv.y * h).floor());
    if px < 0.0 || py < 0.0 || px >= w || py >= h {
        return None;
    }
    let (px, py) = (px as isize, py as isize);
    let mut reference = f64::NEG_INFINITY;
    let mut any = false;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (x, y) = (px + dx, py + dy);
            if x < 0 || y < 0 || x >= depth.width as isize || y >= depth.height as isize {
                continue;
            }
            let d = depth.get(x as usize, y as usize);
            if d.is_finite() {
                reference = reference.max(d);
                any = true;
            }
        }
    }
    // Nothing rendered near the point: it is off the silhouette, so nothing
    // can hide it.
    if !any || proj.depth <= reference + VISIBILITY_EPS {
        Some(proj.uv)
    } else {
        None
    }
}

/// `1 + Σ_p exp(−‖uv − p‖² / 2σ²)`.
pub fn weight_value(projections: &[Vec2], sigma: f64, uv: &Vec2) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    1.0 + projections.iter().map(|p| (-(uv - p).norm_squared() * inv).exp()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub image: GrayImage,
    /// Number of keypoints that contributed.
    pub visible: usize,
}

impl WeightMap {
    pub fn uniform(resolution: usize) -> Self {
        Self {
            image: GrayImage::filled(resolution, resolution, 1.0),
            visible: 0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.image.mean()
    }
}

pub fn weight_map(kps: &[Keypoint], cam: &Camera, depth: &DepthBuffer, sigma: f64, resolution: usize) -> Result<WeightMap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let projections: Vec<Vec2> = kps.iter().filter_map(|k| visible_projection(&k.position, cam, depth)).collect();
    let n = resolution as f64;
    let image = GrayImage::from_fn(resolution, resolution, |x, y| {
        weight_value(&projections, sigma, &Vec2::new((x as f64 + 0.5) / n, (y as f64 + 0.5) / n))
    });
    Ok(WeightMap {
        image,
        visible: projections.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizedTerms {
    pub global: f64,
    pub layers: f64,
    pub patch: f64,
}

impl LocalizedTerms {
    pub fn total(&self) -> f64 {
        self.global + self.layers + self.patch
    }
}

/// Loss settings shared by the stage-2 and refinement loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizedParams {
    pub lambda_fc: f64,
    pub lambda_lpips: f64,
    /// Replace `mean(wm)` on the global term by 1.
    pub normalize_global: bool,
    pub use_layers: bool,
}

/// Keypoint-weighted loss
/// `λ_fc·mean(wm)·(1 − cos) + Σ_l mean((wm_l ⊙ Δact_l)²) + λ_lpips·patch`,
/// with its gradient with respect to `img_curve` when requested.
pub fn localized_loss_grad(
    e: &dyn PerceptualEncoder,
    ps: Option<&PatchSimilarity>,
    img_curve: &GrayImage,
    img_target: &GrayImage,
    wm: &GrayImage,
    params: &LocalizedParams,
    want_grad: bool,
) -> Result<(LocalizedTerms, Option<GrayImage>)> {
    if !img_curve.same_shape(img_target) || !img_curve.same_shape(wm) {
        return Err(Error::ShapeMismatch("localized loss inputs differ in size".into()));
    }
    let pass = e.forward(img_curve)?;
    let target = e.encode(img_target)?;
    let layer_weights = [
        area_pool(wm, pass.encoding.layers[0].height),
        area_pool(wm, pass.encoding.layers[1].height),
    ];
    let global_weight = if params.normalize_global { params.lambda_fc } else { params.lambda_fc * wm.mean() };
    let (SemanticTerms { global, layers }, g) = encoding_loss(&pass.encoding, &target, global_weight, Some(&layer_weights), params.use_layers)?;
    let mut grad = want_grad.then(|| e.backward(&pass, &g));
    let mut patch = 0.0;
    if params.lambda_lpips != 0.0 {
        let ps = ps.ok_or_else(|| Error::InvalidArgument("patch-similarity weight set without a model".into()))?;
        let (v, pg) = ps.value_and_grad(img_curve, img_target, want_grad)?;
        patch = params.lambda_lpips * v;
        if let (Some(g), Some(pg)) = (grad.as_mut(), pg) {
            g.data.iter_mut().zip(&pg.data).for_each(|(a, b)| *a += params.lambda_lpips * b);
        }
    }
    Ok((LocalizedTerms { global, layers, patch }, grad))
}

pub fn localized_loss(
    e: &dyn PerceptualEncoder,
    ps: Option<&PatchSimilarity>,
    img_curve: &GrayImage,
    img_target: &GrayImage,
    wm: &WeightMap,
    lambda_fc: f64,
    lambda_lpips: f64,
) -> Result<f64> {
    let params = LocalizedParams {
        lambda_fc,
        lambda_lpips,
        normalize_global: false,
        use_layers: true,
    };
    Ok(localized_loss_grad(e, ps, img_curve, img_target, &wm.image, &params, false)?.0.total())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexFeatures {
    pub positions: Vec<Vec3>,
    pub features: Vec<Vec<f64>>,
    pub counts: Vec<u32>,
}

impl VertexFeatures {
    pub fn observed(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&i| self.counts[i] > 0).collect()
    }

    pub fn unobserved(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&i| self.counts[i] == 0).collect()
    }
}

/// Adds the sampled features of every vertex visible in one view.
fn accumulate_view(mesh: &Mesh, cam: &Camera, depth: &DepthBuffer, layer: &crate::perception::FeatureMap, sums: &mut [Vec<f64>], counts: &mut [u32]) {
    for (i, v) in mesh.vertices.iter().enumerate() {
        if let Some(uv) = visible_projection(v, cam, depth) {
            // Sample at the centre of the pixel the vertex lands in; the
            // activation grid is upsampled bilinearly to image resolution.
            let (w, h) = (depth.width as f64, depth.height as f64);
            let px = Vec2::new(((uv.x * w).floor() + 0.5) / w, ((uv.y * h).floor() + 0.5) / h);
            let f = layer.sample(&px);
            if sums[i].is_empty() {
                sums[i] = vec![0.0; f.len()];
            }
            sums[i].iter_mut().zip(&f).for_each(|(s, x)| *s += x);
            counts[i] += 1;
        }
    }
}

/// Averages layer-3 encoder features of surface renders over the views in
/// which each vertex is visible.
pub fn backproject_features(mesh: &Mesh, views: &[Camera], e: &dyn PerceptualEncoder, opts: &RenderOptions) -> Result<VertexFeatures> {
    if views.len() < MIN_BACKPROJECT_VIEWS {
        return Err(Error::InvalidArgument(format!(
            "back-projection needs at least {MIN_BACKPROJECT_VIEWS} views, got {}",
            views.len()
        )));
    }
    let n = mesh.vertices.len();
    let mut sums = vec![Vec::new(); n];
    let mut counts = vec![0u32; n];
    for cam in views {
        let cam = cam.clone().with_resolution(e.input_resolution());
        let render = render_surface(mesh, &cam, opts);
        let enc = e.encode(&render.image)?;
        accumulate_view(mesh, &cam, &render.depth, &enc.layers[0], &mut sums, &mut counts);
    }
    let dim = sums.iter().find(|s| !s.is_empty()).map_or(0, |s| s.len());
    let features = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { vec![0.0; dim] } else { s.into_iter().map(|x| x / c as f64).collect() })
        .collect();
    let unseen = counts.iter().filter(|&&c| c == 0).count();
    if unseen > 0 {
        log::info!("{unseen} of {n} vertices never visible; excluded from clustering");
    }
    Ok(VertexFeatures {
        positions: mesh.vertices.clone(),
        features,
        counts,
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// k-means++ seeded Lloyd iterations. Returns cluster centres.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64, max_iter: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k).min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])).then(a.cmp(&b))).unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sizes[assign[i]] += 1;
            sums[assign[i]].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if sizes[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
            } else {
                // Re-seed an empty cluster at the point farthest from its centre.
                let far = (0..n)
                    .max_by(|&a, &b| dist2(points[a], &centers[assign[a]]).total_cmp(&dist2(points[b], &centers[assign[b]])).then(b.cmp(&a)))
                    .unwrap();
                centers[c] = points[far].to_vec();
                assign[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    centers
}

/// Clusters the observed vertex features into `k` groups and returns, per
/// cluster, the vertex whose feature lies closest to the cluster centre.
///
/// Observed vertices are put in a canonical order (features, then position,
/// then index) before clustering, so the result does not depend on the
/// mesh's vertex order.
pub fn detect_keypoints(vf: &VertexFeatures, k: usize, seed: u64) -> Result<Vec<Keypoint>> {
    let mut observed = vf.observed();
    if k == 0 || k > observed.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {k} keypoints from {} observed vertices",
            observed.len()
        )));
    }
    observed.sort_by(|&a, &b| {
        lex_cmp(&vf.features[a], &vf.features[b])
            .then_with(|| lex_cmp(vf.positions[a].as_slice(), vf.positions[b].as_slice()))
            .then(a.cmp(&b))
    });
    let points: Vec<&[f64]> = observed.iter().map(|&i| vf.features[i].as_slice()).collect();
    let centers = kmeans(&points, k, seed, KMEANS_ITERATIONS);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for c in &centers {
        // Nearest observed vertex to the centre; ties go to the earlier
        // canonical position. Already chosen vertices are skipped so two
        // coincident centres still give distinct keypoints.
        let best = (0..points.len())
            .filter(|j| !chosen.contains(j))
            .min_by(|&a, &b| dist2(points[a], c).total_cmp(&dist2(points[b], c)).then(a.cmp(&b)));
        if let Some(b) = best {
            chosen.push(b);
        }
    }
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(ci, j)| Keypoint {
            position: vf.positions[observed[j]],
            source: KeypointSource::Auto,
            label: Some(format!("auto-{ci}")),
        })
        .collect())
}
