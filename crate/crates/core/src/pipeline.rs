//! Run configuration and the optimization driver: the geometry stage against
//! contour renders, the texture stage against surface renders with keypoint
//! weighting, keypoint refinement, and resumable checkpoints.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curves::{init_curves, ndc_loss, CurveGrads, CurveSet, Stage, NDC_T_GRID};
use crate::eval::EvalConfig;
use crate::geometry::{farthest_point_sample, Camera, Mesh, ViewSampler};
use crate::image::GrayImage;
use crate::keypoints::{backproject_features, detect_keypoints, localized_loss_grad, visible_projection, weight_map, Keypoint, LocalizedParams, WeightMap};
use crate::optim::{Adam, AdamConfig};
use crate::perception::{AugmentConfig, EncoderRegistry, PatchSimilarity, PerceptualEncoder, Warp};
use crate::raster::{render_curve_set, RasterBackend, RasterParams, ReferenceRasterizer};
use crate::sdf::{sdf_loss, DistanceField, DistanceOracle, SdfConfig};
use crate::targets::{render, render_surface, RenderKind, RenderOptions};
use crate::{Error, Result, Vec3};

pub const CHECKPOINT_FORMAT: &str = "curvesketch-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub iterations: usize,
    pub curves: usize,
    pub encoder: String,
    pub lambda_fc: f64,
    pub sdf_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub iterations: usize,
    pub curves: usize,
    pub encoder: String,
    pub patch_model: String,
    pub lambda_fc: f64,
    pub lambda_lpips: f64,
    pub sigma: f64,
    pub sdf_weight: f64,
    /// Auto-detected keypoint count; defaults to the stage-2 curve count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<usize>,
    pub keypoint_encoder: String,
    pub keypoint_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub iterations: usize,
    pub curves_per_keypoint: usize,
    /// Size of the camera pool screened for keypoint visibility.
    pub candidate_views: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_stage1: bool,
    pub no_layers: bool,
    pub no_sdf: bool,
    pub no_local: bool,
    pub no_contours: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub lr: f64,
    /// Stroke width in pixels for curve and contour renders.
    pub stroke_width: f64,
    /// Standard deviation of the initial control-point scatter, in
    /// bounding-box diagonals.
    pub sigma_init: f64,
    pub sdf_samples_per_curve: usize,
    /// Replace `mean(wm)` on the global term of the localized loss by 1.
    pub normalize_global_weight: bool,
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_dir: Option<PathBuf>,
    pub views: ViewSampler,
    pub augment: AugmentConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub sdf: SdfConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            seed: 0,
            lr: 1e-3,
            stroke_width: crate::curves::DEFAULT_STROKE_WIDTH,
            sigma_init: 0.05,
            sdf_samples_per_curve: 16,
            normalize_global_weight: false,
            checkpoint_every: 1000,
            weights_dir: None,
            views: ViewSampler::default(),
            augment: AugmentConfig::default(),
            stage1: Stage1Config {
                iterations: 20_000,
                curves: 20,
                encoder: "RN101".into(),
                lambda_fc: 0.1,
                sdf_weight: 0.1,
            },
            stage2: Stage2Config {
                iterations: 20_000,
                curves: 20,
                encoder: "RN50x16".into(),
                patch_model: "lpips-vgg".into(),
                lambda_fc: 75.0,
                lambda_lpips: 0.1,
                sigma: 0.1,
                sdf_weight: 1.0,
                keypoints: None,
                keypoint_encoder: "RN50x16".into(),
                keypoint_views: 16,
            },
            refine: RefineConfig {
                iterations: 100,
                curves_per_keypoint: 6,
                candidate_views: 64,
            },
            eval: EvalConfig::default(),
            sdf: SdfConfig::default(),
            ablation: Ablation::default(),
        }
    }

    /// 224² renders, 8 + 8 curves, 300 iterations per stage, stub encoders.
    pub fn desk() -> Self {
        let p = Self::paper();
        Self {
            preset: Preset::Desk,
            checkpoint_every: 100,
            stage1: Stage1Config {
                iterations: 300,
                curves: 8,
                encoder: "stub-geometry".into(),
                ..p.stage1
            },
            stage2: Stage2Config {
                iterations: 300,
                curves: 8,
                encoder: "stub-texture".into(),
                patch_model: "stub-lpips-vgg".into(),
                keypoint_encoder: "stub-texture".into(),
                keypoint_views: 12,
                ..p.stage2
            },
            refine: RefineConfig {
                candidate_views: 32,
                ..p.refine
            },
            eval: EvalConfig::desk(),
            sdf: SdfConfig::desk(),
            ..p
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Resolves a config from an optional TOML file and `key.path=value`
    /// overrides. The file's `preset` key (or an override of it) picks the
    /// defaults that the file then patches.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        Self::from_table(file_table, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table = text.parse::<toml::Table>().map_err(|e| Error::Config {
            path: "<input>".into(),
            message: e.to_string(),
        })?;
        Self::from_table(table, overrides)
    }

    fn from_table(mut patch: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut patch, o)?;
        }
        let preset = match patch.get("preset") {
            None => Preset::Paper,
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| Error::Config {
                path: "preset".into(),
                message: e.message().to_string(),
            })?,
        };
        let base = toml::Table::try_from(Self::preset(preset)).expect("presets serialize");
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(patch));
        let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..16])
    }

    pub fn resolution(&self) -> usize {
        self.views.resolution
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Err(Error::Config {
            path: path.into(),
            message: message.into(),
        });
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.stroke_width > 0.0) {
            return bad("stroke_width", "must be positive");
        }
        if !(self.sigma_init > 0.0) {
            return bad("sigma_init", "must be positive");
        }
        if self.views.resolution < 32 {
            return bad("views.resolution", "must be at least 32");
        }
        self.views.validate().map_err(|e| Error::Config {
            path: "views".into(),
            message: e.to_string(),
        })?;
        self.augment.validate().map_err(|e| Error::Config {
            path: "augment".into(),
            message: e.to_string(),
        })?;
        self.sdf.validate().map_err(|e| Error::Config {
            path: "sdf".into(),
            message: e.to_string(),
        })?;
        if self.stage1.curves == 0 {
            return bad("stage1.curves", "must be at least 1");
        }
        if self.stage2.curves == 0 {
            return bad("stage2.curves", "must be at least 1");
        }
        if !(self.stage2.sigma > 0.0) {
            return bad("stage2.sigma", "must be positive");
        }
        if self.stage2.keypoint_views < crate::keypoints::MIN_BACKPROJECT_VIEWS {
            return bad("stage2.keypoint_views", "back-projection needs at least 8 views");
        }
        if self.stage2.keypoints == Some(0) {
            return bad("stage2.keypoints", "must be at least 1");
        }
        if self.refine.curves_per_keypoint == 0 || self.refine.candidate_views == 0 {
            return bad("refine", "curve and view counts must be positive");
        }
        if self.eval.patch_model == self.stage2.patch_model {
            return bad("eval.patch_model", "must differ from the optimization patch model");
        }
        if self.eval.encoder == self.stage1.encoder || self.eval.encoder == self.stage2.encoder {
            return bad("eval.encoder", "must differ from the optimization encoders");
        }
        if self.eval.views == 0 || self.eval.coverage_points == 0 {
            return bad("eval", "view and point counts must be positive");
        }
        Ok(())
    }

    /// Registry rooted at the configured weights directory.
    pub fn registry(&self) -> EncoderRegistry {
        EncoderRegistry::new(self.weights_dir.clone(), self.resolution())
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        path: spec.into(),
        message: "override must look like key.path=value".into(),
    })?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            path: key.into(),
            message: "empty key segment".into(),
        });
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            path: key.into(),
            message: format!("`{p}` is not a table"),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A normalized mesh with its distance field and exact oracle.
pub struct Scene {
    pub mesh: Mesh,
    pub mesh_hash: String,
    pub field: Arc<dyn DistanceField>,
    pub oracle: DistanceOracle,
}

impl Scene {
    pub fn new(mesh: Mesh, field: Arc<dyn DistanceField>) -> Result<Self> {
        let oracle = DistanceOracle::new(&mesh)?;
        Ok(Self {
            mesh_hash: mesh.content_hash(),
            mesh,
            field,
            oracle,
        })
    }

    /// Scene with a fitted (or cached) neural distance field.
    pub fn fit(mesh: Mesh, cfg: &SdfConfig, cache_dir: &Path) -> Result<Self> {
        let field = crate::sdf::NeuralSdf::load_or_fit(&mesh, cfg, cache_dir)?;
        Self::new(mesh, Arc::new(field))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub global: f64,
    pub layers: f64,
    pub patch: f64,
    pub sdf: f64,
    pub ndc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub iteration: usize,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    /// Indices of the run's keypoints visible from this view.
    pub visible_keypoints: Vec<usize>,
}

/// Complete optimizer state of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub stage: Stage,
    pub iteration: usize,
    pub curves: CurveSet,
    pub optimizer: Adam,
    pub rng_seed: u64,
    /// ChaCha word position, decimal.
    pub rng_word_pos: String,
    pub history: Vec<IterationRecord>,
    pub view_log: Vec<ViewRecord>,
    pub keypoints: Vec<Keypoint>,
    pub config_hash: String,
}

impl Checkpoint {
    fn new(stage: Stage, curves: CurveSet, lr: f64, rng_seed: u64, keypoints: Vec<Keypoint>, config_hash: String) -> Self {
        let n = 12 * curves.len();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            stage,
            iteration: 0,
            curves,
            optimizer: Adam::new(AdamConfig { lr, ..AdamConfig::default() }, n),
            rng_seed,
            rng_word_pos: "0".into(),
            history: Vec::new(),
            view_log: Vec::new(),
            keypoints,
            config_hash,
        }
    }

    fn rng(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .rng_word_pos
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad rng position `{}`", self.rng_word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }

    /// Atomic write (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(path, format!("unknown checkpoint format `{}`", c.format)));
        }
        Ok(c)
    }

    /// Mean total loss over the first and last `window` iterations.
    pub fn window_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.history.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |r: &[IterationRecord]| r.iter().map(|h| h.total).sum::<f64>() / r.len() as f64;
        Some((mean(&self.history[..w]), mean(&self.history[n - w..])))
    }
}

/// Called with `(done, total)` after every iteration.
pub type Progress = Arc<dyn Fn(usize, usize) + Send + Sync>;

/// Where and when a running stage writes checkpoints.
#[derive(Clone, Default)]
pub struct StageControl {
    pub checkpoint: Option<PathBuf>,
    /// Stop (after checkpointing) once this many iterations are done.
    pub stop_at: Option<usize>,
    pub progress: Option<Progress>,
}

impl std::fmt::Debug for StageControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StageControl")
            .field("checkpoint", &self.checkpoint)
            .field("stop_at", &self.stop_at)
            .field("progress", &self.progress.is_some())
            .finish()
    }
}

enum ViewSource {
    Sampler(ViewSampler),
    /// Screened cameras with the keypoints visible from each.
    Pool(Vec<(Camera, Vec<usize>)>),
}

struct LoopSpec {
    iterations: usize,
    encoder: Arc<dyn PerceptualEncoder>,
    patch: Option<PatchSimilarity>,
    loss: LocalizedParams,
    sdf_weight: f64,
    target: RenderKind,
    localize: bool,
    sigma: f64,
    views: ViewSource,
}

fn seed_for(cfg: &RunConfig, stream: &str) -> u64 {
    let d = Sha256::digest(format!("{}:{stream}", cfg.seed).as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn render_options(cfg: &RunConfig) -> RenderOptions {
    RenderOptions {
        stroke_width: cfg.stroke_width,
        ..RenderOptions::default()
    }
}

fn stage_spec(scene: &Scene, cfg: &RunConfig, registry: &EncoderRegistry, stage: Stage, keypoints: &[Keypoint]) -> Result<LoopSpec> {
    let use_layers = !cfg.ablation.no_layers;
    let sdf_scale = if cfg.ablation.no_sdf { 0.0 } else { 1.0 };
    match stage {
        Stage::Geometry => Ok(LoopSpec {
            iterations: cfg.stage1.iterations,
            encoder: registry.encoder(&cfg.stage1.encoder)?,
            patch: None,
            loss: LocalizedParams {
                lambda_fc: cfg.stage1.lambda_fc,
                lambda_lpips: 0.0,
                normalize_global: cfg.normalize_global_weight,
                use_layers,
            },
            sdf_weight: sdf_scale * cfg.stage1.sdf_weight,
            target: if cfg.ablation.no_contours { RenderKind::Surface } else { RenderKind::Contour },
            localize: false,
            sigma: cfg.stage2.sigma,
            views: ViewSource::Sampler(cfg.views.clone()),
        }),
        Stage::Texture | Stage::Refinement => {
            let views = if stage == Stage::Refinement {
                ViewSource::Pool(visible_view_pool(scene, cfg, keypoints)?)
            } else {
                ViewSource::Sampler(cfg.views.clone())
            };
            Ok(LoopSpec {
                iterations: if stage == Stage::Refinement { cfg.refine.iterations } else { cfg.stage2.iterations },
                encoder: registry.encoder(&cfg.stage2.encoder)?,
                patch: if cfg.stage2.lambda_lpips != 0.0 { Some(registry.patch_similarity(&cfg.stage2.patch_model)?) } else { None },
                loss: LocalizedParams {
                    lambda_fc: cfg.stage2.lambda_fc,
                    lambda_lpips: cfg.stage2.lambda_lpips,
                    normalize_global: cfg.normalize_global_weight,
                    use_layers,
                },
                sdf_weight: sdf_scale * cfg.stage2.sdf_weight,
                target: RenderKind::Surface,
                localize: !cfg.ablation.no_local && !keypoints.is_empty(),
                sigma: cfg.stage2.sigma,
                views,
            })
        }
    }
}

/// Cameras from a seeded pool from which at least one keypoint is visible.
/// Fails naming the first keypoint that no pooled camera sees.
pub fn visible_view_pool(scene: &Scene, cfg: &RunConfig, keypoints: &[Keypoint]) -> Result<Vec<(Camera, Vec<usize>)>> {
    let sampler = ViewSampler {
        seed: seed_for(cfg, "refine-views"),
        ..cfg.views.clone()
    };
    let opts = render_options(cfg);
    let mut seen = vec![false; keypoints.len()];
    let mut pool = Vec::new();
    for cam in sampler.views(cfg.refine.candidate_views) {
        let depth = render_surface(&scene.mesh, &cam, &opts).depth;
        let visible: Vec<usize> = (0..keypoints.len())
            .filter(|&i| visible_projection(&keypoints[i].position, &cam, &depth).is_some())
            .collect();
        for &i in &visible {
            seen[i] = true;
        }
        if !visible.is_empty() {
            pool.push((cam, visible));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::KeypointNeverVisible {
            index: i,
            label: keypoints[i].describe(i),
        });
    }
    Ok(pool)
}

fn flatten(cs: &CurveSet) -> Vec<f64> {
    cs.curves.iter().flat_map(|c| c.control_points.iter().flat_map(|p| [p.x, p.y, p.z])).collect()
}

fn unflatten(cs: &mut CurveSet, params: &[f64]) {
    for (c, chunk) in cs.curves.iter_mut().zip(params.chunks(12)) {
        for j in 0..4 {
            c.control_points[j] = Vec3::new(chunk[3 * j], chunk[3 * j + 1], chunk[3 * j + 2]);
        }
    }
}

fn add_scaled(acc: &mut CurveGrads, g: &CurveGrads, s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for j in 0..4 {
            a[j] += b[j] * s;
        }
    }
}

/// One optimization step's losses and control-point gradients.
struct StepResult {
    record: IterationRecord,
    grads: CurveGrads,
}

fn step(scene: &Scene, cfg: &RunConfig, spec: &LoopSpec, state: &Checkpoint, cam: &Camera, rng: &mut ChaCha8Rng) -> Result<StepResult> {
    let res = cfg.resolution();
    let cs = &state.curves;
    let target = render(&scene.mesh, cam, spec.target, &render_options(cfg));
    let wm = if spec.localize {
        weight_map(&state.keypoints, cam, &target.depth, spec.sigma, res)?
    } else {
        WeightMap::uniform(res)
    };

    let backend = ReferenceRasterizer::default();
    let params = RasterParams::new(res, cs.stroke_width);
    let drawn = render_curve_set(cs, cam, &backend, &params);

    let k = cfg.augment.count.max(1);
    let mut grad_img = GrayImage::filled(res, res, 0.0);
    let (mut global, mut layers, mut patch) = (0.0, 0.0, 0.0);
    for _ in 0..k {
        let warp = Warp::sample(&cfg.augment, res, res, rng);
        let c = warp.apply(&drawn.strokes.image, 1.0);
        let t = warp.apply(&target.image, 1.0);
        let w = warp.apply(&wm.image, 1.0);
        let (terms, g) = localized_loss_grad(spec.encoder.as_ref(), spec.patch.as_ref(), &c, &t, &w, &spec.loss, true)?;
        global += terms.global / k as f64;
        layers += terms.layers / k as f64;
        patch += terms.patch / k as f64;
        let back = warp.backward(&g.expect("gradient requested"));
        grad_img.data.iter_mut().zip(&back.data).for_each(|(a, b)| *a += b / k as f64);
    }
    let mut grads = drawn.backward(cs.len(), &backend as &dyn RasterBackend, &params, &grad_img);

    let mut sdf = 0.0;
    if spec.sdf_weight != 0.0 {
        let l = sdf_loss(scene.field.as_ref(), cs, cfg.sdf_samples_per_curve, rng, false);
        sdf = spec.sdf_weight * l.value;
        add_scaled(&mut grads, &l.grads, spec.sdf_weight);
    }
    let ndc = ndc_loss(cs, cam, NDC_T_GRID);
    add_scaled(&mut grads, &ndc.grads, 1.0);

    Ok(StepResult {
        record: IterationRecord {
            iteration: state.iteration,
            total: global + layers + patch + sdf + ndc.value,
            global,
            layers,
            patch,
            sdf,
            ndc: ndc.value,
        },
        grads,
    })
}

fn optimize(scene: &Scene, cfg: &RunConfig, spec: &LoopSpec, state: &mut Checkpoint, control: &StageControl) -> Result<()> {
    let mut rng = state.rng()?;
    let active: Vec<bool> = state.curves.curves.iter().flat_map(|c| std::iter::repeat_n(!c.frozen, 12)).collect();
    state.optimizer.resize(active.len());
    let mut params = flatten(&state.curves);
    let end = control.stop_at.map_or(spec.iterations, |s| s.min(spec.iterations));
    while state.iteration < end {
        let (cam, visible) = match &spec.views {
            ViewSource::Sampler(s) => {
                let cam = s.sample(&mut rng);
                (cam, Vec::new())
            }
            ViewSource::Pool(pool) => {
                let (cam, vis) = &pool[rng.random_range(0..pool.len())];
                (cam.clone(), vis.clone())
            }
        };
        let result = step(scene, cfg, spec, state, &cam, &mut rng)?;
        let finite = result.record.total.is_finite() && result.grads.iter().all(|g| g.iter().all(|v| v.iter().all(|x| x.is_finite())));
        if !finite {
            let iteration = state.iteration;
            if let Some(p) = &control.checkpoint {
                let diag = p.with_extension("diagnostic.json");
                state.rng_word_pos = rng.get_word_pos().to_string();
                if let Err(e) = state.save(&diag) {
                    log::error!("could not write diagnostic snapshot: {e}");
                } else {
                    log::error!("non-finite loss; snapshot at {}", diag.display());
                }
            }
            return Err(Error::NonFiniteLoss { iteration });
        }
        let flat: Vec<f64> = result.grads.iter().flat_map(|g| g.iter().flat_map(|p| [p.x, p.y, p.z])).collect();
        state.optimizer.update(&mut params, &flat, Some(&active));
        unflatten(&mut state.curves, &params);
        let (el, az) = ViewSampler::angles_of(&cam);
        state.view_log.push(ViewRecord {
            iteration: state.iteration,
            elevation_deg: el,
            azimuth_deg: az,
            visible_keypoints: visible,
        });
        if state.iteration % 50 == 0 {
            log::info!("{:?} iteration {} loss {:.5}", state.stage, state.iteration, result.record.total);
        }
        state.history.push(result.record);
        state.iteration += 1;
        state.rng_word_pos = rng.get_word_pos().to_string();
        if let Some(p) = &control.progress {
            p(state.iteration, spec.iterations);
        }
        if let Some(p) = &control.checkpoint {
            if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 && state.iteration < end {
                state.save(p)?;
            }
        }
    }
    state.rng_word_pos = rng.get_word_pos().to_string();
    if let Some(p) = &control.checkpoint {
        state.save(p)?;
    }
    Ok(())
}

fn initial_curves(scene: &Scene, cfg: &RunConfig, n: usize, stage: Stage, stream: &str) -> Result<CurveSet> {
    let anchors = farthest_point_sample(&scene.mesh, n, seed_for(cfg, &format!("{stream}-fps")))?;
    let sigma = cfg.sigma_init * scene.mesh.bbox().diagonal();
    let mut cs = init_curves(&anchors, sigma, seed_for(cfg, &format!("{stream}-init")), stage)?;
    cs.stroke_width = cfg.stroke_width;
    cs.normalization = scene.mesh.normalization;
    cs.metadata.source_mesh_hash = Some(scene.mesh_hash.clone());
    Ok(cs)
}

/// Stage-1 state before the first iteration: FPS-anchored curves.
pub fn stage1_state(scene: &Scene, cfg: &RunConfig) -> Result<Checkpoint> {
    let cs = initial_curves(scene, cfg, cfg.stage1.curves, Stage::Geometry, "stage1")?;
    Ok(Checkpoint::new(Stage::Geometry, cs, cfg.lr, seed_for(cfg, "stage1"), Vec::new(), cfg.hash()))
}

/// Stage-2 state: frozen stage-1 curves plus new FPS-anchored curves.
pub fn stage2_state(scene: &Scene, cfg: &RunConfig, stage1: &CurveSet, keypoints: Vec<Keypoint>) -> Result<Checkpoint> {
    let mut cs = stage1.clone();
    cs.freeze_all();
    cs.stroke_width = cfg.stroke_width;
    cs.normalization = scene.mesh.normalization;
    cs.extend(initial_curves(scene, cfg, cfg.stage2.curves, Stage::Texture, "stage2")?);
    cs.metadata.created_stage = Some(Stage::Texture);
    Ok(Checkpoint::new(Stage::Texture, cs, cfg.lr, seed_for(cfg, "stage2"), keypoints, cfg.hash()))
}

/// Refinement state: everything existing frozen, a Gaussian cluster of
/// curves at each new keypoint.
pub fn refine_state(scene: &Scene, cfg: &RunConfig, cs: &CurveSet, new_keypoints: Vec<Keypoint>) -> Result<Checkpoint> {
    if new_keypoints.is_empty() {
        return Err(Error::InvalidArgument("refinement needs at least one keypoint".into()));
    }
    let mut out = cs.clone();
    out.freeze_all();
    let anchors: Vec<Vec3> = new_keypoints
        .iter()
        .flat_map(|k| std::iter::repeat_n(k.position, cfg.refine.curves_per_keypoint))
        .collect();
    let sigma = cfg.sigma_init * scene.mesh.bbox().diagonal();
    let added = init_curves(&anchors, sigma, seed_for(cfg, &format!("refine-init-{}", cs.len())), Stage::Refinement)?;
    out.extend(added);
    Ok(Checkpoint::new(Stage::Refinement, out, cfg.lr, seed_for(cfg, &format!("refine-{}", cs.len())), new_keypoints, cfg.hash()))
}

/// Runs (or continues) the stage recorded in `state` up to its configured
/// iteration count.
pub fn continue_stage(scene: &Scene, cfg: &RunConfig, registry: &EncoderRegistry, state: &mut Checkpoint, control: &StageControl) -> Result<()> {
    let spec = stage_spec(scene, cfg, registry, state.stage, &state.keypoints)?;
    optimize(scene, cfg, &spec, state, control)
}

/// Resumes from a checkpoint file, refusing a different config unless
/// `force` is set.
pub fn resume(scene: &Scene, cfg: &RunConfig, registry: &EncoderRegistry, path: &Path, control: &StageControl, force: bool) -> Result<Checkpoint> {
    let mut state = Checkpoint::load(path)?;
    let current = cfg.hash();
    if state.config_hash != current {
        if !force {
            return Err(Error::ConfigHashMismatch {
                stored: state.config_hash,
                current,
            });
        }
        log::warn!("resuming with a different config ({} → {current})", state.config_hash);
        state.config_hash = current;
    }
    continue_stage(scene, cfg, registry, &mut state, control)?;
    Ok(state)
}

pub fn run_stage1(scene: &Scene, cfg: &RunConfig, registry: &EncoderRegistry, control: &StageControl) -> Result<Checkpoint> {
    let mut state = stage1_state(scene, cfg)?;
    continue_stage(scene, cfg, registry, &mut state, control)?;
    Ok(state)
}

/// Keypoints from clustered back-projected features, `k` = configured
/// count or the stage-2 curve count.
pub fn auto_keypoints(scene: &Scene, cfg: &RunConfig, registry: &EncoderRegistry) -> Result<Vec<Keypoint>> {
    let k = cfg.stage2.keypoints.unwrap_or(cfg.stage2.curves);
    let sampler = ViewSampler {
        seed: seed_for(cfg, "keypoint-views"),
        ..cfg.views.clone()
    };
    let encoder = registry.encoder(&cfg.stage2.keypoint_encoder)?;
    let vf = backproject_features(&scene.mesh, &sampler.views(cfg.stage2.keypoint_views), encoder.as_ref(), &render_options(cfg))?;
    detect_keypoints(&vf, k, seed_for(cfg, "kmeans"))
}

/// Stage 2. Without supplied keypoints they are detected automatically
/// (unless localization is ablated).
pub fn run_stage2(
    scene: &Scene,
    cfg: &RunConfig,
    registry: &EncoderRegistry,
    stage1: &CurveSet,
    keypoints: Option<Vec<Keypoint>>,
    control: &StageControl,
) -> Result<Checkpoint> {
    let kps = match keypoints {
        Some(k) => k,
        None if cfg.ablation.no_local => Vec::new(),
        None => auto_keypoints(scene, cfg, registry)?,
    };
    let mut state = stage2_state(scene, cfg, stage1, kps)?;
    continue_stage(scene, cfg, registry, &mut state, control)?;
    Ok(state)
}

pub fn refine(scene: &Scene, cfg: &RunConfig, registry: &EncoderRegistry, cs: &CurveSet, new_keypoints: Vec<Keypoint>, control: &StageControl) -> Result<Checkpoint> {
    let mut state = refine_state(scene, cfg, cs, new_keypoints)?;
    continue_stage(scene, cfg, registry, &mut state, control)?;
    Ok(state)
}

/// Stage 1 (unless ablated) followed by stage 2.
pub struct FullRun {
    pub stage1: Option<Checkpoint>,
    pub stage2: Checkpoint,
}

pub fn run_both(scene: &Scene, cfg: &RunConfig, registry: &EncoderRegistry, keypoints: Option<Vec<Keypoint>>, dir: Option<&Path>) -> Result<FullRun> {
    let ctl = |name: &str| StageControl {
        checkpoint: dir.map(|d| d.join(name)),
        ..StageControl::default()
    };
    let stage1 = if cfg.ablation.no_stage1 { None } else { Some(run_stage1(scene, cfg, registry, &ctl("stage1.ckpt.json"))?) };
    let empty = CurveSet::new(Vec::new(), cfg.stroke_width);
    let base = stage1.as_ref().map_or(&empty, |s| &s.curves);
    let stage2 = run_stage2(scene, cfg, registry, base, keypoints, &ctl("stage2.ckpt.json"))?;
    Ok(FullRun { stage1, stage2 })
}
