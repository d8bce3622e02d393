//! Distance oracle over the mesh, a neural distance field fitted to it, and
//! the curve adherence loss that pulls curve samples onto the zero level set.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curves::{bernstein, CurveGrads, CurveSet};
use crate::geometry::{Mesh, SurfaceSampler, TriangleBvh};
use crate::linalg::gemm;
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result, Vec3};

/// Scalar field with spatial gradients, evaluated in batches.
pub trait DistanceField: Send + Sync {
    fn eval(&self, points: &[Vec3]) -> Vec<f64>;
    fn eval_with_grad(&self, points: &[Vec3]) -> (Vec<f64>, Vec<Vec3>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMethod {
    WindingNumber,
    None,
}

pub const SIGN_PROBES: usize = 1000;
const SIGN_TOLERANCE: f64 = 0.1;
const SIGN_FRACTION: f64 = 0.99;

/// Closest-triangle distance, signed by winding number when the mesh is
/// closed enough for it.
#[derive(Debug, Clone)]
pub struct DistanceOracle {
    bvh: TriangleBvh,
    sign: SignMethod,
}

/// Uniform probes in the bbox scaled by 1.2; signed if the winding number is
/// within 0.1 of an integer for at least 99% of them.
pub fn decide_sign(bvh: &TriangleBvh, mesh: &Mesh, probes: usize, seed: u64) -> SignMethod {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = mesh.bbox();
    let c = bb.center();
    let half = (bb.max - bb.min) * 0.6;
    let integral = (0..probes)
        .filter(|_| {
            let p = c + Vec3::new(
                half.x * rng.random_range(-1.0..=1.0),
                half.y * rng.random_range(-1.0..=1.0),
                half.z * rng.random_range(-1.0..=1.0),
            );
            let w = bvh.winding_number(&p);
            (w - w.round()).abs() < SIGN_TOLERANCE
        })
        .count();
    if integral as f64 >= SIGN_FRACTION * probes as f64 {
        SignMethod::WindingNumber
    } else {
        SignMethod::None
    }
}

impl DistanceOracle {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::InvalidMesh("distance oracle needs at least one face".into()));
        }
        let bvh = TriangleBvh::new(mesh);
        let sign = decide_sign(&bvh, mesh, SIGN_PROBES, 0x5d6);
        Ok(Self { bvh, sign })
    }

    pub fn with_sign(mesh: &Mesh, sign: SignMethod) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::InvalidMesh("distance oracle needs at least one face".into()));
        }
        Ok(Self {
            bvh: TriangleBvh::new(mesh),
            sign,
        })
    }

    pub fn sign_method(&self) -> SignMethod {
        self.sign
    }

    pub fn closest_point(&self, p: &Vec3) -> Vec3 {
        self.bvh.closest(p).expect("non-empty oracle").point
    }

    pub fn unsigned_distance(&self, p: &Vec3) -> f64 {
        self.bvh.closest(p).expect("non-empty oracle").distance_squared.sqrt()
    }

    fn sign_at(&self, p: &Vec3) -> f64 {
        match self.sign {
            SignMethod::WindingNumber if self.bvh.winding_number(p) > 0.5 => -1.0,
            _ => 1.0,
        }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.sign_at(p) * self.unsigned_distance(p)
    }
}

impl DistanceField for DistanceOracle {
    fn eval(&self, points: &[Vec3]) -> Vec<f64> {
        points.iter().map(|p| self.distance(p)).collect()
    }

    fn eval_with_grad(&self, points: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        points
            .iter()
            .map(|p| {
                let hit = self.bvh.closest(p).expect("non-empty oracle");
                let d = hit.distance_squared.sqrt();
                let s = self.sign_at(p);
                let g = if d > 0.0 { (p - hit.point) * (s / d) } else { Vec3::zeros() };
                (s * d, g)
            })
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdfConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub frequency_bands: usize,
    pub near_surface_samples: usize,
    pub uniform_samples: usize,
    /// Standard deviations of the Gaussian offsets for near-surface samples;
    /// samples are split evenly between them.
    pub near_surface_sigmas: Vec<f64>,
    pub heldout_samples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Evaluations without relative improvement before stopping early.
    pub patience: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for SdfConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 6,
            width: 256,
            frequency_bands: 6,
            near_surface_samples: 200_000,
            uniform_samples: 50_000,
            near_surface_sigmas: vec![0.005, 0.03],
            heldout_samples: 5_000,
            steps: 2_000,
            batch_size: 512,
            lr: 1e-3,
            eval_every: 100,
            patience: 5,
            divergence_threshold: 0.05,
            seed: 0,
        }
    }
}

impl SdfConfig {
    /// Smaller network and sample budget for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            hidden_layers: 4,
            width: 96,
            frequency_bands: 4,
            near_surface_samples: 40_000,
            uniform_samples: 10_000,
            heldout_samples: 2_000,
            steps: 1_500,
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("sdf network and batch sizes must be positive".into()));
        }
        if self.near_surface_sigmas.is_empty() || self.near_surface_sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("near_surface_sigmas must be positive and non-empty".into()));
        }
        if self.near_surface_samples + self.uniform_samples == 0 || self.heldout_samples == 0 {
            return Err(Error::InvalidArgument("sdf training needs samples".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

const SOFTPLUS_BETA: f64 = 100.0;

fn softplus(z: f64) -> f64 {
    let bz = SOFTPLUS_BETA * z;
    if bz > 30.0 {
        z
    } else {
        bz.exp().ln_1p() / SOFTPLUS_BETA
    }
}

fn softplus_grad(z: f64) -> f64 {
    1.0 / (1.0 + (-SOFTPLUS_BETA * z).exp())
}

/// Multilayer perceptron over a positional encoding of the input point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    frequency_bands: usize,
    layers: Vec<LayerShape>,
    pub params: Vec<f64>,
}

struct Activations {
    batch: usize,
    encoded: Vec<f64>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Outputs of each hidden layer after the nonlinearity.
    post: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Mlp {
    pub fn encoded_dim(frequency_bands: usize) -> usize {
        3 + 6 * frequency_bands
    }

    /// Geometric initialization: starts close to the distance field of a
    /// sphere of radius `radius` centred at the origin.
    pub fn new(hidden_layers: usize, width: usize, frequency_bands: usize, radius: f64, rng: &mut impl Rng) -> Self {
        let dims: Vec<usize> = std::iter::once(Self::encoded_dim(frequency_bands))
            .chain(std::iter::repeat_n(width, hidden_layers))
            .chain(std::iter::once(1))
            .collect();
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in dims.windows(2) {
            let weights = offset;
            let bias = weights + w[0] * w[1];
            offset = bias + w[1];
            layers.push(LayerShape {
                inputs: w[0],
                outputs: w[1],
                weights,
                bias,
            });
        }
        let mut params = vec![0.0; offset];
        let last = layers.len() - 1;
        for (li, l) in layers.iter().enumerate() {
            if li == last {
                let mean = std::f64::consts::PI.sqrt() / (l.inputs as f64).sqrt();
                let n = Normal::new(mean, 1e-4).unwrap();
                for i in 0..l.inputs * l.outputs {
                    params[l.weights + i] = n.sample(rng);
                }
                params[l.bias] = -radius;
            } else {
                let n = Normal::new(0.0, 2f64.sqrt() / (l.outputs as f64).sqrt()).unwrap();
                for r in 0..l.inputs {
                    for c in 0..l.outputs {
                        // Only the raw coordinates feed the first layer at init.
                        let v = if li == 0 && r >= 3 { 0.0 } else { n.sample(rng) };
                        params[l.weights + r * l.outputs + c] = v;
                    }
                }
            }
        }
        Self {
            frequency_bands,
            layers,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn encode(&self, points: &[Vec3]) -> Vec<f64> {
        let d = Self::encoded_dim(self.frequency_bands);
        let mut out = vec![0.0; points.len() * d];
        for (i, p) in points.iter().enumerate() {
            let row = &mut out[i * d..(i + 1) * d];
            row[..3].copy_from_slice(p.as_slice());
            for k in 0..self.frequency_bands {
                let w = (1u64 << k) as f64 * std::f64::consts::PI;
                for c in 0..3 {
                    let (s, co) = (w * p[c]).sin_cos();
                    row[3 + 6 * k + c] = s;
                    row[3 + 6 * k + 3 + c] = co;
                }
            }
        }
        out
    }

    fn forward(&self, points: &[Vec3]) -> Activations {
        let batch = points.len();
        let encoded = self.encode(points);
        let mut pre = Vec::new();
        let mut post: Vec<Vec<f64>> = Vec::new();
        let mut output = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            let input: &[f64] = if li == 0 { &encoded } else { &post[li - 1] };
            let mut z = vec![0.0; batch * l.outputs];
            for row in z.chunks_mut(l.outputs) {
                row.copy_from_slice(&self.params[l.bias..l.bias + l.outputs]);
            }
            gemm(batch, l.inputs, l.outputs, 1.0, input, false, &self.params[l.weights..], false, 1.0, &mut z);
            if li + 1 == self.layers.len() {
                output = z;
            } else {
                let h = z.iter().map(|&v| softplus(v)).collect();
                pre.push(z);
                post.push(h);
            }
        }
        Activations {
            batch,
            encoded,
            pre,
            post,
            output,
        }
    }

    /// Backpropagates `d_out` (one value per point). Accumulates parameter
    /// gradients into `param_grad` when given and returns input gradients
    /// when `want_input` is set.
    fn backward(&self, acts: &Activations, d_out: &[f64], mut param_grad: Option<&mut [f64]>, want_input: bool) -> Option<Vec<Vec3>> {
        let batch = acts.batch;
        let mut delta = d_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let input: &[f64] = if li == 0 { &acts.encoded } else { &acts.post[li - 1] };
            if let Some(g) = param_grad.as_deref_mut() {
                gemm(l.inputs, batch, l.outputs, 1.0, input, true, &delta, false, 1.0, &mut g[l.weights..l.bias]);
                for row in delta.chunks(l.outputs) {
                    for (gb, d) in g[l.bias..l.bias + l.outputs].iter_mut().zip(row) {
                        *gb += d;
                    }
                }
            }
            if li == 0 && !want_input {
                break;
            }
            let mut d_in = vec![0.0; batch * l.inputs];
            gemm(batch, l.outputs, l.inputs, 1.0, &delta, false, &self.params[l.weights..l.bias], true, 0.0, &mut d_in);
            if li > 0 {
                for (d, &z) in d_in.iter_mut().zip(&acts.pre[li - 1]) {
                    *d *= softplus_grad(z);
                }
            }
            delta = d_in;
        }
        if !want_input {
            return None;
        }
        let d = Self::encoded_dim(self.frequency_bands);
        let grads = (0..batch)
            .map(|i| {
                let row = &delta[i * d..(i + 1) * d];
                let enc = &acts.encoded[i * d..(i + 1) * d];
                let mut g = Vec3::new(row[0], row[1], row[2]);
                for k in 0..self.frequency_bands {
                    let w = (1u64 << k) as f64 * std::f64::consts::PI;
                    for c in 0..3 {
                        let s = enc[3 + 6 * k + c];
                        let co = enc[3 + 6 * k + 3 + c];
                        g[c] += row[3 + 6 * k + c] * w * co - row[3 + 6 * k + 3 + c] * w * s;
                    }
                }
                g
            })
            .collect();
        Some(grads)
    }

    pub fn eval(&self, points: &[Vec3]) -> Vec<f64> {
        self.forward(points).output
    }

    pub fn eval_with_grad(&self, points: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        let acts = self.forward(points);
        let ones = vec![1.0; points.len()];
        let grads = self.backward(&acts, &ones, None, true).unwrap();
        (acts.output, grads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps_run: usize,
    pub final_train_loss: f64,
    /// Median |Φ − oracle| on held-out near-surface points.
    pub heldout_median_error: f64,
    /// Median |Φ| on held-out surface points.
    pub surface_median_abs: f64,
    /// Fraction of near-surface points with gradient norm in [0.5, 2].
    pub unit_gradient_fraction: f64,
    pub sign_method: SignMethod,
}

/// Fitted neural distance field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralSdf {
    pub mlp: Mlp,
    pub report: FitReport,
    pub mesh_hash: String,
    pub config: SdfConfig,
}

impl DistanceField for NeuralSdf {
    fn eval(&self, points: &[Vec3]) -> Vec<f64> {
        self.mlp.eval(points)
    }

    fn eval_with_grad(&self, points: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        self.mlp.eval_with_grad(points)
    }
}

struct TrainingSet {
    points: Vec<Vec3>,
    targets: Vec<f64>,
}

fn near_surface_points(mesh: &Mesh, n: usize, sigmas: &[f64], rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    let sampler = SurfaceSampler::new(mesh)?;
    let normal = Normal::new(0.0, 1.0).unwrap();
    Ok((0..n)
        .map(|i| {
            let s = sigmas[i % sigmas.len()];
            let p = sampler.sample(rng).position;
            p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)) * s
        })
        .collect())
}

fn uniform_points(mesh: &Mesh, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let bb = mesh.bbox();
    let c = bb.center();
    let half = (bb.max - bb.min) * 0.6;
    (0..n)
        .map(|_| {
            c + Vec3::new(
                half.x * rng.random_range(-1.0..=1.0),
                half.y * rng.random_range(-1.0..=1.0),
                half.z * rng.random_range(-1.0..=1.0),
            )
        })
        .collect()
}

fn labelled(oracle: &DistanceOracle, points: Vec<Vec3>) -> TrainingSet {
    let targets = points.iter().map(|p| oracle.distance(p)).collect();
    TrainingSet { points, targets }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains the network on oracle distances at near-surface and uniform
/// samples. Returns `FitDiverged` if the held-out error stays above the
/// configured threshold.
pub fn fit_neural_sdf(mesh: &Mesh, oracle: &DistanceOracle, cfg: &SdfConfig) -> Result<NeuralSdf> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = near_surface_points(mesh, cfg.near_surface_samples, &cfg.near_surface_sigmas, &mut rng)?;
    points.extend(uniform_points(mesh, cfg.uniform_samples, &mut rng));
    let train = labelled(oracle, points);
    let heldout = labelled(oracle, near_surface_points(mesh, cfg.heldout_samples, &cfg.near_surface_sigmas, &mut rng)?);
    let surface = {
        let sampler = SurfaceSampler::new(mesh)?;
        (0..cfg.heldout_samples.min(1000)).map(|_| sampler.sample(&mut rng).position).collect::<Vec<_>>()
    };

    let radius = 0.25 * mesh.bbox().diagonal();
    let mut mlp = Mlp::new(cfg.hidden_layers, cfg.width, cfg.frequency_bands, radius, &mut rng);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        mlp.param_count(),
    );
    let heldout_error = |mlp: &Mlp| {
        let pred = mlp.eval(&heldout.points);
        median(pred.iter().zip(&heldout.targets).map(|(p, t)| (p - t).abs()).collect())
    };

    let mut grad = vec![0.0; mlp.param_count()];
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut steps_run = 0;
    let mut last_loss = f64::NAN;
    let mut batch_points = Vec::with_capacity(cfg.batch_size);
    let mut batch_targets = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch_points.clear();
        batch_targets.clear();
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..train.points.len());
            batch_points.push(train.points[i]);
            batch_targets.push(train.targets[i]);
        }
        let acts = mlp.forward(&batch_points);
        let b = cfg.batch_size as f64;
        let mut loss = 0.0;
        let d_out: Vec<f64> = acts
            .output
            .iter()
            .zip(&batch_targets)
            .map(|(p, t)| {
                let r = p - t;
                loss += r.abs() / b;
                r.signum() / b
            })
            .collect();
        if !loss.is_finite() {
            return Err(Error::FitDiverged {
                error: loss,
                threshold: cfg.divergence_threshold,
            });
        }
        last_loss = loss;
        grad.iter_mut().for_each(|g| *g = 0.0);
        mlp.backward(&acts, &d_out, Some(&mut grad), false);
        adam.update(&mut mlp.params, &grad, None);
        steps_run = step + 1;
        if steps_run % cfg.eval_every == 0 {
            let err = heldout_error(&mlp);
            log::debug!("sdf step {steps_run}: train {loss:.5} heldout median {err:.5}");
            if err < best * 0.98 {
                best = err;
                stale = 0;
            } else {
                best = best.min(err);
                stale += 1;
                if stale >= cfg.patience {
                    log::info!("sdf fit plateaued at step {steps_run}");
                    break;
                }
            }
        }
    }

    let heldout_median_error = heldout_error(&mlp);
    if !(heldout_median_error <= cfg.divergence_threshold) {
        return Err(Error::FitDiverged {
            error: heldout_median_error,
            threshold: cfg.divergence_threshold,
        });
    }
    let surface_median_abs = median(mlp.eval(&surface).into_iter().map(f64::abs).collect());
    let (_, g) = mlp.eval_with_grad(&heldout.points);
    let unit = g.iter().filter(|g| (0.5..=2.0).contains(&g.norm())).count();
    let report = FitReport {
        steps_run,
        final_train_loss: last_loss,
        heldout_median_error,
        surface_median_abs,
        unit_gradient_fraction: unit as f64 / g.len() as f64,
        sign_method: oracle.sign_method(),
    };
    log::info!(
        "sdf fit: {} steps, heldout median {:.5}, surface median {:.5}",
        steps_run,
        heldout_median_error,
        surface_median_abs
    );
    Ok(NeuralSdf {
        mlp,
        report,
        mesh_hash: mesh.content_hash(),
        config: cfg.clone(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CSSDF001";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    frequency_bands: usize,
    layers: Vec<LayerShape>,
    report: FitReport,
    mesh_hash: String,
    config: SdfConfig,
    param_count: usize,
}

impl NeuralSdf {
    /// Binary checkpoint: magic, u64 header length, JSON header, then the
    /// parameters as little-endian f64.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            frequency_bands: self.mlp.frequency_bands,
            layers: self.mlp.layers.clone(),
            report: self.report.clone(),
            mesh_hash: self.mesh_hash.clone(),
            config: self.config.clone(),
            param_count: self.mlp.params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.mlp.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.mlp.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::parse(path, m.to_string());
        if buf.len() < 16 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not an sdf checkpoint"));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let body = buf.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let data = &buf[16 + hlen..];
        if data.len() != header.param_count * 8 {
            return Err(bad("parameter block size mismatch"));
        }
        let params = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self {
            mlp: Mlp {
                frequency_bands: header.frequency_bands,
                layers: header.layers,
                params,
            },
            report: header.report,
            mesh_hash: header.mesh_hash,
            config: header.config,
        })
    }

    pub fn checkpoint_path(dir: &Path, mesh_hash: &str, cfg: &SdfConfig) -> PathBuf {
        dir.join(format!("{mesh_hash}-{}.sdf", cfg.hash()))
    }

    /// Loads the checkpoint keyed by mesh hash and config when present,
    /// otherwise fits and stores it.
    pub fn load_or_fit(mesh: &Mesh, cfg: &SdfConfig, dir: &Path) -> Result<Self> {
        let path = Self::checkpoint_path(dir, &mesh.content_hash(), cfg);
        if path.exists() {
            match Self::load(&path) {
                Ok(f) => return Ok(f),
                Err(e) => log::warn!("ignoring unreadable sdf checkpoint {}: {e}", path.display()),
            }
        }
        let oracle = DistanceOracle::new(mesh)?;
        let field = fit_neural_sdf(mesh, &oracle, cfg)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        field.save(&path)?;
        Ok(field)
    }
}

#[derive(Debug, Clone)]
pub struct SdfLoss {
    pub value: f64,
    pub grads: CurveGrads,
}

/// Mean absolute field value over curve samples at the given parameters,
/// `(1 / (n·s)) Σ_i Σ_k |Φ(B_i(t_k))|`, with gradients for every curve.
/// `ts[i]` holds the parameters for curve `i`; `n` counts included curves
/// and `s` is the per-curve sample count.
pub fn sdf_loss_at(field: &dyn DistanceField, cs: &CurveSet, ts: &[Vec<f64>], include_frozen: bool) -> SdfLoss {
    let mut grads = vec![[Vec3::zeros(); 4]; cs.len()];
    let included: Vec<usize> = (0..cs.len()).filter(|&i| include_frozen || !cs.curves[i].frozen).collect();
    if included.is_empty() {
        return SdfLoss { value: 0.0, grads };
    }
    let mut points = Vec::new();
    let mut owners = Vec::new();
    for &i in &included {
        for &t in &ts[i] {
            points.push(cs.curves[i].eval(t));
            owners.push((i, bernstein(t.clamp(0.0, 1.0))));
        }
    }
    let s = points.len() as f64 / included.len() as f64;
    let norm = 1.0 / (included.len() as f64 * s);
    let (values, field_grads) = field.eval_with_grad(&points);
    let mut value = 0.0;
    for ((v, g), (i, w)) in values.iter().zip(&field_grads).zip(&owners) {
        value += v.abs() * norm;
        let gp = g * (v.signum() * norm);
        if *v != 0.0 {
            for j in 0..4 {
                grads[*i][j] += gp * w[j];
            }
        }
    }
    SdfLoss { value, grads }
}

/// Monte Carlo estimate with `s` uniform parameters per curve.
pub fn sdf_loss(field: &dyn DistanceField, cs: &CurveSet, s: usize, rng: &mut impl Rng, include_frozen: bool) -> SdfLoss {
    let ts: Vec<Vec<f64>> = (0..cs.len()).map(|_| crate::curves::sample_params(s.max(1), rng)).collect();
    sdf_loss_at(field, cs, &ts, include_frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::{BezierCurve, Stage};
    use crate::geometry::{normalize_mesh, primitives};

    fn sphere() -> Mesh {
        normalize_mesh(&primitives::icosphere(3)).unwrap()
    }

    #[test]
    fn oracle_vertex_and_interior() {
        let m = primitives::icosphere(3);
        let o = DistanceOracle::new(&m).unwrap();
        assert_eq!(o.sign_method(), SignMethod::WindingNumber);
        assert!(o.distance(&m.vertices[17]).abs() < 1e-15);
        let d0 = o.distance(&Vec3::zeros());
        assert!(d0 < 0.0 && d0.abs() < 1.0 && d0.abs() > 0.98);
    }

    #[test]
    fn oracle_offset_along_face_normal() {
        let m = primitives::icosphere(2);
        let o = DistanceOracle::new(&m).unwrap();
        let normals = m.face_normals();
        for f in [0, 40, 199] {
            let [a, b, c] = m.triangle(f);
            let centroid = (a + b + c) / 3.0;
            let d = 0.01;
            assert!((o.distance(&(centroid + normals[f] * d)) - d).abs() < 1e-9);
        }
    }

    #[test]
    fn open_surface_is_unsigned() {
        let o = DistanceOracle::new(&primitives::open_cylinder(32, 4)).unwrap();
        assert_eq!(o.sign_method(), SignMethod::None);
        assert!(o.distance(&Vec3::zeros()) > 0.0);
    }

    #[test]
    fn oracle_rigid_invariance() {
        let m = primitives::cube();
        let o = DistanceOracle::new(&m).unwrap();
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let shift = Vec3::new(0.4, -1.0, 2.0);
        let moved = m.map_vertices(|v| rot * v + shift);
        let om = DistanceOracle::new(&moved).unwrap();
        for p in [Vec3::new(0.2, 0.3, 0.1), Vec3::new(1.5, -0.2, 0.7), Vec3::new(-2.0, 2.0, 0.0)] {
            assert!((o.distance(&p) - om.distance(&(rot * p + shift))).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(3, 16, 3, 0.25, &mut rng);
        // Perturb away from the geometric init so every path is exercised.
        let n = Normal::new(0.0, 0.2).unwrap();
        for p in mlp.params.iter_mut() {
            *p += n.sample(&mut rng);
        }
        let pts = vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(-0.3, 0.05, 0.2)];
        let (_, g) = mlp.eval_with_grad(&pts);
        let h = 1e-6;
        for (i, p) in pts.iter().enumerate() {
            for k in 0..3 {
                let mut a = *p;
                a[k] += h;
                let mut b = *p;
                b[k] -= h;
                let fd = (mlp.eval(&[a])[0] - mlp.eval(&[b])[0]) / (2.0 * h);
                assert!((fd - g[i][k]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", g[i][k]);
            }
        }
    }

    #[test]
    fn mlp_parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mlp = Mlp::new(2, 8, 2, 0.25, &mut rng);
        let n = Normal::new(0.0, 0.3).unwrap();
        for p in mlp.params.iter_mut() {
            *p += n.sample(&mut rng);
        }
        let pts = vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(-0.3, 0.05, 0.2), Vec3::new(0.0, 0.4, -0.1)];
        let acts = mlp.forward(&pts);
        let mut grad = vec![0.0; mlp.param_count()];
        mlp.backward(&acts, &[1.0, 1.0, 1.0], Some(&mut grad), false);
        let h = 1e-6;
        for idx in (0..mlp.param_count()).step_by(7) {
            let mut a = mlp.clone();
            a.params[idx] += h;
            let mut b = mlp.clone();
            b.params[idx] -= h;
            let fd = (a.eval(&pts).iter().sum::<f64>() - b.eval(&pts).iter().sum::<f64>()) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-5 * fd.abs().max(1.0), "param {idx}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn geometric_init_approximates_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(4, 128, 4, 0.25, &mut rng);
        let v = mlp.eval(&[Vec3::zeros(), Vec3::new(0.5, 0.0, 0.0)]);
        assert!(v[0] < 0.0 && v[1] > 0.0, "{v:?}");
    }

    #[test]
    fn point_curve_off_surface_matches_oracle() {
        let m = sphere();
        let o = DistanceOracle::new(&m).unwrap();
        let p = Vec3::new(0.0, 0.0, 0.0) + Vec3::new(1.0, 1.0, 0.0).normalize() * (0.2887 + 0.3);
        let cs = CurveSet::new(vec![BezierCurve::new([p; 4], Stage::Geometry)], 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = sdf_loss(&o, &cs, 16, &mut rng, true);
        assert!((loss.value - o.distance(&p)).abs() < 1e-12);
        assert!((loss.value - 0.3).abs() < 0.01);
    }

    #[test]
    fn duplicated_curves_leave_loss_unchanged() {
        let m = sphere();
        let o = DistanceOracle::new(&m).unwrap();
        let c = BezierCurve::new(
            [Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.1, 0.2, 0.1), Vec3::new(-0.2, 0.1, 0.3), Vec3::new(0.0, -0.3, 0.1)],
            Stage::Geometry,
        );
        let ts = vec![0.1, 0.4, 0.45, 0.9];
        let one = sdf_loss_at(&o, &CurveSet::new(vec![c.clone()], 1.5), &[ts.clone()], true);
        let three = sdf_loss_at(&o, &CurveSet::new(vec![c.clone(), c.clone(), c], 1.5), &[ts.clone(), ts.clone(), ts], true);
        assert!((one.value - three.value).abs() < 1e-12);
    }

    #[test]
    fn frozen_flag_controls_inclusion() {
        let m = sphere();
        let o = DistanceOracle::new(&m).unwrap();
        let mut cs = CurveSet::new(
            vec![
                BezierCurve::new([Vec3::new(0.6, 0.0, 0.0); 4], Stage::Geometry),
                BezierCurve::new([Vec3::new(0.3, 0.0, 0.0); 4], Stage::Texture),
            ],
            1.5,
        );
        cs.curves[0].frozen = true;
        let ts = vec![vec![0.5], vec![0.5]];
        let all = sdf_loss_at(&o, &cs, &ts, true).value;
        let active = sdf_loss_at(&o, &cs, &ts, false).value;
        assert!(active < all);
        assert!((active - o.distance(&Vec3::new(0.3, 0.0, 0.0)).abs()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_with_oracle() {
        let m = sphere();
        let o = DistanceOracle::new(&m).unwrap();
        let cs = CurveSet::new(
            vec![BezierCurve::new(
                [Vec3::new(0.5, 0.0, 0.1), Vec3::new(0.3, 0.3, 0.1), Vec3::new(-0.2, 0.4, 0.3), Vec3::new(0.0, -0.5, 0.2)],
                Stage::Geometry,
            )],
            1.5,
        );
        let ts = vec![vec![0.05, 0.3, 0.6, 0.95]];
        let base = sdf_loss_at(&o, &cs, &ts, true);
        let h = 1e-6;
        for j in 0..4 {
            for k in 0..3 {
                let mut a = cs.clone();
                a.curves[0].control_points[j][k] += h;
                let mut b = cs.clone();
                b.curves[0].control_points[j][k] -= h;
                let fd = (sdf_loss_at(&o, &a, &ts, true).value - sdf_loss_at(&o, &b, &ts, true).value) / (2.0 * h);
                let an = base.grads[0][j][k];
                assert!((fd - an).abs() <= 1e-2 * fd.abs().max(an.abs()).max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn standard_error_shrinks_with_more_samples() {
        let m = sphere();
        let o = DistanceOracle::new(&m).unwrap();
        let cs = CurveSet::new(
            vec![BezierCurve::new(
                [Vec3::new(0.5, 0.0, 0.1), Vec3::new(0.3, 0.3, 0.1), Vec3::new(-0.2, 0.4, 0.3), Vec3::new(0.0, -0.5, 0.2)],
                Stage::Geometry,
            )],
            1.5,
        );
        let spread = |s: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
            let v: Vec<f64> = (0..200).map(|_| sdf_loss(&o, &cs, s, &mut rng, true).value).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (mean, var.sqrt())
        };
        let (m16, s16) = spread(16);
        let (m64, s64) = spread(64);
        // Quadrupling s halves the standard error; allow sampling slack.
        let ratio = s64 / s16;
        assert!(ratio > 0.35 && ratio < 0.7, "ratio {ratio}");
        assert!((m16 - m64).abs() < 3.0 * s16);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = NeuralSdf {
            mlp: Mlp::new(2, 8, 2, 0.25, &mut rng),
            report: FitReport {
                steps_run: 3,
                final_train_loss: 0.1,
                heldout_median_error: 0.01,
                surface_median_abs: 0.01,
                unit_gradient_fraction: 0.9,
                sign_method: SignMethod::WindingNumber,
            },
            mesh_hash: "abc".into(),
            config: SdfConfig::desk(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.sdf");
        field.save(&p).unwrap();
        assert_eq!(NeuralSdf::load(&p).unwrap(), field);
    }
}
