//! Perceptual encoders (global embedding plus two spatial activation grids),
//! the semantic loss, a patch-similarity metric and paired view
//! augmentations. Every piece has a hand-written backward pass to the input
//! pixels.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::{for_bilinear_taps, GrayImage};
use crate::linalg::gemm;
use crate::{Error, Result, Vec2};

pub const DEFAULT_INPUT_RESOLUTION: usize = 224;
const STUB_CHANNELS: [usize; 5] = [8, 16, 24, 32, 48];
const STUB_EMBEDDING: usize = 64;
/// Stage outputs exposed as the encoder's "layer 3" and "layer 4": the
/// 1/16 and 1/32 resolution grids.
pub const LAYER_STAGES: [usize; 2] = [3, 4];
/// Stage outputs compared by the patch-similarity metric.
const PATCH_STAGES: [usize; 4] = [0, 1, 2, 3];

/// Channel-major activation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Bilinear lookup of every channel at normalized image coordinate `uv`,
    /// treating grid cells as covering equal image regions.
    pub fn sample(&self, uv: &Vec2) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        let hw = self.height * self.width;
        let (px, py) = (uv.x * self.width as f64, uv.y * self.height as f64);
        // Clamp to the outermost cell centres.
        let px = px.clamp(0.5, self.width as f64 - 0.5);
        let py = py.clamp(0.5, self.height as f64 - 0.5);
        for_bilinear_taps(self.width, self.height, px, py, |idx, w| {
            if let Some(i) = idx {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * self.data[c * hw + i];
                }
            }
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub embedding: Vec<f64>,
    /// Layer-3 and layer-4 activations.
    pub layers: [FeatureMap; 2],
}

/// Gradients with respect to an [`Encoding`].
#[derive(Debug, Clone)]
pub struct EncodingGrad {
    pub embedding: Vec<f64>,
    pub layers: [Vec<f64>; 2],
}

impl EncodingGrad {
    pub fn zeros_like(e: &Encoding) -> Self {
        Self {
            embedding: vec![0.0; e.embedding.len()],
            layers: [vec![0.0; e.layers[0].data.len()], vec![0.0; e.layers[1].data.len()]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStage {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × (inputs · 9)` row-major 3×3 kernels.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Stack of conv3×3 → SiLU → 2×2 average-pool stages with a linear head on
/// the globally averaged last stage. Also the on-disk weights format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub name: String,
    pub input_resolution: usize,
    pub input_mean: f64,
    pub input_std: f64,
    pub stages: Vec<ConvStage>,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub embedding_dim: usize,
}

struct StageTape {
    h: usize,
    w: usize,
    pre: Vec<f64>,
}

/// Forward activations retained for the backward pass.
pub struct ForwardPass {
    pub encoding: Encoding,
    /// Every stage output (pooled), channel-major.
    pub stage_outputs: Vec<FeatureMap>,
    tapes: Vec<StageTape>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

fn im2col(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let src = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        let dst = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                        _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

fn avgpool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ci * h * w;
                let s = input[base + 2 * y * w + 2 * x]
                    + input[base + 2 * y * w + 2 * x + 1]
                    + input[base + (2 * y + 1) * w + 2 * x]
                    + input[base + (2 * y + 1) * w + 2 * x + 1];
                out[ci * oh * ow + y * ow + x] = 0.25 * s;
            }
        }
    }
    out
}

fn avgpool2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad[ci * oh * ow + y * ow + x];
                let base = ci * h * w;
                out[base + 2 * y * w + 2 * x] = g;
                out[base + 2 * y * w + 2 * x + 1] = g;
                out[base + (2 * y + 1) * w + 2 * x] = g;
                out[base + (2 * y + 1) * w + 2 * x + 1] = g;
            }
        }
    }
    out
}

/// First 8 bytes of the SHA-256 of `name`, as a seed.
pub fn name_seed(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl ConvNet {
    /// Deterministic random weights derived from the name.
    pub fn stub(name: &str, input_resolution: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(name));
        let mut stages = Vec::new();
        let mut cin = 1;
        for &cout in &STUB_CHANNELS {
            let fan_in = (cin * 9) as f64;
            let n = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            let b = Normal::new(0.0, 0.1).unwrap();
            stages.push(ConvStage {
                inputs: cin,
                outputs: cout,
                weight: (0..cout * cin * 9).map(|_| n.sample(&mut rng)).collect(),
                bias: (0..cout).map(|_| b.sample(&mut rng)).collect(),
            });
            cin = cout;
        }
        let n = Normal::new(0.0, (1.0 / cin as f64).sqrt()).unwrap();
        Self {
            name: name.to_string(),
            input_resolution,
            input_mean: 0.5,
            input_std: 0.25,
            stages,
            head_weight: (0..STUB_EMBEDDING * cin).map(|_| n.sample(&mut rng)).collect(),
            head_bias: vec![0.0; STUB_EMBEDDING],
            embedding_dim: STUB_EMBEDDING,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::WeightsUnavailable {
            name: self.name.clone(),
            reason: m,
        };
        if self.stages.len() <= LAYER_STAGES[1] {
            return Err(bad(format!("need at least {} stages", LAYER_STAGES[1] + 1)));
        }
        let mut cin = 1;
        for (i, s) in self.stages.iter().enumerate() {
            if s.inputs != cin || s.weight.len() != s.outputs * s.inputs * 9 || s.bias.len() != s.outputs {
                return Err(bad(format!("stage {i} has inconsistent shapes")));
            }
            cin = s.outputs;
        }
        if self.head_weight.len() != self.embedding_dim * cin || self.head_bias.len() != self.embedding_dim {
            return Err(bad("head has inconsistent shapes".into()));
        }
        if self.input_resolution >> self.stages.len() == 0 || !(self.input_std > 0.0) {
            return Err(bad("input resolution too small for the stage count".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path, name: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::WeightsUnavailable {
            name: name.to_string(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        let net: ConvNet = serde_json::from_str(&text).map_err(|e| Error::WeightsUnavailable {
            name: name.to_string(),
            reason: format!("malformed weights file {}: {e}", path.display()),
        })?;
        net.validate()?;
        Ok(net)
    }

    /// Grid size of stage `s`'s output.
    pub fn stage_resolution(&self, s: usize) -> usize {
        self.input_resolution >> (s + 1)
    }

    pub fn forward(&self, img: &GrayImage) -> Result<ForwardPass> {
        if img.width != self.input_resolution || img.height != self.input_resolution {
            return Err(Error::ShapeMismatch(format!(
                "encoder `{}` expects {}², got {}×{}",
                self.name, self.input_resolution, img.width, img.height
            )));
        }
        let mut x: Vec<f64> = img.data.iter().map(|v| (v - self.input_mean) / self.input_std).collect();
        let (mut h, mut w) = (img.height, img.width);
        let mut tapes = Vec::with_capacity(self.stages.len());
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let col = im2col(&x, s.inputs, h, w);
            let hw = h * w;
            let mut pre = vec![0.0; s.outputs * hw];
            for (c, row) in pre.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = s.bias[c]);
            }
            gemm(s.outputs, s.inputs * 9, hw, 1.0, &s.weight, false, &col, false, 1.0, &mut pre);
            let act: Vec<f64> = pre.iter().map(|&z| silu(z)).collect();
            let pooled = avgpool2(&act, s.outputs, h, w);
            tapes.push(StageTape { h, w, pre });
            h /= 2;
            w /= 2;
            stage_outputs.push(FeatureMap {
                channels: s.outputs,
                height: h,
                width: w,
                data: pooled.clone(),
            });
            x = pooled;
        }
        let last = stage_outputs.last().unwrap();
        let hw = (last.height * last.width) as f64;
        let pooled_mean: Vec<f64> = last.data.chunks(last.height * last.width).map(|c| c.iter().sum::<f64>() / hw).collect();
        let mut embedding = self.head_bias.clone();
        gemm(self.embedding_dim, last.channels, 1, 1.0, &self.head_weight, false, &pooled_mean, false, 1.0, &mut embedding);
        let encoding = Encoding {
            embedding,
            layers: [stage_outputs[LAYER_STAGES[0]].clone(), stage_outputs[LAYER_STAGES[1]].clone()],
        };
        Ok(ForwardPass {
            encoding,
            stage_outputs,
            tapes,
        })
    }

    /// Gradient with respect to the input pixels given gradients on the
    /// embedding and on any stage outputs (`stage_grads[s]`, may be empty).
    pub fn backward_stages(&self, pass: &ForwardPass, embedding_grad: &[f64], stage_grads: &[Vec<f64>]) -> GrayImage {
        let n = self.stages.len();
        let last = &pass.stage_outputs[n - 1];
        let hw_last = last.height * last.width;
        let mut grad = vec![0.0; last.data.len()];
        if embedding_grad.iter().any(|&g| g != 0.0) {
            let mut g_mean = vec![0.0; last.channels];
            gemm(last.channels, self.embedding_dim, 1, 1.0, &self.head_weight, true, embedding_grad, false, 0.0, &mut g_mean);
            for (c, chunk) in grad.chunks_mut(hw_last).enumerate() {
                let g = g_mean[c] / hw_last as f64;
                chunk.iter_mut().for_each(|v| *v += g);
            }
        }
        for si in (0..n).rev() {
            if let Some(extra) = stage_grads.get(si) {
                if !extra.is_empty() {
                    grad.iter_mut().zip(extra).for_each(|(g, e)| *g += e);
                }
            }
            let s = &self.stages[si];
            let tape = &pass.tapes[si];
            let hw = tape.h * tape.w;
            let mut g_pre = avgpool2_backward(&grad, s.outputs, tape.h, tape.w);
            for (g, &z) in g_pre.iter_mut().zip(&tape.pre) {
                *g *= silu_grad(z);
            }
            let mut g_col = vec![0.0; s.inputs * 9 * hw];
            gemm(s.inputs * 9, s.outputs, hw, 1.0, &s.weight, true, &g_pre, false, 0.0, &mut g_col);
            grad = col2im(&g_col, s.inputs, tape.h, tape.w);
        }
        let inv = 1.0 / self.input_std;
        GrayImage {
            width: self.input_resolution,
            height: self.input_resolution,
            data: grad.into_iter().map(|g| g * inv).collect(),
        }
    }
}

/// Encoder adapter contract: a global embedding plus layer-3/4 activation
/// grids, with input gradients.
pub trait PerceptualEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn input_resolution(&self) -> usize;
    fn forward(&self, img: &GrayImage) -> Result<ForwardPass>;
    fn backward(&self, pass: &ForwardPass, grad: &EncodingGrad) -> GrayImage;

    fn encode(&self, img: &GrayImage) -> Result<Encoding> {
        Ok(self.forward(img)?.encoding)
    }
}

impl PerceptualEncoder for ConvNet {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_resolution(&self) -> usize {
        self.input_resolution
    }

    fn forward(&self, img: &GrayImage) -> Result<ForwardPass> {
        ConvNet::forward(self, img)
    }

    fn backward(&self, pass: &ForwardPass, grad: &EncodingGrad) -> GrayImage {
        let mut stage_grads = vec![Vec::new(); self.stages.len()];
        stage_grads[LAYER_STAGES[0]] = grad.layers[0].clone();
        stage_grads[LAYER_STAGES[1]] = grad.layers[1].clone();
        self.backward_stages(pass, &grad.embedding, &stage_grads)
    }
}

/// Patch-similarity metric over channel-normalized activations of several
/// stages: `Σ_l mean_{h,w} Σ_c (f̂_a − f̂_b)² / C_l`.
#[derive(Debug, Clone)]
pub struct PatchSimilarity {
    pub net: ConvNet,
}

const NORM_EPS: f64 = 1e-10;

fn channel_normalize(f: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let hw = f.height * f.width;
    let mut norms = vec![0.0; hw];
    for c in 0..f.channels {
        for i in 0..hw {
            norms[i] += f.data[c * hw + i].powi(2);
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    let mut out = f.data.clone();
    for c in 0..f.channels {
        for i in 0..hw {
            out[c * hw + i] /= norms[i] + NORM_EPS;
        }
    }
    (out, norms)
}

impl PatchSimilarity {
    pub fn new(net: ConvNet) -> Self {
        Self { net }
    }

    pub fn name(&self) -> &str {
        &self.net.name
    }

    fn terms(&self, pa: &ForwardPass, pb: &ForwardPass) -> Vec<(usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
        PATCH_STAGES
            .iter()
            .map(|&s| {
                let (na, norms) = channel_normalize(&pa.stage_outputs[s]);
                let (nb, _) = channel_normalize(&pb.stage_outputs[s]);
                (s, na, nb, norms)
            })
            .collect()
    }

    pub fn score(&self, a: &GrayImage, b: &GrayImage) -> Result<f64> {
        Ok(self.value_and_grad(a, b, false)?.0)
    }

    /// Value and gradient with respect to `a`.
    pub fn value_and_grad(&self, a: &GrayImage, b: &GrayImage, want_grad: bool) -> Result<(f64, Option<GrayImage>)> {
        if !a.same_shape(b) {
            return Err(Error::ShapeMismatch("patch similarity inputs differ in size".into()));
        }
        let pa = self.net.forward(a)?;
        let pb = self.net.forward(b)?;
        let mut value = 0.0;
        let mut stage_grads = vec![Vec::new(); self.net.stages.len()];
        for (s, na, nb, norms) in self.terms(&pa, &pb) {
            let f = &pa.stage_outputs[s];
            let hw = f.height * f.width;
            let scale = 1.0 / (hw * f.channels) as f64;
            let mut diffs = vec![0.0; na.len()];
            for i in 0..na.len() {
                let d = na[i] - nb[i];
                value += d * d * scale;
                diffs[i] = 2.0 * d * scale;
            }
            if want_grad {
                // f̂ = f / (|f| + eps); df̂ = df / n − f (f · df) / (n² |f|).
                let mut g = vec![0.0; na.len()];
                for i in 0..hw {
                    let n = norms[i] + NORM_EPS;
                    let mut dot = 0.0;
                    for c in 0..f.channels {
                        dot += f.data[c * hw + i] * diffs[c * hw + i];
                    }
                    let k = if norms[i] > 0.0 { dot / (n * n * norms[i]) } else { 0.0 };
                    for c in 0..f.channels {
                        g[c * hw + i] = diffs[c * hw + i] / n - f.data[c * hw + i] * k;
                    }
                }
                stage_grads[s] = g;
            }
        }
        let grad = want_grad.then(|| self.net.backward_stages(&pa, &vec![0.0; self.net.embedding_dim], &stage_grads));
        Ok((value, grad))
    }
}

/// Resolves encoder and patch-similarity identities. Names starting with
/// `stub-` get deterministic random weights; any other name must have a
/// weights file `<weights_dir>/<name>.json` in the [`ConvNet`] format.
#[derive(Debug)]
pub struct EncoderRegistry {
    weights_dir: Option<PathBuf>,
    resolution: usize,
    encoders: Mutex<HashMap<String, Arc<ConvNet>>>,
}

pub fn weights_file_name(name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.json")
}

impl EncoderRegistry {
    pub fn new(weights_dir: Option<PathBuf>, resolution: usize) -> Self {
        Self {
            weights_dir,
            resolution,
            encoders: Mutex::new(HashMap::new()),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn net(&self, name: &str) -> Result<Arc<ConvNet>> {
        if let Some(n) = self.encoders.lock().unwrap().get(name) {
            return Ok(n.clone());
        }
        let net = if name.starts_with("stub-") {
            ConvNet::stub(name, self.resolution)
        } else {
            let Some(dir) = &self.weights_dir else {
                return Err(Error::WeightsUnavailable {
                    name: name.to_string(),
                    reason: "no weights directory configured".into(),
                });
            };
            let path = dir.join(weights_file_name(name));
            if !path.exists() {
                return Err(Error::WeightsUnavailable {
                    name: name.to_string(),
                    reason: format!("{} not found", path.display()),
                });
            }
            let net = ConvNet::load(&path, name)?;
            if net.input_resolution != self.resolution {
                return Err(Error::WeightsUnavailable {
                    name: name.to_string(),
                    reason: format!("weights expect {}² input, run uses {}²", net.input_resolution, self.resolution),
                });
            }
            net
        };
        let net = Arc::new(net);
        self.encoders.lock().unwrap().insert(name.to_string(), net.clone());
        Ok(net)
    }

    pub fn encoder(&self, name: &str) -> Result<Arc<dyn PerceptualEncoder>> {
        Ok(self.net(name)?)
    }

    pub fn patch_similarity(&self, name: &str) -> Result<PatchSimilarity> {
        Ok(PatchSimilarity::new((*self.net(name)?).clone()))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b && a.iter().any(|&x| x != 0.0) {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// d cos(a, b) / d a.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let c = cosine(a, b);
    a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect()
}

/// Per-layer weights for the layer term; `None` means uniform unit weight.
pub type LayerWeights<'a> = Option<&'a [Vec<f64>; 2]>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticTerms {
    pub global: f64,
    pub layers: f64,
}

impl SemanticTerms {
    pub fn total(&self) -> f64 {
        self.global + self.layers
    }
}

/// Encoder loss between a curve encoding and a target encoding:
/// `global_weight · (1 − cos) + Σ_l mean((w_l ⊙ (a_l − b_l))²)`, with
/// gradient with respect to the curve encoding. `w_l` holds one weight per
/// spatial cell of layer `l`, broadcast over channels.
pub fn encoding_loss(
    curve: &Encoding,
    target: &Encoding,
    global_weight: f64,
    layer_weights: LayerWeights,
    use_layers: bool,
) -> Result<(SemanticTerms, EncodingGrad)> {
    if curve.embedding.len() != target.embedding.len() || !curve.layers[0].same_shape(&target.layers[0]) || !curve.layers[1].same_shape(&target.layers[1]) {
        return Err(Error::ShapeMismatch("encodings differ in shape".into()));
    }
    let mut grad = EncodingGrad::zeros_like(curve);
    let cos = cosine(&curve.embedding, &target.embedding);
    let global = global_weight * (1.0 - cos);
    if global_weight != 0.0 {
        grad.embedding = cosine_grad(&curve.embedding, &target.embedding).into_iter().map(|g| -global_weight * g).collect();
    }
    let mut layers = 0.0;
    if use_layers {
        for l in 0..2 {
            let (a, b) = (&curve.layers[l], &target.layers[l]);
            let hw = a.height * a.width;
            let n = a.data.len() as f64;
            let weights = layer_weights.map(|w| &w[l]);
            if let Some(w) = weights {
                if w.len() != hw {
                    return Err(Error::ShapeMismatch(format!("layer weight grid {} != {}", w.len(), hw)));
                }
            }
            for i in 0..a.data.len() {
                let wt = weights.map_or(1.0, |w| w[i % hw]);
                let d = a.data[i] - b.data[i];
                let wd = wt * d;
                layers += wd * wd / n;
                grad.layers[l][i] = 2.0 * wd * wt / n;
            }
        }
    }
    Ok((SemanticTerms { global, layers }, grad))
}

/// `lambda_fc · (1 − cos(global)) + Σ_{l=3,4} mean((act_l(curve) − act_l(target))²)`.
pub fn semantic_loss(e: &dyn PerceptualEncoder, img_curve: &GrayImage, img_target: &GrayImage, lambda_fc: f64) -> Result<f64> {
    if !img_curve.same_shape(img_target) {
        return Err(Error::ShapeMismatch("semantic loss inputs differ in size".into()));
    }
    let a = e.encode(img_curve)?;
    let b = e.encode(img_target)?;
    Ok(encoding_loss(&a, &b, lambda_fc, None, true)?.0.total())
}

/// Semantic loss and its gradient with respect to the curve image.
pub fn semantic_loss_grad(e: &dyn PerceptualEncoder, img_curve: &GrayImage, img_target: &GrayImage, lambda_fc: f64, use_layers: bool) -> Result<(f64, GrayImage)> {
    if !img_curve.same_shape(img_target) {
        return Err(Error::ShapeMismatch("semantic loss inputs differ in size".into()));
    }
    let pass = e.forward(img_curve)?;
    let target = e.encode(img_target)?;
    let (terms, grad) = encoding_loss(&pass.encoding, &target, lambda_fc, None, use_layers)?;
    Ok((terms.total(), e.backward(&pass, &grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub count: usize,
    /// Maximum corner displacement as a fraction of the half-size.
    pub distortion: f64,
    pub crop_scale: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            count: 4,
            distortion: 0.2,
            crop_scale: [0.8, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn identity(count: usize) -> Self {
        Self {
            count,
            distortion: 0.0,
            crop_scale: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("augmentation count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.distortion) {
            return Err(Error::InvalidArgument("distortion must be in [0, 1)".into()));
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument("crop scale must satisfy 0 < lo <= hi <= 1".into()));
        }
        Ok(())
    }
}

/// Sampled image warp: random crop followed by a perspective distortion,
/// resampled to the original resolution with bilinear taps. The same warp
/// is applied to every image of a view pair.
#[derive(Debug, Clone)]
pub struct Warp {
    width: usize,
    height: usize,
    identity: bool,
    /// Per output pixel: up to four (source index, weight) taps; `None`
    /// index means outside the source.
    taps: Vec<[(Option<u32>, f64); 4]>,
}

fn homography_from_points(src: &[Vec2; 4], dst: &[Vec2; 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = (src[i].x, src[i].y);
        let (u, v) = (dst[i].x, dst[i].y);
        a.set_row(2 * i, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(2 * i + 1, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[2 * i] = u;
        b[2 * i + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

impl Warp {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            identity: true,
            taps: Vec::new(),
        }
    }

    pub fn sample(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        if cfg.distortion == 0.0 && cfg.crop_scale == [1.0, 1.0] {
            return Self::identity(width, height);
        }
        let scale = if cfg.crop_scale[0] < cfg.crop_scale[1] {
            rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1])
        } else {
            cfg.crop_scale[0]
        };
        let ox = rng.random_range(0.0..=1.0 - scale);
        let oy = rng.random_range(0.0..=1.0 - scale);
        // Output corners map to randomly inset crop corners.
        let d = cfg.distortion * 0.5;
        let corners = [Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0), Vec2::new(0.0, 1.0)];
        let mut jitter = |sx: f64, sy: f64| {
            let jx = if d > 0.0 { rng.random_range(0.0..=d) } else { 0.0 };
            let jy = if d > 0.0 { rng.random_range(0.0..=d) } else { 0.0 };
            Vec2::new(sx * jx, sy * jy)
        };
        let inset = [jitter(1.0, 1.0), jitter(-1.0, 1.0), jitter(-1.0, -1.0), jitter(1.0, -1.0)];
        let src: [Vec2; 4] = std::array::from_fn(|i| {
            let c = corners[i] + inset[i];
            Vec2::new(ox + scale * c.x, oy + scale * c.y)
        });
        let h = homography_from_points(&corners, &src).unwrap_or_else(Matrix3::identity);
        let mut taps = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 + 0.5) / width as f64;
                let v = (y as f64 + 0.5) / height as f64;
                let p = h * nalgebra::Vector3::new(u, v, 1.0);
                let (su, sv) = (p.x / p.z, p.y / p.z);
                let mut entry = [(None, 0.0); 4];
                let mut k = 0;
                for_bilinear_taps(width, height, su * width as f64, sv * height as f64, |idx, w| {
                    entry[k] = (idx.map(|i| i as u32), w);
                    k += 1;
                });
                taps.push(entry);
            }
        }
        Self {
            width,
            height,
            identity: false,
            taps,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Resamples `img`; samples from outside the source take `fill`.
    pub fn apply(&self, img: &GrayImage, fill: f64) -> GrayImage {
        assert!(img.width == self.width && img.height == self.height);
        if self.identity {
            return img.clone();
        }
        let data = self
            .taps
            .iter()
            .map(|t| {
                t.iter()
                    .map(|&(idx, w)| w * idx.map_or(fill, |i| img.data[i as usize]))
                    .sum()
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Transpose of `apply` (fill-independent part).
    pub fn backward(&self, grad_out: &GrayImage) -> GrayImage {
        if self.identity {
            return grad_out.clone();
        }
        let mut out = GrayImage::filled(self.width, self.height, 0.0);
        for (t, g) in self.taps.iter().zip(&grad_out.data) {
            for &(idx, w) in t {
                if let Some(i) = idx {
                    out.data[i as usize] += w * g;
                }
            }
        }
        out
    }
}

/// `k` independently sampled warps of `img`.
pub fn augment(img: &GrayImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<(Warp, GrayImage)> {
    (0..cfg.count.max(1))
        .map(|_| {
            let w = Warp::sample(cfg, img.width, img.height, rng);
            let out = w.apply(img, 1.0);
            (w, out)
        })
        .collect()
}

/// Area-average pooling of a weight map to an `n × n` grid.
pub fn area_pool(img: &GrayImage, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let sx = img.width as f64 / n as f64;
    let sy = img.height as f64 / n as f64;
    for gy in 0..n {
        for gx in 0..n {
            let (x0, x1) = (gx as f64 * sx, (gx + 1) as f64 * sx);
            let (y0, y1) = (gy as f64 * sy, (gy + 1) as f64 * sy);
            let mut acc = 0.0;
            for y in y0.floor() as usize..(y1.ceil() as usize).min(img.height) {
                let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                for x in x0.floor() as usize..(x1.ceil() as usize).min(img.width) {
                    let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    acc += wx * wy * img.get(x, y);
                }
            }
            out[gy * n + gx] = acc / (sx * sy);
        }
    }
    out
}
