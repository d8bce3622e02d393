//! Curve-handle deformation. Every vertex is bound to its `k` nearest curve
//! samples with softmax weights on negative distance; edits to control
//! points move the samples, and vertices follow by blended displacement.

use serde::{Deserialize, Serialize};

use crate::curves::CurveSet;
use crate::geometry::Mesh;
use crate::{Error, Result, Vec3};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_SAMPLES_PER_CURVE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Handle {
    pub curve: u32,
    pub t: f64,
    pub rest: Vec3,
}

/// Sparse per-vertex weights: row `v` is `indices[v*k..(v+1)*k]` and
/// `weights[v*k..(v+1)*k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningWeights {
    pub handles: Vec<Handle>,
    pub vertex_count: usize,
    pub k: usize,
    pub temperature: f64,
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

/// Uniform parameters `i / (n − 1)`.
pub fn handle_params(samples_per_curve: usize) -> Vec<f64> {
    let n = samples_per_curve.max(2);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

pub fn build_handles(cs: &CurveSet, samples_per_curve: usize) -> Vec<Handle> {
    let ts = handle_params(samples_per_curve);
    cs.curves
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| {
            ts.iter().map(move |&t| Handle {
                curve: ci as u32,
                t,
                rest: c.eval(t),
            })
        })
        .collect()
}

pub fn build_skinning(mesh: &Mesh, cs: &CurveSet, samples_per_curve: usize, temperature: f64, k: usize) -> Result<SkinningWeights> {
    if cs.is_empty() {
        return Err(Error::InvalidArgument("skinning needs at least one curve".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let handles = build_handles(cs, samples_per_curve);
    if k == 0 || k > handles.len() {
        return Err(Error::InvalidArgument(format!("k = {k} with {} handles", handles.len())));
    }
    let mut indices = Vec::with_capacity(mesh.vertices.len() * k);
    let mut weights = Vec::with_capacity(mesh.vertices.len() * k);
    let mut dists: Vec<(f64, u32)> = Vec::with_capacity(handles.len());
    for v in &mesh.vertices {
        dists.clear();
        dists.extend(handles.iter().enumerate().map(|(h, hd)| ((v - hd.rest).norm(), h as u32)));
        // Nearest k, ties by handle index.
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let row = &mut dists[..k];
        row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // Shift by the nearest distance so the largest exponent is zero.
        let d0 = row[0].0;
        let e: Vec<f64> = row.iter().map(|(d, _)| (-(d - d0) / temperature).exp()).collect();
        let sum: f64 = e.iter().sum();
        for ((_, h), w) in row.iter().zip(&e) {
            indices.push(*h);
            weights.push(w / sum);
        }
    }
    Ok(SkinningWeights {
        handles,
        vertex_count: mesh.vertices.len(),
        k,
        temperature,
        indices,
        weights,
    })
}

/// Per-handle displacement `edited(t_h) − rest(t_h)`.
pub fn displace_handles(cs_rest: &CurveSet, cs_edited: &CurveSet, handles: &[Handle]) -> Result<Vec<Vec3>> {
    if cs_rest.len() != cs_edited.len() {
        return Err(Error::ShapeMismatch(format!(
            "edited set has {} curves, rest set {}",
            cs_edited.len(),
            cs_rest.len()
        )));
    }
    handles
        .iter()
        .map(|h| {
            let c = h.curve as usize;
            if c >= cs_rest.len() {
                return Err(Error::ShapeMismatch(format!("handle refers to missing curve {c}")));
            }
            Ok(cs_edited.curves[c].eval(h.t) - cs_rest.curves[c].eval(h.t))
        })
        .collect()
}

impl SkinningWeights {
    /// Blended displacement of every vertex.
    pub fn vertex_displacements(&self, handle_displacements: &[Vec3]) -> Result<Vec<Vec3>> {
        if handle_displacements.len() != self.handles.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} displacements for {} handles",
                handle_displacements.len(),
                self.handles.len()
            )));
        }
        Ok((0..self.vertex_count)
            .map(|v| {
                let mut d = Vec3::zeros();
                for j in v * self.k..(v + 1) * self.k {
                    d += handle_displacements[self.indices[j] as usize] * self.weights[j];
                }
                d
            })
            .collect())
    }

    pub fn row_sum(&self, v: usize) -> f64 {
        self.weights[v * self.k..(v + 1) * self.k].iter().sum()
    }

    /// Little-endian layout:
    /// `u32 handle_count, u32 vertex_count, u32 k, f32 temperature`, then per
    /// handle `u32 curve, f32 t, f32 x, f32 y, f32 z`, then
    /// `vertex_count·k` `u32` handle indices, then as many `f32` weights.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::blob_len(self.handles.len(), self.vertex_count, self.k));
        out.extend_from_slice(&(self.handles.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.vertex_count as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.temperature as f32).to_le_bytes());
        for h in &self.handles {
            out.extend_from_slice(&h.curve.to_le_bytes());
            out.extend_from_slice(&(h.t as f32).to_le_bytes());
            for c in h.rest.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for w in &self.weights {
            out.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        out
    }

    pub fn blob_len(handles: usize, vertices: usize, k: usize) -> usize {
        16 + 20 * handles + 8 * vertices * k
    }

    /// Inverse of [`to_blob`](Self::to_blob), at `f32` precision.
    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::UnsupportedFormat("truncated or malformed skinning blob".into());
        let u32_at = |o: usize| -> Result<u32> { Ok(u32::from_le_bytes(bytes.get(o..o + 4).ok_or_else(bad)?.try_into().unwrap())) };
        let f32_at = |o: usize| -> Result<f64> { Ok(f32::from_le_bytes(bytes.get(o..o + 4).ok_or_else(bad)?.try_into().unwrap()) as f64) };
        let (nh, nv, k) = (u32_at(0)? as usize, u32_at(4)? as usize, u32_at(8)? as usize);
        if bytes.len() != Self::blob_len(nh, nv, k) {
            return Err(bad());
        }
        let temperature = f32_at(12)?;
        let mut o = 16;
        let mut handles = Vec::with_capacity(nh);
        for _ in 0..nh {
            handles.push(Handle {
                curve: u32_at(o)?,
                t: f32_at(o + 4)?,
                rest: Vec3::new(f32_at(o + 8)?, f32_at(o + 12)?, f32_at(o + 16)?),
            });
            o += 20;
        }
        let indices = (0..nv * k).map(|i| u32_at(o + 4 * i)).collect::<Result<Vec<_>>>()?;
        o += 4 * nv * k;
        let weights = (0..nv * k).map(|i| f32_at(o + 4 * i)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            handles,
            vertex_count: nv,
            k,
            temperature,
            indices,
            weights,
        })
    }
}

/// `v' = v + Σ_h w_vh · d_h`. The input mesh is untouched.
pub fn apply_deformation(m: &Mesh, sw: &SkinningWeights, handle_displacements: &[Vec3]) -> Result<Mesh> {
    if m.vertices.len() != sw.vertex_count {
        return Err(Error::ShapeMismatch(format!(
            "mesh has {} vertices, weights cover {}",
            m.vertices.len(),
            sw.vertex_count
        )));
    }
    let d = sw.vertex_displacements(handle_displacements)?;
    let mut out = m.clone();
    for (v, dv) in out.vertices.iter_mut().zip(&d) {
        *v += dv;
    }
    Ok(out)
}
