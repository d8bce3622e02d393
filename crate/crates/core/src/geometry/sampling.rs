//! Area-weighted surface sampling and farthest point sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::mesh::Mesh;
use crate::{Error, Result, Vec3};

/// Number of dense surface candidates drawn before farthest point selection.
pub const FPS_CANDIDATES: usize = 50_000;

/// A point drawn on the surface together with its face and barycentrics.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub face: usize,
    pub barycentric: [f64; 3],
}

/// Draws uniform surface samples through the cumulative face-area table.
pub struct SurfaceSampler<'a> {
    mesh: &'a Mesh,
    cumulative: Vec<f64>,
}

impl<'a> SurfaceSampler<'a> {
    pub fn new(mesh: &'a Mesh) -> Result<Self> {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = (0..mesh.faces.len())
            .map(|f| {
                acc += mesh.face_area(f);
                acc
            })
            .collect();
        if acc <= 0.0 {
            return Err(Error::InvalidMesh("mesh has zero surface area".into()));
        }
        Ok(Self { mesh, cumulative })
    }

    pub fn total_area(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SurfaceSample {
        let target = rng.random::<f64>() * self.total_area();
        let face = self
            .cumulative
            .partition_point(|&c| c <= target)
            .min(self.cumulative.len() - 1);
        let mut r0: f64 = rng.random();
        let mut r1: f64 = rng.random();
        if r0 + r1 > 1.0 {
            r0 = 1.0 - r0;
            r1 = 1.0 - r1;
        }
        let [a, b, c] = self.mesh.triangle(face);
        let w = [1.0 - r0 - r1, r0, r1];
        SurfaceSample {
            position: a * w[0] + b * w[1] + c * w[2],
            face,
            barycentric: w,
        }
    }
}

pub fn sample_surface(mesh: &Mesh, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    let sampler = SurfaceSampler::new(mesh)?;
    Ok((0..n).map(|_| sampler.sample(rng).position).collect())
}

/// Greedy max-min selection over `candidates`, starting at index `start`.
/// Returns candidate indices in selection order.
pub fn farthest_point_indices(candidates: &[Vec3], n: usize, start: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("farthest point sampling needs n >= 1".into()));
    }
    if start >= candidates.len() {
        return Err(Error::InvalidArgument("start index outside candidate set".into()));
    }
    let mut chosen = vec![start];
    let mut nearest: Vec<f64> = candidates
        .iter()
        .map(|p| (p - candidates[start]).norm_squared())
        .collect();
    while chosen.len() < n.min(candidates.len()) {
        // Ties resolve to the lowest index.
        let (next, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        chosen.push(next);
        let q = candidates[next];
        for (d, p) in nearest.iter_mut().zip(candidates) {
            *d = d.min((p - q).norm_squared());
        }
    }
    Ok(chosen)
}

/// Farthest point sampling of `n` points from a dense uniform sampling of the
/// surface. Deterministic for a fixed seed.
pub fn farthest_point_sample(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::InvalidArgument("farthest point sampling needs n >= 1".into()));
    }
    if mesh.vertices.is_empty() {
        return Err(Error::InvalidMesh("mesh has no vertices".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = sample_surface(mesh, FPS_CANDIDATES, &mut rng)?;
    let start = rng.random_range(0..candidates.len());
    let idx = farthest_point_indices(&candidates, n, start)?;
    Ok(idx.into_iter().map(|i| candidates[i]).collect())
}
