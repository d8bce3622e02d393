use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::RgbImage;
use crate::{Error, Result, Vec2, Vec3};

/// Tolerance used when welding duplicate vertices.
pub const WELD_TOLERANCE: f64 = 1e-8;

/// Affine map from source model units into the normalized frame:
/// `normalized = (source - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }
}

impl Normalization {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.center)) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale + Vec3::from(self.center)
    }

    /// Composition `next ∘ self`.
    pub fn then(&self, next: &Normalization) -> Normalization {
        let c = Vec3::from(self.center) + Vec3::from(next.center) / self.scale;
        Normalization {
            center: c.into(),
            scale: self.scale * next.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub image: RgbImage,
    pub path: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let d = (self.min - p).sup(&(p - self.max)).sup(&Vec3::zeros());
        d.norm_squared()
    }
}

/// Triangle mesh. Texture coordinates are stored per face corner so UV seams
/// survive position welding.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub uvs: Vec<Vec2>,
    pub face_uvs: Vec<[usize; 3]>,
    pub texture: Option<Arc<Texture>>,
    /// Transform from the original file's units into this mesh's frame.
    pub normalization: Normalization,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            uvs: Vec::new(),
            face_uvs: Vec::new(),
            texture: None,
            normalization: Normalization::default(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some((i, f)) = self
            .faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.iter().any(|&v| v >= n))
        {
            return Err(Error::InvalidMesh(format!(
                "face {i} references vertex {:?} but mesh has {n} vertices",
                f
            )));
        }
        if !self.face_uvs.is_empty() {
            if self.face_uvs.len() != self.faces.len() {
                return Err(Error::InvalidMesh("face uv count differs from face count".into()));
            }
            if self.face_uvs.iter().flatten().any(|&i| i >= self.uvs.len()) {
                return Err(Error::InvalidMesh("uv index out of range".into()));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        Ok(())
    }

    pub fn has_uvs(&self) -> bool {
        !self.face_uvs.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal; its length is twice the triangle area.
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_cross(f).norm()
    }

    pub fn face_normals(&self) -> Vec<Vec3> {
        (0..self.faces.len())
            .map(|f| {
                let c = self.face_cross(f);
                let n = c.norm();
                if n > 0.0 {
                    c / n
                } else {
                    Vec3::zeros()
                }
            })
            .collect()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            let c = self.face_cross(f);
            for &v in face {
                acc[v] += c;
            }
        }
        acc.into_iter()
            .map(|n| n.try_normalize(0.0).unwrap_or_else(Vec3::zeros))
            .collect()
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Merges vertices closer than `tol` and drops faces that become
    /// degenerate (repeated index or zero area).
    pub fn welded(&self, tol: f64) -> Mesh {
        let cell = |p: &Vec3| {
            (
                (p.x / tol).floor() as i64,
                (p.y / tol).floor() as i64,
                (p.z / tol).floor() as i64,
            )
        };
        let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        let mut remap = vec![0usize; self.vertices.len()];
        let mut vertices = Vec::new();
        for (i, p) in self.vertices.iter().enumerate() {
            let (cx, cy, cz) = cell(p);
            let mut found = None;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(cands) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &j in cands {
                                let q: &Vec3 = &vertices[j];
                                if (q - p).norm() <= tol {
                                    found = Some(j);
                                    break 'search;
                                }
                            }
                        }
                    }
                }
            }
            remap[i] = match found {
                Some(j) => j,
                None => {
                    vertices.push(*p);
                    grid.entry((cx, cy, cz)).or_default().push(vertices.len() - 1);
                    vertices.len() - 1
                }
            };
        }
        let mut faces = Vec::with_capacity(self.faces.len());
        let mut face_uvs = Vec::new();
        for (fi, f) in self.faces.iter().enumerate() {
            let g = f.map(|v| remap[v]);
            if g[0] == g[1] || g[1] == g[2] || g[0] == g[2] {
                continue;
            }
            let area = (vertices[g[1]] - vertices[g[0]])
                .cross(&(vertices[g[2]] - vertices[g[0]]))
                .norm();
            if area <= 0.0 {
                continue;
            }
            faces.push(g);
            if self.has_uvs() {
                face_uvs.push(self.face_uvs[fi]);
            }
        }
        Mesh {
            vertices,
            faces,
            uvs: self.uvs.clone(),
            face_uvs,
            texture: self.texture.clone(),
            normalization: self.normalization,
        }
    }

    /// Returns a copy with every vertex mapped through `f`.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Mesh {
        let mut m = self.clone();
        for v in &mut m.vertices {
            *v = f(v);
        }
        m
    }

    /// Stable content hash over geometry, texture coordinates and texture.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for v in &self.vertices {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        for uv in &self.uvs {
            h.update(uv.x.to_le_bytes());
            h.update(uv.y.to_le_bytes());
        }
        for f in &self.face_uvs {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        if let Some(t) = &self.texture {
            h.update((t.image.width as u64).to_le_bytes());
            for c in &t.image.data {
                for v in c {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

/// Centers the bounding box at the origin and scales it to unit diagonal.
pub fn normalize_mesh(m: &Mesh) -> Result<Mesh> {
    if m.vertices.is_empty() || m.faces.is_empty() {
        return Err(Error::InvalidMesh("cannot normalize an empty mesh".into()));
    }
    let bb = m.bbox();
    let diag = bb.diagonal();
    if diag <= 0.0 || !diag.is_finite() {
        return Err(Error::InvalidMesh("mesh bounding box has zero extent".into()));
    }
    let step = Normalization {
        center: bb.center().into(),
        scale: 1.0 / diag,
    };
    let mut out = m.map_vertices(|p| step.apply(p));
    out.normalization = m.normalization.then(&step);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(lo: f64, hi: f64) -> Mesh {
        crate::geometry::primitives::cube()
            .map_vertices(|p| p.map(|c| if c < 0.0 { lo } else { hi }))
    }

    #[test]
    fn normalize_cube_has_unit_diagonal() {
        let m = normalize_mesh(&cube(0.0, 2.0)).unwrap();
        let bb = m.bbox();
        assert!((bb.diagonal() - 1.0).abs() < 1e-12);
        let half = 1.0 / (2.0 * 3f64.sqrt());
        assert!((bb.max - Vec3::repeat(half)).norm() < 1e-12);
        assert!((bb.min + Vec3::repeat(half)).norm() < 1e-12);
        assert!((m.normalization.scale - 1.0 / (2.0 * 3f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let once = normalize_mesh(&cube(-3.0, 7.5)).unwrap();
        let twice = normalize_mesh(&once).unwrap();
        for (a, b) in once.vertices.iter().zip(&twice.vertices) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn normalize_single_triangle() {
        let m = Mesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, 4.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let n = normalize_mesh(&m).unwrap();
        assert!((n.bbox().diagonal() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_empty_fails() {
        let m = Mesh::new(vec![], vec![]).unwrap();
        assert!(matches!(normalize_mesh(&m), Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn normalization_maps_back_to_source() {
        let src = cube(1.0, 4.0);
        let n = normalize_mesh(&src).unwrap();
        for (a, b) in src.vertices.iter().zip(&n.vertices) {
            assert!((n.normalization.invert(b) - a).norm() < 1e-12);
        }
    }

    #[test]
    fn welding_merges_duplicates_and_drops_degenerates() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0 + 1e-10, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        let m = Mesh::new(v, vec![[0, 1, 2], [3, 4, 2], [1, 3, 4]]).unwrap();
        let w = m.welded(WELD_TOLERANCE);
        assert_eq!(w.vertices.len(), 4);
        assert_eq!(w.faces.len(), 2);
    }

    #[test]
    fn out_of_range_face_is_rejected() {
        assert!(Mesh::new(vec![Vec3::zeros()], vec![[0, 0, 1]]).is_err());
    }
}
