//! Supervision imagery: shaded surface renders with a depth buffer, and
//! occlusion-free line drawings of silhouette, boundary and crease edges.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{Camera, Mesh, ProjectionKind};
use crate::image::{luminance, GrayImage};
use crate::raster::{rasterize_polylines, RasterParams};
use crate::{Error, Result, Vec2};

pub const DEFAULT_CREASE_ANGLE_DEG: f64 = 30.0;
const UNTEXTURED_ALBEDO: f64 = 0.8;
const AMBIENT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderKind {
    Surface,
    Contour,
}

impl RenderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RenderKind::Surface => "surface",
            RenderKind::Contour => "contour",
        }
    }
}

/// Camera-axis distance per pixel; `+∞` where no surface is hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![f64::INFINITY; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Depth at the pixel containing normalized coordinate `uv`, or `None`
    /// outside the image.
    pub fn at_uv(&self, uv: &Vec2) -> Option<f64> {
        let x = (uv.x * self.width as f64).floor();
        let y = (uv.y * self.height as f64).floor();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(self.get(x as usize, y as usize))
    }

    pub fn covered(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite()).count()
    }

    /// Little-endian `u32` width, `u32` height, then row-major `f32` depths.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &d in &self.data {
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 8 {
            return None;
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().ok()?) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * width * height {
            return None;
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Some(Self { width, height, data })
    }

    fn quantize_f32(&mut self) {
        for d in &mut self.data {
            *d = *d as f32 as f64;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetRender {
    pub kind: RenderKind,
    pub image: GrayImage,
    pub depth: DepthBuffer,
    pub camera: Camera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContourOptions {
    pub silhouettes: bool,
    pub boundaries: bool,
    pub creases: bool,
    pub crease_angle_deg: f64,
}

impl Default for ContourOptions {
    fn default() -> Self {
        Self {
            silhouettes: true,
            boundaries: true,
            creases: true,
            crease_angle_deg: DEFAULT_CREASE_ANGLE_DEG,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    /// Line width for contour renders, in pixels.
    pub stroke_width: f64,
    /// Supersampling factor for surface shading (1 = off).
    pub supersample: usize,
    pub contours: ContourOptions,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            stroke_width: crate::curves::DEFAULT_STROKE_WIDTH,
            supersample: 1,
            contours: ContourOptions::default(),
        }
    }
}

struct ScreenVertex {
    px: Vec2,
    depth: f64,
    valid: bool,
}

fn face_albedo_uv(mesh: &Mesh, f: usize) -> Option<[Vec2; 3]> {
    mesh.texture.as_ref()?;
    if !mesh.face_uvs.is_empty() {
        let idx = mesh.face_uvs[f];
        Some(idx.map(|i| mesh.uvs[i]))
    } else if mesh.uvs.len() == mesh.vertices.len() {
        Some(mesh.faces[f].map(|i| mesh.uvs[i]))
    } else {
        None
    }
}

/// Z-buffered triangle rasterization at `res × res`. Returns per-pixel
/// depth and grayscale shade (`None` for background).
fn rasterize_mesh(mesh: &Mesh, cam: &Camera, res: usize) -> (DepthBuffer, Vec<Option<f64>>) {
    let scale = res as f64;
    let verts: Vec<ScreenVertex> = mesh
        .vertices
        .iter()
        .map(|v| {
            let p = cam.project(v);
            ScreenVertex {
                px: p.uv * scale,
                depth: p.depth,
                valid: p.valid,
            }
        })
        .collect();
    let normals = mesh.face_normals();
    let perspective = cam.projection == ProjectionKind::Perspective;
    let forward = cam.frame().forward;
    let mut depth = DepthBuffer::empty(res, res);
    let mut shade: Vec<Option<f64>> = vec![None; res * res];
    for (f, face) in mesh.faces.iter().enumerate() {
        let [a, b, c] = face.map(|i| &verts[i]);
        if !(a.valid && b.valid && c.valid) {
            continue;
        }
        let area = (b.px - a.px).perp(&(c.px - a.px));
        if area.abs() < 1e-14 {
            continue;
        }
        let [p0, p1, p2] = mesh.triangle(f);
        let centroid = (p0 + p1 + p2) / 3.0;
        let view = if perspective { (cam.eye - centroid).normalize() } else { -forward };
        let lambert = AMBIENT + (1.0 - AMBIENT) * normals[f].dot(&view).abs();
        let uvs = face_albedo_uv(mesh, f);
        let x0 = (a.px.x.min(b.px.x).min(c.px.x) - 0.5).ceil().max(0.0) as i64;
        let x1 = (a.px.x.max(b.px.x).max(c.px.x) - 0.5).floor().min(scale - 1.0) as i64;
        let y0 = (a.px.y.min(b.px.y).min(c.px.y) - 0.5).ceil().max(0.0) as i64;
        let y1 = (a.px.y.max(b.px.y).max(c.px.y) - 0.5).floor().min(scale - 1.0) as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let q = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
                let l0 = (b.px - q).perp(&(c.px - q)) / area;
                let l1 = (c.px - q).perp(&(a.px - q)) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                // Perspective-correct weights.
                let w = if perspective {
                    let w = [l0 / a.depth, l1 / b.depth, l2 / c.depth];
                    let s = w[0] + w[1] + w[2];
                    [w[0] / s, w[1] / s, w[2] / s]
                } else {
                    [l0, l1, l2]
                };
                let d = w[0] * a.depth + w[1] * b.depth + w[2] * c.depth;
                let idx = y as usize * res + x as usize;
                if d >= depth.data[idx] || d < cam.near || d > cam.far {
                    continue;
                }
                depth.data[idx] = d;
                let albedo = match (&uvs, &mesh.texture) {
                    (Some(t), Some(tex)) => {
                        let uv = t[0] * w[0] + t[1] * w[1] + t[2] * w[2];
                        luminance(tex.image.sample_uv(uv.x, uv.y))
                    }
                    _ => UNTEXTURED_ALBEDO,
                };
                shade[idx] = Some((albedo * lambert).clamp(0.0, 1.0));
            }
        }
    }
    (depth, shade)
}

/// Shaded render (headlight diffuse, texture albedo when available) on a
/// white background, with depth. Values are quantized to 8 bits and depths
/// to f32 so cached copies are exact.
pub fn render_surface(mesh: &Mesh, cam: &Camera, opts: &RenderOptions) -> TargetRender {
    let res = cam.resolution;
    let ss = opts.supersample.max(1);
    let (mut depth, mut image) = if ss == 1 {
        let (depth, shade) = rasterize_mesh(mesh, cam, res);
        let data = shade.iter().map(|s| s.unwrap_or(1.0)).collect();
        (depth, GrayImage { width: res, height: res, data })
    } else {
        let big = res * ss;
        let (hi_depth, shade) = rasterize_mesh(mesh, cam, big);
        let mut depth = DepthBuffer::empty(res, res);
        let image = GrayImage::from_fn(res, res, |x, y| {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    acc += shade[(y * ss + sy) * big + x * ss + sx].unwrap_or(1.0);
                }
            }
            acc / (ss * ss) as f64
        });
        for y in 0..res {
            for x in 0..res {
                let mut d = f64::INFINITY;
                for sy in 0..ss {
                    for sx in 0..ss {
                        d = d.min(hi_depth.get(x * ss + sx, y * ss + sy));
                    }
                }
                depth.data[y * res + x] = d;
            }
        }
        (depth, image)
    };
    // Pixels without coverage stay exactly white.
    for (v, d) in image.data.iter_mut().zip(&depth.data) {
        if !d.is_finite() {
            *v = 1.0;
        }
    }
    image.quantize_u8();
    depth.quantize_f32();
    TargetRender {
        kind: RenderKind::Surface,
        image,
        depth,
        camera: cam.clone(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeClasses {
    pub silhouette: Vec<[usize; 2]>,
    pub boundary: Vec<[usize; 2]>,
    pub crease: Vec<[usize; 2]>,
}

/// Undirected edge → adjacent faces.
pub fn edge_faces(mesh: &Mesh) -> Vec<([usize; 2], Vec<usize>)> {
    let mut map: HashMap<[usize; 2], Vec<usize>> = HashMap::new();
    for (f, face) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (face[k], face[(k + 1) % 3]);
            map.entry([a.min(b), a.max(b)]).or_default().push(f);
        }
    }
    let mut edges: Vec<_> = map.into_iter().collect();
    edges.sort_by_key(|(e, _)| *e);
    edges
}

/// Classifies mesh edges for the given view. An edge may be both a crease
/// and a silhouette.
pub fn classify_edges(mesh: &Mesh, cam: &Camera, crease_angle_deg: f64) -> EdgeClasses {
    let normals = mesh.face_normals();
    let cos_crease = crease_angle_deg.to_radians().cos();
    let forward = cam.frame().forward;
    let mut out = EdgeClasses::default();
    for (e, faces) in edge_faces(mesh) {
        if faces.len() == 1 {
            out.boundary.push(e);
            continue;
        }
        let (n1, n2) = (normals[faces[0]], normals[faces[1]]);
        if faces.len() > 2 || n1.dot(&n2) < cos_crease {
            out.crease.push(e);
        }
        let mid = (mesh.vertices[e[0]] + mesh.vertices[e[1]]) * 0.5;
        let v = match cam.projection {
            ProjectionKind::Perspective => cam.eye - mid,
            ProjectionKind::Orthographic => -forward,
        };
        let (s1, s2) = (n1.dot(&v), n2.dot(&v));
        if (s1 > 0.0) != (s2 > 0.0) {
            out.silhouette.push(e);
        }
    }
    out
}

/// Black-on-white line drawing of the selected edge classes, without hidden
/// line removal. The depth buffer is the surface z-buffer for this camera.
pub fn render_contours(mesh: &Mesh, cam: &Camera, opts: &RenderOptions) -> TargetRender {
    let res = cam.resolution;
    let classes = classify_edges(mesh, cam, opts.contours.crease_angle_deg);
    let mut chosen: Vec<[usize; 2]> = Vec::new();
    if opts.contours.silhouettes {
        chosen.extend(&classes.silhouette);
    }
    if opts.contours.boundaries {
        chosen.extend(&classes.boundary);
    }
    if opts.contours.creases {
        chosen.extend(&classes.crease);
    }
    chosen.sort();
    chosen.dedup();
    let lines: Vec<Vec<Vec2>> = chosen
        .iter()
        .filter_map(|e| {
            let a = cam.project(&mesh.vertices[e[0]]);
            let b = cam.project(&mesh.vertices[e[1]]);
            (a.valid && b.valid).then(|| vec![a.uv, b.uv])
        })
        .collect();
    let mut image = rasterize_polylines(&lines, &RasterParams::new(res, opts.stroke_width));
    image.quantize_u8();
    let (mut depth, _) = rasterize_mesh(mesh, cam, res);
    depth.quantize_f32();
    TargetRender {
        kind: RenderKind::Contour,
        image,
        depth,
        camera: cam.clone(),
    }
}

pub fn render(mesh: &Mesh, cam: &Camera, kind: RenderKind, opts: &RenderOptions) -> TargetRender {
    match kind {
        RenderKind::Surface => render_surface(mesh, cam, opts),
        RenderKind::Contour => render_contours(mesh, cam, opts),
    }
}

/// On-disk render store laid out as
/// `<mesh-hash>/<kind>/<camera-hash>.png` plus `.depth`.
#[derive(Debug)]
pub struct RenderCache {
    root: PathBuf,
    renders: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreSize {
    pub entries: usize,
    pub bytes: u64,
}

impl RenderCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            renders: AtomicUsize::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of renders actually computed (cache misses).
    pub fn renders_performed(&self) -> usize {
        self.renders.load(Ordering::SeqCst)
    }

    fn entry_path(&self, mesh_hash: &str, cam: &Camera, kind: RenderKind, opts: &RenderOptions) -> PathBuf {
        let mut h = Sha256::new();
        h.update(cam.key().as_bytes());
        h.update(serde_json::to_vec(opts).expect("options serialize"));
        let key = hex::encode(&h.finalize()[..12]);
        self.root.join(mesh_hash).join(kind.as_str()).join(format!("{key}.png"))
    }

    fn load_entry(png: &Path, cam: &Camera, kind: RenderKind) -> Option<TargetRender> {
        let image = GrayImage::load_png(png).ok()?;
        let depth = DepthBuffer::from_bytes(&std::fs::read(png.with_extension("depth")).ok()?)?;
        let res = cam.resolution;
        if image.width != res || image.height != res || depth.width != res || depth.height != res {
            return None;
        }
        Some(TargetRender {
            kind,
            image,
            depth,
            camera: cam.clone(),
        })
    }

    pub fn get_or_render(&self, mesh: &Mesh, mesh_hash: &str, cam: &Camera, kind: RenderKind, opts: &RenderOptions) -> Result<TargetRender> {
        let png = self.entry_path(mesh_hash, cam, kind, opts);
        if png.exists() {
            if let Some(r) = Self::load_entry(&png, cam, kind) {
                return Ok(r);
            }
            log::warn!("regenerating corrupt cache entry {}", png.display());
        }
        let render = render(mesh, cam, kind, opts);
        self.renders.fetch_add(1, Ordering::SeqCst);
        let dir = png.parent().expect("entry has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // Write to temporaries and rename so readers never see partial files.
        let tmp_png = png.with_extension("tmp.png");
        let tmp_depth = png.with_extension("depth.tmp");
        render.image.save_png(&tmp_png)?;
        std::fs::write(&tmp_depth, render.depth.to_bytes()).map_err(|e| Error::io(&tmp_depth, e))?;
        std::fs::rename(&tmp_depth, png.with_extension("depth")).map_err(|e| Error::io(&png, e))?;
        std::fs::rename(&tmp_png, &png).map_err(|e| Error::io(&png, e))?;
        Ok(render)
    }

    /// Renders (or loads) every view for every requested kind.
    pub fn cache_renders(&self, mesh: &Mesh, views: &[Camera], kinds: &[RenderKind], opts: &RenderOptions) -> Result<Vec<TargetRender>> {
        let hash = mesh.content_hash();
        let mut out = Vec::with_capacity(views.len() * kinds.len());
        for cam in views {
            for &kind in kinds {
                out.push(self.get_or_render(mesh, &hash, cam, kind, opts)?);
            }
        }
        Ok(out)
    }

    pub fn store_size(&self) -> Result<StoreSize> {
        fn walk(dir: &Path, size: &mut StoreSize) -> std::io::Result<()> {
            for entry in std::fs::read_dir(dir)? {
                let entry = entry?;
                let meta = entry.metadata()?;
                if meta.is_dir() {
                    walk(&entry.path(), size)?;
                } else {
                    size.bytes += meta.len();
                    if entry.path().extension().is_some_and(|e| e == "png") {
                        size.entries += 1;
                    }
                }
            }
            Ok(())
        }
        let mut size = StoreSize { entries: 0, bytes: 0 };
        walk(&self.root, &mut size).map_err(|e| Error::io(&self.root, e))?;
        Ok(size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera::{default_fov_deg, orbit_camera};
    use crate::geometry::{normalize_mesh, primitives};
    use crate::Vec3;

    fn front_camera(res: usize) -> Camera {
        Camera::new(Vec3::new(0.0, 0.0, 8.0), Vec3::zeros(), Vec3::y(), default_fov_deg().to_radians(), res).unwrap()
    }

    #[test]
    fn empty_view_is_white() {
        let m = primitives::icosphere(2).map_vertices(|v| v + Vec3::new(50.0, 0.0, 0.0));
        let r = render_surface(&m, &front_camera(64), &RenderOptions::default());
        assert!(r.image.data.iter().all(|&v| v == 1.0));
        assert!(r.depth.data.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn sphere_depth_at_centre() {
        // Unit-radius sphere, camera 8 units away.
        let m = primitives::icosphere(4);
        let r = render_surface(&m, &front_camera(128), &RenderOptions::default());
        let min = r.depth.data.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((min - 7.0).abs() / 7.0 < 0.01, "{min}");
        let centre = r.depth.get(64, 64);
        assert!((centre - 7.0).abs() / 7.0 < 0.01);
    }

    #[test]
    fn background_white_and_covered_pixels_finite() {
        let m = normalize_mesh(&primitives::textured_cylinder(32, 4)).unwrap();
        let cam = orbit_camera(20.0, 45.0, 8.0, default_fov_deg(), 96).unwrap();
        let r = render_surface(&m, &cam, &RenderOptions::default());
        for (v, d) in r.image.data.iter().zip(&r.depth.data) {
            if d.is_infinite() {
                assert_eq!(*v, 1.0);
            }
        }
        assert!(r.depth.covered() > 500);
        // Texture introduces dark pixels beyond what shading alone gives.
        assert!(r.image.min() < UNTEXTURED_ALBEDO * AMBIENT);
    }

    #[test]
    fn untextured_shade_depends_on_normals_only() {
        let m = primitives::cube();
        let cam = Camera::new(Vec3::new(0.0, 0.0, 16.0), Vec3::zeros(), Vec3::y(), default_fov_deg().to_radians(), 64).unwrap();
        let r = render_surface(&m, &cam, &RenderOptions::default());
        // Face-on cube: single visible face, uniform shade.
        let covered: Vec<f64> = r.image.data.iter().zip(&r.depth.data).filter(|(_, d)| d.is_finite()).map(|(v, _)| *v).collect();
        let first = covered[0];
        assert!(covered.iter().all(|&v| v == first));
    }

    #[test]
    fn depth_consistent_with_projection_for_visible_vertices() {
        let m = normalize_mesh(&primitives::icosphere(3)).unwrap();
        let cam = orbit_camera(15.0, 30.0, 8.0, default_fov_deg(), 224).unwrap();
        let r = render_surface(&m, &cam, &RenderOptions::default());
        let mut checked = 0;
        let normals = m.vertex_normals();
        for (v, n) in m.vertices.iter().zip(&normals) {
            if n.dot(&(cam.eye - v).normalize()) < 0.5 {
                continue;
            }
            let p = cam.project(v);
            let Some(d) = r.depth.at_uv(&p.uv) else { continue };
            if d.is_finite() && p.depth <= d + 1e-3 {
                // Half a pixel of surface slope bounds the gap.
                assert!((p.depth - d).abs() < 5e-3, "{} vs {d}", p.depth);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn cube_contours_include_all_creases() {
        let m = normalize_mesh(&primitives::cube()).unwrap();
        let cam = front_camera(64);
        let classes = classify_edges(&m, &cam, DEFAULT_CREASE_ANGLE_DEG);
        assert_eq!(classes.crease.len(), 12);
        assert!(classes.boundary.is_empty());
        // Back edges are drawn: each edge midpoint is dark.
        let r = render_contours(&m, &cam, &RenderOptions::default());
        for e in &classes.crease {
            let mid = (m.vertices[e[0]] + m.vertices[e[1]]) * 0.5;
            let uv = cam.project(&mid).uv;
            let px = cam.to_pixels(&uv);
            let v = r.image.sample_bilinear(px.x - 0.5, px.y - 0.5, 1.0);
            assert!(v < 0.6, "edge {e:?} intensity {v}");
        }
    }

    #[test]
    fn sphere_contours_are_silhouette_only() {
        let m = primitives::icosphere(3);
        let classes = classify_edges(&m, &front_camera(64), DEFAULT_CREASE_ANGLE_DEG);
        assert!(classes.crease.is_empty() && classes.boundary.is_empty());
        assert!(!classes.silhouette.is_empty());
        for e in &classes.silhouette {
            let mid = (m.vertices[e[0]] + m.vertices[e[1]]) * 0.5;
            // Near the rim as seen from +z.
            assert!(mid.z.abs() < 0.3);
        }
    }

    #[test]
    fn open_cylinder_side_on() {
        let (segments, rings) = (32, 4);
        let m = primitives::open_cylinder(segments, rings);
        let classes = classify_edges(&m, &front_camera(64), DEFAULT_CREASE_ANGLE_DEG);
        assert_eq!(classes.boundary.len(), 2 * segments);
        assert!(classes.crease.is_empty());
        // Two vertical silhouette lines, one chain of `rings` edges each.
        assert_eq!(classes.silhouette.len(), 2 * rings);
        let left = classes.silhouette.iter().filter(|e| m.vertices[e[0]].x < 0.0).count();
        assert_eq!(left, rings);
        for e in &classes.silhouette {
            let (a, b) = (m.vertices[e[0]], m.vertices[e[1]]);
            assert!((a.x - b.x).abs() < 1e-12 && (a.z - b.z).abs() < 1e-12);
            assert!(a.x.abs() > 0.9);
        }
    }

    #[test]
    fn sphere_silhouette_moments_invariant_under_azimuth() {
        let m = normalize_mesh(&primitives::icosphere(3)).unwrap();
        let moments = |az: f64| {
            let cam = orbit_camera(0.0, az, 8.0, default_fov_deg(), 96).unwrap();
            let r = render_contours(&m, &cam, &RenderOptions::default());
            let mut mass = 0.0;
            let mut cx = 0.0;
            let mut cy = 0.0;
            for y in 0..96 {
                for x in 0..96 {
                    let w = 1.0 - r.image.get(x, y);
                    mass += w;
                    cx += w * x as f64;
                    cy += w * y as f64;
                }
            }
            (mass, cx / mass, cy / mass)
        };
        let (m0, x0, y0) = moments(0.0);
        for az in [37.0, 120.0, 250.0] {
            let (m1, x1, y1) = moments(az);
            assert!((m1 - m0).abs() / m0 < 0.05);
            assert!((x1 - x0).abs() < 0.5 && (y1 - y0).abs() < 0.5);
        }
    }

    #[test]
    fn cache_hits_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = RenderCache::new(dir.path()).unwrap();
        let m = normalize_mesh(&primitives::icosphere(2)).unwrap();
        let views: Vec<Camera> = (0..3).map(|i| orbit_camera(10.0, 40.0 * i as f64, 8.0, default_fov_deg(), 64).unwrap()).collect();
        let kinds = [RenderKind::Surface, RenderKind::Contour];
        let opts = RenderOptions::default();
        let first = cache.cache_renders(&m, &views, &kinds, &opts).unwrap();
        assert_eq!(cache.renders_performed(), 6);
        let second = cache.cache_renders(&m, &views, &kinds, &opts).unwrap();
        assert_eq!(cache.renders_performed(), 6);
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.image.to_u8(), b.image.to_u8());
            assert_eq!(a.image, b.image);
            assert_eq!(a.depth.to_bytes(), b.depth.to_bytes());
        }
        assert_eq!(cache.store_size().unwrap().entries, 6);
        // A different mesh misses.
        let moved = m.map_vertices(|v| v * 0.9);
        cache.cache_renders(&moved, &views[..1], &kinds[..1], &opts).unwrap();
        assert_eq!(cache.renders_performed(), 7);
    }

    #[test]
    fn corrupt_entry_is_regenerated() {
        let dir = tempfile::tempdir().unwrap();
        let cache = RenderCache::new(dir.path()).unwrap();
        let m = normalize_mesh(&primitives::icosphere(2)).unwrap();
        let cam = orbit_camera(10.0, 0.0, 8.0, default_fov_deg(), 32).unwrap();
        let opts = RenderOptions::default();
        let hash = m.content_hash();
        cache.get_or_render(&m, &hash, &cam, RenderKind::Surface, &opts).unwrap();
        let png = cache.entry_path(&hash, &cam, RenderKind::Surface, &opts);
        std::fs::write(&png, b"garbage").unwrap();
        let r = cache.get_or_render(&m, &hash, &cam, RenderKind::Surface, &opts).unwrap();
        assert_eq!(cache.renders_performed(), 2);
        assert_eq!(r.image.width, 32);
    }
}
