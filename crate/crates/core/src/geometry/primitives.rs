//! Procedural meshes used as fixtures and smoke-test inputs.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::geometry::mesh::{Mesh, Normalization, Texture};
use crate::image::RgbImage;
use crate::{Vec2, Vec3};

fn raw_mesh(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Mesh {
    Mesh {
        vertices,
        faces,
        uvs: Vec::new(),
        face_uvs: Vec::new(),
        texture: None,
        normalization: Normalization::default(),
    }
}

/// Flips faces whose normal points toward the origin. Only meaningful for
/// star-shaped meshes around the origin.
fn orient_outward(mesh: &mut Mesh) {
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let centroid = (a + b + c) / 3.0;
        if mesh.face_cross(f).dot(&centroid) < 0.0 {
            mesh.faces[f].swap(1, 2);
            if !mesh.face_uvs.is_empty() {
                mesh.face_uvs[f].swap(1, 2);
            }
        }
    }
}

/// Axis-aligned cube with corners at ±1: 8 vertices, 12 triangles.
pub fn cube() -> Mesh {
    let mut v = Vec::new();
    for i in 0..8 {
        v.push(Vec3::new(
            if i & 1 == 0 { -1.0 } else { 1.0 },
            if i & 2 == 0 { -1.0 } else { 1.0 },
            if i & 4 == 0 { -1.0 } else { 1.0 },
        ));
    }
    let quads = [
        [0, 1, 3, 2],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 3, 7, 6],
        [0, 2, 6, 4],
        [1, 3, 7, 5],
    ];
    let mut faces = Vec::new();
    for q in quads {
        faces.push([q[0], q[1], q[2]]);
        faces.push([q[0], q[2], q[3]]);
    }
    let mut m = raw_mesh(v, faces);
    orient_outward(&mut m);
    m
}

/// Unit-radius icosphere. Subdivision 3 gives 642 vertices and 1280 faces.
pub fn icosphere(subdivisions: usize) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let mut m = raw_mesh(vertices, faces);
    orient_outward(&mut m);
    m
}

fn ring_vertex(j: usize, segments: usize, y: f64) -> Vec3 {
    let theta = 2.0 * PI * j as f64 / segments as f64;
    Vec3::new(theta.cos(), y, -theta.sin())
}

/// Radius-1 cylinder along +y spanning `y ∈ [-1, 1]`, without caps.
pub fn open_cylinder(segments: usize, rings: usize) -> Mesh {
    let mut vertices = Vec::new();
    for i in 0..=rings {
        let y = -1.0 + 2.0 * i as f64 / rings as f64;
        for j in 0..segments {
            vertices.push(ring_vertex(j, segments, y));
        }
    }
    let mut faces = Vec::new();
    for i in 0..rings {
        for j in 0..segments {
            let a = i * segments + j;
            let b = i * segments + (j + 1) % segments;
            let c = (i + 1) * segments + (j + 1) % segments;
            let d = (i + 1) * segments + j;
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    let mut m = raw_mesh(vertices, faces);
    orient_outward(&mut m);
    m
}

/// Procedural albedo: horizontal bands with a row of dark dots, so surface
/// renders carry texture features that geometry alone does not explain.
pub fn stripe_texture(size: usize) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        let u = (x as f64 + 0.5) / size as f64;
        let v = (y as f64 + 0.5) / size as f64;
        let band = ((v * 6.0).floor() as i64) % 2 == 0;
        let base = if band { [0.85, 0.75, 0.45] } else { [0.55, 0.25, 0.2] };
        let du = (u * 8.0).fract() - 0.5;
        let dv = (v * 6.0).fract() - 0.5;
        if du * du + dv * dv < 0.06 && !band {
            [0.08, 0.08, 0.1]
        } else {
            base
        }
    })
}

/// Capped radius-1 cylinder spanning `y ∈ [-1, 1]` with a cylindrical UV map
/// on the side, planar UVs on the caps and a procedural texture.
pub fn textured_cylinder(segments: usize, rings: usize) -> Mesh {
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    for i in 0..=rings {
        let y = -1.0 + 2.0 * i as f64 / rings as f64;
        for j in 0..segments {
            vertices.push(ring_vertex(j, segments, y));
        }
        for j in 0..=segments {
            uvs.push(Vec2::new(j as f64 / segments as f64, i as f64 / rings as f64));
        }
    }
    let side_uv = |i: usize, j: usize| i * (segments + 1) + j;
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    for i in 0..rings {
        for j in 0..segments {
            let a = i * segments + j;
            let b = i * segments + (j + 1) % segments;
            let c = (i + 1) * segments + (j + 1) % segments;
            let d = (i + 1) * segments + j;
            faces.push([a, b, c]);
            face_uvs.push([side_uv(i, j), side_uv(i, j + 1), side_uv(i + 1, j + 1)]);
            faces.push([a, c, d]);
            face_uvs.push([side_uv(i, j), side_uv(i + 1, j + 1), side_uv(i + 1, j)]);
        }
    }
    for (ring, y) in [(0usize, -1.0), (rings, 1.0)] {
        let center = vertices.len();
        vertices.push(Vec3::new(0.0, y, 0.0));
        let cap_uv0 = uvs.len();
        uvs.push(Vec2::new(0.5, 0.5));
        for j in 0..segments {
            let p = ring_vertex(j, segments, y);
            uvs.push(Vec2::new(0.5 + 0.25 * p.x, 0.5 + 0.25 * p.z));
        }
        for j in 0..segments {
            let a = ring * segments + j;
            let b = ring * segments + (j + 1) % segments;
            faces.push([center, a, b]);
            face_uvs.push([cap_uv0, cap_uv0 + 1 + j, cap_uv0 + 1 + (j + 1) % segments]);
        }
    }
    let mut m = Mesh {
        vertices,
        faces,
        uvs,
        face_uvs,
        texture: Some(Arc::new(Texture {
            image: stripe_texture(128),
            path: None,
        })),
        normalization: Normalization::default(),
    };
    orient_outward(&mut m);
    m
}
