//! OBJ and PLY readers plus an OBJ writer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::geometry::mesh::{Mesh, Normalization, Texture, WELD_TOLERANCE};
use crate::image::RgbImage;
use crate::{Error, Result, Vec2, Vec3};

/// Loads an OBJ or PLY mesh. Polygons are fan-triangulated and duplicate
/// vertices welded; a texture referenced through the OBJ material library is
/// resolved relative to the mesh file.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let mesh = match ext.as_str() {
        "obj" => load_obj(path)?,
        "ply" => load_ply(path)?,
        other => return Err(Error::UnsupportedFormat(other.to_string())),
    };
    mesh.validate()?;
    Ok(mesh.welded(WELD_TOLERANCE))
}

fn parse_f64(path: &Path, line_no: usize, tok: Option<&str>) -> Result<f64> {
    tok.and_then(|t| t.parse::<f64>().ok())
        .ok_or_else(|| Error::parse(path, format!("line {line_no}: expected a number")))
}

fn resolve_index(path: &Path, line_no: usize, raw: &str, count: usize) -> Result<usize> {
    let i: i64 = raw
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line_no}: bad index `{raw}`")))?;
    let idx = if i < 0 { count as i64 + i } else { i - 1 };
    if idx < 0 || idx as usize >= count {
        return Err(Error::parse(path, format!("line {line_no}: index {i} out of range")));
    }
    Ok(idx as usize)
}

fn load_obj(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    let mut all_faces_have_uv = true;
    let mut mtllibs = Vec::new();

    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(path, line_no, toks.next())?;
                let y = parse_f64(path, line_no, toks.next())?;
                let z = parse_f64(path, line_no, toks.next())?;
                vertices.push(Vec3::new(x, y, z));
            }
            Some("vt") => {
                let u = parse_f64(path, line_no, toks.next())?;
                let v = toks.next().and_then(|t| t.parse().ok()).unwrap_or(0.0);
                uvs.push(Vec2::new(u, v));
            }
            Some("f") => {
                let mut corners = Vec::new();
                for tok in toks {
                    let mut parts = tok.split('/');
                    let v = resolve_index(path, line_no, parts.next().unwrap_or(""), vertices.len())?;
                    let vt = match parts.next() {
                        Some(s) if !s.is_empty() => Some(resolve_index(path, line_no, s, uvs.len())?),
                        _ => None,
                    };
                    corners.push((v, vt));
                }
                if corners.len() < 3 {
                    return Err(Error::parse(path, format!("line {line_no}: face with fewer than 3 vertices")));
                }
                for k in 1..corners.len() - 1 {
                    let tri = [corners[0], corners[k], corners[k + 1]];
                    faces.push(tri.map(|c| c.0));
                    match (tri[0].1, tri[1].1, tri[2].1) {
                        (Some(a), Some(b), Some(c)) => face_uvs.push([a, b, c]),
                        _ => all_faces_have_uv = false,
                    }
                }
            }
            Some("mtllib") => mtllibs.extend(toks.map(str::to_string)),
            _ => {}
        }
    }

    let texture = resolve_obj_texture(path, &mtllibs)?;
    let has_uvs = all_faces_have_uv && !faces.is_empty();
    Ok(Mesh {
        vertices,
        faces,
        uvs: if has_uvs { uvs } else { Vec::new() },
        face_uvs: if has_uvs { face_uvs } else { Vec::new() },
        texture,
        normalization: Normalization::default(),
    })
}

fn resolve_obj_texture(obj_path: &Path, mtllibs: &[String]) -> Result<Option<Arc<Texture>>> {
    let base = obj_path.parent().unwrap_or(Path::new("."));
    for lib in mtllibs {
        let mtl_path = base.join(lib);
        let Ok(text) = fs::read_to_string(&mtl_path) else {
            log::warn!("material library {} not readable", mtl_path.display());
            continue;
        };
        for line in text.lines() {
            let mut toks = line.split_whitespace();
            if toks.next() == Some("map_Kd") {
                if let Some(name) = toks.last() {
                    let tex_path: PathBuf = mtl_path.parent().unwrap_or(base).join(name);
                    let image = RgbImage::load(&tex_path)?;
                    return Ok(Some(Arc::new(Texture {
                        image,
                        path: Some(tex_path),
                    })));
                }
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone)]
enum PlyProp {
    Scalar { name: String, ty: String },
    List { count_ty: String, item_ty: String },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProp>,
}

fn ply_type_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

fn read_ply_binary(ty: &str, bytes: &[u8]) -> f64 {
    match ty {
        "char" | "int8" => bytes[0] as i8 as f64,
        "uchar" | "uint8" => bytes[0] as f64,
        "short" | "int16" => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
        "ushort" | "uint16" => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
        "int" | "int32" => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        "uint" | "uint32" => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        "float" | "float32" => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        _ => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
    }
}

fn load_ply(path: &Path) -> Result<Mesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or_else(|| Error::parse(path, "missing end_header"))?;
    let mut body_start = header_end + 10;
    while body_start < bytes.len() && bytes[body_start] != b'\n' {
        body_start += 1;
    }
    body_start += 1;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::parse(path, "header is not utf-8"))?;

    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in header.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", ..] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", ..] => format = Some(PlyFormat::BinaryLe),
            ["format", other, ..] => return Err(Error::UnsupportedFormat(format!("ply {other}"))),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::parse(path, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", cty, ity, _name] => {
                if let Some(e) = elements.last_mut() {
                    e.props.push(PlyProp::List {
                        count_ty: cty.to_string(),
                        item_ty: ity.to_string(),
                    });
                }
            }
            ["property", ty, name] => {
                if let Some(e) = elements.last_mut() {
                    e.props.push(PlyProp::Scalar {
                        name: name.to_string(),
                        ty: ty.to_string(),
                    });
                }
            }
            _ => {}
        }
    }
    let format = format.ok_or_else(|| Error::parse(path, "missing format line"))?;

    let mut vertices = Vec::new();
    let mut vertex_uv = Vec::new();
    let mut polys: Vec<Vec<usize>> = Vec::new();

    // Values are decoded element by element into f64 rows.
    let body = &bytes[body_start.min(bytes.len())..];
    let ascii_tokens: Vec<&str> = if format == PlyFormat::Ascii {
        std::str::from_utf8(body)
            .map_err(|_| Error::parse(path, "ascii body is not utf-8"))?
            .split_whitespace()
            .collect()
    } else {
        Vec::new()
    };
    let mut tok_pos = 0usize;
    let mut byte_pos = 0usize;
    let mut next_value = |ty: &str| -> Result<f64> {
        match format {
            PlyFormat::Ascii => {
                let t = ascii_tokens
                    .get(tok_pos)
                    .ok_or_else(|| Error::parse(path, "unexpected end of data"))?;
                tok_pos += 1;
                t.parse::<f64>().map_err(|_| Error::parse(path, format!("bad value `{t}`")))
            }
            PlyFormat::BinaryLe => {
                let size = ply_type_size(ty).ok_or_else(|| Error::parse(path, format!("unknown type {ty}")))?;
                let slice = body
                    .get(byte_pos..byte_pos + size)
                    .ok_or_else(|| Error::parse(path, "unexpected end of data"))?;
                byte_pos += size;
                Ok(read_ply_binary(ty, slice))
            }
        }
    };

    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0; 3];
            let mut uv = [f64::NAN; 2];
            for prop in &el.props {
                match prop {
                    PlyProp::Scalar { name, ty } => {
                        let v = next_value(ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            "s" | "u" | "texture_u" => uv[0] = v,
                            "t" | "v" | "texture_v" => uv[1] = v,
                            _ => {}
                        }
                    }
                    PlyProp::List { count_ty, item_ty } => {
                        let n = next_value(count_ty)? as usize;
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            items.push(next_value(item_ty)? as usize);
                        }
                        if el.name == "face" {
                            polys.push(items);
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Vec3::from(xyz));
                vertex_uv.push(uv);
            }
        }
    }

    let mut faces = Vec::new();
    for poly in polys {
        if poly.len() < 3 {
            return Err(Error::parse(path, "face with fewer than 3 vertices"));
        }
        for k in 1..poly.len() - 1 {
            faces.push([poly[0], poly[k], poly[k + 1]]);
        }
    }
    let has_uv = !vertex_uv.is_empty() && vertex_uv.iter().all(|uv| uv[0].is_finite() && uv[1].is_finite());
    let (uvs, face_uvs) = if has_uv {
        (
            vertex_uv.iter().map(|uv| Vec2::new(uv[0], uv[1])).collect(),
            faces.clone(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Mesh {
        vertices,
        faces,
        uvs,
        face_uvs,
        texture: None,
        normalization: Normalization::default(),
    })
}

/// Writes the mesh as OBJ. When the mesh is textured, a material library and
/// the texture PNG are written next to it.
pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mesh")
        .to_string();
    if let Some(tex) = &mesh.texture {
        let dir = path.parent().unwrap_or(Path::new("."));
        let tex_name = format!("{stem}_albedo.png");
        tex.image.save_png(dir.join(&tex_name))?;
        let mtl = format!("newmtl surface\nKd 1 1 1\nmap_Kd {tex_name}\n");
        let mtl_name = format!("{stem}.mtl");
        fs::write(dir.join(&mtl_name), mtl).map_err(|e| Error::io(dir.join(&mtl_name), e))?;
        writeln!(out, "mtllib {mtl_name}").ok();
        writeln!(out, "usemtl surface").ok();
    }
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z).ok();
    }
    for uv in &mesh.uvs {
        writeln!(out, "vt {} {}", uv.x, uv.y).ok();
    }
    for (i, f) in mesh.faces.iter().enumerate() {
        if mesh.has_uvs() {
            let t = mesh.face_uvs[i];
            writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                f[0] + 1,
                t[0] + 1,
                f[1] + 1,
                t[1] + 1,
                f[2] + 1,
                t[2] + 1
            )
            .ok();
        } else {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).ok();
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBE_OBJ: &str = "\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
";

    #[test]
    fn loads_triangle_cube() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cube.obj");
        fs::write(&p, CUBE_OBJ).unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.faces.len(), 12);
    }

    #[test]
    fn quads_are_fan_triangulated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("quads.obj");
        let obj = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n\
                   f 1 4 3 2\nf 5 6 7 8\nf 1 2 6 5\nf 2 3 7 6\nf 3 4 8 7\nf 4 1 5 8\n";
        fs::write(&p, obj).unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.faces.len(), 2 * 6);
    }

    #[test]
    fn missing_file_reports_not_found() {
        let err = load_mesh("/nonexistent/nothing.obj").unwrap_err();
        assert!(err.to_string().contains("file not found"));
    }

    #[test]
    fn negative_indices_and_slashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tri.obj");
        fs::write(&p, "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvn 0 0 1\nf -3/1/1 -2/2/1 -1/3/1\n").unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
        assert!(m.has_uvs());
    }

    #[test]
    fn ascii_and_binary_ply() {
        let dir = tempfile::tempdir().unwrap();
        let ascii = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n\
                     element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                     0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let p = dir.path().join("a.ply");
        fs::write(&p, ascii).unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!((m.vertices.len(), m.faces.len()), (4, 2));

        let mut bin = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n".to_vec();
        for v in [[0.0f64, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.5]] {
            for c in v {
                bin.extend_from_slice(&c.to_le_bytes());
            }
        }
        bin.push(3);
        for i in [0u32, 1, 2] {
            bin.extend_from_slice(&i.to_le_bytes());
        }
        let p = dir.path().join("b.ply");
        fs::write(&p, bin).unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
        assert_eq!(m.vertices[2], Vec3::new(0.0, 2.0, 0.5));
    }

    #[test]
    fn textured_obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = crate::geometry::primitives::textured_cylinder(16, 4);
        let p = dir.path().join("cyl.obj");
        save_obj(&mesh, &p).unwrap();
        let back = load_mesh(&p).unwrap();
        assert_eq!(back.faces.len(), mesh.faces.len());
        assert!(back.has_uvs());
        let tex = back.texture.as_ref().expect("texture resolved through mtllib");
        assert_eq!(tex.image.width, mesh.texture.as_ref().unwrap().image.width);
    }
}
