use std::fs;
use std::io::Write;
use std::path::Path;

use super::TriangleMesh;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    /// Format from the file extension, case-insensitive.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "obj" => Ok(Self::Obj),
            Some(e) if e == "ply" => Ok(Self::Ply),
            _ => Err(Error::input(format!("{}: mesh path must end in .obj or .ply", path.display()))),
        }
    }
}

/// ASCII OBJ with 9 significant digits per coordinate.
pub fn write_obj(mesh: &TriangleMesh, out: &mut impl Write) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {:.8e} {:.8e} {:.8e}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

fn obj_index(tok: &str, n: usize, line: usize) -> Result<u32> {
    // accept `a/b/c` and keep the position index
    let head = tok.split('/').next().unwrap_or("");
    let i: i64 = head
        .parse()
        .map_err(|_| Error::Load(format!("obj line {line}: bad face index `{tok}`")))?;
    let idx = if i < 0 { n as i64 + i } else { i - 1 };
    if idx < 0 || idx >= n as i64 {
        return Err(Error::Load(format!("obj line {line}: face index {i} out of range")));
    }
    Ok(idx as u32)
}

pub fn read_obj(text: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for c in &mut v {
                    let tok = toks
                        .next()
                        .ok_or_else(|| Error::Load(format!("obj line {line}: vertex needs 3 coordinates")))?;
                    *c = tok
                        .parse()
                        .map_err(|_| Error::Load(format!("obj line {line}: bad coordinate `{tok}`")))?;
                }
                mesh.vertices.push(v);
            }
            Some("f") => {
                let n = mesh.vertices.len();
                let idx: Vec<u32> = toks.map(|t| obj_index(t, n, line)).collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::Load(format!("obj line {line}: face needs 3 indices")));
                }
                // fan-triangulate polygons
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    mesh.validate().map_err(|e| Error::Load(e.to_string()))?;
    Ok(mesh)
}

/// Binary little-endian PLY with double vertices and int index lists.
pub fn write_ply(mesh: &TriangleMesh, out: &mut impl Write) -> std::io::Result<()> {
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    let mut buf = Vec::with_capacity(mesh.vertices.len() * 24 + mesh.triangles.len() * 13);
    for v in &mesh.vertices {
        for c in v {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        buf.push(3u8);
        for &i in t {
            buf.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out.write_all(&buf)
}

/// Reads the layout produced by [`write_ply`].
pub fn read_ply(bytes: &[u8]) -> Result<TriangleMesh> {
    const END: &[u8] = b"end_header\n";
    let bad = |m: &str| Error::Load(format!("ply: {m}"));
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let (mut nv, mut nf) = (None, None);
    let mut props = Vec::new();
    for l in lines {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(bad("only binary_little_endian 1.0 is supported")),
            ["element", "vertex", n] => nv = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", "face", n] => nf = Some(n.parse::<usize>().map_err(|_| bad("bad face count"))?),
            ["property", ..] => props.push(l.trim().to_string()),
            ["comment", ..] | [] => {}
            _ => return Err(bad(&format!("unsupported header line `{l}`"))),
        }
    }
    let expected = [
        "property double x",
        "property double y",
        "property double z",
        "property list uchar int vertex_indices",
    ];
    if props != expected {
        return Err(bad("expected double x/y/z vertices and uchar/int face lists"));
    }
    let (nv, nf) = (nv.ok_or_else(|| bad("no vertex element"))?, nf.ok_or_else(|| bad("no face element"))?);
    let body = &bytes[end + END.len()..];
    if body.len() != nv * 24 + nf * 13 {
        return Err(bad("body length does not match element counts"));
    }
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    let i32_at = |o: usize| i32::from_le_bytes(body[o..o + 4].try_into().unwrap());
    let mut mesh = TriangleMesh::default();
    for v in 0..nv {
        let o = v * 24;
        mesh.vertices.push([f64_at(o), f64_at(o + 8), f64_at(o + 16)]);
    }
    let base = nv * 24;
    for f in 0..nf {
        let o = base + f * 13;
        if body[o] != 3 {
            return Err(bad(&format!("face {f} is not a triangle")));
        }
        let mut t = [0u32; 3];
        for (s, slot) in t.iter_mut().enumerate() {
            let i = i32_at(o + 1 + 4 * s);
            *slot = u32::try_from(i).map_err(|_| bad(&format!("face {f} has negative index")))?;
        }
        mesh.triangles.push(t);
    }
    mesh.validate().map_err(|e| Error::Load(e.to_string()))?;
    Ok(mesh)
}

/// Writes `mesh` in the format implied by the extension of `path`.
pub fn write_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let fmt = MeshFormat::from_path(path)?;
    let mut buf = Vec::new();
    match fmt {
        MeshFormat::Obj => write_obj(mesh, &mut buf),
        MeshFormat::Ply => write_ply(mesh, &mut buf),
    }
    .map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let fmt = MeshFormat::from_path(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let with_path = |e: Error| Error::Load(format!("{}: {e}", path.display()));
    match fmt {
        MeshFormat::Obj => {
            let text = String::from_utf8(bytes).map_err(|_| Error::Load(format!("{}: not UTF-8", path.display())))?;
            read_obj(&text).map_err(with_path)
        }
        MeshFormat::Ply => read_ply(&bytes).map_err(with_path),
    }
}
