//! ASCII PLY point clouds with optional per-vertex normals.
//!
//! Only the `vertex` element is read; its `x y z` properties are required and
//! `nx ny nz` are picked up when all three are present. Other elements are
//! skipped by row count. Coordinates are written with Rust's shortest
//! round-trip formatting, so write-then-read preserves every bit.

use std::fmt::Write as _;
use std::path::Path;

use geopose_core::geometry::Vec3;
use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

const SCALAR_TYPES: [&str; 16] = [
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8", "int16", "uint16", "int32",
    "uint32", "float32", "float64",
];

/// Parses PLY text. `path` only labels errors.
pub fn parse(text: &str, path: &Path) -> Result<PlyCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(parse_err(path, n, "missing `ply` magic")),
        None => return Err(parse_err(path, 1, "empty file")),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(parse_err(path, n, "only `format ascii 1.0` is supported"));
                }
            }
            Some("element") => {
                let (Some(name), Some(count)) = (tok.next(), tok.next()) else {
                    return Err(parse_err(path, n, "element needs a name and a count"));
                };
                let count = count.parse().map_err(|_| parse_err(path, n, format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.into(), count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, n, "property before any element"))?;
                let ty = tok.next().unwrap_or("");
                if ty == "list" {
                    if el.name == "vertex" {
                        return Err(parse_err(path, n, "list properties on vertices are not supported"));
                    }
                    el.props.push("<list>".into());
                    continue;
                }
                if !SCALAR_TYPES.contains(&ty) {
                    return Err(parse_err(path, n, format!("unknown property type `{ty}`")));
                }
                let name = tok.next().ok_or_else(|| parse_err(path, n, "property needs a name"))?;
                el.props.push(name.into());
            }
            Some("end_header") => {
                header_end = Some(n);
                break;
            }
            Some(other) => return Err(parse_err(path, n, format!("unexpected header keyword `{other}`"))),
        }
    }
    let Some(header_end) = header_end else {
        return Err(parse_err(path, text.lines().count().max(1), "missing end_header"));
    };

    let mut points = None;
    let mut normals = None;
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                if lines.next().is_none() {
                    return Err(parse_err(path, header_end, format!("truncated `{}` element", el.name)));
                }
            }
            continue;
        }
        let col = |name: &str| el.props.iter().position(|p| p == name);
        let (Some(x), Some(y), Some(z)) = (col("x"), col("y"), col("z")) else {
            return Err(parse_err(path, header_end, "vertex element needs x, y and z"));
        };
        let ncols = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        let mut pts = Vec::with_capacity(el.count);
        let mut nrm = Vec::new();
        let mut row = Vec::with_capacity(el.props.len());
        for i in 0..el.count {
            let Some((n, line)) = lines.next() else {
                return Err(parse_err(path, header_end + i + 1, format!("expected {} vertices, found {i}", el.count)));
            };
            row.clear();
            for t in line.split_whitespace() {
                let v: f64 = t.parse().map_err(|_| parse_err(path, n, format!("bad number `{t}`")))?;
                row.push(v);
            }
            if row.len() != el.props.len() {
                return Err(parse_err(path, n, format!("expected {} values, found {}", el.props.len(), row.len())));
            }
            let p = Vector3::new(row[x], row[y], row[z]);
            if !p.iter().all(|v| v.is_finite()) {
                return Err(parse_err(path, n, "non-finite coordinate"));
            }
            pts.push(p);
            if let Some([a, b, c]) = ncols {
                nrm.push(Vector3::new(row[a], row[b], row[c]));
            }
        }
        points = Some(pts);
        normals = ncols.map(|_| nrm);
    }
    if let Some((n, line)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(parse_err(path, n, format!("unexpected trailing data `{line}`")));
    }
    let points = points.ok_or_else(|| parse_err(path, header_end, "no vertex element"))?;
    if points.is_empty() {
        return Err(parse_err(path, header_end, "vertex element is empty"));
    }
    Ok(PlyCloud { points, normals })
}

pub fn read(path: &Path) -> Result<PlyCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

pub fn to_string(points: &[Vec3], normals: Option<&[Vec3]>) -> String {
    let mut s = String::with_capacity(64 * points.len() + 200);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if normals.is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(n) = normals {
            let _ = write!(s, " {} {} {}", n[i].x, n[i].y, n[i].z);
        }
        s.push('\n');
    }
    s
}
