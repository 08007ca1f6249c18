use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::frames::quantize_unit;

/// Binary little-endian PLY: float32 position and normal, uchar color, uchar-count int32 faces.
pub fn write_ply(mesh: &TriMesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    let mut buf = Vec::with_capacity(64 + mesh.vertices.len() * 27 + mesh.triangles.len() * 13);
    write!(
        buf,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .expect("write to Vec");
    for i in 0..mesh.vertices.len() {
        for v in mesh.vertices[i].iter().chain(mesh.normals[i].iter()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf.extend(mesh.colors[i].map(quantize_unit));
    }
    for t in &mesh.triangles {
        buf.push(3);
        for &i in t {
            buf.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// ASCII OBJ with positions and faces only.
pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    let mut s = String::new();
    use std::fmt::Write as _;
    for v in &mesh.vertices {
        writeln!(s, "v {} {} {}", v.x, v.y, v.z).expect("write to String");
    }
    for t in &mesh.triangles {
        writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("write to String");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    ascii: bool,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn token(&mut self) -> Result<(usize, &'a str)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of data"));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| self.err("non-UTF-8 token"))?;
        Ok((start, tok))
    }

    fn scalar(&mut self, t: Scalar) -> Result<f64> {
        if self.ascii {
            let (start, tok) = self.token()?;
            return tok.parse::<f64>().map_err(|_| Error::Parse {
                path: self.path.to_path_buf(),
                offset: start,
                message: format!("invalid number {tok:?}"),
            });
        }
        let n = t.size();
        let Some(b) = self.bytes.get(self.pos..self.pos + n) else {
            return Err(self.err("unexpected end of data"));
        };
        self.pos += n;
        Ok(match t {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        })
    }
}

fn parse_header(r: &mut Reader) -> Result<Vec<Element>> {
    let mut elements: Vec<Element> = Vec::new();
    let mut first = true;
    loop {
        let start = r.pos;
        let end = r.bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| start + p)
            .ok_or_else(|| r.err("header is not terminated by end_header"))?;
        let line = std::str::from_utf8(&r.bytes[start..end])
            .map_err(|_| r.err("non-UTF-8 header"))?
            .trim_end_matches('\r');
        let words: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: String| Error::Parse {
            path: r.path.to_path_buf(),
            offset: start,
            message: m,
        };
        if first {
            if line != "ply" {
                return Err(bad("missing 'ply' magic".into()));
            }
            first = false;
        } else {
            match words.as_slice() {
                ["format", "ascii", "1.0"] => r.ascii = true,
                ["format", "binary_little_endian", "1.0"] => r.ascii = false,
                ["format", ..] => return Err(bad(format!("unsupported format line {line:?}"))),
                ["comment", ..] | ["obj_info", ..] | [] => {}
                ["element", name, count] => elements.push(Element {
                    name: name.to_string(),
                    count: count.parse().map_err(|_| bad(format!("invalid element count {count:?}")))?,
                    props: Vec::new(),
                }),
                ["property", "list", ct, it, name] => {
                    let (Some(ct), Some(it)) = (Scalar::parse(ct), Scalar::parse(it)) else {
                        return Err(bad(format!("unknown list type in {line:?}")));
                    };
                    elements
                        .last_mut()
                        .ok_or_else(|| bad("property before element".into()))?
                        .props
                        .push(Property::List(name.to_string(), ct, it));
                }
                ["property", ty, name] => {
                    let ty = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty:?}")))?;
                    elements
                        .last_mut()
                        .ok_or_else(|| bad("property before element".into()))?
                        .props
                        .push(Property::Scalar(name.to_string(), ty));
                }
                ["end_header"] => {
                    r.pos = end + 1;
                    return Ok(elements);
                }
                _ => return Err(bad(format!("unrecognized header line {line:?}"))),
            }
        }
        r.pos = end + 1;
    }
}

/// Parses an ASCII or binary little-endian PLY with `vertex` and `face` elements.
/// Missing normals are zero and missing colors are white.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<TriMesh> {
    let mut r = Reader {
        bytes,
        pos: 0,
        ascii: false,
        path,
    };
    let elements = parse_header(&mut r)?;
    let mut mesh = TriMesh::default();
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let names: Vec<&str> = el
                    .props
                    .iter()
                    .map(|p| match p {
                        Property::Scalar(n, _) | Property::List(n, _, _) => n.as_str(),
                    })
                    .collect();
                if !["x", "y", "z"].iter().all(|n| names.contains(n)) {
                    return Err(r.err("vertex element lacks x, y, z"));
                }
                for _ in 0..el.count {
                    let mut p = Vector3::zeros();
                    let mut n = Vector3::zeros();
                    let mut c = [1.0; 3];
                    for prop in &el.props {
                        match prop {
                            Property::Scalar(name, t) => {
                                let v = r.scalar(*t)?;
                                let color = |v: f64| if *t == Scalar::U8 { v / 255.0 } else { v };
                                match name.as_str() {
                                    "x" => p.x = v,
                                    "y" => p.y = v,
                                    "z" => p.z = v,
                                    "nx" => n.x = v,
                                    "ny" => n.y = v,
                                    "nz" => n.z = v,
                                    "red" => c[0] = color(v),
                                    "green" => c[1] = color(v),
                                    "blue" => c[2] = color(v),
                                    _ => {}
                                }
                            }
                            Property::List(_, ct, it) => {
                                let len = r.scalar(*ct)? as usize;
                                for _ in 0..len {
                                    r.scalar(*it)?;
                                }
                            }
                        }
                    }
                    mesh.vertices.push(p);
                    mesh.normals.push(n);
                    mesh.colors.push(c);
                }
            }
            "face" => {
                for _ in 0..el.count {
                    for prop in &el.props {
                        match prop {
                            Property::List(name, ct, it)
                                if name == "vertex_indices" || name == "vertex_index" =>
                            {
                                let at = r.pos;
                                let len = r.scalar(*ct)? as usize;
                                let mut idx = Vec::with_capacity(len);
                                for _ in 0..len {
                                    let v = r.scalar(*it)?;
                                    if v < 0.0 || v.fract() != 0.0 {
                                        return Err(r.err(format!("invalid vertex index {v}")));
                                    }
                                    idx.push(v as u32);
                                }
                                if len < 3 {
                                    return Err(Error::Parse {
                                        path: path.to_path_buf(),
                                        offset: at,
                                        message: format!("face with {len} vertices"),
                                    });
                                }
                                for k in 1..len - 1 {
                                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                                }
                            }
                            Property::List(_, ct, it) => {
                                let len = r.scalar(*ct)? as usize;
                                for _ in 0..len {
                                    r.scalar(*it)?;
                                }
                            }
                            Property::Scalar(_, t) => {
                                r.scalar(*t)?;
                            }
                        }
                    }
                }
            }
            _ => {
                for _ in 0..el.count {
                    for prop in &el.props {
                        match prop {
                            Property::Scalar(_, t) => {
                                r.scalar(*t)?;
                            }
                            Property::List(_, ct, it) => {
                                let len = r.scalar(*ct)? as usize;
                                for _ in 0..len {
                                    r.scalar(*it)?;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let n = mesh.vertices.len() as u32;
    if let Some(t) = mesh.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
        return Err(r.err(format!("face {t:?} indexes past {n} vertices")));
    }
    Ok(mesh)
}
