//! Binary little-endian PLY cloud reader and writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{io_err, PointCloud, SceneError};

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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

    fn read_uint(self, b: &[u8]) -> u64 {
        match self {
            Scalar::U8 | Scalar::I8 => b[0] as u64,
            Scalar::U16 | Scalar::I16 => u16::from_le_bytes([b[0], b[1]]) as u64,
            _ => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as u64,
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Reads a binary little-endian PLY file into a cloud named after its parent directory.
pub fn read_ply(path: &Path) -> Result<PointCloud, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let id = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_ply(&bytes, &id).map_err(|reason| SceneError::MalformedPly { path: path.to_path_buf(), reason })
}

fn parse_ply(bytes: &[u8], id: &str) -> Result<PointCloud, String> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes.windows(END.len()).position(|w| w == END).ok_or("missing end_header")? + END.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| "header is not UTF-8")?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }

    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["format", fmt, _version] => format = Some(fmt.to_string()),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format!("bad element count {count:?}"))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                el.properties.push(Property::List {
                    count: Scalar::parse(count).ok_or(format!("unknown type {count:?}"))?,
                    item: Scalar::parse(item).ok_or(format!("unknown type {item:?}"))?,
                });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty).ok_or(format!("unknown type {ty:?}"))?,
                });
            }
            _ => return Err(format!("unrecognized header line {line:?}")),
        }
    }
    match format.as_deref() {
        Some("binary_little_endian") => {}
        Some(other) => return Err(format!("unsupported format {other} (binary_little_endian only)")),
        None => return Err("missing format line".into()),
    }

    let mut cursor = header_end;
    for el in &elements {
        if el.name != "vertex" {
            cursor = skip_element(bytes, cursor, el)?;
            continue;
        }
        return read_vertices(bytes, cursor, el, id);
    }
    Err("no vertex element".into())
}

fn skip_element(bytes: &[u8], mut cursor: usize, el: &Element) -> Result<usize, String> {
    for _ in 0..el.count {
        for p in &el.properties {
            match p {
                Property::Scalar { ty, .. } => cursor += ty.size(),
                Property::List { count, item } => {
                    let b = bytes.get(cursor..cursor + count.size()).ok_or("truncated list element")?;
                    cursor += count.size() + count.read_uint(b) as usize * item.size();
                }
            }
        }
    }
    if cursor > bytes.len() {
        return Err(format!("truncated element {}", el.name));
    }
    Ok(cursor)
}

fn read_vertices(bytes: &[u8], start: usize, el: &Element, id: &str) -> Result<PointCloud, String> {
    let mut offsets = std::collections::HashMap::new();
    let mut stride = 0usize;
    for p in &el.properties {
        match p {
            Property::Scalar { name, ty } => {
                offsets.insert(name.as_str(), (stride, *ty));
                stride += ty.size();
            }
            Property::List { .. } => return Err("list property in vertex element".into()),
        }
    }
    let coord = |axis: &str| -> Result<usize, String> {
        match offsets.get(axis) {
            Some(&(off, Scalar::F32)) => Ok(off),
            Some(&(_, ty)) => Err(format!("property {axis} is {ty:?}, expected float32")),
            None => Err(format!("missing vertex property {axis}")),
        }
    };
    let (ox, oy, oz) = (coord("x")?, coord("y")?, coord("z")?);
    let color = match (offsets.get("red"), offsets.get("green"), offsets.get("blue")) {
        (Some(&(r, Scalar::U8)), Some(&(g, Scalar::U8)), Some(&(b, Scalar::U8))) => Some((r, g, b)),
        (None, None, None) => None,
        _ => return Err("color properties must be uchar red, green, blue".into()),
    };

    let body = bytes
        .get(start..start + el.count * stride)
        .ok_or_else(|| format!("truncated vertex data: need {} bytes", el.count * stride))?;
    let f = |rec: &[u8], off: usize| f32::from_le_bytes(rec[off..off + 4].try_into().unwrap());
    let mut points = Vec::with_capacity(el.count);
    let mut colors = color.map(|_| Vec::with_capacity(el.count));
    for rec in body.chunks_exact(stride) {
        points.push([f(rec, ox), f(rec, oy), f(rec, oz)]);
        if let (Some(cs), Some((r, g, b))) = (colors.as_mut(), color) {
            cs.push([rec[r], rec[g], rec[b]]);
        }
    }
    PointCloud::new(id, points, colors).map_err(|e| e.to_string())
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), SceneError> {
    let mut out = Vec::with_capacity(200 + cloud.len() * 15);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    )
    .unwrap();
    if cloud.colors().is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(colors) = cloud.colors() {
            out.extend_from_slice(&colors[i]);
        }
    }
    fs::write(path, out).map_err(io_err(path))
}
