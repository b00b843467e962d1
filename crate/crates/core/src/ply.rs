//! Binary little-endian PLY codec for the common 3DGS vertex layout.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::splat::{logit, sigmoid, GaussianCloud, GaussianPrimitive, SH_C0};

const REQUIRED_COUNT: usize = 14;
const REQUIRED: [&str; REQUIRED_COUNT] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Opaque vertex properties preserved byte-for-byte across load and save.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraProperties {
    pub properties: Vec<(String, ScalarType)>,
    /// Bytes per vertex.
    pub stride: usize,
    /// `stride * vertex_count` bytes, in vertex order.
    pub data: Vec<u8>,
}

impl ExtraProperties {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.properties.iter().map(|(n, _)| n.as_str())
    }
}

struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

struct Header {
    vertex_count: usize,
    properties: Vec<Property>,
    stride: usize,
    data_offset: usize,
}

fn header_error(line: usize, text: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        text: text.to_string(),
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let mut pos = 0;
    let mut line_no = 0;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_element = false;
    let mut properties: Vec<Property> = Vec::new();
    let mut stride = 0;

    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(header_error(line_no + 1, "", "header is not terminated by end_header"));
        };
        line_no += 1;
        let raw = &bytes[pos..pos + nl];
        pos += nl + 1;
        let text = std::str::from_utf8(raw)
            .map_err(|_| header_error(line_no, "<binary>", "header line is not ASCII"))?
            .trim_end_matches('\r');
        let tokens: Vec<&str> = text.split_whitespace().collect();

        if line_no == 1 {
            if text != "ply" {
                return Err(header_error(line_no, text, "expected `ply` magic"));
            }
            continue;
        }
        if raw.starts_with(END) && tokens.len() == 1 {
            break;
        }
        match tokens.as_slice() {
            [] => return Err(header_error(line_no, text, "empty header line")),
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, version] => {
                if *fmt != "binary_little_endian" {
                    return Err(header_error(
                        line_no,
                        text,
                        format!("unsupported format `{fmt}`, only binary_little_endian is read"),
                    ));
                }
                if *version != "1.0" {
                    return Err(header_error(line_no, text, "unsupported format version"));
                }
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| header_error(line_no, text, "element count is not an integer"))?;
                if *name == "vertex" {
                    if seen_element {
                        return Err(header_error(line_no, text, "vertex must be the first element"));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                } else {
                    // Later elements are ignored; their data follows the vertices.
                    in_vertex = false;
                }
                seen_element = true;
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(header_error(line_no, text, "list properties are not supported on vertices"));
                }
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| header_error(line_no, text, format!("unknown property type `{ty}`")))?;
                if !seen_element {
                    return Err(header_error(line_no, text, "property before any element"));
                }
                if in_vertex {
                    if properties.iter().any(|p| p.name == *name) {
                        return Err(header_error(line_no, text, "duplicate property"));
                    }
                    properties.push(Property {
                        name: name.to_string(),
                        ty,
                        offset: stride,
                    });
                    stride += ty.size();
                }
            }
            _ => return Err(header_error(line_no, text, "unrecognized header line")),
        }
    }

    let vertex_count = vertex_count.ok_or_else(|| header_error(line_no, "end_header", "no vertex element"))?;
    Ok(Header {
        vertex_count,
        properties,
        stride,
        data_offset: pos,
    })
}

/// Decodes a 3DGS PLY, applying opacity/scale/color activations.
pub fn decode(bytes: &[u8]) -> Result<GaussianCloud> {
    let header = parse_header(bytes)?;
    let find = |name: &str| -> Result<&Property> {
        header
            .properties
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    };
    let required: Vec<&Property> = REQUIRED
        .iter()
        .map(|n| find(n))
        .collect::<Result<_>>()?;

    let extra_props: Vec<&Property> = header
        .properties
        .iter()
        .filter(|p| !REQUIRED.contains(&p.name.as_str()))
        .collect();
    let extra_stride: usize = extra_props.iter().map(|p| p.ty.size()).sum();

    let n = header.vertex_count;
    let body = &bytes[header.data_offset..];
    let needed = n
        .checked_mul(header.stride)
        .ok_or_else(|| Error::argument("vertex count overflows"))?;
    if body.len() < needed {
        return Err(Error::Data {
            index: body.len() / header.stride.max(1),
            message: format!("file truncated: expected {needed} bytes of vertex data, found {}", body.len()),
        });
    }

    let mut primitives = Vec::with_capacity(n);
    let mut extra_data = Vec::with_capacity(n * extra_stride);
    let mut raw = [0.0f64; REQUIRED_COUNT];
    for index in 0..n {
        let record = &body[index * header.stride..(index + 1) * header.stride];
        for (slot, prop) in raw.iter_mut().zip(&required) {
            *slot = prop.ty.read(&record[prop.offset..]);
        }
        if let Some(k) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                index,
                message: format!("non-finite value in `{}`", REQUIRED[k]),
            });
        }
        for p in &extra_props {
            extra_data.extend_from_slice(&record[p.offset..p.offset + p.ty.size()]);
        }

        let center = Vector3::new(raw[0], raw[1], raw[2]);
        let color = Vector3::new(raw[3], raw[4], raw[5]).map(|f| 0.5 + SH_C0 * f);
        let opacity = sigmoid(raw[6]).max(f64::MIN_POSITIVE);
        let scale = Vector3::new(raw[7], raw[8], raw[9]).map(|s| s.exp().max(f64::MIN_POSITIVE));
        let rotation = [raw[10], raw[11], raw[12], raw[13]];
        let prim = GaussianPrimitive::new(center, opacity, scale, rotation, color).map_err(|e| {
            Error::Data {
                index,
                message: e.to_string(),
            }
        })?;
        primitives.push(prim);
    }

    let extra = (!extra_props.is_empty()).then(|| ExtraProperties {
        properties: extra_props.iter().map(|p| (p.name.clone(), p.ty)).collect(),
        stride: extra_stride,
        data: extra_data,
    });
    Ok(GaussianCloud {
        primitives,
        source_path: None,
        extra,
    })
}

/// Encodes a cloud as binary PLY, inverting the activations. Required fields
/// are written as `float`; extra properties keep their original types.
pub fn encode(cloud: &GaussianCloud) -> Vec<u8> {
    let extra = cloud
        .extra
        .as_ref()
        .filter(|e| e.data.len() == e.stride * cloud.len());

    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] {
        header.push_str(&format!("property float {name}\n"));
    }
    if let Some(extra) = extra {
        for (name, ty) in &extra.properties {
            header.push_str(&format!("property {} {name}\n", ty.name()));
        }
    }
    for name in REQUIRED[6..REQUIRED_COUNT].iter() {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");

    let record = 4 * REQUIRED_COUNT + extra.map_or(0, |e| e.stride);
    let mut out = Vec::with_capacity(header.len() + record * cloud.len());
    out.extend_from_slice(header.as_bytes());
    let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for (i, p) in cloud.primitives.iter().enumerate() {
        for v in p.center.iter() {
            put(&mut out, *v);
        }
        for c in p.color.iter() {
            put(&mut out, (c - 0.5) / SH_C0);
        }
        if let Some(extra) = extra {
            out.extend_from_slice(&extra.data[i * extra.stride..(i + 1) * extra.stride]);
        }
        put(&mut out, logit(p.opacity));
        for s in p.scale.iter() {
            put(&mut out, s.ln());
        }
        for q in p.rotation_wxyz() {
            put(&mut out, q);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [&str; 14] = REQUIRED;

    fn build(props: &[&str], rows: &[[f32; 14]]) -> Vec<u8> {
        let mut s = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", rows.len());
        for p in props {
            s.push_str(&format!("property float {p}\n"));
        }
        s.push_str("end_header\n");
        let mut out = s.into_bytes();
        for row in rows {
            for (k, name) in ALL.iter().enumerate() {
                if props.contains(name) {
                    out.extend_from_slice(&row[k].to_le_bytes());
                }
            }
        }
        out
    }

    fn row() -> [f32; 14] {
        [1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]
    }

    #[test]
    fn logit_zero_gives_half_opacity_and_rot_is_normalized() {
        let cloud = decode(&build(&ALL, &[row()])).unwrap();
        let p = &cloud.primitives[0];
        assert_eq!(p.opacity, 0.5);
        assert_eq!(p.rotation_wxyz(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.scale, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(p.color, Vector3::new(0.5, 0.5, 0.5));
    }

    #[test]
    fn missing_property_is_named() {
        let props: Vec<&str> = ALL.iter().copied().filter(|p| *p != "scale_1").collect();
        match decode(&build(&props, &[row()])) {
            Err(Error::Schema(name)) => assert_eq!(name, "scale_1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_reports_line() {
        let text = b"ply\nformat binary_little_endian 1.0\nelement vertex two\nend_header\n";
        match decode(text) {
            Err(Error::Parse { line, text, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(text, "element vertex two");
            }
            other => panic!("unexpected {other:?}"),
        }
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(decode(ascii), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(decode(b"plx\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn nan_reports_primitive_index() {
        let mut bad = row();
        bad[1] = f32::NAN;
        match decode(&build(&ALL, &[row(), row(), bad])) {
            Err(Error::Data { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unit_quaternion_and_half_opacity_encode_exactly() {
        let p = GaussianPrimitive::new(
            Vector3::zeros(),
            0.5,
            Vector3::new(1.0, 1.0, 1.0),
            [1.0, 0.0, 0.0, 0.0],
            Vector3::new(0.5, 0.5, 0.5),
        )
        .unwrap();
        let bytes = encode(&GaussianCloud::new(vec![p]));
        let header = parse_header(&bytes).unwrap();
        let body = &bytes[header.data_offset..];
        let field = |name: &str| {
            let prop = header.properties.iter().find(|p| p.name == name).unwrap();
            prop.ty.read(&body[prop.offset..])
        };
        assert_eq!(field("opacity"), 0.0);
        assert_eq!(
            [field("rot_0"), field("rot_1"), field("rot_2"), field("rot_3")],
            [1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn extra_properties_survive_round_trip() {
        let mut s = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 2\n");
        s.push_str("property float x\nproperty float y\nproperty float z\nproperty uchar tag\n");
        for name in &ALL[3..] {
            s.push_str(&format!("property float {name}\n"));
        }
        s.push_str("property double f_rest_0\nend_header\n");
        let mut bytes = s.into_bytes();
        for (i, r) in [row(), row()].iter().enumerate() {
            for v in &r[..3] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.push(7 + i as u8);
            for v in &r[3..] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.extend_from_slice(&(0.25f64 * i as f64).to_le_bytes());
        }
        let cloud = decode(&bytes).unwrap();
        let extra = cloud.extra.as_ref().unwrap();
        assert_eq!(extra.names().collect::<Vec<_>>(), ["tag", "f_rest_0"]);
        assert_eq!(extra.stride, 9);
        let again = decode(&encode(&cloud)).unwrap();
        assert_eq!(again.extra, cloud.extra);
        assert_eq!(again.primitives, cloud.primitives);
    }
}
