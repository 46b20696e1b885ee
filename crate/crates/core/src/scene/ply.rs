//! Binary little-endian PLY in the layout used by splatting checkpoints.
//!
//! Payload channels are written as `f_dc_0..2` when the payload is
//! three-dimensional (color or latent) and as `feat_0..feat_{D-1}` otherwise.
//! Values go into `f_dc_*` verbatim; no SH-DC conversion is applied.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{normalize_quaternion, Gaussian, GaussianScene, SceneMetadata, Stage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum ScalarType {
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

    fn size(self) -> usize {
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

struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

struct Header {
    vertex_count: usize,
    properties: Vec<Property>,
    stride: usize,
    metadata: SceneMetadata,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("missing end_header".into()))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("header is not utf-8".into()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Format("not a PLY file".into()));
    }

    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut properties = Vec::new();
    let mut stride = 0;
    let mut metadata = SceneMetadata::default();
    let mut format_ok = false;

    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => {
                return Err(Error::Format(format!("unsupported PLY format {other}")));
            }
            ["comment", rest @ ..] => {
                for kv in rest {
                    if let Some(v) = kv.strip_prefix("cf3_source=") {
                        metadata.source = v.to_string();
                    } else if let Some(v) = kv.strip_prefix("cf3_stage=") {
                        metadata.stage = Stage::parse(v).unwrap_or_default();
                    }
                }
            }
            ["element", name, count] => {
                in_vertex = false;
                if *name == "vertex" {
                    if seen_vertex {
                        return Err(Error::Format("duplicate vertex element".into()));
                    }
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad vertex count {count}")))?,
                    );
                    in_vertex = true;
                    seen_vertex = true;
                } else if !seen_vertex {
                    return Err(Error::Format(format!(
                        "element {name} precedes vertex; only vertex-first files are supported"
                    )));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Format(
                    "list properties on vertex are not supported".into(),
                ));
            }
            ["property", ty, name] if in_vertex => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::Format(format!("unknown property type {ty}")))?;
                properties.push(Property {
                    name: name.to_string(),
                    ty,
                    offset: stride,
                });
                stride += ty.size();
            }
            _ => {}
        }
    }
    if !format_ok {
        return Err(Error::Format(
            "missing binary_little_endian format line".into(),
        ));
    }
    let vertex_count =
        vertex_count.ok_or_else(|| Error::Format("missing vertex element".into()))?;
    Ok(Header {
        vertex_count,
        properties,
        stride,
        metadata,
        body_offset: end + END.len(),
    })
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&bytes)
}

pub(crate) fn decode_scene(bytes: &[u8]) -> Result<GaussianScene> {
    let header = parse_header(bytes)?;
    let find = |name: &str| -> Result<&Property> {
        header
            .properties
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Format(format!("missing property {name}")))
    };

    let mut geometry = Vec::new();
    for name in [
        "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        "opacity",
    ] {
        geometry.push(find(name)?);
    }

    let feat_count = (0..)
        .take_while(|k| {
            header
                .properties
                .iter()
                .any(|p| p.name == format!("feat_{k}"))
        })
        .count();
    let payload: Vec<&Property> = if feat_count > 0 {
        (0..feat_count)
            .map(|k| find(&format!("feat_{k}")))
            .collect::<Result<_>>()?
    } else {
        (0..3)
            .map(|k| find(&format!("f_dc_{k}")))
            .collect::<Result<_>>()?
    };

    if header.vertex_count == 0 {
        return Err(Error::EmptyScene("PLY has zero vertices".into()));
    }
    let body = &bytes[header.body_offset..];
    let needed = header
        .vertex_count
        .checked_mul(header.stride)
        .ok_or_else(|| Error::Format("vertex data size overflows".into()))?;
    if body.len() < needed {
        return Err(Error::SizeMismatch(format!(
            "PLY body has {} bytes, expected {needed}",
            body.len()
        )));
    }

    let gaussians = body[..needed]
        .chunks_exact(header.stride)
        .map(|rec| {
            let v = |p: &Property| p.ty.read(&rec[p.offset..]);
            let mut g = Gaussian {
                mean: [v(geometry[0]), v(geometry[1]), v(geometry[2])],
                log_scale: [v(geometry[3]), v(geometry[4]), v(geometry[5])],
                rotation: [
                    v(geometry[6]),
                    v(geometry[7]),
                    v(geometry[8]),
                    v(geometry[9]),
                ],
                opacity_logit: v(geometry[10]),
                payload: payload.iter().map(|p| v(p)).collect(),
            };
            g.rotation = normalize_quaternion(g.rotation);
            g
        })
        .collect();

    GaussianScene::new(gaussians, payload.len(), header.metadata)
}

pub fn save_scene(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_scene(scene)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn encode_scene(scene: &GaussianScene) -> Result<Vec<u8>> {
    scene.validate()?;
    let payload_names: Vec<String> = if scene.payload_dim == 3 {
        (0..3).map(|k| format!("f_dc_{k}")).collect()
    } else {
        (0..scene.payload_dim)
            .map(|k| format!("feat_{k}"))
            .collect()
    };

    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    let source = if scene.metadata.source.is_empty() {
        "unknown".to_string()
    } else {
        scene.metadata.source.replace(char::is_whitespace, "_")
    };
    header.push_str(&format!(
        "comment cf3_source={source} cf3_stage={}\n",
        scene.metadata.stage.as_str()
    ));
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for name in ["x", "y", "z"]
        .into_iter()
        .map(String::from)
        .chain(payload_names)
        .chain(
            [
                "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
            ]
            .map(String::from),
        )
    {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");

    let floats_per = 3 + scene.payload_dim + 1 + 3 + 4;
    let mut out = Vec::with_capacity(header.len() + scene.len() * floats_per * 4);
    out.extend_from_slice(header.as_bytes());
    for g in &scene.gaussians {
        let values = g
            .mean
            .iter()
            .chain(&g.payload)
            .chain(std::iter::once(&g.opacity_logit))
            .chain(&g.log_scale)
            .chain(&g.rotation);
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}
