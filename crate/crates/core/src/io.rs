//! On-disk formats: 16-bit depth images and per-image landmark sidecars.
//!
//! Depth files are binary PGM (`P5`) with big-endian 16-bit samples and
//! `maxval` 65535. A `# scale_mm_per_unit=<f>` comment gives the depth scale
//! and an optional `# pitch_mm_per_pixel=<f>` the lateral pixel pitch. Raw
//! value 0 marks an invalid pixel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{DepthImage, Shape};

pub const DEFAULT_SCALE_MM_PER_UNIT: f64 = 0.1;

pub fn load_depth_image(path: impl AsRef<Path>) -> Result<DepthImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth_image(&bytes)
}

pub fn write_depth_image(path: impl AsRef<Path>, img: &DepthImage, scale_mm_per_unit: f64) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_depth_image(img, scale_mm_per_unit)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_depth_image(img: &DepthImage, scale_mm_per_unit: f64) -> Result<Vec<u8>> {
    if !(scale_mm_per_unit > 0.0) {
        return Err(Error::InvalidParameter(format!("scale {scale_mm_per_unit}")));
    }
    let mut header = String::from("P5\n");
    let _ = writeln!(header, "# scale_mm_per_unit={scale_mm_per_unit}");
    let _ = writeln!(header, "# pitch_mm_per_pixel={}", img.pitch_mm);
    let _ = write!(header, "{} {}\n65535\n", img.width(), img.height());
    let mut out = header.into_bytes();
    out.reserve(img.width() * img.height() * 2);
    for (&d, &v) in img.depth().iter().zip(img.mask()) {
        let raw = if v {
            let r = (d / scale_mm_per_unit).round();
            if !(1.0..=65535.0).contains(&r) {
                return Err(Error::InvalidParameter(format!(
                    "depth {d} mm not representable at scale {scale_mm_per_unit}"
                )));
            }
            r as u16
        } else {
            0
        };
        out.extend_from_slice(&raw.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_depth_image(bytes: &[u8]) -> Result<DepthImage> {
    let mut pos = 0usize;
    let mut scale = None;
    let mut pitch = None;

    let mut next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos >= bytes.len() {
                return Err(Error::MalformedHeader("unexpected end of header".into()));
            }
            if bytes[*pos] == b'#' {
                let start = *pos + 1;
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                let line = String::from_utf8_lossy(&bytes[start..*pos]).trim().to_string();
                if let Some(v) = line.strip_prefix("scale_mm_per_unit=") {
                    scale = Some(parse_header_float(v)?);
                } else if let Some(v) = line.strip_prefix("pitch_mm_per_pixel=") {
                    pitch = Some(parse_header_float(v)?);
                }
                continue;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
                *pos += 1;
            }
            return Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned());
        }
    };

    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::MalformedHeader(format!("magic {magic:?}, expected P5")));
    }
    let width = parse_header_uint(&next_token(&mut pos)?)?;
    let height = parse_header_uint(&next_token(&mut pos)?)?;
    let maxval = parse_header_uint(&next_token(&mut pos)?)?;
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimensions);
        }
        return Err(Error::TruncatedPayload {
            expected: width * height * 2,
            found: 0,
        });
    }
    pos += 1;
    drop(next_token);

    if maxval != 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval}, expected 65535")));
    }
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimensions);
    }
    let scale = scale.ok_or_else(|| Error::MalformedHeader("missing scale_mm_per_unit".into()))?;
    if !(scale > 0.0) {
        return Err(Error::MalformedHeader(format!("scale {scale}")));
    }
    let pitch = pitch.unwrap_or(1.0);
    if !(pitch > 0.0) {
        return Err(Error::MalformedHeader(format!("pitch {pitch}")));
    }

    let expected = width * height * 2;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let mut depth = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for c in payload[..expected].chunks_exact(2) {
        let raw = u16::from_be_bytes([c[0], c[1]]);
        valid.push(raw != 0);
        depth.push(raw as f64 * scale);
    }
    Ok(DepthImage::new(width, height, depth, valid)?.with_pitch(pitch))
}

fn parse_header_uint(tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::MalformedHeader(format!("expected integer, found {tok:?}")))
}

fn parse_header_float(tok: &str) -> Result<f64> {
    tok.trim()
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("expected number, found {tok:?}")))
}

/// One landmark line of a sidecar file.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkRecord {
    pub index: usize,
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Parsed annotation sidecar: `key=value` header lines followed by
/// `<index> <name> <x_px> <y_px> <visible:0|1>` records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    pub yaw_deg: Option<f64>,
    pub subset: Option<usize>,
    /// Header entries other than yaw and subset, in file order.
    pub meta: Vec<(String, String)>,
    pub records: Vec<LandmarkRecord>,
}

impl Annotation {
    pub fn from_shape(shape: &Shape, names: &[String]) -> Self {
        let records = shape
            .points
            .iter()
            .zip(&shape.visible)
            .enumerate()
            .map(|(i, (p, &v))| LandmarkRecord {
                index: i,
                name: names.get(i).cloned().unwrap_or_else(|| format!("lm{i}")),
                x: p[0],
                y: p[1],
                visible: v,
            })
            .collect();
        Self {
            records,
            ..Default::default()
        }
    }

    /// Shape over `len` landmarks; indices without a record are invisible.
    pub fn to_shape(&self, len: usize) -> Result<Shape> {
        let mut points = vec![[0.0, 0.0]; len];
        let mut visible = vec![false; len];
        for r in &self.records {
            if r.index >= len {
                return Err(Error::MalformedAnnotation(format!(
                    "landmark index {} outside table of {len}",
                    r.index
                )));
            }
            points[r.index] = [r.x, r.y];
            visible[r.index] = r.visible;
        }
        Shape::with_visibility(points, visible)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(y) = self.yaw_deg {
            let _ = writeln!(s, "pose_yaw_deg={y}");
        }
        if let Some(z) = self.subset {
            let _ = writeln!(s, "subset={z}");
        }
        for (k, v) in &self.meta {
            let _ = writeln!(s, "{k}={v}");
        }
        for r in &self.records {
            let _ = writeln!(s, "{} {} {} {} {}", r.index, r.name, r.x, r.y, r.visible as u8);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ann = Annotation::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let bad = || Error::MalformedAnnotation(format!("line {}: bad value {v:?}", lineno + 1));
                match k.trim() {
                    "pose_yaw_deg" => ann.yaw_deg = Some(v.trim().parse().map_err(|_| bad())?),
                    "subset" => ann.subset = Some(v.trim().parse().map_err(|_| bad())?),
                    other => ann.meta.push((other.to_string(), v.trim().to_string())),
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::MalformedAnnotation(format!(
                    "line {}: expected 5 fields, found {}",
                    lineno + 1,
                    f.len()
                )));
            }
            let bad = |what: &str| Error::MalformedAnnotation(format!("line {}: bad {what}", lineno + 1));
            let visible = match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("visibility flag")),
            };
            ann.records.push(LandmarkRecord {
                index: f[0].parse().map_err(|_| bad("index"))?,
                name: f[1].to_string(),
                x: f[2].parse().map_err(|_| bad("x"))?,
                y: f[3].parse().map_err(|_| bad("y"))?,
                visible,
            });
        }
        Ok(ann)
    }
}

pub fn read_annotation(path: impl AsRef<Path>) -> Result<Annotation> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Annotation::parse(&text)
}

pub fn write_annotation(path: impl AsRef<Path>, ann: &Annotation) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ann.render()).map_err(|e| Error::io(path, e))
}
