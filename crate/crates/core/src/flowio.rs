//! Dense flow, depth and mask images plus their on-disk formats.
//!
//! * `.flo`: little-endian f32 magic `202021.25`, i32 width, i32 height,
//!   then row-major interleaved f32 `(du, dv)`.
//! * depth: binary PGM (`P5`, maxval 65535, big-endian samples) holding
//!   millimeters, `0` meaning invalid.
//! * mask: binary PGM (`P5`, maxval 255), nonzero meaning member.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pixel;

pub const FLO_MAGIC: f32 = 202021.25;

/// Flow components with magnitude above this are the Middlebury "unknown" tag.
pub const UNKNOWN_FLOW_THRESHOLD: f32 = 1e9;

/// Default threshold (pixels) for the moving-scene mask.
pub const DEFAULT_MOTION_THRESHOLD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum FlowIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad .flo magic {0} (expected 202021.25)")]
    BadMagic(f32),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("non-positive image dimensions {width}x{height}")]
    NonPositiveDims { width: i64, height: i64 },
    #[error("malformed PGM: {0}")]
    BadPgm(String),
    #[error(
        "dimension mismatch: {first} is {first_dims:?} but {second} is {second_dims:?}"
    )]
    DimensionMismatch {
        first: String,
        first_dims: (usize, usize),
        second: String,
        second_dims: (usize, usize),
    },
    #[error("pixel ({u}, {v}) outside a {width}x{height} image")]
    OutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("buffer length {found} does not match {width}x{height}")]
    BufferLength { width: usize, height: usize, found: usize },
}

impl FlowIoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// How [`FlowField::sample`] reads between cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Per-pixel displacement `(du, dv)` in pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 2] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(width * height * 2);
        for y in 0..height {
            for x in 0..width {
                let (du, dv) = f(x, y);
                data.push(du);
                data.push(dv);
            }
        }
        Self { width, height, data }
    }

    /// `data` holds interleaved `(du, dv)` pairs in row-major order.
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self, FlowIoError> {
        if width == 0 || height == 0 {
            return Err(FlowIoError::NonPositiveDims { width: width as i64, height: height as i64 });
        }
        if data.len() != width * height * 2 {
            return Err(FlowIoError::BufferLength { width, height, found: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, du: f32, dv: f32) {
        let i = 2 * (y * self.width + x);
        self.data[i] = du;
        self.data[i + 1] = dv;
    }

    /// False for non-finite cells and the "unknown" sentinel.
    pub fn is_known(&self, x: usize, y: usize) -> bool {
        let (du, dv) = self.get(x, y);
        du.is_finite() && dv.is_finite() && du.abs() < UNKNOWN_FLOW_THRESHOLD && dv.abs() < UNKNOWN_FLOW_THRESHOLD
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u <= (self.width - 1) as f64 && px.v <= (self.height - 1) as f64
    }

    /// Subpixel lookup; exact cell value at integer coordinates.
    pub fn sample(&self, px: &Pixel, interp: Interpolation) -> Result<(f64, f64), FlowIoError> {
        if !self.contains(px) {
            return Err(FlowIoError::OutOfBounds { u: px.u, v: px.v, width: self.width, height: self.height });
        }
        match interp {
            Interpolation::Nearest => {
                let (du, dv) = self.get(px.u.round() as usize, px.v.round() as usize);
                Ok((du as f64, dv as f64))
            }
            Interpolation::Bilinear => {
                let x0 = (px.u.floor() as usize).min(self.width - 1);
                let y0 = (px.v.floor() as usize).min(self.height - 1);
                let fx = px.u - x0 as f64;
                let fy = px.v - y0 as f64;
                let x1 = (x0 + 1).min(self.width - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let mut acc = (0.0, 0.0);
                for (x, y, w) in [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x1, y0, fx * (1.0 - fy)),
                    (x0, y1, (1.0 - fx) * fy),
                    (x1, y1, fx * fy),
                ] {
                    if w == 0.0 {
                        continue;
                    }
                    let (du, dv) = self.get(x, y);
                    acc.0 += w * du as f64;
                    acc.1 += w * dv as f64;
                }
                Ok(acc)
            }
        }
    }

    /// Same as [`sample`](Self::sample) but `None` when any contributing
    /// cell is non-finite or tagged unknown.
    pub fn sample_known(&self, px: &Pixel, interp: Interpolation) -> Result<Option<(f64, f64)>, FlowIoError> {
        let (du, dv) = self.sample(px, interp)?;
        let valid = du.is_finite() && dv.is_finite() && du.abs() < UNKNOWN_FLOW_THRESHOLD as f64 && dv.abs() < UNKNOWN_FLOW_THRESHOLD as f64;
        Ok(valid.then_some((du, dv)))
    }

    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        let (du, dv) = self.get(x, y);
        (du as f64).hypot(dv as f64)
    }
}

/// Encodes a flow field in `.flo` layout.
pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField, FlowIoError> {
    if bytes.len() < 12 {
        return Err(FlowIoError::TruncatedFile { expected: 12, found: bytes.len() });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(FlowIoError::BadMagic(magic));
    }
    let width = i32::from_le_bytes(word(4)) as i64;
    let height = i32::from_le_bytes(word(8)) as i64;
    if width <= 0 || height <= 0 {
        return Err(FlowIoError::NonPositiveDims { width, height });
    }
    let count = (width as usize) * (height as usize) * 2;
    let expected = 12 + count * 4;
    if bytes.len() < expected {
        return Err(FlowIoError::TruncatedFile { expected, found: bytes.len() });
    }
    let data = bytes[12..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FlowField { width: width as usize, height: height as usize, data })
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField, FlowIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FlowIoError::io(path, e))?;
    decode_flow(&bytes)
}

pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<(), FlowIoError> {
    let path = path.as_ref();
    fs::write(path, encode_flow(flow)).map_err(|e| FlowIoError::io(path, e))
}

/// Per-pixel depth in meters; a pixel is valid iff its depth is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f64>,
}

impl DepthImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![0.0; width * height] }
    }

    /// Non-finite and non-positive entries are stored as invalid (0).
    pub fn from_vec(width: usize, height: usize, depth: Vec<f64>) -> Result<Self, FlowIoError> {
        if width == 0 || height == 0 {
            return Err(FlowIoError::NonPositiveDims { width: width as i64, height: height as i64 });
        }
        if depth.len() != width * height {
            return Err(FlowIoError::BufferLength { width, height, found: depth.len() });
        }
        let depth = depth.into_iter().map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 }).collect();
        Ok(Self { width, height, depth })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.depth[y * self.width + x] = if d.is_finite() && d > 0.0 { d } else { 0.0 };
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }
}

/// Per-pixel membership flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    member: Vec<bool>,
}

impl MaskImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, member: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, member: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut member = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                member.push(f(x, y));
            }
        }
        Self { width, height, member }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.member[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.member[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.member.iter().any(|m| *m)
    }

    /// Member pixels in row-major order.
    pub fn members(&self) -> Vec<Pixel> {
        self.member
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| Pixel::new((i % self.width) as f64, (i / self.width) as f64))
            .collect()
    }

    /// Members that also carry valid depth.
    pub fn with_valid_depth(&self, depth: &DepthImage) -> MaskImage {
        MaskImage::from_fn(self.width, self.height, |x, y| self.get(x, y) && depth.is_valid(x, y))
    }
}

/// Marks pixels whose flow magnitude exceeds `threshold` (strict).
pub fn scene_mask_from_flow(flow: &FlowField, threshold: f64) -> MaskImage {
    MaskImage::from_fn(flow.width, flow.height, |x, y| flow.is_known(x, y) && flow.magnitude(x, y) > threshold)
}

/// Rejects paired inputs of different sizes, naming both.
pub fn check_same_dims(
    first: &str,
    first_dims: (usize, usize),
    second: &str,
    second_dims: (usize, usize),
) -> Result<(), FlowIoError> {
    if first_dims == second_dims {
        Ok(())
    } else {
        Err(FlowIoError::DimensionMismatch {
            first: first.to_string(),
            first_dims,
            second: second.to_string(),
            second_dims,
        })
    }
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader, FlowIoError> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(FlowIoError::BadPgm("header ends early".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(FlowIoError::BadPgm(format!("magic {:?}, expected P5", tokens[0])));
    }
    let num = |s: &str| s.parse::<i64>().map_err(|_| FlowIoError::BadPgm(format!("bad number {s:?}")));
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if width <= 0 || height <= 0 {
        return Err(FlowIoError::NonPositiveDims { width, height });
    }
    if !(1..=65535).contains(&maxval) {
        return Err(FlowIoError::BadPgm(format!("maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return Err(FlowIoError::TruncatedFile { expected: pos + 1, found: bytes.len() });
    }
    Ok(PgmHeader { width: width as usize, height: height as usize, maxval: maxval as u32, offset: pos + 1 })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, FlowIoError> {
    fs::read(path).map_err(|e| FlowIoError::io(path, e))
}

pub fn encode_depth_pgm(depth: &DepthImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width, depth.height).into_bytes();
    for d in &depth.depth {
        let mm = if *d > 0.0 { (d * 1000.0).round().clamp(0.0, 65535.0) as u16 } else { 0 };
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

pub fn decode_depth_pgm(bytes: &[u8]) -> Result<DepthImage, FlowIoError> {
    let h = parse_pgm_header(bytes)?;
    if h.maxval != 65535 {
        return Err(FlowIoError::BadPgm(format!("depth maxval {} (expected 65535)", h.maxval)));
    }
    let n = h.width * h.height;
    let expected = h.offset + 2 * n;
    if bytes.len() < expected {
        return Err(FlowIoError::TruncatedFile { expected, found: bytes.len() });
    }
    let depth = bytes[h.offset..expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 1000.0)
        .collect();
    Ok(DepthImage { width: h.width, height: h.height, depth })
}

/// Depth in meters, quantized to whole millimeters.
pub fn write_depth_pgm(path: impl AsRef<Path>, depth: &DepthImage) -> Result<(), FlowIoError> {
    let path = path.as_ref();
    fs::write(path, encode_depth_pgm(depth)).map_err(|e| FlowIoError::io(path, e))
}

pub fn read_depth_pgm(path: impl AsRef<Path>) -> Result<DepthImage, FlowIoError> {
    decode_depth_pgm(&read_bytes(path.as_ref())?)
}

pub fn encode_mask_pgm(mask: &MaskImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.member.iter().map(|m| if *m { 255u8 } else { 0 }));
    out
}

pub fn decode_mask_pgm(bytes: &[u8]) -> Result<MaskImage, FlowIoError> {
    let h = parse_pgm_header(bytes)?;
    if h.maxval > 255 {
        return Err(FlowIoError::BadPgm(format!("mask maxval {} (expected <= 255)", h.maxval)));
    }
    let n = h.width * h.height;
    let expected = h.offset + n;
    if bytes.len() < expected {
        return Err(FlowIoError::TruncatedFile { expected, found: bytes.len() });
    }
    let member = bytes[h.offset..expected].iter().map(|b| *b != 0).collect();
    Ok(MaskImage { width: h.width, height: h.height, member })
}

pub fn write_mask_pgm(path: impl AsRef<Path>, mask: &MaskImage) -> Result<(), FlowIoError> {
    let path = path.as_ref();
    fs::write(path, encode_mask_pgm(mask)).map_err(|e| FlowIoError::io(path, e))
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<MaskImage, FlowIoError> {
    decode_mask_pgm(&read_bytes(path.as_ref())?)
}
