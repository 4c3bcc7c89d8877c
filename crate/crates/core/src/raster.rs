//! Grayscale rasters, binary PGM (P5) input/output and synthetic test scenes.
//!
//! The writer always emits the canonical header `P5\n<w> <h>\n255\n` followed by
//! raw bytes. The reader accepts any whitespace between header tokens and `#`
//! comments running to the end of a line.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::labels::LabelMap;
use crate::segment::connected_components;

pub const MAX_INTENSITY: f64 = 255.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("malformed PGM header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported bit depth: maxval {0} needs more than 8 bits")]
    UnsupportedBitDepth(u32),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("rectangle {index} ({x},{y} {w}x{h}) lies outside the {width}x{height} image")]
    RectOutOfBounds {
        index: usize,
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
}

/// A row-major grayscale image with fractional intensities in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if width.checked_mul(height) != Some(data.len()) {
            return Err(RasterError::InvalidImage(format!(
                "{} intensities for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=MAX_INTENSITY).contains(v)) {
            return Err(RasterError::InvalidImage(format!(
                "intensity {} at index {i} outside [0, 255]",
                data[i]
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    /// A uniform image. Panics on zero dimensions or an out-of-range value.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage::new(width, height, vec![value; width * height]).expect("valid uniform image")
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self, RasterError> {
        GrayImage::new(width, height, bytes.iter().map(|&b| b as f64).collect())
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(width * height, data.len());
        GrayImage { width, height, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Output bytes, rounding half-to-even.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round_ties_even().clamp(0.0, MAX_INTENSITY) as u8)
            .collect()
    }
}

/// Encodes a canonical P5 file.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

/// Decodes a binary PGM from memory.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, RasterError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(RasterError::MalformedHeader("missing P5 magic"));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(RasterError::MalformedHeader("zero dimension"));
    }
    match maxval {
        0 => return Err(RasterError::MalformedHeader("maxval 0")),
        255 => {}
        m if m > 255 => return Err(RasterError::UnsupportedBitDepth(m)),
        m => return Err(RasterError::UnsupportedMaxval(m)),
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(RasterError::MalformedHeader("no whitespace after maxval")),
    }
    let expected = (width as usize)
        .checked_mul(height as usize)
        .ok_or(RasterError::MalformedHeader("dimensions overflow"))?;
    let found = bytes.len() - pos;
    if found < expected {
        return Err(RasterError::Truncated { expected, found });
    }
    GrayImage::from_bytes(width as usize, height as usize, &bytes[pos..pos + expected])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<u32, RasterError> {
    // skip whitespace and comments
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(RasterError::MalformedHeader(missing(what))),
        }
    }
    let start = *pos;
    let mut value: u32 = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as u32))
            .ok_or(RasterError::MalformedHeader("header number overflows"))?;
        *pos += 1;
    }
    if *pos == start {
        return Err(RasterError::MalformedHeader(missing(what)));
    }
    Ok(value)
}

fn missing(what: &'static str) -> &'static str {
    match what {
        "width" => "missing or non-numeric width",
        "height" => "missing or non-numeric height",
        _ => "missing or non-numeric maxval",
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage, RasterError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| RasterError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes)
}

pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|source| RasterError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// One painted rectangle of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectSpec {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub intensity: f64,
}

impl RectSpec {
    pub fn new(x: usize, y: usize, width: usize, height: usize, intensity: f64) -> Self {
        RectSpec {
            x,
            y,
            width,
            height,
            intensity,
        }
    }
}

/// Paints `rects` over a uniform background, later rectangles on top, then adds
/// uniform integer noise in `[-noise, +noise]` clamped to [0, 255].
///
/// Noise comes from ChaCha8 seeded with `seed`, one draw per pixel in raster
/// order, so the output depends only on the arguments. The returned label map
/// labels each 4-connected area painted by the same rectangle (background
/// included) as its own region.
pub fn synth_scene(
    width: usize,
    height: usize,
    rects: &[RectSpec],
    background: f64,
    noise: u32,
    seed: u64,
) -> Result<(GrayImage, LabelMap), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::InvalidImage(format!(
            "dimensions must be positive, got {width}x{height}"
        )));
    }
    let in_range = |v: f64| (0.0..=MAX_INTENSITY).contains(&v);
    if !in_range(background) {
        return Err(RasterError::InvalidImage(format!(
            "background {background} outside [0, 255]"
        )));
    }
    let mut painter = vec![0u32; width * height];
    let mut values = vec![background; width * height];
    for (i, r) in rects.iter().enumerate() {
        let fits = r.width > 0
            && r.height > 0
            && r.x.checked_add(r.width).is_some_and(|e| e <= width)
            && r.y.checked_add(r.height).is_some_and(|e| e <= height);
        if !fits {
            return Err(RasterError::RectOutOfBounds {
                index: i,
                x: r.x,
                y: r.y,
                w: r.width,
                h: r.height,
                width,
                height,
            });
        }
        if !in_range(r.intensity) {
            return Err(RasterError::InvalidImage(format!(
                "rectangle {i} intensity {} outside [0, 255]",
                r.intensity
            )));
        }
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                painter[y * width + x] = i as u32 + 1;
                values[y * width + x] = r.intensity;
            }
        }
    }
    if noise > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = noise as i64;
        for v in values.iter_mut() {
            let offset = rng.random_range(-amp..=amp) as f64;
            *v = (*v + offset).clamp(0.0, MAX_INTENSITY);
        }
    }
    let truth = connected_components(&LabelMap::from_raw(width, height, painter));
    Ok((GrayImage::from_raw_unchecked(width, height, values), truth))
}
