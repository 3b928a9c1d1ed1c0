//! RGBA float rasters and the handful of operations the compositor and the
//! network input pipeline need.
//!
//! Pixels are stored row-major as straight (non-premultiplied) RGBA with every
//! channel in `[0, 1]`. Interpolating operations work on premultiplied values
//! internally so that transparent pixels never bleed their color into opaque
//! neighbours, then convert back.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("scale must be positive, got {0}")]
    InvalidScale(f32),
    #[error("rotation {0} degrees outside [-180, 180]")]
    InvalidRotation(f32),
    #[error("crop {w}x{h} at ({x},{y}) outside {width}x{height} image")]
    InvalidCrop {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("unsupported image format for {0}")]
    UnsupportedFormat(PathBuf),
    #[error("cannot encode {path}: {reason}")]
    Encode { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

pub const CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RasterImage {
    /// A fully transparent black image.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, [0.0; 4])
    }

    pub fn filled(width: usize, height: usize, rgba: [f32; 4]) -> Result<Self> {
        check_dims(width, height)?;
        let data = rgba.iter().copied().cycle().take(width * height * CHANNELS).collect();
        Ok(Self { width, height, data })
    }

    /// Builds an image from a per-pixel function. Values are clamped to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 4],
    ) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| clamp01(*v)));
            }
        }
        Ok(Self { width, height, data })
    }

    /// Wraps raw RGBA data. Values are clamped to `[0, 1]`; NaN becomes 0.
    pub fn from_raw(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height * CHANNELS {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        data.iter_mut().for_each(|v| *v = clamp01(*v));
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 4] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgba: [f32; 4]) {
        let i = (y * self.width + x) * CHANNELS;
        for c in 0..CHANNELS {
            self.data[i + c] = clamp01(rgba[c]);
        }
    }

    pub fn alpha(&self, x: usize, y: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + 3]
    }

    /// Mean over all channels and pixels.
    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Sum of alpha over all pixels.
    pub fn alpha_mass(&self) -> f64 {
        self.data.chunks_exact(CHANNELS).map(|p| p[3] as f64).sum()
    }

    pub fn is_opaque(&self) -> bool {
        self.data.chunks_exact(CHANNELS).all(|p| p[3] >= 1.0)
    }

    pub fn hflip(&self) -> RasterImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RasterImage> {
        check_dims(w, h)?;
        if x + w > self.width || y + h > self.height {
            return Err(ImagingError::InvalidCrop {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Ok(RasterImage { width: w, height: h, data })
    }

    /// Planar RGB (`3 x H x W`) copy of the color channels, alpha dropped.
    pub fn to_planar_rgb(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        out
    }

    /// Axis-aligned bounds of pixels with alpha above `threshold`, if any.
    pub fn alpha_bounds(&self, threshold: f32) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.alpha(x, y) > threshold {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoundingBox {
            x: x0 as f64,
            y: y0 as f64,
            w: (x1 - x0 + 1) as f64,
            h: (y1 - y0 + 1) as f64,
        })
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        Err(ImagingError::InvalidDimensions { width, height })
    } else {
        Ok(())
    }
}

#[inline]
fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Axis-aligned box with top-left origin, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Error, PartialEq)]
#[error("box extents must be finite and at least 1 pixel, got {w}x{h}")]
pub struct InvalidBox {
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> std::result::Result<Self, InvalidBox> {
        if !(x.is_finite() && y.is_finite() && w >= 1.0 && h >= 1.0 && w.is_finite() && h.is_finite())
        {
            return Err(InvalidBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = InvalidBox;

    fn try_from(v: [f64; 4]) -> std::result::Result<Self, InvalidBox> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

// ---------------------------------------------------------------------------
// Resampling

/// Premultiplied RGBA at integer tap `(x, y)`; taps outside the image are
/// transparent black.
#[inline]
fn premul_tap(img: &RasterImage, x: isize, y: isize) -> [f32; 4] {
    if x < 0 || y < 0 || x >= img.width as isize || y >= img.height as isize {
        return [0.0; 4];
    }
    let p = img.pixel(x as usize, y as usize);
    [p[0] * p[3], p[1] * p[3], p[2] * p[3], p[3]]
}

#[inline]
fn lerp4(a: [f32; 4], b: [f32; 4], t: f32) -> [f32; 4] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
        a[3] + (b[3] - a[3]) * t,
    ]
}

#[inline]
fn unpremultiply(p: [f32; 4]) -> [f32; 4] {
    let a = clamp01(p[3]);
    if a <= 0.0 {
        return [0.0; 4];
    }
    [clamp01(p[0] / a), clamp01(p[1] / a), clamp01(p[2] / a), a]
}

/// Bilinear sample at continuous sample coordinates (pixel `i` has its center
/// at `i`), with out-of-range taps contributing transparent black.
fn sample_bilinear(img: &RasterImage, u: f32, v: f32) -> [f32; 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    if fx == 0.0 && fy == 0.0 {
        // exact tap; skip the premultiply round trip so copies are bit-exact
        if x0 >= 0 && y0 >= 0 && (x0 as usize) < img.width && (y0 as usize) < img.height {
            return img.pixel(x0 as usize, y0 as usize);
        }
        return [0.0; 4];
    }
    let top = lerp4(premul_tap(img, x0, y0), premul_tap(img, x0 + 1, y0), fx);
    let bottom = lerp4(premul_tap(img, x0, y0 + 1), premul_tap(img, x0 + 1, y0 + 1), fx);
    unpremultiply(lerp4(top, bottom, fy))
}

/// Resizes with bilinear interpolation using half-pixel-centered sampling:
/// output pixel `i` samples the source at `(i + 0.5) * src / dst - 0.5`,
/// clamped to the source extent (edge taps replicate).
pub fn resize_bilinear(img: &RasterImage, out_w: usize, out_h: usize) -> Result<RasterImage> {
    check_dims(out_w, out_h)?;
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f32 / out_w as f32;
    let sy = img.height as f32 / out_h as f32;
    let max_x = (img.width - 1) as f32;
    let max_y = (img.height - 1) as f32;
    let mut data = Vec::with_capacity(out_w * out_h * CHANNELS);
    for oy in 0..out_h {
        let v = (((oy as f32 + 0.5) * sy) - 0.5).clamp(0.0, max_y);
        for ox in 0..out_w {
            let u = (((ox as f32 + 0.5) * sx) - 0.5).clamp(0.0, max_x);
            // clamped coordinates keep every contributing tap inside the image
            let x0 = u.floor() as usize;
            let y0 = v.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let y1 = (y0 + 1).min(img.height - 1);
            let (fx, fy) = (u - x0 as f32, v - y0 as f32);
            let tap = |x: usize, y: usize| premul_tap(img, x as isize, y as isize);
            let top = lerp4(tap(x0, y0), tap(x1, y0), fx);
            let bottom = lerp4(tap(x0, y1), tap(x1, y1), fx);
            data.extend(unpremultiply(lerp4(top, bottom, fy)));
        }
    }
    Ok(RasterImage { width: out_w, height: out_h, data })
}

/// Flips (optionally), scales uniformly, then rotates about the center.
///
/// The output canvas is the tight integer bound of the transformed source
/// rectangle. Each output pixel inverse-maps its center into the source and
/// takes four bilinear taps; taps outside the source are transparent black.
/// Positive angles rotate counter-clockwise as displayed (y axis down).
pub fn transform_cutout(
    img: &RasterImage,
    scale: f32,
    rotation_deg: f32,
    hflip: bool,
) -> Result<RasterImage> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(ImagingError::InvalidScale(scale));
    }
    if !(rotation_deg.abs() <= 180.0) {
        return Err(ImagingError::InvalidRotation(rotation_deg));
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let theta = -(rotation_deg as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let s = scale as f64;

    // extent of the transformed rectangle around the origin
    let half_w = 0.5 * s * (w * cos.abs() + h * sin.abs());
    let half_h = 0.5 * s * (w * sin.abs() + h * cos.abs());
    let out_w = ((2.0 * half_w) - 1e-6).ceil().max(1.0) as usize;
    let out_h = ((2.0 * half_h) - 1e-6).ceil().max(1.0) as usize;
    let (ocx, ocy) = (out_w as f64 / 2.0, out_h as f64 / 2.0);
    let (cx, cy) = (w / 2.0, h / 2.0);

    let mut data = Vec::with_capacity(out_w * out_h * CHANNELS);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let qx = ox as f64 + 0.5 - ocx;
            let qy = oy as f64 + 0.5 - ocy;
            // inverse rotation then inverse scale
            let px = (cos * qx + sin * qy) / s + cx;
            let py = (-sin * qx + cos * qy) / s + cy;
            let px = if hflip { w - px } else { px };
            data.extend(sample_bilinear(img, (px - 0.5) as f32, (py - 0.5) as f32));
        }
    }
    Ok(RasterImage { width: out_w, height: out_h, data })
}

/// Composites `cutout` over `canvas` with its top-left corner at `at`,
/// returning the new canvas. Cutout pixels falling outside are clipped.
pub fn alpha_composite(canvas: &RasterImage, cutout: &RasterImage, at: (i64, i64)) -> RasterImage {
    let mut out = canvas.clone();
    composite_in_place(&mut out, cutout, at);
    out
}

/// In-place form of [`alpha_composite`]: `out = a * src + (1 - a) * dst` per
/// color channel; output alpha follows the same over rule.
pub fn composite_in_place(canvas: &mut RasterImage, cutout: &RasterImage, at: (i64, i64)) {
    let (ax, ay) = at;
    for sy in 0..cutout.height {
        let ty = ay + sy as i64;
        if ty < 0 || ty >= canvas.height as i64 {
            continue;
        }
        for sx in 0..cutout.width {
            let tx = ax + sx as i64;
            if tx < 0 || tx >= canvas.width as i64 {
                continue;
            }
            let src = cutout.pixel(sx, sy);
            let a = src[3];
            if a <= 0.0 {
                continue;
            }
            let i = (ty as usize * canvas.width + tx as usize) * CHANNELS;
            let dst = &mut canvas.data[i..i + CHANNELS];
            for c in 0..3 {
                dst[c] = clamp01(a * src[c] + (1.0 - a) * dst[c]);
            }
            dst[3] = clamp01(a + (1.0 - a) * dst[3]);
        }
    }
}

// ---------------------------------------------------------------------------
// Codecs

const RAW_MAGIC: &[u8; 4] = b"SOSF";

/// Loads a PNG (8 or 16 bit, any color type) or a raw `.sosf` float image.
/// Images without alpha get alpha 1.
pub fn load(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("png") => load_png(path),
        Some("sosf") => {
            let bytes = fs::read(path).map_err(|source| ImagingError::Io {
                path: path.to_owned(),
                source,
            })?;
            decode_raw(&bytes).map_err(|reason| ImagingError::Decode {
                path: path.to_owned(),
                reason,
            })
        }
        _ => Err(ImagingError::UnsupportedFormat(path.to_owned())),
    }
}

/// Saves as 8-bit RGBA PNG or raw `.sosf` depending on the extension.
pub fn save(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_deref() {
        Some("png") => encode_png(img).map_err(|reason| ImagingError::Encode {
            path: path.to_owned(),
            reason,
        })?,
        Some("sosf") => encode_raw(img),
        _ => return Err(ImagingError::UnsupportedFormat(path.to_owned())),
    };
    fs::write(path, bytes).map_err(|source| ImagingError::Io {
        path: path.to_owned(),
        source,
    })
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

fn load_png(path: &Path) -> Result<RasterImage> {
    let bytes = fs::read(path).map_err(|source| ImagingError::Io {
        path: path.to_owned(),
        source,
    })?;
    decode_png(&bytes).map_err(|reason| ImagingError::Decode {
        path: path.to_owned(),
        reason,
    })
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<RasterImage, String> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    let rgba = decoded.to_rgba32f();
    let (w, h) = rgba.dimensions();
    RasterImage::from_raw(w as usize, h as usize, rgba.into_raw()).map_err(|e| e.to_string())
}

/// 8-bit RGBA PNG. Values are rounded to the nearest of 256 levels, so images
/// already on the `k / 255` grid round-trip exactly.
pub fn encode_png(img: &RasterImage) -> std::result::Result<Vec<u8>, String> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
    let buf = image::RgbaImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| "buffer size mismatch".to_string())?;
    let mut out = io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

/// Raw float format: `"SOSF"`, then `u32` width, height, channels (all
/// little-endian), then `width * height * channels` little-endian `f32`s,
/// row-major and channel-interleaved.
pub fn encode_raw(img: &RasterImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    for v in [img.width as u32, img.height as u32, CHANNELS as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes the raw float format. Three-channel payloads gain alpha 1.
pub fn decode_raw(bytes: &[u8]) -> std::result::Result<RasterImage, String> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| "truncated header")?;
    if &magic != RAW_MAGIC {
        return Err("bad magic".into());
    }
    let mut word = || -> std::result::Result<u32, String> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| "truncated header".to_string())?;
        Ok(u32::from_le_bytes(b))
    };
    let (w, h, c) = (word()? as usize, word()? as usize, word()? as usize);
    if c != 3 && c != 4 {
        return Err(format!("unsupported channel count {c}"));
    }
    let payload = &bytes[16..];
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c * 4))
        .ok_or("dimensions overflow")?;
    if payload.len() != expected {
        return Err(format!("payload is {} bytes, expected {expected}", payload.len()));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data = if c == 4 {
        floats
    } else {
        floats
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 1.0])
            .collect()
    };
    RasterImage::from_raw(w, h, data).map_err(|e| e.to_string())
}

/// Writes raw bytes produced by [`encode_raw`] through any writer.
pub fn write_raw(img: &RasterImage, mut w: impl Write) -> io::Result<()> {
    w.write_all(&encode_raw(img))
}
