//! Images in `[0, 1]`, HWC layout, with binary PPM/PGM as the canonical file
//! format and PNG as an import/export convenience.
//!
//! Canonical byte layout: ASCII header `P6\n<width> <height>\n255\n` (or `P5`
//! for one channel) followed by `height * width * channels` bytes, row-major,
//! where byte `b` stands for the value `b / 255`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} with {channels} channels"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width}x{channels} needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image clamping every value into `[0, 1]`.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut pixels: Vec<f32>,
    ) -> Result<Self> {
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(height, width, channels, pixels)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Luma (0.299 R + 0.587 G + 0.114 B) in f64; one-channel images pass through.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.iter().map(|&v| v as f64).collect();
        }
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            channels: 3,
            pixels,
            ..*self
        }
    }

    /// CHW tensor with values mapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed_chw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = 2.0 * self.pixels[(y * w + x) * c + ch] - 1.0;
                }
            }
        }
        Tensor::new([c, h, w], data).expect("consistent dims")
    }

    /// Inverse of [`Image::to_signed_chw`]; values are clamped to `[-1, 1]`
    /// first. Accepts [c,h,w] or [1,c,h,w].
    pub fn from_signed_chw(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        let (c, h, w) = match s {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => return Err(Error::shape("from_signed_chw", format!("{s:?}"))),
        };
        let d = t.data();
        let mut pixels = vec![0.0f32; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = d[(ch * h + y) * w + x].clamp(-1.0, 1.0);
                    pixels[(y * w + x) * c + ch] = (v + 1.0) * 0.5;
                }
            }
        }
        Image::new(h, w, c, pixels)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a PPM/PGM file, or PNG when the extension says so.
pub fn load_image(path: &Path) -> Result<Image> {
    if is_png(path) {
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        return Image::new(h as usize, w as usize, 3, pixels);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|msg| Error::format(path, msg))
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic `{other}` (expected P5 or P6)")),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| format!("bad header field `{s}`: {e}"))
    };
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let n = width * height * channels;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format!("payload truncated: need {n} bytes"))?;
    let pixels = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, channels, pixels).map_err(|e| e.to_string())
}

pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| to_byte(v)));
    out
}

/// Writes PPM/PGM (PNG when the extension is `.png`).
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    if is_png(path) {
        let rgb = image.to_rgb();
        let bytes: Vec<u8> = rgb.pixels.iter().map(|&v| to_byte(v)).collect();
        return image::save_buffer(
            path,
            &bytes,
            image.width as u32,
            image.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::format(path, e.to_string()));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pnm(image))
        .map_err(|e| Error::io(path, e))
}

/// Bilinear resampling to `target`×`target` with half-pixel centres and
/// edge clamping.
pub fn resize(image: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(Error::InvalidArgument("resize target must be >= 1".into()));
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    if h == target && w == target {
        return Ok(image.clone());
    }
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut pixels = Vec::with_capacity(target * target * c);
    for y in 0..target {
        let (y0, y1, fy) = taps(y, sy, h);
        for x in 0..target {
            let (x0, x1, fx) = taps(x, sx, w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| image.pixels[(yy * w + xx) * c + ch] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Image::from_clamped(target, target, c, pixels)
}
