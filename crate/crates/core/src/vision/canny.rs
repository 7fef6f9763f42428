//! Canny edge detection: Gaussian blur, Sobel gradients, non-maximum
//! suppression over four quantized directions, double threshold and
//! 8-connected hysteresis.

use std::collections::VecDeque;
use std::path::Path;

use super::image::{load_image, save_image, Image};
use crate::error::{Error, Result};

pub const GAUSSIAN_SIGMA: f64 = 1.4;
pub const GAUSSIAN_SIZE: usize = 5;

/// Largest Sobel magnitude a `[0, 1]` image can produce; magnitudes are
/// divided by it so thresholds live in `[0, 1]`.
pub const SOBEL_MAX: f64 = 4.0 * std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    pub low: f32,
    pub high: f32,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            low: 0.1,
            high: 0.2,
        }
    }
}

impl CannyParams {
    pub fn new(low: f32, high: f32) -> Result<Self> {
        if !(0.0 <= low && low <= high && high <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "canny thresholds need 0 <= low <= high <= 1, got low={low} high={high}"
            )));
        }
        Ok(Self { low, high })
    }
}

/// Binary edge image; every pixel is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl EdgeMap {
    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), height * width);
        Self {
            height,
            width,
            pixels: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn is_edge(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] == 1.0
    }

    /// Fraction of pixels marked as edges.
    pub fn density(&self) -> f64 {
        self.pixels.iter().filter(|&&v| v == 1.0).count() as f64 / self.pixels.len() as f64
    }

    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, 1, self.pixels.clone()).expect("binary pixels")
    }

    /// Any one-channel image binarized at 0.5.
    pub fn from_image(image: &Image) -> Result<Self> {
        if image.channels() != 1 {
            return Err(Error::InvalidArgument(format!(
                "edge map must be single-channel, got {} channels",
                image.channels()
            )));
        }
        let mask: Vec<bool> = image.pixels().iter().map(|&v| v >= 0.5).collect();
        Ok(Self::from_mask(image.height(), image.width(), &mask))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_image(&self.to_image(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_image(&load_image(path)?)
    }
}

pub fn gaussian_kernel() -> [[f64; GAUSSIAN_SIZE]; GAUSSIAN_SIZE] {
    let r = (GAUSSIAN_SIZE / 2) as i64;
    let mut k = [[0.0; GAUSSIAN_SIZE]; GAUSSIAN_SIZE];
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
            k[(dy + r) as usize][(dx + r) as usize] = v;
            total += v;
        }
    }
    for row in &mut k {
        for v in row {
            *v /= total;
        }
    }
    k
}

/// Correlates `plane` with an odd square kernel, clamping coordinates at
/// the border.
fn correlate<const K: usize>(
    plane: &[f64],
    h: usize,
    w: usize,
    kernel: &[[f64; K]; K],
) -> Vec<f64> {
    let r = (K / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ky as isize - r, h);
                for (kx, &kv) in row.iter().enumerate() {
                    let sx = clamp(x as isize + kx as isize - r, w);
                    acc += kv * plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Neighbour offsets (before, after) along the quantized gradient direction.
fn direction_offsets(gx: f64, gy: f64) -> [(isize, isize); 2] {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        [(0, -1), (0, 1)]
    } else if angle < 67.5 {
        [(-1, -1), (1, 1)]
    } else if angle < 112.5 {
        [(-1, 0), (1, 0)]
    } else {
        [(-1, 1), (1, -1)]
    }
}

pub fn canny(image: &Image, params: CannyParams) -> Result<EdgeMap> {
    let params = CannyParams::new(params.low, params.high)?;
    let (h, w) = (image.height(), image.width());
    let gray = image.luma();
    let blurred = correlate(&gray, h, w, &gaussian_kernel());
    let gx = correlate(&blurred, h, w, &SOBEL_X);
    let gy = correlate(&blurred, h, w, &SOBEL_Y);
    let magnitude: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b).sqrt() / SOBEL_MAX)
        .collect();

    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            magnitude[y as usize * w + x as usize]
        }
    };
    // Ties along the direction keep the first pixel only, so a symmetric
    // ridge yields a one-pixel line.
    let mut thinned = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = magnitude[i];
            let [(by, bx), (ay, ax)] = direction_offsets(gx[i], gy[i]);
            let (yi, xi) = (y as isize, x as isize);
            if m > at(yi + by, xi + bx) && m >= at(yi + ay, xi + ax) {
                thinned[i] = m;
            }
        }
    }

    let (low, high) = (params.low as f64, params.high as f64);
    let mut edge = vec![false; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thinned.iter().enumerate() {
        if m >= high && m > 0.0 {
            edge[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thinned[j] >= low && thinned[j] > 0.0 {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(EdgeMap::from_mask(h, w, &edge))
}
