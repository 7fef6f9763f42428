//! Procedural two-style corpus.
//!
//! Both styles share one content distribution (sky over grassland with a
//! soft horizon and random palette). Style A ("ruled") adds buildings drawn
//! with dark axis-aligned ruled lines on a paper tint. Style B ("wash") adds
//! soft low-frequency ink blobs and has almost no sharp edges.

use super::image::Image;
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    Ruled,
    Wash,
}

impl Style {
    pub fn prompt(self) -> &'static str {
        match self {
            Style::Ruled => "ruled style",
            Style::Wash => "wash style",
        }
    }

    pub fn artist(self) -> &'static str {
        match self {
            Style::Ruled => "ruled",
            Style::Wash => "wash",
        }
    }
}

struct Canvas {
    res: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, y: usize, x: usize, color: [f32; 3], alpha: f32) {
        let p = &mut self.px[y * self.res + x];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn fill_rect(&mut self, y0: isize, y1: isize, x0: isize, x1: isize, color: [f32; 3]) {
        let r = self.res as isize;
        for y in y0.max(0)..y1.min(r) {
            for x in x0.max(0)..x1.min(r) {
                self.px[(y * r + x) as usize] = color;
            }
        }
    }

    fn into_image(self) -> Image {
        let res = self.res;
        let pixels = self.px.into_iter().flatten().collect();
        Image::from_clamped(res, res, 3, pixels).expect("square rgb canvas")
    }
}

fn jitter(base: [f32; 3], spread: f32, rng: &mut Rng) -> [f32; 3] {
    base.map(|c| (c + rng.uniform_range(-spread, spread)).clamp(0.0, 1.0))
}

fn landscape(res: usize, rng: &mut Rng) -> (Canvas, usize) {
    let sky = jitter([0.70, 0.74, 0.80], 0.08, rng);
    let ground = jitter([0.45, 0.62, 0.36], 0.08, rng);
    let horizon = rng.uniform_range(0.45, 0.65) * res as f32;
    let soft = 0.06 * res as f32;
    let mut px = Vec::with_capacity(res * res);
    for y in 0..res {
        let t = ((y as f32 - horizon) / soft).clamp(-1.0, 1.0) * 0.5 + 0.5;
        let t = t * t * (3.0 - 2.0 * t);
        let row = [0, 1, 2].map(|c| sky[c] * (1.0 - t) + ground[c] * t);
        px.extend(std::iter::repeat(row).take(res));
    }
    (Canvas { res, px }, horizon as usize)
}

fn ruled(canvas: &mut Canvas, horizon: usize, rng: &mut Rng) {
    let res = canvas.res as isize;
    let paper = jitter([0.93, 0.88, 0.76], 0.03, rng);
    for y in 0..canvas.res {
        for x in 0..canvas.res {
            canvas.blend(y, x, paper, 0.55);
        }
    }
    let ink = jitter([0.16, 0.12, 0.10], 0.04, rng);
    let unit = (res / 32).max(1);
    for _ in 0..1 + rng.below(3) {
        let width = (rng.uniform_range(0.2, 0.45) * res as f32) as isize;
        let height = (rng.uniform_range(0.25, 0.45) * res as f32) as isize;
        let x0 = rng.below((res - width).max(1) as usize) as isize;
        let base = horizon as isize + rng.below((res as usize / 6).max(1)) as isize;
        let top = base - height;
        let wall = jitter([0.80, 0.66, 0.50], 0.05, rng);
        canvas.fill_rect(top, base, x0, x0 + width, wall);
        // outline
        canvas.fill_rect(top, top + unit, x0 - 2 * unit, x0 + width + 2 * unit, ink);
        canvas.fill_rect(base - unit, base, x0, x0 + width, ink);
        canvas.fill_rect(top, base, x0, x0 + unit, ink);
        canvas.fill_rect(top, base, x0 + width - unit, x0 + width, ink);
        // pillars and floors
        let pillar_gap = (3 + rng.below(3)) as isize * unit;
        let mut x = x0 + pillar_gap;
        while x < x0 + width - unit {
            canvas.fill_rect(top, base, x, x + unit, ink);
            x += pillar_gap;
        }
        let floor_gap = (4 + rng.below(3)) as isize * unit;
        let mut y = top + floor_gap;
        while y < base - unit {
            canvas.fill_rect(y, y + unit, x0, x0 + width, ink);
            y += floor_gap;
        }
    }
}

fn wash(canvas: &mut Canvas, rng: &mut Rng) {
    let res = canvas.res as f32;
    let tint = jitter([0.82, 0.84, 0.80], 0.04, rng);
    for y in 0..canvas.res {
        for x in 0..canvas.res {
            canvas.blend(y, x, tint, 0.35);
        }
    }
    for _ in 0..3 + rng.below(4) {
        let ink = jitter([0.28, 0.32, 0.30], 0.06, rng);
        let cy = rng.uniform_range(0.1, 0.9) * res;
        let cx = rng.uniform_range(0.0, 1.0) * res;
        let sigma = rng.uniform_range(0.08, 0.2) * res;
        let strength = rng.uniform_range(0.3, 0.6);
        for y in 0..canvas.res {
            for x in 0..canvas.res {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let a = strength * (-d2 / (2.0 * sigma * sigma)).exp();
                canvas.blend(y, x, ink, a);
            }
        }
    }
}

/// One procedurally generated `res`×`res` RGB image of the given style.
pub fn synth_image(style: Style, res: usize, rng: &mut Rng) -> Image {
    let (mut canvas, horizon) = landscape(res, rng);
    match style {
        Style::Ruled => ruled(&mut canvas, horizon, rng),
        Style::Wash => wash(&mut canvas, rng),
    }
    canvas.into_image()
}

pub fn synth_images(style: Style, n: usize, res: usize, rng: &mut Rng) -> Vec<Image> {
    (0..n).map(|_| synth_image(style, res, rng)).collect()
}
