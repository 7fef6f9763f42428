//! Minimal line-plot rasterizer for metric curves.

use crate::error::{Error, Result};
use crate::vision::Image;

pub const PLOT_WIDTH: usize = 480;
pub const PLOT_HEIGHT: usize = 320;
const MARGIN: usize = 24;

/// Draws `points` (x, y) as a polyline inside a framed box; the axes span
/// the data range. Non-finite points are skipped.
pub fn line_plot(points: &[(f64, f64)]) -> Result<Image> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let (w, h) = (PLOT_WIDTH, PLOT_HEIGHT);
    let mut px = vec![1.0f32; w * h * 3];
    let mut put = |x: usize, y: usize, rgb: [f32; 3]| {
        if x < w && y < h {
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
        }
    };
    let frame = [0.3, 0.3, 0.3];
    for x in MARGIN..w - MARGIN {
        put(x, MARGIN, frame);
        put(x, h - MARGIN, frame);
    }
    for y in MARGIN..=h - MARGIN {
        put(MARGIN, y, frame);
        put(w - MARGIN, y, frame);
    }
    let (x0, x1) = pts
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let inner_w = (w - 2 * MARGIN) as f64;
    let inner_h = (h - 2 * MARGIN) as f64;
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN as f64 + (x - x0) / span(x0, x1) * inner_w,
            (h - MARGIN) as f64 - (y - y0) / span(y0, y1) * inner_h,
        )
    };
    let line = [0.1, 0.3, 0.8];
    let mut prev = to_px(pts[0]);
    put(prev.0.round() as usize, prev.1.round() as usize, line);
    for &p in &pts[1..] {
        let cur = to_px(p);
        let n = ((cur.0 - prev.0).abs().max((cur.1 - prev.1).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let x = prev.0 + (cur.0 - prev.0) * t;
            let y = prev.1 + (cur.1 - prev.1) * t;
            put(x.round() as usize, y.round() as usize, line);
        }
        prev = cur;
    }
    Image::new(h, w, 3, px)
}
