//! Straight-line reference Canny used as a test oracle. It shares only the
//! numeric conventions (f64 luma, σ = 1.4 5×5 Gaussian with replicated
//! border, Sobel, magnitude / 4√2, four-sector NMS, 8-connected hysteresis).

use jiehua_core::vision::Image;

fn padded(plane: &[f64], h: usize, w: usize, r: usize) -> (Vec<f64>, usize) {
    let pw = w + 2 * r;
    let mut out = vec![0.0; (h + 2 * r) * pw];
    for y in 0..h + 2 * r {
        for x in 0..pw {
            let sy = (y as isize - r as isize).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize - r as isize).clamp(0, w as isize - 1) as usize;
            out[y * pw + x] = plane[sy * w + sx];
        }
    }
    (out, pw)
}

fn filter(plane: &[f64], h: usize, w: usize, k: &[Vec<f64>]) -> Vec<f64> {
    let r = k.len() / 2;
    let (p, pw) = padded(plane, h, w, r);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, &kv) in row.iter().enumerate() {
                    s += kv * p[(y + i) * pw + x + j];
                }
            }
            out.push(s);
        }
    }
    out
}

pub fn reference_canny(img: &Image, low: f64, high: f64) -> Vec<bool> {
    let (h, w) = (img.height(), img.width());
    let gray: Vec<f64> = (0..h * w)
        .map(|i| {
            if img.channels() == 1 {
                img.pixels()[i] as f64
            } else {
                let p = &img.pixels()[3 * i..3 * i + 3];
                0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
            }
        })
        .collect();

    let mut g = vec![vec![0.0; 5]; 5];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 2.0, j as f64 - 2.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.4 * 1.4)).exp();
            total += *v;
        }
    }
    for v in g.iter_mut().flatten() {
        *v /= total;
    }
    let blurred = filter(&gray, h, w, &g);
    let sx = vec![
        vec![-1.0, 0.0, 1.0],
        vec![-2.0, 0.0, 2.0],
        vec![-1.0, 0.0, 1.0],
    ];
    let sy = vec![
        vec![-1.0, -2.0, -1.0],
        vec![0.0, 0.0, 0.0],
        vec![1.0, 2.0, 1.0],
    ];
    let gx = filter(&blurred, h, w, &sx);
    let gy = filter(&blurred, h, w, &sy);
    let norm = 4.0 * 2f64.sqrt();
    let mag: Vec<f64> = (0..h * w)
        .map(|i| (gx[i] * gx[i] + gy[i] * gy[i]).sqrt() / norm)
        .collect();

    let m = |y: isize, x: isize| -> f64 {
        if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
            mag[y as usize * w + x as usize]
        } else {
            0.0
        }
    };
    let mut nms = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let mut a = gy[i].atan2(gx[i]).to_degrees();
            if a < 0.0 {
                a += 180.0;
            }
            let (before, after) = if a < 22.5 || a >= 157.5 {
                (m(y, x - 1), m(y, x + 1))
            } else if a < 67.5 {
                (m(y - 1, x - 1), m(y + 1, x + 1))
            } else if a < 112.5 {
                (m(y - 1, x), m(y + 1, x))
            } else {
                (m(y - 1, x + 1), m(y + 1, x - 1))
            };
            if mag[i] > before && mag[i] >= after {
                nms[i] = mag[i];
            }
        }
    }

    // Depth-first hysteresis from every strong pixel.
    let mut edge = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w)
        .filter(|&i| nms[i] > 0.0 && nms[i] >= high)
        .collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if !(0..h as isize).contains(&ny) || !(0..w as isize).contains(&nx) {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && nms[j] > 0.0 && nms[j] >= low {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edge
}
