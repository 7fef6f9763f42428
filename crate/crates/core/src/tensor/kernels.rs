//! Raw numeric kernels behind the tape ops. Everything here works on flat
//! row-major slices; shape validation happens in the tape layer.

/// `c = beta * c + a · b`, with `a` stored as m×k (or k×m when `trans_a`)
/// and `b` stored as k×n (or n×k when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe exactly the slices checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output columns `lo..hi` whose tap at kernel column `kx` lands inside
    /// the input row.
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let lo = self
            .pad
            .saturating_sub(kx)
            .div_ceil(self.stride)
            .min(self.w_out);
        let hi = (self.w + self.pad)
            .saturating_sub(kx)
            .div_ceil(self.stride)
            .clamp(lo, self.w_out);
        (lo, hi)
    }

    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, no padding: the image already is its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_columns(kx);
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi]
                            .iter_mut()
                            .zip(src[start..].iter().step_by(g.stride))
                        {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_columns(kx);
                    if lo == hi {
                        continue;
                    }
                    let start = lo * g.stride + kx - g.pad;
                    let row = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(row) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Forward convolution for a whole batch. `out` has shape [n, c_out, h_out, w_out].
pub(crate) fn conv2d_forward(
    x: &[f32],
    n: usize,
    weight: &[f32],
    bias: Option<&[f32]>,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<f32> {
    let in_per = g.c_in * g.h * g.w;
    let out_per = c_out * g.col_cols();
    let mut out = vec![0.0f32; n * out_per];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; g.col_rows() * g.col_cols()]
    };
    for i in 0..n {
        let xi = &x[i * in_per..(i + 1) * in_per];
        let oi = &mut out[i * out_per..(i + 1) * out_per];
        if let Some(b) = bias {
            for (co, chunk) in oi.chunks_mut(g.col_cols()).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let colm: &[f32] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut col);
            &col
        };
        gemm(
            c_out,
            g.col_rows(),
            g.col_cols(),
            weight,
            false,
            colm,
            false,
            oi,
            beta,
        );
    }
    out
}

/// Gradients of a batch convolution. Returns (dx, dw, db), each computed only
/// when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    weight: &[f32],
    c_out: usize,
    g: &ConvGeom,
    dy: &[f32],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let in_per = g.c_in * g.h * g.w;
    let cols = g.col_cols();
    let out_per = c_out * cols;
    let rows = g.col_rows();
    let mut dx = want_dx.then(|| vec![0.0f32; n * in_per]);
    let mut dw = want_dw.then(|| vec![0.0f32; c_out * rows]);
    let mut db = want_db.then(|| vec![0.0f32; c_out]);
    let mut col = vec![0.0f32; if g.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![
        0.0f32;
        if want_dx && !g.is_pointwise() {
            rows * cols
        } else {
            0
        }
    ];
    for i in 0..n {
        let dyi = &dy[i * out_per..(i + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyi.chunks(cols).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &x[i * in_per..(i + 1) * in_per];
            let colm: &[f32] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut col);
                &col
            };
            // dw += dy_i · col_iᵀ
            gemm(c_out, cols, rows, dyi, false, colm, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_per..(i + 1) * in_per];
            if g.is_pointwise() {
                gemm(rows, c_out, cols, weight, true, dyi, false, dxi, 0.0);
            } else {
                gemm(rows, c_out, cols, weight, true, dyi, false, &mut dcol, 0.0);
                col2im(&dcol, g, dxi);
            }
        }
    }
    (dx, dw, db)
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

/// Maps every output index to the flat index of `shape` under broadcasting.
pub(crate) fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if shape == out {
        return (0..n).collect();
    }
    let strides = broadcast_strides(shape, out);
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let mut flat = 0usize;
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(flat);
        for d in (0..nd).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// Flat source index for every output element of a broadcast.
pub(crate) enum IndexMap {
    Identity,
    /// Each source element covers a contiguous run of this many outputs.
    Repeat(usize),
    Map(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(shape: &[usize], out: &[usize]) -> Self {
        if shape == out {
            return IndexMap::Identity;
        }
        let pad = out.len().saturating_sub(shape.len());
        let dim = |d: usize| if d < pad { 1 } else { shape[d - pad] };
        // Leading dims match exactly and trailing dims are all broadcast.
        let split = (0..out.len())
            .find(|&d| dim(d) != out[d])
            .unwrap_or(out.len());
        let r: usize = out[split..].iter().product();
        if r > 0 && shape.len() <= out.len() && (split..out.len()).all(|d| dim(d) == 1) {
            return IndexMap::Repeat(r);
        }
        IndexMap::Map(broadcast_index(shape, out))
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Repeat(r) => i / r,
            IndexMap::Map(m) => m[i],
        }
    }

    /// Sums `grad` (laid out as the broadcast output) back onto a source of
    /// `len` elements.
    pub(crate) fn reduce(&self, grad: &[f32], len: usize) -> Vec<f32> {
        match self {
            IndexMap::Identity => grad.to_vec(),
            IndexMap::Repeat(r) => grad.chunks(*r).map(|c| c.iter().sum()).collect(),
            IndexMap::Map(map) => {
                let mut acc = vec![0.0f32; len];
                for (g, &i) in grad.iter().zip(map) {
                    acc[i] += g;
                }
                acc
            }
        }
    }
}

pub(crate) struct GroupNormStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Per-(sample, group) mean and inverse standard deviation.
pub(crate) fn group_norm_stats(
    x: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f32,
) -> GroupNormStats {
    let cpg = c / groups;
    let len = cpg * hw;
    let mut mean = Vec::with_capacity(n * groups);
    let mut inv_std = Vec::with_capacity(n * groups);
    for i in 0..n {
        for g in 0..groups {
            let start = (i * c + g * cpg) * hw;
            let s = &x[start..start + len];
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / len as f64;
            mean.push(m as f32);
            inv_std.push((1.0 / (var + eps as f64).sqrt()) as f32);
        }
    }
    GroupNormStats { mean, inv_std }
}

pub(crate) fn avgpool2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * src[y * wo + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
            }
        }
    }
    dx
}
