use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, IndexMap};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// A value produced during a forward pass, optionally tracked by a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.value.data()
    }

    /// Whether gradients will flow back through this value.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}

type BackFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackFn>,
    param: Option<(u64, usize)>,
}

/// Gradients of the loss with respect to tape leaves created by [`Tape::leaf`].
#[derive(Debug, Default)]
pub struct LeafGrads {
    grads: HashMap<usize, Vec<f32>>,
}

impl LeafGrads {
    pub fn get(&self, var: &Var) -> Option<&[f32]> {
        var.node
            .and_then(|id| self.grads.get(&id))
            .map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const SAME3: Conv2dSpec = Conv2dSpec {
        stride: 1,
        padding: 1,
    };
    pub const POINTWISE: Conv2dSpec = Conv2dSpec {
        stride: 1,
        padding: 0,
    };

    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

/// Records differentiable ops between one forward pass and its backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn expect_rank(op: &'static str, v: &Var, rank: usize) -> Result<()> {
    if v.shape().len() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got {:?}", v.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            enabled: true,
        }
    }

    /// A tape that records nothing; intermediate values are freed as soon as
    /// their `Var`s drop.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            enabled: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    /// A free input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        let node = self.enabled.then(|| {
            self.push(Node {
                parents: Vec::new(),
                backward: None,
                param: None,
            })
        });
        Var {
            value: Rc::new(value),
            node,
        }
    }

    /// Reads a parameter; locked or frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let value = Rc::clone(&store.get(id).value);
        let node = (self.enabled && store.tracks(id)).then(|| {
            self.push(Node {
                parents: Vec::new(),
                backward: None,
                param: Some((store.uid(), id.index())),
            })
        });
        Var { value, node }
    }

    fn record<F>(&self, op: &'static str, value: Tensor, inputs: &[&Var], back: F) -> Result<Var>
    where
        F: Fn(&[f32]) -> Vec<Option<Vec<f32>>> + 'static,
    {
        finite(op, value.data())?;
        let tracked = self.enabled && inputs.iter().any(|v| v.tracked());
        let node = tracked.then(|| {
            self.push(Node {
                parents: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(back)),
                param: None,
            })
        });
        Ok(Var {
            value: Rc::new(value),
            node,
        })
    }

    /// Runs reverse accumulation from a scalar `loss`, depositing parameter
    /// gradients into the matching stores. Consumes the tape.
    pub fn backward(self, loss: &Var, stores: &mut [&mut ParamStore]) -> Result<LeafGrads> {
        if loss.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss.shape()),
            ));
        }
        let mut out = LeafGrads::default();
        let Some(root) = loss.node else {
            return Ok(out);
        };
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some((uid, index)) = node.param {
                let store = stores.iter_mut().find(|s| s.uid() == uid).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "backward reached a parameter store (uid {uid}) that was not supplied"
                    ))
                })?;
                store.accumulate_grad(index, &g)?;
                continue;
            }
            let Some(back) = &node.backward else {
                out.grads.insert(i, g);
                continue;
            };
            for (parent, pg) in node.parents.iter().zip(back(&g)) {
                let (Some(p), Some(pg)) = (parent, pg) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &self,
        op: &'static str,
        a: &Var,
        b: &Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<(Tensor, IndexMap, IndexMap)> {
        let shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(
                op,
                format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
            )
        })?;
        let map_a = IndexMap::new(a.shape(), &shape);
        let map_b = IndexMap::new(b.shape(), &shape);
        let (ad, bd) = (a.data(), b.data());
        let data = match (&map_a, &map_b) {
            (IndexMap::Identity, IndexMap::Identity) => {
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            }
            (IndexMap::Identity, IndexMap::Repeat(r)) => {
                let f = &f;
                ad.chunks(*r)
                    .zip(bd)
                    .flat_map(|(c, &y)| c.iter().map(move |&x| f(x, y)))
                    .collect()
            }
            _ => (0..shape.iter().product::<usize>())
                .map(|k| f(ad[map_a.get(k)], bd[map_b.get(k)]))
                .collect(),
        };
        Ok((Tensor::new(shape, data)?, map_a, map_b))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let (out, map_a, map_b) = self.binary("add", a, b, |x, y| x + y)?;
        let (na, nb) = (a.value.numel(), b.value.numel());
        let (ta, tb) = (a.tracked(), b.tracked());
        self.record("add", out, &[a, b], move |g| {
            vec![
                ta.then(|| map_a.reduce(g, na)),
                tb.then(|| map_b.reduce(g, nb)),
            ]
        })
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let (out, map_a, map_b) = self.binary("sub", a, b, |x, y| x - y)?;
        let (na, nb) = (a.value.numel(), b.value.numel());
        let (ta, tb) = (a.tracked(), b.tracked());
        self.record("sub", out, &[a, b], move |g| {
            vec![
                ta.then(|| map_a.reduce(g, na)),
                tb.then(|| {
                    let mut r = map_b.reduce(g, nb);
                    r.iter_mut().for_each(|v| *v = -*v);
                    r
                }),
            ]
        })
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (out, map_a, map_b) = self.binary("mul", a, b, |x, y| x * y)?;
        let (va, vb) = (Rc::clone(&a.value), Rc::clone(&b.value));
        let (ta, tb) = (a.tracked(), b.tracked());
        self.record("mul", out, &[a, b], move |g| {
            let (ad, bd) = (va.data(), vb.data());
            let ga = ta.then(|| {
                let mut acc = vec![0.0f32; ad.len()];
                for (k, gi) in g.iter().enumerate() {
                    acc[map_a.get(k)] += gi * bd[map_b.get(k)];
                }
                acc
            });
            let gb = tb.then(|| {
                let mut acc = vec![0.0f32; bd.len()];
                for (k, gi) in g.iter().enumerate() {
                    acc[map_b.get(k)] += gi * ad[map_a.get(k)];
                }
                acc
            });
            vec![ga, gb]
        })
    }

    /// `a * factor`.
    pub fn scale(&self, a: &Var, factor: f32) -> Result<Var> {
        let out = a.value.map(|v| v * factor);
        self.record("scale", out, &[a], move |g| {
            vec![Some(g.iter().map(|v| v * factor).collect())]
        })
    }

    // ---- linear algebra -----------------------------------------------------

    /// [m,k] · [k,n] → [m,n].
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        expect_rank("matmul", a, 2)?;
        expect_rank("matmul", b, 2)?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", a.shape(), b.shape()),
            ));
        }
        let mut c = vec![0.0f32; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        let out = Tensor::new([m, n], c)?;
        let (va, vb) = (Rc::clone(&a.value), Rc::clone(&b.value));
        let (ta, tb) = (a.tracked(), b.tracked());
        self.record("matmul", out, &[a, b], move |g| {
            let ga = ta.then(|| {
                let mut ga = vec![0.0f32; m * k];
                kernels::gemm(m, n, k, g, false, vb.data(), true, &mut ga, 0.0);
                ga
            });
            let gb = tb.then(|| {
                let mut gb = vec![0.0f32; k * n];
                kernels::gemm(k, m, n, va.data(), true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        })
    }

    /// 2-D convolution over NCHW input with a square [c_out, c_in, k, k]
    /// kernel, zero padding and optional per-channel bias.
    pub fn conv2d(
        &self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", weight, 4)?;
        let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, wc_in, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wc_in != c_in || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with kernel {:?}", x.shape(), weight.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} output channels", b.shape()),
                ));
            }
        }
        let geom = ConvGeom::new(c_in, h, w, kh, spec.stride, spec.padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "kernel {kh} stride {} pad {} on {h}x{w}",
                    spec.stride, spec.padding
                ),
            )
        })?;
        let out = kernels::conv2d_forward(
            x.data(),
            n,
            weight.data(),
            bias.map(|b| b.data()),
            c_out,
            &geom,
        );
        let out = Tensor::new([n, c_out, geom.h_out, geom.w_out], out)?;
        let (vx, vw) = (Rc::clone(&x.value), Rc::clone(&weight.value));
        let (tx, tw, tb) = (
            x.tracked(),
            weight.tracked(),
            bias.is_some_and(Var::tracked),
        );
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.record("conv2d", out, &inputs, move |g| {
            let (dx, dw, db) =
                kernels::conv2d_backward(vx.data(), n, vw.data(), c_out, &geom, g, tx, tw, tb);
            vec![dx, dw, db]
        })
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(
        &self,
        op: &'static str,
        x: &Var,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Var> {
        let out = x.value.map(f);
        if !(self.enabled && x.tracked()) {
            return self.record(op, out, &[x], |_| {
                unreachable!("untracked op has no backward")
            });
        }
        let vx = Rc::clone(&x.value);
        let vy = Rc::new(out.clone());
        self.record(op, out, &[x], move |g| {
            let d = g
                .iter()
                .zip(vx.data())
                .zip(vy.data())
                .map(|((gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(d)]
        })
    }

    pub fn relu(&self, x: &Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| v.max(0.0),
            |xi, _| if xi > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn leaky_relu(&self, x: &Var, slope: f32) -> Result<Var> {
        self.unary(
            "leaky_relu",
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |xi, _| if xi > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn silu(&self, x: &Var) -> Result<Var> {
        self.unary(
            "silu",
            x,
            |v| v / (1.0 + (-v).exp()),
            |xi, _| {
                let s = 1.0 / (1.0 + (-xi).exp());
                s * (1.0 + xi * (1.0 - s))
            },
        )
    }

    pub fn tanh(&self, x: &Var) -> Result<Var> {
        self.unary("tanh", x, f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, x: &Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            x,
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&self, x: &Var, floor: f32) -> Result<Var> {
        self.unary(
            "log_clamped",
            x,
            move |v| v.max(floor).ln(),
            move |xi, _| if xi > floor { 1.0 / xi } else { 0.0 },
        )
    }

    // ---- shape ops ----------------------------------------------------------

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x
            .value
            .reshape(shape.to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())))?;
        self.record("reshape", out, &[x], |g| vec![Some(g.to_vec())])
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&self, xs: &[&Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} of rank {rank}"),
            ));
        }
        for v in xs {
            let s = v.shape();
            if s.len() != rank
                || s[..axis] != first.shape()[..axis]
                || s[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", first.shape(), s),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = xs.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &wd) in xs.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = xs.iter().map(|v| v.shape()[axis]).sum();
        let out = Tensor::new(shape, data)?;
        let tracked: Vec<bool> = xs.iter().map(|v| v.tracked()).collect();
        self.record("concat", out, xs, move |g| {
            let mut grads: Vec<Option<Vec<f32>>> = tracked
                .iter()
                .zip(&widths)
                .map(|(&t, &wd)| t.then(|| Vec::with_capacity(outer * wd)))
                .collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gv, &wd) in grads.iter_mut().zip(&widths) {
                    if let Some(gv) = gv {
                        gv.extend_from_slice(&g[off..off + wd]);
                    }
                    off += wd;
                }
            }
            grads
        })
    }

    fn spatial(op: &'static str, x: &Var, even: bool) -> Result<(usize, usize, usize, usize)> {
        expect_rank(op, x, 4)?;
        let s = x.shape();
        if even && (s[2] % 2 != 0 || s[3] % 2 != 0) {
            return Err(Error::shape(op, format!("odd spatial size {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// 2×2 average pooling, stride 2.
    pub fn avgpool2(&self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = Self::spatial("avgpool2", x, true)?;
        let out = Tensor::new(
            [n, c, h / 2, w / 2],
            kernels::avgpool2(x.data(), n * c, h, w),
        )?;
        self.record("avgpool2", out, &[x], move |g| {
            vec![Some(kernels::avgpool2_backward(g, n * c, h, w))]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = Self::spatial("nearest_upsample2", x, false)?;
        let out = Tensor::new(
            [n, c, 2 * h, 2 * w],
            kernels::upsample2(x.data(), n * c, h, w),
        )?;
        self.record("nearest_upsample2", out, &[x], move |g| {
            vec![Some(kernels::upsample2_backward(g, n * c, h, w))]
        })
    }

    /// Group normalization of NCHW input with per-channel affine `gamma`, `beta`.
    pub fn group_norm(
        &self,
        x: &Var,
        groups: usize,
        gamma: &Var,
        beta: &Var,
        eps: f32,
    ) -> Result<Var> {
        let (n, c, h, w) = Self::spatial("group_norm", x, false)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels into {groups} groups"),
            ));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "affine {:?}/{:?} for {c} channels",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let hw = h * w;
        let cpg = c / groups;
        let stats = kernels::group_norm_stats(x.data(), n, c, hw, groups, eps);
        let xd = x.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let s = i * groups + ch / cpg;
                let (m, r) = (stats.mean[s], stats.inv_std[s]);
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xd[j] - m) * r;
                    xhat[j] = xh;
                    out[j] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        let vg = Rc::clone(&gamma.value);
        let (tx, tg, tb) = (x.tracked(), gamma.tracked(), beta.tracked());
        self.record("group_norm", out, &[x, gamma, beta], move |g| {
            let gd = vg.data();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let (mut sg, mut sb) = (0.0f64, 0.0f64);
                    for j in base..base + hw {
                        sg += (g[j] * xhat[j]) as f64;
                        sb += g[j] as f64;
                    }
                    dgamma[ch] += sg as f32;
                    dbeta[ch] += sb as f32;
                }
            }
            let dx = tx.then(|| {
                let mut dx = vec![0.0f32; g.len()];
                let len = (cpg * hw) as f64;
                for i in 0..n {
                    for grp in 0..groups {
                        let r = stats.inv_std[i * groups + grp];
                        let start = (i * c + grp * cpg) * hw;
                        let (mut m1, mut m2) = (0.0f64, 0.0f64);
                        for j in start..start + cpg * hw {
                            let dxh = (g[j] * gd[(j / hw) % c]) as f64;
                            m1 += dxh;
                            m2 += dxh * xhat[j] as f64;
                        }
                        let (m1, m2) = ((m1 / len) as f32, (m2 / len) as f32);
                        for j in start..start + cpg * hw {
                            let dxh = g[j] * gd[(j / hw) % c];
                            dx[j] = r * (dxh - m1 - xhat[j] * m2);
                        }
                    }
                }
                dx
            });
            vec![dx, tg.then_some(dgamma), tb.then_some(dbeta)]
        })
    }

    // ---- reductions and losses ----------------------------------------------

    pub fn sum(&self, x: &Var) -> Result<Var> {
        let s = x.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let n = x.value.numel();
        self.record("sum", Tensor::scalar(s), &[x], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self, x: &Var) -> Result<Var> {
        let n = x.value.numel();
        let s = (x.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        self.record("mean", Tensor::scalar(s), &[x], move |g| {
            vec![Some(vec![g[0] / n as f32; n])]
        })
    }

    /// Mean squared error, averaged over all elements.
    pub fn mse(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mse", a, b)?;
        let n = a.value.numel();
        let diff: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let s = diff.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / n as f64;
        let (ta, tb) = (a.tracked(), b.tracked());
        self.record("mse", Tensor::scalar(s as f32), &[a, b], move |g| {
            let k = 2.0 * g[0] / n as f32;
            let ga: Vec<f32> = diff.iter().map(|d| k * d).collect();
            let gb = tb.then(|| ga.iter().map(|v| -v).collect());
            vec![ta.then_some(ga), gb]
        })
    }

    /// Mean absolute error, averaged over all elements.
    pub fn l1(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("l1", a, b)?;
        let n = a.value.numel();
        let diff: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let s = diff.iter().map(|&d| d.abs() as f64).sum::<f64>() / n as f64;
        let (ta, tb) = (a.tracked(), b.tracked());
        self.record("l1", Tensor::scalar(s as f32), &[a, b], move |g| {
            let k = g[0] / n as f32;
            let ga: Vec<f32> = diff
                .iter()
                .map(|&d| {
                    if d > 0.0 {
                        k
                    } else if d < 0.0 {
                        -k
                    } else {
                        0.0
                    }
                })
                .collect();
            let gb = tb.then(|| ga.iter().map(|v| -v).collect());
            vec![ta.then_some(ga), gb]
        })
    }
}
