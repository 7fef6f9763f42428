//! Small layer building blocks shared by the diffusion U-Net, the control
//! branch, the CycleGAN networks and the FID feature extractor. Each layer
//! only stores [`ParamId`]s; the weights live in whichever store is passed
//! to `forward`.

use crate::error::Result;
use crate::tensor::{Conv2dSpec, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add_kaiming(
            format!("{name}.weight"),
            [c_out, c_in, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([c_out])));
        Self { weight, bias, spec }
    }

    /// 1×1 convolution with all-zero weight and bias.
    pub fn zeroed(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([c_out, c_in, 1, 1]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([c_out])));
        Self {
            weight,
            bias,
            spec: Conv2dSpec::POINTWISE,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, &w, b.as_ref(), self.spec)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Dense layer on [batch, features] input; weight stored as [in, out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            weight: store.add_kaiming(format!("{name}.weight"), [d_in, d_out], d_in, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d_out])),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, &w)?;
        tape.add(&y, &b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Largest group count ≤ 8 that divides `channels` and leaves at least
/// four channels per group. A one-channel group would erase each channel's
/// spatial mean, and with it the image's global colour.
pub fn default_groups(channels: usize) -> usize {
    (1..=8)
        .rev()
        .find(|g| channels % g == 0 && channels / g >= 4)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, self.groups, &g, &b, 1e-5)
    }
}

/// Stacks CHW tensors into one NCHW batch tensor.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let parts: Vec<Tensor> = items
        .iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(s)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::cat_batch(&refs)
}
