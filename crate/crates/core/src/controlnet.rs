//! ControlNet-style grafting: a locked base denoiser plus a trainable copy
//! of its encoder, joined through zero-initialized 1×1 convolutions.
//!
//! The branch sees `x + Z(hint(c))` where `hint` is a small conv stack over
//! the edge map, and every branch output (one per skip junction plus the
//! middle block) passes through its own zero convolution before being added
//! into the base's up path.

use crate::diffusion::{
    diffusion_loss, noise_batch, Denoiser, DenoiserConfig, Encoder, NoisePredictor, NoiseSchedule,
    Residuals, TextEmbedder, TrainBatch,
};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::tensor::{Conv2dSpec, Optimizer, ParamId, ParamStore, Rng, Tape, Var};

/// Width of the edge-map encoder.
pub const HINT_CHANNELS: usize = 8;

#[derive(Clone, Debug)]
pub struct ControlBranch {
    pub store: ParamStore,
    /// Same layout as the base encoder; its ids index into `store`.
    pub encoder: Encoder,
    pub hint: Vec<Conv2d>,
    pub input_zero: Conv2d,
    pub skip_zeros: Vec<Conv2d>,
    pub mid_zero: Conv2d,
    copied: usize,
}

impl ControlBranch {
    /// Every zero-convolution parameter (input, skip and middle).
    pub fn zero_conv_params(&self) -> Vec<ParamId> {
        let mut ids = self.input_zero.params();
        for z in &self.skip_zeros {
            ids.extend(z.params());
        }
        ids.extend(self.mid_zero.params());
        ids
    }

    /// Parameters copied from the base encoder, in base order.
    pub fn copied_len(&self) -> usize {
        self.copied
    }
}

#[derive(Clone, Debug)]
pub struct GraftedDenoiser {
    pub base: Denoiser,
    pub branch: ControlBranch,
}

/// Locks `base` and attaches a trainable copy of its encoder.
pub fn graft(mut base: Denoiser, rng: &mut Rng) -> GraftedDenoiser {
    let mut store = base.enc_store.clone();
    store.set_locked_all(false);
    store.set_frozen(false);
    let copied = store.len();
    base.set_locked(true);

    let chans = base.config.level_channels();
    let mut hint = Vec::new();
    let mut prev = 1;
    for (i, c) in [HINT_CHANNELS, HINT_CHANNELS, chans[0]]
        .into_iter()
        .enumerate()
    {
        hint.push(Conv2d::new(
            &mut store,
            &format!("ctrl.hint{i}"),
            prev,
            c,
            3,
            Conv2dSpec::SAME3,
            true,
            rng,
        ));
        prev = c;
    }
    let input_zero = Conv2d::zeroed(&mut store, "ctrl.zero_in", chans[0], chans[0]);
    let skip_zeros = chans
        .iter()
        .enumerate()
        .map(|(l, &c)| Conv2d::zeroed(&mut store, &format!("ctrl.zero_skip{l}"), c, c))
        .collect();
    let last = *chans.last().expect("validated config");
    let mid_zero = Conv2d::zeroed(&mut store, "ctrl.zero_mid", last, last);
    GraftedDenoiser {
        branch: ControlBranch {
            store,
            encoder: base.encoder.clone(),
            hint,
            input_zero,
            skip_zeros,
            mid_zero,
            copied,
        },
        base,
    }
}

impl GraftedDenoiser {
    /// y = F(x; θ) with Z(F(x + Z(c; θ_z1); θ_c); θ_z2) added at every
    /// junction. Without a control map this is the base forward pass.
    pub fn forward(
        &self,
        tape: &Tape,
        z_t: &Var,
        t: &[usize],
        c_t: &Var,
        control: Option<&Var>,
    ) -> Result<Var> {
        self.base.check_input(z_t, t, c_t)?;
        let temb = self.base.embed(tape, t, c_t)?;
        let Some(control) = control else {
            return self.base.forward_with(tape, z_t, &temb, None);
        };
        let s = z_t.shape();
        if control.shape() != [s[0], 1, s[2], s[3]] {
            return Err(Error::shape(
                "controlnet",
                format!("control {:?} does not match input {s:?}", control.shape()),
            ));
        }
        let br = &self.branch;
        let mut h = control.clone();
        for conv in &br.hint {
            h = conv.forward(tape, &br.store, &h)?;
            h = tape.silu(&h)?;
        }
        let injected = br.input_zero.forward(tape, &br.store, &h)?;
        let feats = br
            .encoder
            .forward(tape, &br.store, z_t, &temb, Some(&injected))?;
        let skips = feats
            .skips
            .iter()
            .zip(&br.skip_zeros)
            .map(|(f, z)| z.forward(tape, &br.store, f))
            .collect::<Result<_>>()?;
        let mid = br.mid_zero.forward(tape, &br.store, &feats.mid)?;
        self.base
            .forward_with(tape, z_t, &temb, Some(&Residuals { skips, mid }))
    }

    fn check_base_untouched(&self) -> Result<()> {
        for p in self.base.enc_store.iter().chain(self.base.dec_store.iter()) {
            if !p.locked {
                return Err(Error::InvalidArgument(format!(
                    "base parameter `{}` is not locked",
                    p.name
                )));
            }
            if p.grad.is_some() {
                return Err(Error::LockedGradient(p.name.clone()));
            }
        }
        Ok(())
    }
}

impl NoisePredictor for GraftedDenoiser {
    fn config(&self) -> &DenoiserConfig {
        &self.base.config
    }

    fn predict_noise(
        &self,
        tape: &Tape,
        z_t: &Var,
        t: &[usize],
        c_t: &Var,
        control: Option<&Var>,
    ) -> Result<Var> {
        self.forward(tape, z_t, t, c_t, control)
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.branch.store]
    }
}

/// One fine-tuning micro-step: the diffusion objective through the grafted
/// model, gradients into the branch only, then the optimizer. The text
/// embedder belongs to the base and is locked here.
pub fn finetune_step(
    g: &mut GraftedDenoiser,
    embedder: &mut TextEmbedder,
    schedule: &NoiseSchedule,
    batch: &TrainBatch,
    optimizer: &mut Optimizer,
    rng: &mut Rng,
) -> Result<f32> {
    embedder.store.set_locked_all(true);
    g.check_base_untouched()?;
    let noised = noise_batch(&batch.images, schedule, rng)?;
    let tape = Tape::new();
    let loss = diffusion_loss(&tape, &*g, embedder, batch, &noised)?;
    let value = loss.value().item()?;
    tape.backward(&loss, &mut [&mut g.branch.store])?;
    g.check_base_untouched()?;
    optimizer.micro_step(&mut [&mut g.branch.store])?;
    Ok(value)
}
