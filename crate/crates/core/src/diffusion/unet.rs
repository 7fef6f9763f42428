//! Tiny conditional U-Net ε_θ(z_t, t, c_t).
//!
//! Parameters are split across two stores: `enc_store` holds the input
//! convolution, the down path and the middle block (the part a control
//! branch copies), `dec_store` holds the time/text embedding MLP and the up
//! path.

use crate::error::{Error, Result};
use crate::nn::{default_groups, Conv2d, GroupNorm, Linear};
use crate::tensor::{Conv2dSpec, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// One multiplier per level; the level count is its length.
    pub channel_mults: Vec<usize>,
    pub time_dim: usize,
    pub text_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            in_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            time_dim: 64,
            text_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() == 0 || self.base_channels == 0 || self.channel_mults.contains(&0) {
            return Err(Error::Config(
                "denoiser needs at least one level and nonzero channels".into(),
            ));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 || self.text_dim == 0 {
            return Err(Error::Config(
                "time_dim must be even and nonzero, text_dim nonzero".into(),
            ));
        }
        let step = 1usize << (self.levels() - 1);
        if self.resolution == 0 || self.resolution % step != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^(levels-1) = {step}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// GN → SiLU → conv, time injection, GN → SiLU → conv, residual.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    c_out: usize,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, default_groups(c_in)),
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                c_in,
                c_out,
                3,
                Conv2dSpec::SAME3,
                true,
                rng,
            ),
            time: Linear::new(store, &format!("{name}.time"), time_dim, c_out, rng),
            norm2: GroupNorm::new(
                store,
                &format!("{name}.norm2"),
                c_out,
                default_groups(c_out),
            ),
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                c_out,
                c_out,
                3,
                Conv2dSpec::SAME3,
                true,
                rng,
            ),
            skip: (c_in != c_out).then(|| {
                Conv2d::new(
                    store,
                    &format!("{name}.skip"),
                    c_in,
                    c_out,
                    1,
                    Conv2dSpec::POINTWISE,
                    true,
                    rng,
                )
            }),
            c_out,
        }
    }

    /// `temb` is the already activated [batch, time_dim] embedding.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var, temb: &Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = tape.silu(&h)?;
        let h = self.conv1.forward(tape, store, &h)?;
        let t = self.time.forward(tape, store, temb)?;
        let t = tape.reshape(&t, &[x.shape()[0], self.c_out, 1, 1])?;
        let h = tape.add(&h, &t)?;
        let h = self.norm2.forward(tape, store, &h)?;
        let h = tape.silu(&h)?;
        let h = self.conv2.forward(tape, store, &h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, store, x)?,
            None => x.clone(),
        };
        tape.add(&h, &skip)
    }
}

/// Per-level skip activations plus the middle-block output.
pub struct EncoderFeatures {
    pub skips: Vec<Var>,
    pub mid: Var,
}

/// Input convolution, down path and middle block.
#[derive(Clone, Debug)]
pub struct Encoder {
    input: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        let chans = cfg.level_channels();
        let input = Conv2d::new(
            store,
            "enc.input",
            cfg.in_channels,
            chans[0],
            3,
            Conv2dSpec::SAME3,
            true,
            rng,
        );
        let mut prev = chans[0];
        let down = chans
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let b = ResBlock::new(store, &format!("enc.down{l}"), prev, c, cfg.time_dim, rng);
                prev = c;
                b
            })
            .collect();
        let mid = ResBlock::new(store, "enc.mid", prev, prev, cfg.time_dim, rng);
        Self { input, down, mid }
    }

    /// `input_residual`, when given, is added to the input-convolution
    /// output before the down path.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &Var,
        temb: &Var,
        input_residual: Option<&Var>,
    ) -> Result<EncoderFeatures> {
        let mut h = self.input.forward(tape, store, x)?;
        if let Some(r) = input_residual {
            h = tape.add(&h, r)?;
        }
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, block) in self.down.iter().enumerate() {
            h = block.forward(tape, store, &h, temb)?;
            skips.push(h.clone());
            if l + 1 < self.down.len() {
                h = tape.avgpool2(&h)?;
            }
        }
        let mid = self.mid.forward(tape, store, &h, temb)?;
        Ok(EncoderFeatures { skips, mid })
    }
}

/// Embedding MLP and up path.
#[derive(Clone, Debug)]
pub struct Decoder {
    time1: Linear,
    time2: Linear,
    text: Linear,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    time_dim: usize,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        let td = cfg.time_dim;
        let chans = cfg.level_channels();
        let time1 = Linear::new(store, "dec.time1", td, td, rng);
        let time2 = Linear::new(store, "dec.time2", td, td, rng);
        let text = Linear::new(store, "dec.text", cfg.text_dim, td, rng);
        let mut prev = *chans.last().expect("validated");
        let up = (0..chans.len())
            .rev()
            .map(|l| {
                let b = ResBlock::new(
                    store,
                    &format!("dec.up{l}"),
                    prev + chans[l],
                    chans[l],
                    td,
                    rng,
                );
                prev = chans[l];
                b
            })
            .collect();
        let out_norm = GroupNorm::new(store, "dec.out_norm", chans[0], default_groups(chans[0]));
        let out_conv = Conv2d::new(
            store,
            "dec.out",
            chans[0],
            cfg.in_channels,
            3,
            Conv2dSpec::SAME3,
            true,
            rng,
        );
        Self {
            time1,
            time2,
            text,
            up,
            out_norm,
            out_conv,
            time_dim: td,
        }
    }

    /// SiLU(MLP(sinusoid(t)) + W·c_t), shape [batch, time_dim].
    pub fn embed(&self, tape: &Tape, store: &ParamStore, t: &[usize], c_t: &Var) -> Result<Var> {
        let sin = tape.constant(timestep_embedding(t, self.time_dim));
        let h = self.time1.forward(tape, store, &sin)?;
        let h = tape.silu(&h)?;
        let h = self.time2.forward(tape, store, &h)?;
        let text = self.text.forward(tape, store, c_t)?;
        let h = tape.add(&h, &text)?;
        tape.silu(&h)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        feats: &EncoderFeatures,
        temb: &Var,
    ) -> Result<Var> {
        let mut h = feats.mid.clone();
        let levels = feats.skips.len();
        for (i, block) in self.up.iter().enumerate() {
            let l = levels - 1 - i;
            let cat = tape.concat(&[&h, &feats.skips[l]], 1)?;
            h = block.forward(tape, store, &cat, temb)?;
            if l > 0 {
                h = tape.upsample2(&h)?;
            }
        }
        let h = self.out_norm.forward(tape, store, &h)?;
        let h = tape.silu(&h)?;
        self.out_conv.forward(tape, store, &h)
    }
}

/// Sinusoidal features: first half sin, second half cos, frequencies
/// 10000^(-i/half).
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs =
            (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * step as f64);
        let args: Vec<f64> = freqs.collect();
        data.extend(args.iter().map(|a| a.sin() as f32));
        data.extend(args.iter().map(|a| a.cos() as f32));
    }
    Tensor::new([t.len(), dim], data).expect("consistent dims")
}

/// Additive contributions at the skip junctions and the middle block.
pub struct Residuals {
    pub skips: Vec<Var>,
    pub mid: Var,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub enc_store: ParamStore,
    pub dec_store: ParamStore,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut enc_store = ParamStore::new();
        let mut dec_store = ParamStore::new();
        let encoder = Encoder::new(&mut enc_store, &config, rng);
        let decoder = Decoder::new(&mut dec_store, &config, rng);
        Ok(Self {
            config,
            encoder,
            decoder,
            enc_store,
            dec_store,
        })
    }

    pub fn check_input(&self, z_t: &Var, t: &[usize], c_t: &Var) -> Result<()> {
        let cfg = &self.config;
        let s = z_t.shape();
        let step = 1usize << (cfg.levels() - 1);
        if s.len() != 4
            || s[1] != cfg.in_channels
            || s[2] == 0
            || s[2] % step != 0
            || s[3] % step != 0
        {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "input {s:?} needs [batch, {}, H, W] with H, W divisible by {step}",
                    cfg.in_channels
                ),
            ));
        }
        if t.len() != s[0] || c_t.shape() != [s[0], cfg.text_dim] {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "batch {} with {} timesteps and text {:?}",
                    s[0],
                    t.len(),
                    c_t.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn embed(&self, tape: &Tape, t: &[usize], c_t: &Var) -> Result<Var> {
        self.decoder.embed(tape, &self.dec_store, t, c_t)
    }

    /// Full forward pass; `residuals` are added to the encoder outputs
    /// before the up path consumes them.
    pub fn forward_with(
        &self,
        tape: &Tape,
        z_t: &Var,
        temb: &Var,
        residuals: Option<&Residuals>,
    ) -> Result<Var> {
        let mut feats = self
            .encoder
            .forward(tape, &self.enc_store, z_t, temb, None)?;
        if let Some(r) = residuals {
            if r.skips.len() != feats.skips.len() {
                return Err(Error::shape(
                    "denoiser",
                    format!(
                        "{} residuals for {} skip junctions",
                        r.skips.len(),
                        feats.skips.len()
                    ),
                ));
            }
            for (s, add) in feats.skips.iter_mut().zip(&r.skips) {
                *s = tape.add(s, add)?;
            }
            feats.mid = tape.add(&feats.mid, &r.mid)?;
        }
        self.decoder.forward(tape, &self.dec_store, &feats, temb)
    }

    pub fn forward(&self, tape: &Tape, z_t: &Var, t: &[usize], c_t: &Var) -> Result<Var> {
        self.check_input(z_t, t, c_t)?;
        let temb = self.embed(tape, t, c_t)?;
        self.forward_with(tape, z_t, &temb, None)
    }

    pub fn set_locked(&mut self, locked: bool) {
        self.enc_store.set_locked_all(locked);
        self.dec_store.set_locked_all(locked);
    }

    pub fn num_scalars(&self) -> usize {
        self.enc_store.num_scalars() + self.dec_store.num_scalars()
    }
}
