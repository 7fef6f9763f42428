//! Model bundles and their checkpoint layout.

use std::path::Path;

use super::config::RunConfig;
use crate::controlnet::{graft, GraftedDenoiser};
use crate::cyclegan::CycleGanState;
use crate::diffusion::{Denoiser, NoiseSchedule, TextEmbedder};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Optimizer, Rng};

pub const KIND_KEY: &str = "kind";
pub const STEP_KEY: &str = "step";
pub const CONFIG_KEY: &str = "config";
pub const VOCAB_KEY: &str = "text.vocab";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    DiffusionBase,
    ControlNet,
    CycleGan,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::DiffusionBase => "diffusion-base",
            Variant::ControlNet => "controlnet",
            Variant::CycleGan => "cyclegan",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion-base" => Ok(Variant::DiffusionBase),
            "controlnet" => Ok(Variant::ControlNet),
            "cyclegan" => Ok(Variant::CycleGan),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected diffusion-base, controlnet or cyclegan)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Base text-to-image model.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub embedder: TextEmbedder,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn new(cfg: &RunConfig, prompts: &[&str], rng: &mut Rng) -> Result<Self> {
        let denoiser = Denoiser::new(cfg.denoiser(), rng)?;
        let embedder = TextEmbedder::from_prompts(prompts.iter().copied(), cfg.text_dim, rng);
        Ok(Self {
            denoiser,
            embedder,
            schedule: NoiseSchedule::scaled_default(cfg.diffusion_steps)?,
        })
    }

    fn push(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.meta
            .insert(VOCAB_KEY.into(), self.embedder.words().join(" "));
        ckpt.push_store(&format!("{prefix}enc"), &self.denoiser.enc_store);
        ckpt.push_store(&format!("{prefix}dec"), &self.denoiser.dec_store);
        ckpt.push_store("text", &self.embedder.store);
    }

    /// Rebuilds the architecture from the config stored in `ckpt`, then
    /// loads its weights.
    fn load(ckpt: &Checkpoint, cfg: &RunConfig, prefix: &str) -> Result<Self> {
        let words: Vec<String> = ckpt
            .meta
            .get(VOCAB_KEY)
            .ok_or_else(|| Error::Config("checkpoint has no text vocabulary".into()))?
            .split_whitespace()
            .map(String::from)
            .collect();
        let mut rng = Rng::new(0);
        let mut denoiser = Denoiser::new(cfg.denoiser(), &mut rng)?;
        let mut embedder = TextEmbedder::with_vocab(&words, cfg.text_dim, &mut rng);
        ckpt.load_store(&format!("{prefix}enc"), &mut denoiser.enc_store)?;
        ckpt.load_store(&format!("{prefix}dec"), &mut denoiser.dec_store)?;
        ckpt.load_store("text", &mut embedder.store)?;
        Ok(Self {
            denoiser,
            embedder,
            schedule: NoiseSchedule::scaled_default(cfg.diffusion_steps)?,
        })
    }
}

/// Locked base plus trainable control branch.
#[derive(Clone, Debug)]
pub struct ControlModel {
    pub grafted: GraftedDenoiser,
    pub embedder: TextEmbedder,
    pub schedule: NoiseSchedule,
}

impl ControlModel {
    pub fn from_base(base: DiffusionModel, rng: &mut Rng) -> Self {
        let mut embedder = base.embedder;
        embedder.store.set_locked_all(true);
        Self {
            grafted: graft(base.denoiser, rng),
            embedder,
            schedule: base.schedule,
        }
    }
}

/// Everything a checkpoint can hold.
pub enum Loaded {
    Diffusion(DiffusionModel),
    Control(ControlModel),
    CycleGan(CycleGanState),
}

/// A trainable bundle plus its optimizer and loop position.
pub struct TrainState {
    pub variant: Variant,
    pub config: RunConfig,
    pub model: Loaded,
    pub optimizer: Option<Optimizer>,
    pub rng: Rng,
    pub step: u64,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.meta
            .insert(KIND_KEY.into(), self.variant.name().into());
        ckpt.meta.insert(STEP_KEY.into(), self.step.to_string());
        ckpt.meta.insert(CONFIG_KEY.into(), self.config.to_text());
        ckpt.push_rng("rng", &self.rng);
        match &self.model {
            Loaded::Diffusion(m) => m.push(&mut ckpt, ""),
            Loaded::Control(m) => {
                ckpt.meta
                    .insert(VOCAB_KEY.into(), m.embedder.words().join(" "));
                ckpt.push_store("base.enc", &m.grafted.base.enc_store);
                ckpt.push_store("base.dec", &m.grafted.base.dec_store);
                ckpt.push_store("text", &m.embedder.store);
                ckpt.push_store("branch", &m.grafted.branch.store);
            }
            Loaded::CycleGan(s) => {
                ckpt.push_store("g", &s.g.store);
                ckpt.push_store("f", &s.f.store);
                ckpt.push_store("dx", &s.d_x.store);
                ckpt.push_store("dy", &s.d_y.store);
                ckpt.push_adam("gen_opt", &s.gen_opt.state);
                ckpt.push_adam("disc_opt", &s.disc_opt.state);
            }
        }
        if let Some(opt) = &self.optimizer {
            ckpt.push_adam("opt", &opt.state);
        }
        ckpt
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: Variant = ckpt
            .meta
            .get(KIND_KEY)
            .ok_or_else(|| Error::Config("checkpoint has no model kind".into()))?
            .parse()?;
        let mut config = RunConfig::default();
        config.apply_text(
            ckpt.meta
                .get(CONFIG_KEY)
                .ok_or_else(|| Error::Config("checkpoint has no config echo".into()))?,
        )?;
        let step = ckpt.meta_u64(STEP_KEY)?;
        let rng = ckpt.load_rng("rng")?;
        let mut optimizer = None;
        let model = match kind {
            Variant::DiffusionBase => {
                let mut opt = Optimizer::new(
                    Default::default(),
                    config.lr_schedule()?,
                    config.gradient_accumulation_steps,
                )?;
                ckpt.load_adam("opt", &mut opt.state)?;
                optimizer = Some(opt);
                Loaded::Diffusion(DiffusionModel::load(ckpt, &config, "")?)
            }
            Variant::ControlNet => {
                let base = DiffusionModel::load(ckpt, &config, "base.")?;
                let mut m = ControlModel::from_base(base, &mut Rng::new(0));
                ckpt.load_store("branch", &mut m.grafted.branch.store)?;
                let mut opt = Optimizer::new(
                    Default::default(),
                    config.lr_schedule()?,
                    config.gradient_accumulation_steps,
                )?;
                ckpt.load_adam("opt", &mut opt.state)?;
                optimizer = Some(opt);
                Loaded::Control(m)
            }
            Variant::CycleGan => {
                let mut s = CycleGanState::new(config.cyclegan(), &mut Rng::new(0))?;
                ckpt.load_store("g", &mut s.g.store)?;
                ckpt.load_store("f", &mut s.f.store)?;
                ckpt.load_store("dx", &mut s.d_x.store)?;
                ckpt.load_store("dy", &mut s.d_y.store)?;
                ckpt.load_adam("gen_opt", &mut s.gen_opt.state)?;
                ckpt.load_adam("disc_opt", &mut s.disc_opt.state)?;
                Loaded::CycleGan(s)
            }
        };
        Ok(Self {
            variant: kind,
            config,
            model,
            optimizer,
            rng,
            step,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Loads only the base model out of a diffusion-base checkpoint.
pub fn load_base(path: &Path) -> Result<DiffusionModel> {
    let state = TrainState::load(path)?;
    match state.model {
        Loaded::Diffusion(m) => Ok(m),
        _ => Err(Error::Config(format!(
            "{} is a {} checkpoint; controlnet fine-tuning needs a diffusion-base checkpoint",
            path.display(),
            state.variant
        ))),
    }
}
