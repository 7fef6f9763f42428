//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::cyclegan::CycleGanConfig;
use crate::diffusion::DenoiserConfig;
use crate::error::{Error, Result};
use crate::fid::{EvalConfig, ReferenceMode};
use crate::tensor::LrSchedule;
use crate::vision::CannyParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedulerKind {
    CosineWithRestarts,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub lr_scheduler: LrSchedulerKind,
    pub lr_warmup_steps: u64,
    pub lr_num_cycles: u64,
    pub gradient_accumulation_steps: u64,
    pub resolution: usize,
    pub use_ema: bool,
    /// Optimizer updates per training run.
    pub total_steps: u64,
    pub batch_size: usize,
    pub prompt_dropout: f64,
    pub guidance_scale: f32,
    pub diffusion_steps: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_dim: usize,
    pub text_dim: usize,
    pub lambda_cycle: f32,
    pub cyclegan_learning_rate: f64,
    pub cyclegan_channels: usize,
    pub cyclegan_res_blocks: usize,
    pub canny_low: f32,
    pub canny_high: f32,
    pub checkpoint_every: u64,
    pub fid_repeats: usize,
    pub fid_samples: usize,
    pub fid_reference: usize,
    pub fid_mode: ReferenceMode,
    pub manifest: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        let c = CycleGanConfig::default();
        Self {
            seed: 0,
            learning_rate: 5e-6,
            lr_scheduler: LrSchedulerKind::CosineWithRestarts,
            lr_warmup_steps: 100,
            lr_num_cycles: 1,
            gradient_accumulation_steps: 5,
            resolution: d.resolution,
            use_ema: false,
            total_steps: 2000,
            batch_size: 4,
            prompt_dropout: 0.5,
            guidance_scale: 3.0,
            diffusion_steps: 50,
            base_channels: d.base_channels,
            channel_mults: d.channel_mults,
            time_dim: d.time_dim,
            text_dim: d.text_dim,
            lambda_cycle: c.lambda_cycle,
            cyclegan_learning_rate: c.learning_rate,
            cyclegan_channels: c.gen_channels,
            cyclegan_res_blocks: c.res_blocks,
            canny_low: 0.1,
            canny_high: 0.2,
            checkpoint_every: 500,
            fid_repeats: 10,
            fid_samples: 64,
            fid_reference: 64,
            fid_mode: ReferenceMode::Set,
            manifest: None,
            run_dir: None,
            base_checkpoint: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "learning_rate",
        "lr_scheduler",
        "lr_warmup_steps",
        "lr_num_cycles",
        "gradient_accumulation_steps",
        "resolution",
        "use_ema",
        "total_steps",
        "batch_size",
        "prompt_dropout",
        "guidance_scale",
        "diffusion_steps",
        "base_channels",
        "channel_mults",
        "time_dim",
        "text_dim",
        "lambda_cycle",
        "cyclegan_learning_rate",
        "cyclegan_channels",
        "cyclegan_res_blocks",
        "canny_low",
        "canny_high",
        "checkpoint_every",
        "fid_repeats",
        "fid_samples",
        "fid_reference",
        "fid_mode",
        "manifest",
        "run_dir",
        "base_checkpoint",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_scheduler" => {
                self.lr_scheduler = match v {
                    "cosine_with_restarts" => LrSchedulerKind::CosineWithRestarts,
                    "constant" => LrSchedulerKind::Constant,
                    _ => {
                        return Err(Error::Config(format!(
                            "`lr_scheduler`: unknown scheduler `{v}`"
                        )))
                    }
                }
            }
            "lr_warmup_steps" => self.lr_warmup_steps = parse(key, v)?,
            "lr_num_cycles" => self.lr_num_cycles = parse(key, v)?,
            "gradient_accumulation_steps" => self.gradient_accumulation_steps = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "use_ema" => self.use_ema = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "prompt_dropout" => self.prompt_dropout = parse(key, v)?,
            "guidance_scale" => self.guidance_scale = parse(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "channel_mults" => {
                self.channel_mults = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?
            }
            "time_dim" => self.time_dim = parse(key, v)?,
            "text_dim" => self.text_dim = parse(key, v)?,
            "lambda_cycle" => self.lambda_cycle = parse(key, v)?,
            "cyclegan_learning_rate" => self.cyclegan_learning_rate = parse(key, v)?,
            "cyclegan_channels" => self.cyclegan_channels = parse(key, v)?,
            "cyclegan_res_blocks" => self.cyclegan_res_blocks = parse(key, v)?,
            "canny_low" => self.canny_low = parse(key, v)?,
            "canny_high" => self.canny_high = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "fid_repeats" => self.fid_repeats = parse(key, v)?,
            "fid_samples" => self.fid_samples = parse(key, v)?,
            "fid_reference" => self.fid_reference = parse(key, v)?,
            "fid_mode" => {
                self.fid_mode = match v {
                    "set" => ReferenceMode::Set,
                    "single_image" => ReferenceMode::SingleImage,
                    _ => return Err(Error::Config(format!("`fid_mode`: unknown mode `{v}`"))),
                }
            }
            "manifest" => self.manifest = opt_path(v),
            "run_dir" => self.run_dir = opt_path(v),
            "base_checkpoint" => self.base_checkpoint = opt_path(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lr_scheduler" => match self.lr_scheduler {
                LrSchedulerKind::CosineWithRestarts => "cosine_with_restarts".into(),
                LrSchedulerKind::Constant => "constant".into(),
            },
            "lr_warmup_steps" => self.lr_warmup_steps.to_string(),
            "lr_num_cycles" => self.lr_num_cycles.to_string(),
            "gradient_accumulation_steps" => self.gradient_accumulation_steps.to_string(),
            "resolution" => self.resolution.to_string(),
            "use_ema" => self.use_ema.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "prompt_dropout" => self.prompt_dropout.to_string(),
            "guidance_scale" => self.guidance_scale.to_string(),
            "diffusion_steps" => self.diffusion_steps.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "channel_mults" => self
                .channel_mults
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "time_dim" => self.time_dim.to_string(),
            "text_dim" => self.text_dim.to_string(),
            "lambda_cycle" => self.lambda_cycle.to_string(),
            "cyclegan_learning_rate" => self.cyclegan_learning_rate.to_string(),
            "cyclegan_channels" => self.cyclegan_channels.to_string(),
            "cyclegan_res_blocks" => self.cyclegan_res_blocks.to_string(),
            "canny_low" => self.canny_low.to_string(),
            "canny_high" => self.canny_high.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "fid_repeats" => self.fid_repeats.to_string(),
            "fid_samples" => self.fid_samples.to_string(),
            "fid_reference" => self.fid_reference.to_string(),
            "fid_mode" => match self.fid_mode {
                ReferenceMode::Set => "set".into(),
                ReferenceMode::SingleImage => "single_image".into(),
            },
            "manifest" => show_path(&self.manifest),
            "run_dir" => show_path(&self.run_dir),
            "base_checkpoint" => show_path(&self.base_checkpoint),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    /// Every key, one `key = value` line each, in a fixed order.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_ema {
            return Err(Error::Config("use_ema = true is not supported".into()));
        }
        if self.batch_size == 0 || self.gradient_accumulation_steps == 0 || self.lr_num_cycles == 0
        {
            return Err(Error::Config(
                "batch_size, gradient_accumulation_steps and lr_num_cycles must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(Error::Config(format!(
                "prompt_dropout {} outside [0, 1]",
                self.prompt_dropout
            )));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance_scale {} must be >= 0",
                self.guidance_scale
            )));
        }
        if self.checkpoint_every == 0 || self.fid_repeats == 0 || self.fid_samples < 2 {
            return Err(Error::Config(
                "checkpoint_every and fid_repeats must be >= 1, fid_samples >= 2".into(),
            ));
        }
        if self.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be divisible by 4",
                self.resolution
            )));
        }
        self.canny()?;
        self.denoiser().validate()?;
        self.lr_schedule()?;
        Ok(())
    }

    /// Copies the model-shape keys from another config (used when a run
    /// builds on a checkpoint trained with different settings).
    pub fn adopt_architecture(&mut self, other: &RunConfig) {
        self.resolution = other.resolution;
        self.base_channels = other.base_channels;
        self.channel_mults = other.channel_mults.clone();
        self.time_dim = other.time_dim;
        self.text_dim = other.text_dim;
        self.diffusion_steps = other.diffusion_steps;
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            resolution: self.resolution,
            in_channels: 3,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            time_dim: self.time_dim,
            text_dim: self.text_dim,
        }
    }

    pub fn cyclegan(&self) -> CycleGanConfig {
        CycleGanConfig {
            gen_channels: self.cyclegan_channels,
            res_blocks: self.cyclegan_res_blocks,
            disc_channels: self.cyclegan_channels,
            lambda_cycle: self.lambda_cycle,
            learning_rate: self.cyclegan_learning_rate,
            ..CycleGanConfig::default()
        }
    }

    pub fn canny(&self) -> Result<CannyParams> {
        CannyParams::new(self.canny_low, self.canny_high)
    }

    /// Warmup, then `lr_num_cycles` cosine cycles over the remaining steps.
    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        match self.lr_scheduler {
            LrSchedulerKind::Constant => {
                let mut s = LrSchedule::constant(self.learning_rate)?;
                s.warmup_steps = self.lr_warmup_steps;
                Ok(s)
            }
            LrSchedulerKind::CosineWithRestarts => {
                let after = self.total_steps.saturating_sub(self.lr_warmup_steps);
                let cycle = (after / self.lr_num_cycles).max(1);
                LrSchedule::new(
                    self.learning_rate,
                    self.lr_warmup_steps,
                    cycle,
                    self.lr_num_cycles - 1,
                )
            }
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            repeats: self.fid_repeats,
            reference_size: self.fid_reference,
            mode: self.fid_mode,
        }
    }
}
