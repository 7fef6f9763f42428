//! Training loops for the three variants with periodic checkpoints, a
//! tab-separated metric log and exact resume.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::models::{load_base, ControlModel, DiffusionModel, Loaded, TrainState, Variant};
use crate::controlnet::finetune_step;
use crate::cyclegan::{cyclegan_train_step, image_batch, CycleGanState};
use crate::diffusion::{diffusion_train_step, TrainBatch};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, Optimizer, Rng};
use crate::vision::{Domain, TripletSample};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const RUN_MANIFEST_FILE: &str = "run.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir
        .join("checkpoints")
        .join(format!("step_{step:06}.ckpt"))
}

/// Short stable hex digest (FNV-1a) used as a run id.
pub fn run_id(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metric_log: PathBuf,
    pub columns: Vec<&'static str>,
    pub records: Vec<StepRecord>,
}

fn columns(variant: Variant) -> Vec<&'static str> {
    match variant {
        Variant::DiffusionBase | Variant::ControlNet => vec!["loss"],
        Variant::CycleGan => vec!["disc_x", "disc_y", "gen_xy", "gen_yx", "cycle", "total_gen"],
    }
}

fn format_row(r: &StepRecord) -> String {
    let mut s = format!("{}\t{}", r.step, r.lr);
    for v in &r.values {
        write!(s, "\t{v}").expect("string write");
    }
    s
}

/// Fresh training state for `variant`.
pub fn init_state(
    variant: Variant,
    cfg: &RunConfig,
    samples: &[TripletSample],
) -> Result<TrainState> {
    cfg.validate()?;
    let mut config = cfg.clone();
    let mut rng = Rng::new(cfg.seed);
    let (model, optimizer) = match variant {
        Variant::DiffusionBase => {
            let prompts: Vec<&str> = samples.iter().map(|s| s.prompt.as_str()).collect();
            let m = DiffusionModel::new(cfg, &prompts, &mut rng)?;
            let opt = Optimizer::new(
                AdamConfig::default(),
                cfg.lr_schedule()?,
                cfg.gradient_accumulation_steps,
            )?;
            (Loaded::Diffusion(m), Some(opt))
        }
        Variant::ControlNet => {
            let path = cfg.base_checkpoint.as_ref().ok_or_else(|| {
                Error::Config(
                    "controlnet fine-tunes a trained base model: run `train diffusion-base` first, \
                     then pass its checkpoint via --base-checkpoint"
                        .into(),
                )
            })?;
            let base_state = TrainState::load(path)?;
            config.adopt_architecture(&base_state.config);
            let base = load_base(path)?;
            let m = ControlModel::from_base(base, &mut rng);
            let opt = Optimizer::new(
                AdamConfig::default(),
                cfg.lr_schedule()?,
                cfg.gradient_accumulation_steps,
            )?;
            (Loaded::Control(m), Some(opt))
        }
        Variant::CycleGan => (
            Loaded::CycleGan(CycleGanState::new(cfg.cyclegan(), &mut rng)?),
            None,
        ),
    };
    Ok(TrainState {
        variant,
        config,
        model,
        optimizer,
        rng,
        step: 0,
    })
}

fn domain_samples(samples: &[TripletSample], domain: Domain) -> Vec<&TripletSample> {
    samples.iter().filter(|s| s.domain == domain).collect()
}

fn draw<'a>(pool: &[&'a TripletSample], n: usize, rng: &mut Rng) -> Vec<&'a TripletSample> {
    (0..n).map(|_| pool[rng.below(pool.len())]).collect()
}

/// Runs one optimizer update (all its micro-batches); returns the logged
/// learning rate and loss values.
pub fn train_one_step(
    state: &mut TrainState,
    samples: &[TripletSample],
) -> Result<(f64, Vec<f64>)> {
    let cfg = &state.config;
    let rng = &mut state.rng;
    match &mut state.model {
        Loaded::Diffusion(m) => {
            let opt = state.optimizer.as_mut().expect("diffusion optimizer");
            let lr = opt.current_lr();
            let pool: Vec<&TripletSample> = samples.iter().collect();
            let mut total = 0.0;
            for _ in 0..cfg.gradient_accumulation_steps {
                let batch = TrainBatch::assemble(
                    &draw(&pool, cfg.batch_size, rng),
                    cfg.prompt_dropout,
                    rng,
                )?;
                total += diffusion_train_step(
                    &mut m.denoiser,
                    &mut m.embedder,
                    &m.schedule,
                    &batch,
                    rng,
                )? as f64;
                opt.micro_step(&mut [
                    &mut m.denoiser.enc_store,
                    &mut m.denoiser.dec_store,
                    &mut m.embedder.store,
                ])?;
            }
            Ok((lr, vec![total / cfg.gradient_accumulation_steps as f64]))
        }
        Loaded::Control(m) => {
            let opt = state.optimizer.as_mut().expect("controlnet optimizer");
            let lr = opt.current_lr();
            let pool = domain_samples(samples, Domain::Jiehua);
            if pool.is_empty() {
                return Err(Error::InvalidArgument(
                    "controlnet fine-tuning needs jiehua-domain records".into(),
                ));
            }
            let mut total = 0.0;
            for _ in 0..cfg.gradient_accumulation_steps {
                let batch = TrainBatch::assemble(
                    &draw(&pool, cfg.batch_size, rng),
                    cfg.prompt_dropout,
                    rng,
                )?;
                total += finetune_step(
                    &mut m.grafted,
                    &mut m.embedder,
                    &m.schedule,
                    &batch,
                    opt,
                    rng,
                )? as f64;
            }
            Ok((lr, vec![total / cfg.gradient_accumulation_steps as f64]))
        }
        Loaded::CycleGan(s) => {
            let lr = s.gen_opt.current_lr();
            let xs = domain_samples(samples, Domain::Other);
            let ys = domain_samples(samples, Domain::Jiehua);
            if xs.is_empty() || ys.is_empty() {
                return Err(Error::InvalidArgument(
                    "cyclegan needs records from both domains".into(),
                ));
            }
            let x: Vec<_> = draw(&xs, cfg.batch_size, rng)
                .iter()
                .map(|s| &s.image)
                .collect();
            let y: Vec<_> = draw(&ys, cfg.batch_size, rng)
                .iter()
                .map(|s| &s.image)
                .collect();
            let r = cyclegan_train_step(s, &image_batch(&x)?, &image_batch(&y)?)?;
            let values = [r.disc_x, r.disc_y, r.gen_xy, r.gen_yx, r.cycle, r.total_gen];
            Ok((lr, values.iter().map(|&v| v as f64).collect()))
        }
    }
}

/// Trains from `state.step` to `config.total_steps`, writing checkpoints,
/// the metric log and the run manifest under `run_dir`.
pub fn run_training(
    mut state: TrainState,
    samples: &[TripletSample],
    run_dir: &Path,
) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    let cols = columns(state.variant);
    let metric_log = run_dir.join(METRICS_FILE);
    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT);

    let planned: Vec<u64> = (1..=cfg.total_steps)
        .filter(|s| s % cfg.checkpoint_every == 0)
        .collect();
    let config_text = cfg.to_text();
    let mut manifest = format!(
        "run_id\t{}\nvariant\t{}\nmetric_log\t{}\n",
        run_id(&format!("{}\n{config_text}", state.variant)),
        state.variant,
        metric_log.display()
    );
    for s in &planned {
        writeln!(
            manifest,
            "checkpoint\t{}",
            checkpoint_path(run_dir, *s).display()
        )
        .expect("string write");
    }
    writeln!(manifest, "checkpoint\t{}", final_checkpoint.display()).expect("string write");
    for line in config_text.lines() {
        writeln!(manifest, "config\t{line}").expect("string write");
    }
    write_atomic(&run_dir.join(RUN_MANIFEST_FILE), &manifest)?;

    // Keep log rows from before the resume point only.
    let mut records: Vec<StepRecord> = Vec::new();
    if state.step > 0 {
        if let Ok(text) = std::fs::read_to_string(&metric_log) {
            records = parse_metric_log(&text)?
                .into_iter()
                .filter(|r| r.step < state.step)
                .collect();
        }
    }
    let header = format!("step\tlr\t{}", cols.join("\t"));
    let render = |records: &[StepRecord]| {
        let mut s = header.clone() + "\n";
        for r in records {
            s += &format_row(r);
            s.push('\n');
        }
        s
    };
    write_atomic(&metric_log, &render(&records))?;

    use std::io::Write;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&metric_log)
        .map_err(|e| Error::io(&metric_log, e))?;
    if state.step == 0 {
        std::fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| Error::io(run_dir, e))?;
    }
    while state.step < cfg.total_steps {
        let (lr, values) = train_one_step(&mut state, samples)?;
        let record = StepRecord {
            step: state.step,
            lr,
            values,
        };
        writeln!(log, "{}", format_row(&record)).map_err(|e| Error::io(&metric_log, e))?;
        records.push(record);
        state.step += 1;
        if state.step % cfg.checkpoint_every == 0 {
            let path = checkpoint_path(run_dir, state.step);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            state.save(&path)?;
        }
    }
    state.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metric_log,
        columns: cols,
        records,
    })
}

pub fn parse_metric_log(text: &str) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Config(format!("metric log line {}: malformed", i + 1));
        let mut fields = line.split('\t');
        let step = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let lr = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let values = fields
            .map(|f| f.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        out.push(StepRecord { step, lr, values });
    }
    Ok(out)
}

/// Loads a checkpoint to continue training; the step and RNG stream pick up
/// where the checkpoint left off. `total_steps` may be raised.
pub fn resume_state(path: &Path, total_steps: Option<u64>) -> Result<TrainState> {
    let mut state = TrainState::load(path)?;
    if let Some(t) = total_steps {
        state.config.total_steps = t;
        if let Some(opt) = state.optimizer.as_mut() {
            opt.schedule = state.config.lr_schedule()?;
        }
    }
    Ok(state)
}
