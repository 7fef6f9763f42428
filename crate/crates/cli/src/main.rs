use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use jiehua_core::cyclegan::{translate, Direction};
use jiehua_core::diffusion::{sample, NoisePredictor};
use jiehua_core::pipeline::{
    evaluate, evaluation_prompt, init_state, line_plot, resume_state, run_training, Loaded,
    RunConfig, TrainState, Variant,
};
use jiehua_core::tensor::Rng;
use jiehua_core::vision::{
    build_manifest, load_image, save_image, synth_style_corpus, ArtistPattern, CorpusStats,
    DatasetManifest, EdgeMap, Style, MANIFEST_FILE,
};

#[derive(Parser)]
#[command(
    name = "jiehua",
    version,
    about = "Ruled-line painting style transfer: data prep, training, sampling and FID evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config sources shared by every command. Later sources win:
/// defaults, then `--config`, then `--set`, then dedicated flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum VariantArg {
    DiffusionBase,
    Controlnet,
    Cyclegan,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::DiffusionBase => Variant::DiffusionBase,
            VariantArg::Controlnet => Variant::ControlNet,
            VariantArg::Cyclegan => Variant::CycleGan,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum DirectionArg {
    X2y,
    Y2x,
}

#[derive(Subcommand)]
enum Command {
    /// Build a triplet dataset (image, edge map, prompt) and its manifest.
    PrepData {
        /// Output directory for images/, edges/ and manifest.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Generate the procedural two-style corpus.
        #[arg(long, conflicts_with = "input_dir")]
        synthetic: bool,
        /// Images per synthetic style.
        #[arg(long, default_value_t = 44, requires = "synthetic")]
        per_style: usize,
        /// Directory of .png/.ppm/.pgm paintings to ingest.
        #[arg(long, requires = "artists")]
        input_dir: Option<PathBuf>,
        /// Lines of `pattern<TAB>artist[<TAB>jiehua|other]` matched against file names.
        #[arg(long)]
        artists: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model variant.
    Train {
        #[arg(value_enum)]
        variant: VariantArg,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Diffusion-base checkpoint to graft onto (controlnet only).
        #[arg(long)]
        base_checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint of the same variant.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Render each metric-log column to run_dir/plots/<column>.png.
        #[arg(long)]
        emit_plots: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate images from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text prompt; defaults to the evaluation template filled with --artist.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value = Style::Ruled.artist())]
        artist: String,
        /// Edge map image conditioning a controlnet checkpoint.
        #[arg(long)]
        edge_map: Option<PathBuf>,
        /// Input painting translated by a cyclegan checkpoint.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "x2y")]
        direction: DirectionArg,
        #[arg(short = 'n', long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Guidance scale; defaults to the checkpoint's config.
        #[arg(long)]
        guidance: Option<f32>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Repeated FID of a checkpoint's output against the target-style images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Report file; defaults to fid_report.txt beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render per-repeat scores to <report>.png.
        #[arg(long)]
        emit_plots: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the resolved config, defaults included.
    PrintConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Marks errors caused by bad invocation rather than failed work.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn manifest_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<jiehua_core::vision::TripletSample>> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| usage("no dataset: pass --manifest or set `manifest` in the config"))?;
    let manifest = DatasetManifest::load(&manifest_file(path))?;
    Ok(manifest.load_samples()?)
}

fn prep_data(
    out: &Path,
    synthetic: bool,
    per_style: usize,
    input_dir: Option<&Path>,
    artists: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let manifest = match (synthetic, input_dir) {
        (true, _) => {
            let mut rng = Rng::new(cfg.seed);
            synth_style_corpus(per_style, cfg.resolution, cfg.canny()?, &mut rng, out)?
        }
        (false, Some(dir)) => {
            let list = artists.expect("clap requires --artists");
            let text = std::fs::read_to_string(list)
                .with_context(|| format!("reading artist list {}", list.display()))?;
            let patterns = ArtistPattern::parse_list(&text)?;
            build_manifest(dir, &patterns, cfg.resolution, cfg.canny()?, out)?
        }
        (false, None) => return Err(usage("prep-data needs --synthetic or --input-dir")),
    };
    let samples = manifest.load_samples()?;
    println!("manifest\t{}", out.join(MANIFEST_FILE).display());
    print!("{}", CorpusStats::of(&samples));
    Ok(())
}

fn emit_training_plots(run_dir: &Path, log: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let header: Vec<&str> = text
        .lines()
        .next()
        .unwrap_or_default()
        .split('\t')
        .collect();
    let records = jiehua_core::pipeline::parse_metric_log(&text)?;
    let dir = run_dir.join("plots");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (col, name) in header.iter().enumerate().skip(1) {
        let points: Vec<(f64, f64)> = records
            .iter()
            .map(|r| {
                let y = if col == 1 { r.lr } else { r.values[col - 2] };
                (r.step as f64, y)
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        let path = dir.join(format!("{name}.png"));
        save_image(&line_plot(&points)?, &path)?;
        println!("plot\t{}", path.display());
    }
    Ok(())
}

struct TrainArgs {
    variant: Variant,
    manifest: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    base_checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
    steps: Option<u64>,
    emit_plots: bool,
}

fn train(args: TrainArgs, cfg_args: &ConfigArgs) -> Result<()> {
    let mut cfg = cfg_args.resolve()?;
    if let Some(m) = args.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(d) = args.run_dir {
        cfg.run_dir = Some(d);
    }
    if let Some(b) = args.base_checkpoint {
        cfg.base_checkpoint = Some(b);
    }
    if let Some(s) = args.steps {
        cfg.total_steps = s;
    }
    let samples = load_samples(&cfg)?;
    let state = match &args.resume {
        Some(ckpt) => {
            let state = resume_state(ckpt, args.steps)?;
            if state.variant != args.variant {
                bail!(usage(format!(
                    "{} holds a {} run, not {}",
                    ckpt.display(),
                    state.variant,
                    args.variant
                )));
            }
            state
        }
        None => init_state(args.variant, &cfg, &samples)?,
    };
    let run_dir = cfg
        .run_dir
        .clone()
        .or_else(|| state.config.run_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(args.variant.name()));
    let outcome = run_training(state, &samples, &run_dir)?;
    if let Some(last) = outcome.records.last() {
        let values: Vec<String> = outcome
            .columns
            .iter()
            .zip(&last.values)
            .map(|(c, v)| format!("{c} {v:.6}"))
            .collect();
        println!("step {}\tlr {}\t{}", last.step, last.lr, values.join("\t"));
    }
    println!("checkpoint\t{}", outcome.final_checkpoint.display());
    println!("metric_log\t{}", outcome.metric_log.display());
    if args.emit_plots {
        emit_training_plots(&run_dir, &outcome.metric_log)?;
    }
    Ok(())
}

struct SampleArgs {
    checkpoint: PathBuf,
    prompt: Option<String>,
    artist: String,
    edge_map: Option<PathBuf>,
    input: Option<PathBuf>,
    direction: DirectionArg,
    count: usize,
    seed: u64,
    guidance: Option<f32>,
    out: PathBuf,
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("-n must be at least 1"));
    }
    let state = TrainState::load(&a.checkpoint)?;
    let guidance = a.guidance.unwrap_or(state.config.guidance_scale);
    let prompt = a.prompt.unwrap_or_else(|| evaluation_prompt(&a.artist));
    let mut rng = Rng::new(a.seed);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let stem = format!("{}_seed{}_step{}", state.variant, a.seed, state.step);
    let mut images = Vec::with_capacity(a.count);
    match &state.model {
        Loaded::Diffusion(m) => {
            if a.edge_map.is_some() {
                return Err(usage("--edge-map needs a controlnet checkpoint"));
            }
            for _ in 0..a.count {
                images.push(sample(
                    &m.denoiser,
                    &m.embedder,
                    &m.schedule,
                    &prompt,
                    None,
                    guidance,
                    &mut rng,
                )?);
            }
        }
        Loaded::Control(m) => {
            let path = a
                .edge_map
                .as_ref()
                .ok_or_else(|| usage("a controlnet checkpoint needs --edge-map"))?;
            let edge = EdgeMap::from_image(&load_image(path)?)?;
            let res = m.grafted.config().resolution;
            if edge.height() != res || edge.width() != res {
                bail!(usage(format!(
                    "edge map is {}x{}, the model expects {res}x{res}",
                    edge.height(),
                    edge.width()
                )));
            }
            for _ in 0..a.count {
                images.push(sample(
                    &m.grafted,
                    &m.embedder,
                    &m.schedule,
                    &prompt,
                    Some(&edge),
                    guidance,
                    &mut rng,
                )?);
            }
        }
        Loaded::CycleGan(s) => {
            let path = a
                .input
                .as_ref()
                .ok_or_else(|| usage("a cyclegan checkpoint needs --input"))?;
            let image =
                jiehua_core::vision::resize(&load_image(path)?.to_rgb(), state.config.resolution)?;
            let direction = match a.direction {
                DirectionArg::X2y => Direction::XToY,
                DirectionArg::Y2x => Direction::YToX,
            };
            // Translation is deterministic; every copy is identical.
            let out = translate(s, &image, direction)?;
            images.extend(std::iter::repeat(out).take(a.count));
        }
    }
    for (i, im) in images.iter().enumerate() {
        let path = a.out.join(format!("{stem}_{i:03}.png"));
        save_image(im, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn eval_cmd(
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    repeats: Option<usize>,
    out: Option<PathBuf>,
    emit_plots: bool,
    cfg_args: &ConfigArgs,
) -> Result<()> {
    let state = TrainState::load(checkpoint)?;
    // The checkpoint's own config is the base; explicit sources override it.
    let mut cfg = state.config.clone();
    if let Some(p) = &cfg_args.config {
        cfg.apply_text(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?;
    }
    for kv in &cfg_args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cfg_args.seed {
        cfg.seed = s;
    }
    if let Some(m) = manifest {
        cfg.manifest = Some(m);
    }
    if let Some(r) = repeats {
        cfg.fid_repeats = r;
    }
    let samples = load_samples(&cfg)?;
    let report = evaluate(&state.model, &cfg, &samples, &mut Rng::new(cfg.seed))?;
    let out = out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("fid_report.txt")
    });
    std::fs::write(&out, report.to_string())
        .with_context(|| format!("writing {}", out.display()))?;
    if emit_plots {
        let points: Vec<(f64, f64)> = report
            .scores
            .iter()
            .enumerate()
            .map(|(i, s)| (i as f64 + 1.0, *s))
            .collect();
        let path = out.with_extension("png");
        save_image(&line_plot(&points)?, &path)?;
        println!("plot\t{}", path.display());
    }
    println!("report\t{}", out.display());
    println!("mean FID {}", report.mean);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepData {
            out,
            synthetic,
            per_style,
            input_dir,
            artists,
            cfg,
        } => prep_data(
            &out,
            synthetic,
            per_style,
            input_dir.as_deref(),
            artists.as_deref(),
            &cfg.resolve()?,
        ),
        Command::Train {
            variant,
            manifest,
            run_dir,
            base_checkpoint,
            resume,
            steps,
            emit_plots,
            cfg,
        } => train(
            TrainArgs {
                variant: variant.into(),
                manifest,
                run_dir,
                base_checkpoint,
                resume,
                steps,
                emit_plots,
            },
            &cfg,
        ),
        Command::Sample {
            checkpoint,
            prompt,
            artist,
            edge_map,
            input,
            direction,
            count,
            seed,
            guidance,
            out,
        } => sample_cmd(SampleArgs {
            checkpoint,
            prompt,
            artist,
            edge_map,
            input,
            direction,
            count,
            seed,
            guidance,
            out,
        }),
        Command::Eval {
            checkpoint,
            manifest,
            repeats,
            out,
            emit_plots,
            cfg,
        } => eval_cmd(&checkpoint, manifest, repeats, out, emit_plots, &cfg),
        Command::PrintConfig { cfg } => {
            let cfg = cfg.resolve()?;
            cfg.validate()?;
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

/// Category for the error prefix: the library's kind when there is one.
fn error_kind(err: &anyhow::Error) -> &'static str {
    if err.downcast_ref::<UsageError>().is_some() {
        return "usage";
    }
    err.chain()
        .find_map(|e| {
            if let Some(e) = e.downcast_ref::<jiehua_core::Error>() {
                Some(e.kind())
            } else {
                e.downcast_ref::<std::io::Error>().map(|_| "io")
            }
        })
        .unwrap_or("runtime")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or("bad arguments")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = error_kind(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {kind}: {msg}");
            // Bad flags or config values are the caller's to fix.
            if matches!(kind, "usage" | "config") {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
