//! Acceptance run: prints one PASS/FAIL line per criterion. Failures end
//! the process with a non-zero status only when `ACCEPTANCE_STRICT` is set,
//! so the report does not stop the rest of the workspace tests.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::canny_ref::reference_canny;
use common::corpus::synthetic_samples;
use common::fid_oracle::{closed_form, draws, gaussian_pair};
use common::gradcheck::{relative_error, ALL_OPS};
use jiehua_core::controlnet::finetune_step;
use jiehua_core::cyclegan::image_batch;
use jiehua_core::diffusion::{diffusion_loss, noise_batch, NoisedBatch, TrainBatch};
use jiehua_core::fid::{fid, fit_gaussian, GaussianStats};
use jiehua_core::pipeline::{
    evaluate, init_state, run_training, ControlModel, DiffusionModel, Loaded, RunConfig,
    TrainState, Variant,
};
use jiehua_core::tensor::{AdamConfig, LrSchedule, Optimizer, Rng, Tape, Tensor};
use jiehua_core::vision::{
    canny, prompt_dropout, synth_images, CannyParams, Image, Style, TripletSample,
};
use nalgebra::{DMatrix, DVector};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Desk-scale settings shared by the end-to-end criteria.
const DESK: &str = "seed=1\nresolution=64\nbase_channels=8\nchannel_mults=1,2,2\ntime_dim=32\n\
text_dim=16\nlearning_rate=3e-3\nlr_warmup_steps=20\ngradient_accumulation_steps=1\n\
batch_size=8\ndiffusion_steps=50\ncyclegan_channels=8\nfid_samples=16\nfid_reference=44\n\
checkpoint_every=100000\n";

const BASE_STEPS: u64 = 1500;
const FINETUNE_STEPS: u64 = 500;
/// The branch is fine-tuned gently; at the base rate it drifts off the base.
const FINETUNE_LR: f64 = 3e-4;
const CYCLEGAN_STEPS: u64 = 800;
const CYCLEGAN_BATCH: usize = 2;
const BUDGET_SECS: f64 = 30.0 * 60.0;

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(DESK).expect("valid desk settings");
    cfg
}

fn desk_corpus() -> Vec<TripletSample> {
    synthetic_samples(44, 64, 7)
}

fn prompts(samples: &[TripletSample]) -> Vec<&str> {
    samples.iter().map(|s| s.prompt.as_str()).collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn controlnet_identity() -> Outcome {
    let cfg = desk_config();
    let samples = desk_corpus();
    let mut rng = Rng::new(11);
    let base = DiffusionModel::new(&cfg, &prompts(&samples), &mut rng).unwrap();
    let plain = base.denoiser.clone();
    let control = ControlModel::from_base(base, &mut rng);
    let res = cfg.resolution;
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let tape = Tape::no_grad();
        let z = tape.constant(Tensor::randn([1, 3, res, res], &mut rng));
        let c = tape.constant(Tensor::randn([1, cfg.text_dim], &mut rng));
        let t = [rng.below(cfg.diffusion_steps)];
        let density = rng.uniform_range(0.0, 1.0);
        let ctrl = Tensor::uniform([1, 1, res, res], 0.0, 1.0, &mut rng)
            .map(|v| if v < density { 1.0 } else { 0.0 });
        let ctrl = tape.constant(ctrl);
        let want = plain.forward(&tape, &z, &t, &c).unwrap();
        let got = control
            .grafted
            .forward(&tape, &z, &t, &c, Some(&ctrl))
            .unwrap();
        worst = worst.max(max_abs_diff(got.value(), want.value()));
    }
    check(worst <= 1e-6, format!("max-abs(grafted - base) = {worst:e} over 100 inputs"))
}

fn locked_base_conservation() -> Outcome {
    let cfg = desk_config();
    let samples = desk_corpus();
    let targets: Vec<&TripletSample> = samples.iter().take(44).collect();
    let mut rng = Rng::new(12);
    let base = DiffusionModel::new(&cfg, &prompts(&samples), &mut rng).unwrap();
    let mut m = ControlModel::from_base(base, &mut rng);
    let before = (
        m.grafted.base.enc_store.clone(),
        m.grafted.base.dec_store.clone(),
        m.embedder.store.clone(),
    );
    let mut opt = Optimizer::new(AdamConfig::default(), LrSchedule::constant(1e-3).unwrap(), 1)
        .unwrap();
    let mut zero_moved = false;
    for step in 0..500 {
        let picks: Vec<&TripletSample> = (0..2).map(|_| targets[rng.below(44)]).collect();
        let batch = TrainBatch::assemble(&picks, 0.5, &mut rng).unwrap();
        finetune_step(
            &mut m.grafted,
            &mut m.embedder,
            &m.schedule,
            &batch,
            &mut opt,
            &mut rng,
        )
        .map_err(|e| format!("step {step}: {e}"))?;
        if step == 0 {
            let br = &m.grafted.branch;
            zero_moved = br
                .zero_conv_params()
                .iter()
                .any(|&id| br.store.get(id).value.data().iter().any(|&v| v != 0.0));
        }
    }
    let delta = m.grafted.base.enc_store.l1_distance(&before.0)
        + m.grafted.base.dec_store.l1_distance(&before.1)
        + m.embedder.store.l1_distance(&before.2);
    check(
        delta == 0.0 && zero_moved,
        format!("sum |d base| = {delta} after 500 steps; zero conv nonzero after step 1: {zero_moved}"),
    )
}

fn gradient_suite() -> Outcome {
    let mut rng = Rng::new(0x6ead);
    let mut worst = (ALL_OPS[0], 0.0f64);
    for kind in ALL_OPS {
        let err = (0..50)
            .map(|_| relative_error(kind, &mut rng))
            .fold(0.0f64, f64::max);
        if err >= worst.1 {
            worst = (kind, err);
        }
    }
    check(
        worst.1 < 1e-3,
        format!(
            "{} op kinds x 50 cases; worst {:?} at {:.2e}",
            ALL_OPS.len(),
            worst.0,
            worst.1
        ),
    )
}

fn fid_oracle() -> Outcome {
    let mut rng = Rng::new(0xF1D);
    let (m1, s1, m2, s2) = gaussian_pair(8, &mut rng);
    let expected = closed_form(&m1, &s1, &m2, &s2);
    let a = fit_gaussian(&draws(&m1, &s1, 10_000, &mut rng)).unwrap();
    let b = fit_gaussian(&draws(&m2, &s2, 10_000, &mut rng)).unwrap();
    let got = fid(&a, &b).unwrap();
    let rel = (got - expected).abs() / expected;
    let self_dist = fid(&a, &a).unwrap();

    let one = |m: f64, v: f64| GaussianStats {
        n: 2,
        mu: DVector::from_element(1, m),
        sigma: DMatrix::from_element(1, 1, v),
    };
    let mut worst_1d = 0.0f64;
    for _ in 0..200 {
        let (ma, mb) = (rng.uniform_range(-5.0, 5.0) as f64, rng.uniform_range(-5.0, 5.0) as f64);
        let (sa, sb) = (rng.uniform_range(0.0, 3.0) as f64, rng.uniform_range(0.0, 3.0) as f64);
        let d = fid(&one(ma, sa * sa), &one(mb, sb * sb)).unwrap();
        worst_1d = worst_1d.max((d - ((ma - mb).powi(2) + (sa - sb).powi(2))).abs());
    }
    check(
        rel < 0.05 && self_dist == 0.0 && worst_1d <= 1e-9,
        format!(
            "8-d: {got:.4} vs closed form {expected:.4} ({:.2}%); fid(s,s) = {self_dist}; 1-D error {worst_1d:.1e}",
            100.0 * rel
        ),
    )
}

fn canny_oracle() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut mismatched = 0;
    for i in 0..200 {
        let channels = if i % 2 == 0 { 3 } else { 1 };
        let px = (0..16 * 16 * channels).map(|_| rng.uniform()).collect();
        let img = Image::new(16, 16, channels, px).unwrap();
        let ours: Vec<bool> = canny(&img, CannyParams::default())
            .unwrap()
            .pixels()
            .iter()
            .map(|&v| v == 1.0)
            .collect();
        if ours != reference_canny(&img, 0.1, 0.2) {
            mismatched += 1;
        }
    }
    let flat = canny(&Image::filled(16, 16, 3, 0.37).unwrap(), CannyParams::default()).unwrap();
    let flat_edges = flat.pixels().iter().filter(|&&v| v != 0.0).count();
    check(
        mismatched == 0 && flat_edges == 0,
        format!("{mismatched}/200 images differ from the reference; constant image has {flat_edges} edge pixels"),
    )
}

/// Applies one optimizer update from `parts` backward passes over slices
/// of the same five items, returning the updated parameters.
fn update_with(parts: usize, batch: &TrainBatch, noised: &NoisedBatch) -> Vec<f32> {
    let mut cfg = desk_config();
    cfg.resolution = 16;
    cfg.channel_mults = vec![1, 2];
    let samples = desk_corpus();
    let mut m = DiffusionModel::new(&cfg, &prompts(&samples), &mut Rng::new(5)).unwrap();
    let mut opt =
        Optimizer::new(AdamConfig::default(), LrSchedule::constant(1e-3).unwrap(), parts as u64)
            .unwrap();
    let per = 5 / parts;
    for k in 0..parts {
        let r = k * per..(k + 1) * per;
        let sub = TrainBatch {
            images: batch.images.slice_batch(r.start, r.end).unwrap(),
            controls: batch.controls.slice_batch(r.start, r.end).unwrap(),
            prompts: batch.prompts[r.clone()].to_vec(),
        };
        let sub_noise = NoisedBatch {
            z_t: noised.z_t.slice_batch(r.start, r.end).unwrap(),
            t: noised.t[r.clone()].to_vec(),
            eps: noised.eps.slice_batch(r.start, r.end).unwrap(),
        };
        let tape = Tape::new();
        let loss = diffusion_loss(&tape, &m.denoiser, &m.embedder, &sub, &sub_noise).unwrap();
        tape.backward(
            &loss,
            &mut [&mut m.denoiser.enc_store, &mut m.denoiser.dec_store, &mut m.embedder.store],
        )
        .unwrap();
        opt.micro_step(&mut [
            &mut m.denoiser.enc_store,
            &mut m.denoiser.dec_store,
            &mut m.embedder.store,
        ])
        .unwrap();
    }
    assert_eq!(opt.state.step_count, 1);
    [&m.denoiser.enc_store, &m.denoiser.dec_store, &m.embedder.store]
        .iter()
        .flat_map(|s| s.iter().flat_map(|p| p.value.data().to_vec()))
        .collect()
}

fn schedule_and_accumulation() -> Outcome {
    let table = RunConfig::default().lr_schedule().unwrap();
    let (lr0, lr100) = (table.lr_at_step(0), table.lr_at_step(100));
    let restarts = LrSchedule::new(5e-6, 100, 200, 2).unwrap();
    let before_restart = restarts.lr_at_step(300);
    let after_restart = restarts.lr_at_step(301);
    let endpoints = before_restart.abs() < 1e-15 && (after_restart - 5e-6).abs() < 1e-15;

    let samples = synthetic_samples(5, 16, 3);
    let refs: Vec<&TripletSample> = samples.iter().take(5).collect();
    let mut rng = Rng::new(9);
    let batch = TrainBatch::assemble(&refs, 0.5, &mut rng).unwrap();
    let schedule = jiehua_core::diffusion::NoiseSchedule::scaled_default(50).unwrap();
    let noised = noise_batch(&batch.images, &schedule, &mut rng).unwrap();
    let whole = update_with(1, &batch, &noised);
    let split = update_with(5, &batch, &noised);
    let diff = whole
        .iter()
        .zip(&split)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    check(
        lr0 == 0.0 && (lr100 - 5e-6).abs() < 1e-18 && endpoints && diff <= 1e-5,
        format!(
            "lr(0) = {lr0}, lr(100) = {lr100:e}; restart {before_restart:.1e} -> {after_restart:e}; \
             batch 5 x accum 1 vs batch 1 x accum 5 max diff {diff:.1e}"
        ),
    )
}

fn prompt_dropout_rate() -> Outcome {
    let mut rng = Rng::new(0xD0);
    let dropped = (0..10_000)
        .filter(|_| prompt_dropout("ruled style", 0.5, &mut rng).unwrap().is_empty())
        .count();
    let direct = dropped as f64 / 10_000.0;

    // The same rate through training-batch assembly.
    let samples = synthetic_samples(1, 16, 0);
    let refs: Vec<&TripletSample> = std::iter::repeat(&samples[0]).take(100).collect();
    let mut empty = 0;
    for _ in 0..100 {
        let b = TrainBatch::assemble(&refs, 0.5, &mut rng).unwrap();
        empty += b.prompts.iter().filter(|p| p.is_empty()).count();
    }
    let batched = empty as f64 / 10_000.0;
    let ok = |r: f64| (0.48..=0.52).contains(&r);
    check(
        ok(direct) && ok(batched),
        format!("empty-prompt rate {direct:.4} direct, {batched:.4} in training batches"),
    )
}

fn train(variant: Variant, cfg: &RunConfig, samples: &[TripletSample], dir: &Path) -> PathBuf {
    run_training(init_state(variant, cfg, samples).unwrap(), samples, dir)
        .unwrap()
        .final_checkpoint
}

fn cycle_on(state: &TrainState, x: &Tensor, y: &Tensor) -> f32 {
    match &state.model {
        Loaded::CycleGan(s) => s.eval_cycle(x, y).unwrap(),
        _ => unreachable!("cyclegan state"),
    }
}

fn directional_reproduction() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let samples = desk_corpus();
    let cfg = desk_config();

    let mut base_cfg = cfg.clone();
    base_cfg.total_steps = BASE_STEPS;
    let base = train(Variant::DiffusionBase, &base_cfg, &samples, &dir.path().join("base"));

    let mut cn_cfg = cfg.clone();
    cn_cfg.base_checkpoint = Some(base);
    cn_cfg.learning_rate = FINETUNE_LR;
    cn_cfg.total_steps = 0;
    let untrained = train(Variant::ControlNet, &cn_cfg, &samples, &dir.path().join("graft"));
    cn_cfg.total_steps = FINETUNE_STEPS;
    let tuned = train(Variant::ControlNet, &cn_cfg, &samples, &dir.path().join("tuned"));

    let mut cg_cfg = cfg.clone();
    cg_cfg.total_steps = CYCLEGAN_STEPS;
    cg_cfg.batch_size = CYCLEGAN_BATCH;
    // Cycle loss on held-out images, before and after training.
    let mut held = Rng::new(404);
    let xs = synth_images(Style::Wash, 8, 64, &mut held);
    let ys = synth_images(Style::Ruled, 8, 64, &mut held);
    let x = image_batch(&xs.iter().collect::<Vec<_>>()).unwrap();
    let y = image_batch(&ys.iter().collect::<Vec<_>>()).unwrap();
    let cycle_start = cycle_on(&init_state(Variant::CycleGan, &cg_cfg, &samples).unwrap(), &x, &y);
    let cyclegan = train(Variant::CycleGan, &cg_cfg, &samples, &dir.path().join("cyclegan"));
    let cycle_end = cycle_on(&TrainState::load(&cyclegan).unwrap(), &x, &y);

    let score = |path: &Path| {
        let state = TrainState::load(path).unwrap();
        evaluate(&state.model, &cfg, &samples, &mut Rng::new(99)).unwrap().mean
    };
    let (f_untrained, f_tuned, f_cyclegan) = (score(&untrained), score(&tuned), score(&cyclegan));
    let secs = start.elapsed().as_secs_f64();
    let ratio = cycle_end / cycle_start;
    check(
        f_tuned < f_untrained && f_tuned < f_cyclegan && ratio < 0.2 && secs <= BUDGET_SECS,
        format!(
            "mean FID fine-tuned {f_tuned:.4}, untrained graft {f_untrained:.4}, cyclegan {f_cyclegan:.4}; \
             cycle loss {cycle_start:.3} -> {cycle_end:.3} ({ratio:.3}x); {:.1} min",
            secs / 60.0
        ),
    )
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A complete small pipeline: every checkpoint, log and FID report.
fn pipeline_once(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let samples = synthetic_samples(6, 16, 21);
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "seed=8\nresolution=16\nbase_channels=4\nchannel_mults=1,2\ntime_dim=8\ntext_dim=4\n\
         learning_rate=1e-3\nlr_warmup_steps=2\ngradient_accumulation_steps=2\nbatch_size=2\n\
         diffusion_steps=8\ncyclegan_channels=4\ncyclegan_res_blocks=1\nfid_repeats=2\n\
         fid_samples=3\nfid_reference=4\ncheckpoint_every=2\ntotal_steps=4\n",
    )
    .unwrap();
    let base = train(Variant::DiffusionBase, &cfg, &samples, &root.join("base"));
    let mut cn = cfg.clone();
    cn.base_checkpoint = Some(base.clone());
    let tuned = train(Variant::ControlNet, &cn, &samples, &root.join("controlnet"));
    let cyclegan = train(Variant::CycleGan, &cfg, &samples, &root.join("cyclegan"));
    for (name, path) in [("base", &base), ("controlnet", &tuned), ("cyclegan", &cyclegan)] {
        let state = TrainState::load(path).unwrap();
        let report = evaluate(&state.model, &cfg, &samples, &mut Rng::new(cfg.seed)).unwrap();
        std::fs::write(root.join(format!("{name}_fid.txt")), report.to_string()).unwrap();
    }
    files_under(root)
}

fn determinism() -> Outcome {
    // Both runs use the same directory, since run logs and grafted
    // checkpoints record absolute paths.
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let first = pipeline_once(&root);
    std::fs::remove_dir_all(&root).unwrap();
    let second = pipeline_once(&root);
    let differing: Vec<String> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let bytes: usize = first.iter().map(|(_, d)| d.len()).sum();
    check(
        first.len() == second.len() && differing.is_empty(),
        format!(
            "{} files ({bytes} bytes) compared across two runs; differing: {differing:?}",
            first.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("controlnet identity at init", controlnet_identity),
        ("locked-base conservation", locked_base_conservation),
        ("gradient suite", gradient_suite),
        ("FID oracle", fid_oracle),
        ("Canny oracle", canny_oracle),
        ("schedule and accumulation", schedule_and_accumulation),
        ("prompt dropout", prompt_dropout_rate),
        ("directional FID ordering", directional_reproduction),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n} {name}: {detail} [{secs:.1}s]");
    }
    println!("{failed} of the selected criteria failed");
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
