use jiehua_core::pipeline::RunConfig;
use jiehua_core::tensor::Rng;
use jiehua_core::vision::{canny, synth_images, CannyParams, Domain, Style, TripletSample};

/// The synthetic two-style corpus, in memory: ruled images are the jiehua
/// domain, wash images the other.
pub fn synthetic_samples(per_style: usize, resolution: usize, seed: u64) -> Vec<TripletSample> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(2 * per_style);
    for (style, domain) in [(Style::Ruled, Domain::Jiehua), (Style::Wash, Domain::Other)] {
        for image in synth_images(style, per_style, resolution, &mut rng) {
            let edge = canny(&image, CannyParams::default()).expect("valid image");
            out.push(TripletSample {
                image,
                edge,
                prompt: style.prompt().into(),
                domain,
            });
        }
    }
    out
}

/// A run small enough for a debug-profile test.
pub fn small_config(resolution: usize, total_steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(&format!(
        "seed=3\nresolution={resolution}\nbase_channels=8\nchannel_mults=1,2\ntime_dim=16\n\
         text_dim=8\nlearning_rate=3e-3\nlr_warmup_steps=20\ngradient_accumulation_steps=1\n\
         batch_size=4\ntotal_steps={total_steps}\ncyclegan_channels=8\ncyclegan_res_blocks=1\n"
    ))
    .expect("valid settings");
    cfg
}
