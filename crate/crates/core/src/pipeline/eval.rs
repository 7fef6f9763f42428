//! Image generation from any trained bundle and the FID evaluation run.

use super::config::RunConfig;
use super::models::Loaded;
use crate::cyclegan::{translate, Direction};
use crate::diffusion::{sample_batch, NoisePredictor, NoiseSchedule, SampleRequest, TextEmbedder};
use crate::error::{Error, Result};
use crate::fid::{eval_protocol, FeatureExtractor, FidReport};
use crate::nn::stack;
use crate::tensor::{Rng, Tensor};
use crate::vision::{Domain, EdgeMap, Image, TripletSample};

/// Images per reverse-diffusion batch.
const SAMPLE_CHUNK: usize = 16;

pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "Green grasslands, Grey sky, People in bright colours, {artist} style";

pub fn evaluation_prompt(artist: &str) -> String {
    DEFAULT_PROMPT_TEMPLATE.replace("{artist}", artist)
}

/// Runs guided sampling in chunks; `controls` (if any) pairs with prompts.
pub fn generate_diffusion(
    model: &dyn NoisePredictor,
    embedder: &TextEmbedder,
    schedule: &NoiseSchedule,
    prompts: &[String],
    controls: Option<&[EdgeMap]>,
    guidance_scale: f32,
    rng: &mut Rng,
) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(prompts.len());
    for start in (0..prompts.len()).step_by(SAMPLE_CHUNK) {
        let end = (start + SAMPLE_CHUNK).min(prompts.len());
        let controls = controls
            .map(|c| {
                let parts: Vec<Tensor> = c[start..end]
                    .iter()
                    .map(|e| Tensor::new([1, e.height(), e.width()], e.pixels().to_vec()))
                    .collect::<Result<_>>()?;
                stack(&parts)
            })
            .transpose()?;
        let request = SampleRequest {
            prompts: prompts[start..end].to_vec(),
            controls,
            guidance_scale,
        };
        let z = sample_batch(model, embedder, schedule, &request, rng, None)?;
        for i in 0..end - start {
            out.push(Image::from_signed_chw(&z.slice_batch(i, i + 1)?)?);
        }
    }
    Ok(out)
}

/// The target-style prompt: the first jiehua record's prompt.
pub fn target_prompt(samples: &[TripletSample]) -> Result<String> {
    samples
        .iter()
        .find(|s| s.domain == Domain::Jiehua)
        .map(|s| s.prompt.clone())
        .ok_or_else(|| {
            Error::InvalidArgument("no jiehua-domain records to evaluate against".into())
        })
}

/// Produces `n` target-style images from a model. Diffusion models use the
/// target prompt; the control model additionally conditions on edge maps of
/// randomly drawn target-domain records; CycleGAN translates randomly drawn
/// other-domain images.
pub fn generate_for_eval(
    model: &Loaded,
    cfg: &RunConfig,
    samples: &[TripletSample],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Image>> {
    let prompt = target_prompt(samples)?;
    let pick = |domain: Domain, rng: &mut Rng| -> Result<Vec<&TripletSample>> {
        let pool: Vec<&TripletSample> = samples.iter().filter(|s| s.domain == domain).collect();
        if pool.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no {domain} records to draw inputs from"
            )));
        }
        Ok((0..n).map(|_| pool[rng.below(pool.len())]).collect())
    };
    match model {
        Loaded::Diffusion(m) => generate_diffusion(
            &m.denoiser,
            &m.embedder,
            &m.schedule,
            &vec![prompt; n],
            None,
            cfg.guidance_scale,
            rng,
        ),
        Loaded::Control(m) => {
            let edges: Vec<EdgeMap> = pick(Domain::Jiehua, rng)?
                .iter()
                .map(|s| s.edge.clone())
                .collect();
            generate_diffusion(
                &m.grafted,
                &m.embedder,
                &m.schedule,
                &vec![prompt; n],
                Some(&edges),
                cfg.guidance_scale,
                rng,
            )
        }
        Loaded::CycleGan(s) => pick(Domain::Other, rng)?
            .iter()
            .map(|x| translate(s, &x.image, Direction::XToY))
            .collect(),
    }
}

/// FID of a model's target-style output against the jiehua-domain images.
pub fn evaluate(
    model: &Loaded,
    cfg: &RunConfig,
    samples: &[TripletSample],
    rng: &mut Rng,
) -> Result<FidReport> {
    let reference: Vec<Image> = samples
        .iter()
        .filter(|s| s.domain == Domain::Jiehua)
        .map(|s| s.image.to_rgb())
        .collect();
    let extractor = FeatureExtractor::default();
    let mut gen =
        |_: usize, rng: &mut Rng| generate_for_eval(model, cfg, samples, cfg.fid_samples, rng);
    eval_protocol(&mut gen, &reference, &extractor, &cfg.eval(), rng)
}
