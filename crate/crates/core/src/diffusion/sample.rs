use super::schedule::NoiseSchedule;
use super::text::TextEmbedder;
use super::train::NoisePredictor;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor};
use crate::vision::{EdgeMap, Image};

/// (1 − s)·ε_u + s·ε_c, written so that s = 0 and s = 1 return the
/// respective input exactly.
pub fn guide(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Tensor {
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| (1.0 - scale) * u + scale * c)
        .collect();
    Tensor::new(eps_uncond.shape().to_vec(), data).expect("same shape")
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub prompts: Vec<String>,
    /// [batch, 1, H, W] edge maps, or none.
    pub controls: Option<Tensor>,
    pub guidance_scale: f32,
}

/// Per reverse step callback: (t, ε_uncond, ε_cond, guided ε).
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &Tensor, &Tensor, &Tensor);

/// Ancestral sampling with classifier-free guidance. Returns the final
/// z_0 clamped to [−1, 1], shape [batch, C, H, W].
pub fn sample_batch(
    model: &dyn NoisePredictor,
    embedder: &TextEmbedder,
    schedule: &NoiseSchedule,
    request: &SampleRequest,
    rng: &mut Rng,
    mut observer: Option<StepObserver<'_>>,
) -> Result<Tensor> {
    let scale = request.guidance_scale;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "guidance scale {scale} must be >= 0"
        )));
    }
    let b = request.prompts.len();
    if b == 0 {
        return Err(Error::InvalidArgument("no prompts to sample".into()));
    }
    let cfg = model.config();
    let (c, res) = (cfg.in_channels, cfg.resolution);
    if let Some(ctrl) = &request.controls {
        if ctrl.shape() != [b, 1, res, res] {
            return Err(Error::shape(
                "sample",
                format!(
                    "control {:?} does not match [{b}, 1, {res}, {res}]",
                    ctrl.shape()
                ),
            ));
        }
    }
    let mut prompts = request.prompts.clone();
    prompts.extend(std::iter::repeat(String::new()).take(b));
    let controls = request
        .controls
        .as_ref()
        .map(|t| Tensor::cat_batch(&[t, t]))
        .transpose()?;

    let mut z = Tensor::randn([b, c, res, res], rng);
    let per = c * res * res;
    for t in (0..schedule.steps()).rev() {
        let tape = Tape::no_grad();
        let c_t = embedder.encode(&tape, &prompts)?;
        let z_in = tape.constant(Tensor::cat_batch(&[&z, &z])?);
        let ctrl = controls.clone().map(|t| tape.constant(t));
        let eps = model.predict_noise(&tape, &z_in, &vec![t; 2 * b], &c_t, ctrl.as_ref())?;
        let eps_cond = eps.value().slice_batch(0, b)?;
        let eps_uncond = eps.value().slice_batch(b, 2 * b)?;
        let guided = guide(&eps_uncond, &eps_cond, scale);
        if let Some(obs) = observer.as_mut() {
            obs(t, &eps_uncond, &eps_cond, &guided);
        }

        let ab = schedule.alpha_bars[t];
        let ab_prev = if t > 0 {
            schedule.alpha_bars[t - 1]
        } else {
            1.0
        };
        let beta = schedule.betas[t];
        let c0 = (beta * ab_prev.sqrt() / (1.0 - ab)) as f32;
        let ct = ((1.0 - ab_prev) * schedule.alphas[t].sqrt() / (1.0 - ab)) as f32;
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt() as f32;
        let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let noise = (t > 0).then(|| Tensor::randn([b, c, res, res], rng));
        let zd = z.data_mut();
        for i in 0..b * per {
            let x0 = ((zd[i] - sn * guided.data()[i]) / sa).clamp(-1.0, 1.0);
            zd[i] = match &noise {
                Some(n) => c0 * x0 + ct * zd[i] + sigma * n.data()[i],
                None => x0,
            };
        }
    }
    Ok(z.map(|v| v.clamp(-1.0, 1.0)))
}

/// Single image for one prompt and optional edge map.
pub fn sample(
    model: &dyn NoisePredictor,
    embedder: &TextEmbedder,
    schedule: &NoiseSchedule,
    prompt: &str,
    control: Option<&EdgeMap>,
    guidance_scale: f32,
    rng: &mut Rng,
) -> Result<Image> {
    let controls = control
        .map(|e| Tensor::new([1, 1, e.height(), e.width()], e.pixels().to_vec()))
        .transpose()?;
    let request = SampleRequest {
        prompts: vec![prompt.to_string()],
        controls,
        guidance_scale,
    };
    let z = sample_batch(model, embedder, schedule, &request, rng, None)?;
    Image::from_signed_chw(&z)
}
