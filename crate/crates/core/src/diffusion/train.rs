use super::schedule::NoiseSchedule;
use super::text::TextEmbedder;
use super::unet::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::stack;
use crate::tensor::{ParamStore, Rng, Tape, Tensor, Var};
use crate::vision::{prompt_dropout, TripletSample};

/// Anything that predicts the added noise from (z_t, t, c_t, c_f).
pub trait NoisePredictor {
    fn config(&self) -> &DenoiserConfig;

    /// `control` is a [batch, 1, H, W] edge tensor with values in {0, 1}.
    fn predict_noise(
        &self,
        tape: &Tape,
        z_t: &Var,
        t: &[usize],
        c_t: &Var,
        control: Option<&Var>,
    ) -> Result<Var>;

    /// Stores that may receive gradients from a training step.
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
}

/// The plain denoiser has no control entry point; `control` is ignored.
impl NoisePredictor for Denoiser {
    fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn predict_noise(
        &self,
        tape: &Tape,
        z_t: &Var,
        t: &[usize],
        c_t: &Var,
        _control: Option<&Var>,
    ) -> Result<Var> {
        self.forward(tape, z_t, t, c_t)
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.enc_store, &mut self.dec_store]
    }
}

/// Model-ready batch: signed images, edge maps and (already dropped-out)
/// prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub images: Tensor,
    pub controls: Tensor,
    pub prompts: Vec<String>,
}

impl TrainBatch {
    /// Stacks samples and replaces each prompt by `""` with probability
    /// `dropout`.
    pub fn assemble(samples: &[&TripletSample], dropout: f64, rng: &mut Rng) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let images: Vec<Tensor> = samples
            .iter()
            .map(|s| s.image.to_rgb().to_signed_chw())
            .collect();
        let controls: Vec<Tensor> = samples
            .iter()
            .map(|s| {
                Tensor::new(
                    [1, s.edge.height(), s.edge.width()],
                    s.edge.pixels().to_vec(),
                )
            })
            .collect::<Result<_>>()?;
        let prompts = samples
            .iter()
            .map(|s| prompt_dropout(&s.prompt, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            images: stack(&images)?,
            controls: stack(&controls)?,
            prompts,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Concatenates batches along the batch axis.
    pub fn concat(parts: &[&TrainBatch]) -> Result<Self> {
        let images: Vec<&Tensor> = parts.iter().map(|b| &b.images).collect();
        let controls: Vec<&Tensor> = parts.iter().map(|b| &b.controls).collect();
        Ok(Self {
            images: Tensor::cat_batch(&images)?,
            controls: Tensor::cat_batch(&controls)?,
            prompts: parts
                .iter()
                .flat_map(|b| b.prompts.iter().cloned())
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    pub z_t: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

/// Draws one timestep per item (uniform over the schedule), then the noise.
pub fn noise_batch(z0: &Tensor, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<NoisedBatch> {
    let b = z0.shape()[0];
    let per = z0.numel() / b;
    let t: Vec<usize> = (0..b).map(|_| rng.below(schedule.steps())).collect();
    let eps = Tensor::randn(z0.shape().to_vec(), rng);
    let mut z_t = vec![0.0f32; z0.numel()];
    for (i, &ti) in t.iter().enumerate() {
        let (a, s) = schedule.coefficients(ti);
        let (a, s) = (a as f32, s as f32);
        let r = i * per..(i + 1) * per;
        for ((z, &x), &e) in z_t[r.clone()]
            .iter_mut()
            .zip(&z0.data()[r.clone()])
            .zip(&eps.data()[r])
        {
            *z = a * x + s * e;
        }
    }
    Ok(NoisedBatch {
        z_t: Tensor::new(z0.shape().to_vec(), z_t)?,
        t,
        eps,
    })
}

/// Mean of (ε − ε_θ(z_t, t, c_t, c_f))² over every element.
pub fn diffusion_loss(
    tape: &Tape,
    model: &dyn NoisePredictor,
    embedder: &TextEmbedder,
    batch: &TrainBatch,
    noised: &NoisedBatch,
) -> Result<Var> {
    let c_t = embedder.encode(tape, &batch.prompts)?;
    let z_t = tape.constant(noised.z_t.clone());
    let control = tape.constant(batch.controls.clone());
    let pred = model.predict_noise(tape, &z_t, &noised.t, &c_t, Some(&control))?;
    let eps = tape.constant(noised.eps.clone());
    tape.mse(&pred, &eps)
}

/// Samples noise, evaluates the loss and runs backward, leaving gradients
/// in the model's stores and the embedder's store. Returns the loss.
pub fn diffusion_train_step<M: NoisePredictor>(
    model: &mut M,
    embedder: &mut TextEmbedder,
    schedule: &NoiseSchedule,
    batch: &TrainBatch,
    rng: &mut Rng,
) -> Result<f32> {
    let noised = noise_batch(&batch.images, schedule, rng)?;
    let tape = Tape::new();
    let loss = diffusion_loss(&tape, &*model, embedder, batch, &noised)?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::Divergence(format!("diffusion loss became {value}")));
    }
    let mut stores = model.stores_mut();
    stores.push(&mut embedder.store);
    tape.backward(&loss, &mut stores)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    /// Replays a fixed tensor as its prediction.
    struct Replay {
        config: DenoiserConfig,
        out: RefCell<Tensor>,
    }

    impl NoisePredictor for Replay {
        fn config(&self) -> &DenoiserConfig {
            &self.config
        }

        fn predict_noise(
            &self,
            tape: &Tape,
            _z: &Var,
            _t: &[usize],
            _c: &Var,
            _f: Option<&Var>,
        ) -> Result<Var> {
            Ok(tape.constant(self.out.borrow().clone()))
        }

        fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
            Vec::new()
        }
    }

    fn batch(n: usize, res: usize, rng: &mut Rng) -> TrainBatch {
        TrainBatch {
            images: Tensor::uniform([n, 3, res, res], -1.0, 1.0, rng),
            controls: Tensor::zeros([n, 1, res, res]),
            prompts: vec!["ruled style".into(); n],
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut rng = Rng::new(1);
        let b = batch(4, 8, &mut rng);
        let schedule = NoiseSchedule::scaled_default(50).unwrap();
        let noised = noise_batch(&b.images, &schedule, &mut rng).unwrap();
        let stub = Replay {
            config: DenoiserConfig::default(),
            out: RefCell::new(noised.eps.clone()),
        };
        let emb = TextEmbedder::from_prompts(["ruled style"], 32, &mut rng);
        let tape = Tape::no_grad();
        let loss = diffusion_loss(&tape, &stub, &emb, &b, &noised).unwrap();
        assert_eq!(loss.value().item().unwrap(), 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_noise_power() {
        let mut rng = Rng::new(2);
        let b = batch(64, 16, &mut rng);
        let schedule = NoiseSchedule::scaled_default(50).unwrap();
        let noised = noise_batch(&b.images, &schedule, &mut rng).unwrap();
        let stub = Replay {
            config: DenoiserConfig::default(),
            out: RefCell::new(Tensor::zeros(b.images.shape().to_vec())),
        };
        let emb = TextEmbedder::from_prompts(["ruled style"], 32, &mut rng);
        let tape = Tape::no_grad();
        let loss = diffusion_loss(&tape, &stub, &emb, &b, &noised)
            .unwrap()
            .value()
            .item()
            .unwrap();
        assert!((loss - 1.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn noised_items_use_their_own_timestep() {
        let mut rng = Rng::new(3);
        let z0 = Tensor::uniform([3, 1, 2, 2], -1.0, 1.0, &mut rng);
        let schedule = NoiseSchedule::scaled_default(10).unwrap();
        let n = noise_batch(&z0, &schedule, &mut rng).unwrap();
        for i in 0..3 {
            let one = |t: &Tensor| t.slice_batch(i, i + 1).unwrap();
            let expect =
                super::super::forward_diffuse(&one(&z0), n.t[i], &one(&n.eps), &schedule).unwrap();
            assert_eq!(one(&n.z_t), expect);
        }
    }

    #[test]
    fn train_step_populates_gradients_and_is_deterministic() {
        let cfg = DenoiserConfig {
            resolution: 8,
            base_channels: 4,
            channel_mults: vec![1, 2],
            time_dim: 8,
            text_dim: 4,
            ..Default::default()
        };
        let run = || {
            let mut rng = Rng::new(9);
            let mut net = Denoiser::new(cfg.clone(), &mut rng).unwrap();
            let mut emb = TextEmbedder::from_prompts(["ruled style"], 4, &mut rng);
            let b = batch(2, 8, &mut rng);
            let schedule = NoiseSchedule::scaled_default(20).unwrap();
            let loss = diffusion_train_step(&mut net, &mut emb, &schedule, &b, &mut rng).unwrap();
            assert!(net.enc_store.iter().all(|p| p.grad.is_some()));
            assert!(emb.store.iter().all(|p| p.grad.is_some()));
            loss
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
