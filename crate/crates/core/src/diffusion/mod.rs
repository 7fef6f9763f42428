//! Pixel-space conditional diffusion: schedule, prompt encoder, U-Net,
//! training objective and guided ancestral sampling.

mod sample;
mod schedule;
mod text;
mod train;
mod unet;

pub use sample::{guide, sample, sample_batch, SampleRequest};
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule};
pub use text::{tokenize, TextEmbedder, TEXT_TABLE};
pub use train::{
    diffusion_loss, diffusion_train_step, noise_batch, NoisePredictor, NoisedBatch, TrainBatch,
};
pub use unet::{
    timestep_embedding, Decoder, Denoiser, DenoiserConfig, Encoder, EncoderFeatures, ResBlock,
    Residuals,
};
