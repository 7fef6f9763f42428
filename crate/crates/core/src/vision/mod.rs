//! Image I/O, Canny conditioning maps and triplet dataset construction.

pub mod canny;
pub mod dataset;
pub mod image;
pub mod synth;

pub use canny::{canny, CannyParams, EdgeMap};
pub use dataset::{
    artist_prompt, build_manifest, prompt_dropout, synth_style_corpus, ArtistPattern, CorpusStats,
    DatasetManifest, Domain, ManifestRecord, TripletSample, MANIFEST_FILE,
};
pub use image::{load_image, resize, save_image, Image};
pub use synth::{synth_image, synth_images, Style};
