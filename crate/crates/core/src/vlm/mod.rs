//! Captioning model: resampled VQ soft embeddings feed gated cross-attention
//! layers interleaved with a frozen language model.

mod model;
mod resampler;

use serde::{Deserialize, Serialize};

use crate::vq::{TokenGrid, ToyImage};

pub use model::{train_vlm, GatedXAttn, VlmConfig, VlmModel, VlmStepRecord, VlmTrainConfig, VLM_FORMAT};
pub use resampler::{PerceiverResampler, ResamplerConfig, ResamplerLayer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Pixel,
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

/// Image side of a pair: pixels go through the VQ encoder, grids skip it.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageInput {
    Pixel(ToyImage),
    Embedding(TokenGrid),
}

impl ImageInput {
    pub fn modality(&self) -> Modality {
        match self {
            ImageInput::Pixel(_) => Modality::Pixel,
            ImageInput::Embedding(_) => Modality::Embedding,
        }
    }
}

/// Caption token ids paired with an image.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub caption: Vec<u32>,
    pub image: ImageInput,
    pub origin: Origin,
}

impl PairRecord {
    pub fn modality(&self) -> Modality {
        self.image.modality()
    }
}
