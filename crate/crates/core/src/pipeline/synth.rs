//! On-the-fly synthetic pairs: caption -> frozen LM -> generator -> token grid.
//! Grids go straight to the VLM as embeddings; nothing is decoded to pixels.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::derive_seed;
use crate::error::Result;
use crate::lm::FrozenLm;
use crate::t2igen::{decode_iterative, CaptionEmbedding, DecodeConfig, T2iModel};
use crate::vlm::{ImageInput, Origin, PairRecord};

/// Capacity of producer queues; producers block when it is full.
pub const QUEUE_DEPTH: usize = 4;

/// Yields `n` synthetic pairs. Pair `i` uses caption `i mod len` and a
/// decode seed derived from `(seed, i)`, so the stream is reproducible.
pub struct SynthPairs {
    captions: Vec<Vec<u32>>,
    lm: Arc<FrozenLm>,
    t2i: Arc<T2iModel>,
    decode: DecodeConfig,
    seed: u64,
    next: usize,
    n: usize,
}

pub fn synth_pairs(
    captions: Vec<Vec<u32>>,
    lm: Arc<FrozenLm>,
    t2i: Arc<T2iModel>,
    decode: DecodeConfig,
    n: usize,
    seed: u64,
) -> SynthPairs {
    SynthPairs {
        captions,
        lm,
        t2i,
        decode,
        seed,
        next: 0,
        n,
    }
}

impl SynthPairs {
    fn make(&self, i: usize) -> Result<PairRecord> {
        let caption = self.captions[i % self.captions.len()].clone();
        let emb = CaptionEmbedding::new(self.lm.hidden_states(&caption)?)?;
        let cfg = DecodeConfig {
            seed: derive_seed(self.seed, i as u64),
            ..self.decode.clone()
        };
        let (grid, _) = decode_iterative(&self.t2i, &emb, &cfg)?;
        Ok(PairRecord {
            caption,
            image: ImageInput::Embedding(grid),
            origin: Origin::Synthetic,
        })
    }
}

impl Iterator for SynthPairs {
    type Item = Result<PairRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.n || self.captions.is_empty() {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.make(i))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = if self.captions.is_empty() {
            0
        } else {
            self.n - self.next
        };
        (left, Some(left))
    }
}

/// Runs `iter` on a worker thread behind a bounded queue of [`QUEUE_DEPTH`].
/// Dropping the receiver stops the worker at its next send.
pub fn spawn_producer<I>(iter: I) -> (Receiver<I::Item>, JoinHandle<()>)
where
    I: Iterator + Send + 'static,
    I::Item: Send + 'static,
{
    let (tx, rx) = sync_channel(QUEUE_DEPTH);
    let handle = std::thread::spawn(move || {
        for item in iter {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    (rx, handle)
}
