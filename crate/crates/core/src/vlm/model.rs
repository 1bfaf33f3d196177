use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resampler::{PerceiverResampler, ResamplerConfig};
use super::{ImageInput, Origin, PairRecord};
use crate::capgen::tokenizer::{detokenize, BOS, EOS};
use crate::checkpoint;
use crate::error::{ensure, Error, Result};
use crate::lm::{argmax, pad_batch, shift_batch, FrozenLm, LanguageModel, LmConfig, IGNORE};
use crate::numerics::layers::{LayerNorm, Mlp, MultiHeadAttention};
use crate::numerics::{AdamW, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::vq::{embed, VqBackbone};

pub const VLM_FORMAT: &str = "synthpair-vlm-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub latents: usize,
    pub resampler_layers: usize,
    pub resampler_heads: usize,
    pub width: usize,
    pub resampler_mlp: usize,
    pub xattn_heads: usize,
    /// Hidden width of the gated feed-forward after each cross-attention.
    pub xattn_mlp: usize,
    pub image_positions: bool,
    pub seed: u64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            latents: 16,
            resampler_layers: 2,
            resampler_heads: 4,
            width: 128,
            resampler_mlp: 512,
            xattn_heads: 4,
            xattn_mlp: 256,
            image_positions: true,
            seed: 0,
        }
    }
}

/// Cross-attention and feed-forward sublayers whose outputs are scaled by
/// `tanh(gate)`. Gates start at zero, so a fresh layer is the identity.
#[derive(Clone, Debug)]
pub struct GatedXAttn {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub attn_gate: ParamId,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
    pub ffn_gate: ParamId,
}

impl GatedXAttn {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        dim: usize,
        media_dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GatedXAttn {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, media_dim, heads, rng)?,
            attn_gate: store.init(format!("{name}.attn_gate"), &[1], Init::Zeros, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, hidden, 0.0, rng),
            ffn_gate: store.init(format!("{name}.ffn_gate"), &[1], Init::Zeros, rng),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        media: Var,
        groups: usize,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, media, groups, false, None)?;
        let gate = g.param(store, self.attn_gate);
        let gate = g.tanh(gate)?;
        let a = g.scale_by(a, gate)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let gate = g.param(store, self.ffn_gate);
        let gate = g.tanh(gate)?;
        let f = g.scale_by(f, gate)?;
        g.add(x, f)
    }
}

/// Frozen LM copy, resampler and gated layers in one store. The VQ backbone
/// is shared and only ever read.
#[derive(Clone, Debug)]
pub struct VlmModel {
    pub cfg: VlmConfig,
    pub store: ParamStore<f32>,
    pub lm: LanguageModel,
    pub resampler: PerceiverResampler,
    pub xattn: Vec<GatedXAttn>,
    vq: Arc<VqBackbone>,
}

impl VlmModel {
    /// Copies the LM weights in and marks them frozen.
    pub fn new(cfg: VlmConfig, lm: &FrozenLm, vq: Arc<VqBackbone>) -> Result<Self> {
        let mut m = Self::build(cfg, lm.cfg().clone(), vq)?;
        let n = m.store.copy_values_from(&lm.store, "lm.")?;
        ensure!(
            n == lm.store.len(),
            Config,
            "copied {n} of {} lm parameters",
            lm.store.len()
        );
        Ok(m)
    }

    fn build(cfg: VlmConfig, lm_cfg: LmConfig, vq: Arc<VqBackbone>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let lm = LanguageModel::new(lm_cfg, &mut store, &mut rng)?;
        store.set_trainable_prefix("lm.", false);
        let rcfg = ResamplerConfig {
            in_dim: vq.config().d,
            latents: cfg.latents,
            layers: cfg.resampler_layers,
            heads: cfg.resampler_heads,
            width: cfg.width,
            mlp_hidden: cfg.resampler_mlp,
            max_tokens: vq.config().tokens(),
            positional: cfg.image_positions,
        };
        let resampler = PerceiverResampler::new(rcfg, &mut store, "vlm.resampler", &mut rng)?;
        let xattn = (0..lm.layers())
            .map(|i| {
                GatedXAttn::new(
                    &mut store,
                    &format!("vlm.xattn.{i}"),
                    lm.cfg.dim,
                    cfg.width,
                    cfg.xattn_heads,
                    cfg.xattn_mlp,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(VlmModel {
            cfg,
            store,
            lm,
            resampler,
            xattn,
            vq,
        })
    }

    pub fn vq(&self) -> &Arc<VqBackbone> {
        &self.vq
    }

    pub fn lm_hash(&self) -> String {
        self.store.content_hash("lm.")
    }

    pub fn resampler_hash(&self) -> String {
        self.store.content_hash("vlm.resampler.")
    }

    pub fn xattn_hash(&self) -> String {
        self.store.content_hash("vlm.xattn.")
    }

    /// Every attention and feed-forward gate, layer by layer.
    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.xattn.iter().flat_map(|x| [x.attn_gate, x.ffn_gate]).collect()
    }

    /// Soft embeddings (`N x D`) of one image. Pixels are encoded and
    /// quantized first; both paths end in the same codebook lookup.
    pub fn media(&self, image: &ImageInput) -> Result<Tensor> {
        let grid = match image {
            ImageInput::Pixel(img) => self.vq.encode_image(img)?,
            ImageInput::Embedding(grid) => grid.clone(),
        };
        grid.check_finalized(self.vq.config().k)?;
        ensure!(
            grid.side() == self.vq.config().side,
            Config,
            "grid side {} does not match backbone side {}",
            grid.side(),
            self.vq.config().side
        );
        embed(&grid, self.vq.codebook())
    }

    /// Resampled latents for a single image (`latents x width`).
    pub fn resample(&self, media: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = g.constant(media.clone())?;
        let out = self.resampler.forward(&mut g, &self.store, m, 1)?;
        Ok(g.value(out).clone())
    }

    fn media_var<T: Scalar>(&self, g: &mut Graph<T>, media: &[Tensor]) -> Result<Var> {
        ensure!(!media.is_empty(), Dimension, "no media");
        let d = media[0].cols();
        let n = media[0].rows();
        ensure!(
            media.iter().all(|m| m.rows() == n && m.cols() == d),
            Dimension,
            "media in one batch must share a shape"
        );
        let data: Vec<T> = media
            .iter()
            .flat_map(|m| m.data().iter().map(|&x| T::of(x as f64)))
            .collect();
        g.constant(Tensor::new(vec![n * media.len(), d], data)?)
    }

    /// Next-token logits for `media.len()` sequences of `len` ids packed in `ids`.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        media: &[Tensor],
        ids: &[u32],
        len: usize,
    ) -> Result<Var> {
        let groups = media.len();
        ensure!(
            ids.len() == groups * len,
            Dimension,
            "{} ids for {groups} sequences of {len}",
            ids.len()
        );
        let m = self.media_var(g, media)?;
        let latents = self.resampler.forward(g, store, m, groups)?;
        let mut x = self.lm.embed(g, store, ids, len)?;
        for (i, xa) in self.xattn.iter().enumerate() {
            x = self.lm.block(i, g, store, x, groups)?;
            x = xa.forward(g, store, x, latents, groups)?;
        }
        let h = self.lm.final_norm(g, store, x)?;
        self.lm.head(g, store, h)
    }

    /// Mean next-token cross-entropy of `captions` given `media`, skipping PAD
    /// and everything after the first EOS.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        media: &[Tensor],
        captions: &[Vec<u32>],
    ) -> Result<Var> {
        ensure!(
            media.len() == captions.len(),
            Dimension,
            "{} media for {} captions",
            media.len(),
            captions.len()
        );
        let (flat, len) = pad_batch(captions);
        ensure!(len >= 2, Contract, "captions need at least two tokens");
        let (inputs, targets) = shift_batch(&flat, len);
        ensure!(
            targets.iter().any(|&t| t != IGNORE),
            Contract,
            "no scored caption tokens (all PAD)"
        );
        let logits = self.logits(g, store, media, &inputs, len - 1)?;
        g.cross_entropy(logits, &targets, Some(IGNORE))
    }

    pub fn eval_loss(&self, pairs: &[&PairRecord]) -> Result<f64> {
        let media = pairs.iter().map(|p| self.media(&p.image)).collect::<Result<Vec<_>>>()?;
        let caps: Vec<Vec<u32>> = pairs.iter().map(|p| p.caption.clone()).collect();
        let mut g = Graph::new();
        let l = self.loss(&mut g, &self.store, &media, &caps)?;
        Ok(g.value(l).item() as f64)
    }

    /// Fraction of scored next tokens whose argmax matches the caption.
    pub fn token_accuracy(&self, pairs: &[&PairRecord]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for p in pairs {
            ensure!(p.caption.len() >= 2, Contract, "captions need at least two tokens");
            let media = self.media(&p.image)?;
            let (inputs, targets) = shift_batch(&p.caption, p.caption.len());
            let mut g = Graph::new();
            let l = self.logits(&mut g, &self.store, &[media], &inputs, inputs.len())?;
            for (i, &t) in targets.iter().enumerate().filter(|(_, &t)| t != IGNORE) {
                total += 1;
                hit += (argmax(g.value(l).row(i)) == t) as usize;
            }
        }
        ensure!(total > 0, Contract, "no scored caption tokens");
        Ok(hit as f64 / total as f64)
    }

    /// Greedy caption from BOS until EOS or `max_len` tokens.
    pub fn generate_caption(&self, image: &ImageInput, max_len: usize) -> Result<Vec<u32>> {
        let media = self.media(image)?;
        let cap = max_len.min(self.lm.cfg.max_len);
        let mut ids = vec![BOS];
        while ids.len() < cap && ids.last() != Some(&EOS) {
            let mut g = Graph::new();
            let l = self.logits(&mut g, &self.store, std::slice::from_ref(&media), &ids, ids.len())?;
            ids.push(argmax(g.value(l).row(ids.len() - 1)) as u32);
        }
        Ok(ids)
    }

    /// Writes the whole store plus a manifest of per-component hashes. The VQ
    /// backbone is not stored; its hash pins the one that must be supplied on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "component": "vlm",
            "format": VLM_FORMAT,
            "config": self.cfg,
            "lm_config": self.lm.cfg,
            "manifest": {
                "lm": self.lm_hash(),
                "resampler": self.resampler_hash(),
                "xattn": self.xattn_hash(),
                "vq": self.vq.content_hash(),
            },
        });
        checkpoint::save_params(path, meta, &self.store)
    }

    pub fn load(path: &Path, vq: Arc<VqBackbone>) -> Result<Self> {
        let (meta, store) = checkpoint::load_params(path)?;
        ensure!(
            meta["component"] == "vlm",
            Data,
            "{} is not a vlm checkpoint",
            path.display()
        );
        ensure!(
            meta["manifest"]["vq"] == vq.content_hash().as_str(),
            Data,
            "{}: VQ backbone hash does not match the one trained against",
            path.display()
        );
        let cfg: VlmConfig = serde_json::from_value(meta["config"].clone())?;
        let lm_cfg: LmConfig = serde_json::from_value(meta["lm_config"].clone())?;
        let mut m = Self::build(cfg, lm_cfg, vq)?;
        let n = m.store.copy_values_from(&store, "")?;
        if n != m.store.len() {
            return Err(Error::Data(format!(
                "{}: {n} of {} vlm parameters present",
                path.display(),
                m.store.len()
            )));
        }
        for (key, got) in [
            ("lm", m.lm_hash()),
            ("resampler", m.resampler_hash()),
            ("xattn", m.xattn_hash()),
        ] {
            ensure!(
                meta["manifest"][key] == got.as_str(),
                Data,
                "{}: {key} hash mismatch",
                path.display()
            );
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VlmStepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub real: usize,
    pub synthetic: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct VlmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Stop once the mean loss of the last `window` steps drops below this.
    pub early_stop: Option<(f64, usize)>,
}

/// Trains the resampler and gated layers on batches pulled from `stream`.
/// A non-finite loss aborts with the offending captions in the error.
pub fn train_vlm<I>(
    model: &mut VlmModel,
    stream: &mut I,
    opt: &mut AdamW,
    cfg: &VlmTrainConfig,
) -> Result<Vec<VlmStepRecord>>
where
    I: Iterator<Item = PairRecord>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log: Vec<VlmStepRecord> = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let batch: Vec<PairRecord> = stream.by_ref().take(cfg.batch).collect();
        if batch.is_empty() {
            ensure!(step > 0, Data, "empty vlm training stream");
            break;
        }
        let media = batch
            .iter()
            .map(|p| model.media(&p.image))
            .collect::<Result<Vec<_>>>()?;
        let caps: Vec<Vec<u32>> = batch.iter().map(|p| p.caption.clone()).collect();
        let mut g = Graph::training(rng.random());
        let loss = model.loss(&mut g, &model.store, &media, &caps)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            let dump: Vec<String> = caps.iter().map(|c| detokenize(c)).collect();
            return Err(Error::NonFinite(format!(
                "vlm loss at step {step}; batch captions {dump:?}"
            )));
        }
        g.backward_into(loss, &mut model.store)?;
        let stats = opt.step(&mut model.store)?;
        let real = batch.iter().filter(|p| p.origin == Origin::Real).count();
        log.push(VlmStepRecord {
            step: opt.state.step,
            loss: value,
            lr: stats.lr,
            real,
            synthetic: batch.len() - real,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if let Some((threshold, window)) = cfg.early_stop {
            if log.len() >= window {
                let recent = &log[log.len() - window..];
                if recent.iter().map(|r| r.loss).sum::<f64>() / (window as f64) < threshold {
                    break;
                }
            }
        }
    }
    Ok(log)
}
