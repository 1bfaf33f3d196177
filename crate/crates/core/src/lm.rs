//! Small byte-level decoder-only language model. It is pretrained on caption
//! text, then frozen and shared by the generator conditioning, the VLM and the
//! diversity embeddings. All parameters live under `lm.`.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capgen::tokenizer::{BOS, EOS, MAX_LEN, PAD, VOCAB_SIZE};
use crate::checkpoint;
use crate::error::{ensure, Error, Result};
use crate::numerics::layers::{BlockDims, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::numerics::{AdamW, AdamWConfig, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

/// Target id meaning "no loss at this position".
pub const IGNORE: usize = VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 256,
            max_len: MAX_LEN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Right-pads every sequence with PAD to the longest length.
pub fn pad_batch(seqs: &[Vec<u32>]) -> (Vec<u32>, usize) {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(len * seqs.len());
    for s in seqs {
        flat.extend_from_slice(s);
        flat.extend(std::iter::repeat_n(PAD, len - s.len()));
    }
    (flat, len)
}

/// Next-token targets for one sequence: position `i` predicts `ids[i + 1]`.
/// PAD targets and everything after the first EOS are [`IGNORE`]d.
pub fn next_token_targets(ids: &[u32]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len().saturating_sub(1));
    let mut done = false;
    for w in ids.windows(2) {
        if done || w[0] == EOS {
            done = true;
        }
        let t = w[1];
        out.push(if done || t == PAD { IGNORE } else { t as usize });
    }
    out
}

impl LanguageModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: LmConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        ensure!(cfg.max_len >= 2, Config, "max_len {} too short", cfg.max_len);
        let tok_emb = store.init("lm.tok_emb", &[VOCAB_SIZE, cfg.dim], Init::Normal(INIT_STD), rng);
        let pos_emb = store.init("lm.pos_emb", &[cfg.max_len, cfg.dim], Init::Normal(INIT_STD), rng);
        let dims = BlockDims {
            dim: cfg.dim,
            heads: cfg.heads,
            mlp_hidden: cfg.mlp_hidden,
            cross_dim: None,
            dropout: 0.0,
        };
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("lm.blocks.{i}"), dims, rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "lm.ln_f", cfg.dim, rng);
        let head = Linear::new(store, "lm.head", cfg.dim, VOCAB_SIZE, true, rng);
        Ok(LanguageModel {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Token plus position embeddings for `groups` sequences of `len` ids.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[u32], len: usize) -> Result<Var> {
        ensure!(
            len >= 1 && len <= self.cfg.max_len,
            Dimension,
            "sequence length {len} outside 1..={}",
            self.cfg.max_len
        );
        ensure!(
            ids.len() % len == 0,
            Dimension,
            "{} ids is not a whole number of length-{len} rows",
            ids.len()
        );
        let table = g.param(store, self.tok_emb);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = g.gather(table, &idx)?;
        let pos = g.param(store, self.pos_emb);
        let pos = g.slice_rows(pos, 0, len)?;
        g.add_broadcast(tok, pos)
    }

    /// Causal block `i` over `groups` packed sequences.
    pub fn block<T: Scalar>(
        &self,
        i: usize,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        groups: usize,
    ) -> Result<Var> {
        self.blocks[i].forward(g, store, x, groups, true, None)
    }

    pub fn final_norm<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.ln_f.forward(g, store, x)
    }

    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        self.head.forward(g, store, h)
    }

    /// Final normalized hidden states, `groups * len x dim`.
    pub fn hidden<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[u32], len: usize) -> Result<Var> {
        let groups = ids.len() / len;
        let mut x = self.embed(g, store, ids, len)?;
        for i in 0..self.blocks.len() {
            x = self.block(i, g, store, x, groups)?;
        }
        self.final_norm(g, store, x)
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[u32], len: usize) -> Result<Var> {
        let h = self.hidden(g, store, ids, len)?;
        self.head(g, store, h)
    }

    /// Mean next-token cross-entropy over a batch of token sequences.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seqs: &[Vec<u32>]) -> Result<Var> {
        let (flat, len) = pad_batch(seqs);
        ensure!(len >= 2, Contract, "sequences need at least two tokens");
        let (inputs, targets) = shift_batch(&flat, len);
        let logits = self.logits(g, store, &inputs, len - 1)?;
        g.cross_entropy(logits, &targets, Some(IGNORE))
    }

    /// Greedy continuation of `prefix` until EOS or `max_len` total tokens.
    pub fn generate(&self, store: &ParamStore<f32>, prefix: &[u32], max_len: usize) -> Result<Vec<u32>> {
        let mut ids = prefix.to_vec();
        let cap = max_len.min(self.cfg.max_len);
        while ids.len() < cap && ids.last() != Some(&EOS) {
            let mut g = Graph::new();
            let l = self.logits(&mut g, store, &ids, ids.len())?;
            ids.push(argmax(g.value(l).row(ids.len() - 1)) as u32);
        }
        Ok(ids)
    }
}

/// Splits a padded `[B x len]` batch into inputs `[B x (len - 1)]` and flat targets.
pub fn shift_batch(flat: &[u32], len: usize) -> (Vec<u32>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(flat.len());
    let mut targets = Vec::with_capacity(flat.len());
    for row in flat.chunks_exact(len) {
        inputs.extend_from_slice(&row[..len - 1]);
        targets.extend(next_token_targets(row));
    }
    (inputs, targets)
}

pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            steps: 5000,
            batch: 16,
            lr: 1e-3,
            warmup_steps: 200,
            seed: 0,
        }
    }
}

/// A language model bundled with its own parameter store.
#[derive(Clone, Debug)]
pub struct FrozenLm {
    pub model: LanguageModel,
    pub store: ParamStore<f32>,
}

impl FrozenLm {
    pub fn new(cfg: LmConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = LanguageModel::new(cfg, &mut store, &mut rng)?;
        Ok(FrozenLm { model, store })
    }

    pub fn cfg(&self) -> &LmConfig {
        &self.model.cfg
    }

    pub fn content_hash(&self) -> String {
        self.store.content_hash("lm.")
    }

    pub fn freeze(&mut self) {
        self.store.set_trainable_prefix("lm.", false);
    }

    /// Next-token training on tokenized captions. Returns per-step losses.
    pub fn pretrain(&mut self, corpus: &[Vec<u32>], cfg: &LmPretrainConfig) -> Result<Vec<f64>> {
        ensure!(!corpus.is_empty(), Data, "empty language-model corpus");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: cfg.lr,
                warmup_steps: cfg.warmup_steps,
                ..AdamWConfig::default()
            },
            &self.store,
        );
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let b = cfg.batch.min(corpus.len());
            let batch: Vec<Vec<u32>> = sample(&mut rng, corpus.len(), b)
                .iter()
                .map(|i| corpus[i].clone())
                .collect();
            let mut g = Graph::training(rng.random());
            let loss = self.model.loss(&mut g, &self.store, &batch)?;
            losses.push(g.value(loss).item() as f64);
            g.backward_into(loss, &mut self.store)?;
            opt.step(&mut self.store)?;
        }
        Ok(losses)
    }

    /// Final hidden states of one token sequence (`len x dim`).
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Tensor> {
        ensure!(!ids.is_empty(), Contract, "empty token sequence");
        let ids = &ids[..ids.len().min(self.cfg().max_len)];
        let mut g = Graph::new();
        let h = self.model.hidden(&mut g, &self.store, ids, ids.len())?;
        Ok(g.value(h).clone())
    }

    /// Mean of the final hidden states.
    pub fn pooled(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let h = self.hidden_states(ids)?;
        let mut out = vec![0.0f32; h.cols()];
        for r in 0..h.rows() {
            for (o, x) in out.iter_mut().zip(h.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= h.rows() as f32);
        Ok(out)
    }

    pub fn generate(&self, prefix: &[u32], max_len: usize) -> Result<Vec<u32>> {
        self.model.generate(&self.store, prefix, max_len)
    }

    /// Teacher-forced mean loss on `seqs` (no gradient).
    pub fn eval_loss(&self, seqs: &[Vec<u32>]) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.model.loss(&mut g, &self.store, seqs)?;
        Ok(g.value(l).item() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "component": "lm",
            "config": self.cfg(),
            "hash": self.content_hash(),
        });
        checkpoint::save_params(path, meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load_params(path)?;
        ensure!(
            meta["component"] == "lm",
            Data,
            "{} is not a language-model checkpoint",
            path.display()
        );
        let cfg: LmConfig = serde_json::from_value(meta["config"].clone())?;
        let mut lm = FrozenLm::new(cfg)?;
        let n = lm.store.copy_values_from(&store, "lm.")?;
        if n != lm.store.len() {
            return Err(Error::Data(format!(
                "{}: {n} of {} lm parameters present",
                path.display(),
                lm.store.len()
            )));
        }
        for (_, p) in store.iter() {
            if let Some(id) = lm.store.id(&p.name) {
                lm.store.get_mut(id).trainable = p.trainable;
            }
        }
        Ok(lm)
    }

    /// `BOS` alone, the prompt for unconditional generation.
    pub fn bos() -> Vec<u32> {
        vec![BOS]
    }
}
