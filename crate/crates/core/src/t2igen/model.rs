use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{apply_mask, sample_mask};
use crate::checkpoint;
use crate::error::{ensure, Error, Result};
use crate::numerics::layers::{BlockDims, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::numerics::{AdamW, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::vq::TokenGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2iConfig {
    /// Codebook size; the token table has one extra row for the dropped token.
    pub k: usize,
    /// Grid side; sequences hold `side * side` tokens.
    pub side: usize,
    /// Width of the caption hidden states fed in as conditioning.
    pub text_dim: usize,
    /// Longest caption (in tokens) the context can hold.
    pub ctx_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Per-example probability of replacing the caption with the null context.
    pub caption_dropout: f64,
    pub seed: u64,
}

impl Default for T2iConfig {
    fn default() -> Self {
        T2iConfig {
            k: 512,
            side: 8,
            text_dim: 64,
            ctx_len: 64,
            dim: 128,
            layers: 4,
            heads: 4,
            mlp_hidden: 512,
            dropout: 0.0,
            caption_dropout: 0.1,
            seed: 0,
        }
    }
}

impl T2iConfig {
    pub fn tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn drop_id(&self) -> u32 {
        self.k as u32
    }

    /// Context rows: the pooled row followed by `ctx_len` token rows.
    pub fn ctx_rows(&self) -> usize {
        self.ctx_len + 1
    }
}

/// Frozen-LM final hidden states of one caption (`len x text_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionEmbedding {
    pub hidden: Tensor,
}

impl CaptionEmbedding {
    pub fn new(hidden: Tensor) -> Result<Self> {
        ensure!(
            hidden.shape().len() == 2 && hidden.rows() >= 1,
            Dimension,
            "caption embedding must be a non-empty matrix, got {:?}",
            hidden.shape()
        );
        Ok(CaptionEmbedding { hidden })
    }

    pub fn pooled(&self) -> Vec<f32> {
        let h = &self.hidden;
        let mut out = vec![0.0; h.cols()];
        for r in 0..h.rows() {
            out.iter_mut().zip(h.row(r)).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|x| *x /= h.rows() as f32);
        out
    }
}

/// Caption conditioning for one example; `None` selects the learned null context.
pub type Condition<'a> = Option<&'a CaptionEmbedding>;

#[derive(Clone, Debug)]
pub struct T2iModel {
    pub cfg: T2iConfig,
    pub store: ParamStore<f32>,
    text_proj: Linear,
    null_ctx: ParamId,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl T2iModel {
    pub fn new(cfg: T2iConfig) -> Result<Self> {
        ensure!(cfg.k >= 1 && cfg.side >= 1, Config, "t2i needs k >= 1 and side >= 1");
        ensure!(
            (0.0..=1.0).contains(&cfg.caption_dropout),
            Config,
            "caption dropout {} outside [0, 1]",
            cfg.caption_dropout
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let text_proj = Linear::new(&mut store, "t2i.text_proj", cfg.text_dim, cfg.dim, true, &mut rng);
        let null_ctx = store.init("t2i.null_ctx", &[1, cfg.dim], Init::Normal(INIT_STD), &mut rng);
        let tok_emb = store.init("t2i.tok_emb", &[cfg.k + 1, cfg.dim], Init::Normal(INIT_STD), &mut rng);
        let pos_emb = store.init(
            "t2i.pos_emb",
            &[cfg.tokens(), cfg.dim],
            Init::Normal(INIT_STD),
            &mut rng,
        );
        let dims = BlockDims {
            dim: cfg.dim,
            heads: cfg.heads,
            mlp_hidden: cfg.mlp_hidden,
            cross_dim: Some(cfg.dim),
            dropout: cfg.dropout,
        };
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("t2i.blocks.{i}"), dims, &mut rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(&mut store, "t2i.ln_f", cfg.dim, &mut rng);
        let head = Linear::new(&mut store, "t2i.head", cfg.dim, cfg.k, true, &mut rng);
        Ok(T2iModel {
            cfg,
            store,
            text_proj,
            null_ctx,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn content_hash(&self) -> String {
        self.store.content_hash("t2i.")
    }

    /// Projected context for every example (`B * ctx_rows x dim`) and its key mask.
    ///
    /// A caption contributes its pooled row plus one row per token; remaining
    /// rows are masked. The null context is one learned row.
    fn context<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        conds: &[Condition],
    ) -> Result<(Var, Vec<bool>)> {
        let rows = self.cfg.ctx_rows();
        let td = self.cfg.text_dim;
        let mut mask = Vec::with_capacity(conds.len() * rows);
        let mut raw = Vec::new();
        let mut n_cond = 0;
        for c in conds.iter().flatten() {
            let h = &c.hidden;
            ensure!(h.cols() == td, Dimension, "caption width {} != text_dim {td}", h.cols());
            let len = h.rows().min(self.cfg.ctx_len);
            raw.extend(c.pooled().into_iter().map(|x| T::of(x as f64)));
            raw.extend(h.data()[..len * td].iter().map(|&x| T::of(x as f64)));
            raw.extend(std::iter::repeat_n(T::zero(), (self.cfg.ctx_len - len) * td));
            n_cond += 1;
        }
        let projected = if n_cond > 0 {
            let x = g.constant(Tensor::new(vec![n_cond * rows, td], raw)?)?;
            Some(self.text_proj.forward(g, store, x)?)
        } else {
            None
        };
        let null = g.param(store, self.null_ctx);
        let null_rows = if conds.iter().any(Option::is_none) {
            Some(g.repeat(null, rows)?)
        } else {
            None
        };
        let mut parts = Vec::with_capacity(conds.len());
        let mut ci = 0;
        for c in conds {
            match c {
                Some(c) => {
                    let len = c.hidden.rows().min(self.cfg.ctx_len);
                    parts.push(g.slice_rows(projected.unwrap(), ci * rows, rows)?);
                    mask.extend((0..rows).map(|r| r <= len));
                    ci += 1;
                }
                None => {
                    parts.push(null_rows.unwrap());
                    mask.extend((0..rows).map(|r| r == 0));
                }
            }
        }
        let ctx = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        Ok((ctx, mask))
    }

    /// Logits over the codebook for every position of every grid
    /// (`B * N x K`). Grids may contain the dropped token.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        grids: &[&TokenGrid],
        conds: &[Condition],
    ) -> Result<Var> {
        ensure!(
            !grids.is_empty() && grids.len() == conds.len(),
            Dimension,
            "{} grids vs {} conditions",
            grids.len(),
            conds.len()
        );
        let n = self.cfg.tokens();
        let mut ids = Vec::with_capacity(grids.len() * n);
        for grid in grids {
            ensure!(
                grid.len() == n,
                Dimension,
                "grid has {} tokens, model expects {n}",
                grid.len()
            );
            for &id in grid.ids() {
                ensure!(
                    (id as usize) <= self.cfg.k,
                    Contract,
                    "token id {id} outside 0..={}",
                    self.cfg.k
                );
                ids.push(id as usize);
            }
        }
        let table = g.param(store, self.tok_emb);
        let x = g.gather(table, &ids)?;
        let pos = g.param(store, self.pos_emb);
        let mut x = g.add_broadcast(x, pos)?;
        let (ctx, mask) = self.context(g, store, conds)?;
        let b = grids.len();
        for blk in &self.blocks {
            x = blk.forward(g, store, x, b, false, Some((ctx, b, Some(mask.clone()))))?;
        }
        let h = self.ln_f.forward(g, store, x)?;
        self.head.forward(g, store, h)
    }

    /// Cross-entropy over masked positions only, averaged over all of them.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        examples: &[(&TokenGrid, Condition, &[usize])],
    ) -> Result<Var> {
        let drop = self.cfg.drop_id();
        let mut corrupted = Vec::with_capacity(examples.len());
        let mut targets = Vec::with_capacity(examples.len() * self.cfg.tokens());
        for (grid, _, mask) in examples {
            grid.check_finalized(self.cfg.k)?;
            ensure!(
                !mask.is_empty(),
                Contract,
                "empty mask set: masked-only loss is undefined"
            );
            corrupted.push(apply_mask(grid, mask, drop)?);
            let start = targets.len();
            targets.extend(std::iter::repeat_n(self.cfg.k, grid.len()));
            for &p in mask.iter() {
                targets[start + p] = grid.ids()[p] as usize;
            }
        }
        let refs: Vec<&TokenGrid> = corrupted.iter().collect();
        let conds: Vec<Condition> = examples.iter().map(|e| e.1).collect();
        let logits = self.logits(g, store, &refs, &conds)?;
        g.cross_entropy(logits, &targets, Some(self.cfg.k))
    }

    /// Deterministic evaluation loss of one example with a given mask.
    pub fn eval_loss(&self, grid: &TokenGrid, cond: Condition, mask: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss(&mut g, &self.store, &[(grid, cond, mask)])?;
        Ok(g.value(l).item() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "component": "t2i",
            "config": self.cfg,
            "hash": self.content_hash(),
        });
        checkpoint::save_params(path, meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load_params(path)?;
        ensure!(
            meta["component"] == "t2i",
            Data,
            "{} is not a t2i checkpoint",
            path.display()
        );
        let mut m = T2iModel::new(serde_json::from_value(meta["config"].clone())?)?;
        let n = m.store.copy_values_from(&store, "t2i.")?;
        if n != m.store.len() {
            return Err(Error::Data(format!(
                "{}: {n} of {} t2i parameters present",
                path.display(),
                m.store.len()
            )));
        }
        Ok(m)
    }
}

/// One training pair: caption conditioning plus its ground-truth grid.
#[derive(Clone, Debug)]
pub struct T2iExample {
    pub caption: CaptionEmbedding,
    pub grid: TokenGrid,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct T2iStepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Examples in this step that used the null context.
    pub null_captions: usize,
    pub batch: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct T2iTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Stop once the mean loss of the last `window` steps drops below this.
    pub early_stop: Option<(f64, usize)>,
}

/// Bernoulli draw deciding whether an example trains unconditionally.
pub fn drop_caption<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Trains on batches pulled from `stream`. Each example gets a fresh cosine
/// mask and is captioned-dropped with probability `cfg.caption_dropout`.
pub fn train_t2i<I>(
    model: &mut T2iModel,
    stream: &mut I,
    opt: &mut AdamW,
    cfg: &T2iTrainConfig,
) -> Result<Vec<T2iStepRecord>>
where
    I: Iterator<Item = T2iExample>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log: Vec<T2iStepRecord> = Vec::with_capacity(cfg.steps);
    let n = model.cfg.tokens();
    for step in 0..cfg.steps {
        let t0 = std::time::Instant::now();
        let batch: Vec<T2iExample> = stream.by_ref().take(cfg.batch).collect();
        if batch.is_empty() {
            ensure!(step > 0, Data, "empty t2i training stream");
            break;
        }
        let masks: Vec<Vec<usize>> = batch.iter().map(|_| sample_mask(&mut rng, n)).collect();
        let dropped: Vec<bool> = batch
            .iter()
            .map(|_| drop_caption(&mut rng, model.cfg.caption_dropout))
            .collect();
        let examples: Vec<(&TokenGrid, Condition, &[usize])> = batch
            .iter()
            .zip(&masks)
            .zip(&dropped)
            .map(|((e, m), &d)| (&e.grid, (!d).then_some(&e.caption), m.as_slice()))
            .collect();
        let mut g = Graph::training(rng.random());
        let loss = model.loss(&mut g, &model.store, &examples)?;
        let value = g.value(loss).item() as f64;
        g.backward_into(loss, &mut model.store)?;
        let stats = opt.step(&mut model.store)?;
        log.push(T2iStepRecord {
            step: opt.state.step,
            loss: value,
            lr: stats.lr,
            null_captions: dropped.iter().filter(|&&d| d).count(),
            batch: batch.len(),
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
