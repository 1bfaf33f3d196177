use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::layers::{LayerNorm, Linear, Mlp, MultiHeadAttention, INIT_STD};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResamplerConfig {
    /// Width of the incoming soft embeddings.
    pub in_dim: usize,
    pub latents: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    /// Size of the learned position table; inputs may not be longer.
    pub max_tokens: usize,
    /// Add a learned embedding per input position before resampling.
    pub positional: bool,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig {
            in_dim: 32,
            latents: 16,
            layers: 2,
            heads: 4,
            width: 128,
            mlp_hidden: 512,
            max_tokens: 256,
            positional: true,
        }
    }
}

/// One latent update: cross-attention to the inputs, then an MLP, both residual.
#[derive(Clone, Debug)]
pub struct ResamplerLayer {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// Learned latent queries that cross-attend to a variable number of input
/// tokens and always emit `latents` rows.
#[derive(Clone, Debug)]
pub struct PerceiverResampler {
    pub cfg: ResamplerConfig,
    pub in_proj: Linear,
    pub pos: Option<ParamId>,
    pub latents: ParamId,
    pub layers: Vec<ResamplerLayer>,
    pub ln_out: LayerNorm,
}

impl PerceiverResampler {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: ResamplerConfig,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            cfg.latents >= 1 && cfg.max_tokens >= 1,
            Config,
            "resampler needs latents and max_tokens >= 1"
        );
        let w = cfg.width;
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), cfg.in_dim, w, true, rng);
        let pos = cfg
            .positional
            .then(|| store.init(format!("{name}.pos"), &[cfg.max_tokens, w], Init::Normal(INIT_STD), rng));
        let latents = store.init(format!("{name}.latents"), &[cfg.latents, w], Init::Normal(1.0), rng);
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                Ok(ResamplerLayer {
                    ln_q: LayerNorm::new(store, &format!("{p}.ln_q"), w, rng),
                    ln_kv: LayerNorm::new(store, &format!("{p}.ln_kv"), w, rng),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), w, w, cfg.heads, rng)?,
                    ln_mlp: LayerNorm::new(store, &format!("{p}.ln_mlp"), w, rng),
                    mlp: Mlp::new(store, &format!("{p}.mlp"), w, cfg.mlp_hidden, 0.0, rng),
                })
            })
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), w, rng);
        Ok(PerceiverResampler {
            cfg,
            in_proj,
            pos,
            latents,
            layers,
            ln_out,
        })
    }

    /// `media` packs `groups` inputs of `n` rows each (`groups * n x in_dim`);
    /// the result is `groups * latents x width`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        media: Var,
        groups: usize,
    ) -> Result<Var> {
        let (rows, cols) = {
            let t = g.value(media);
            (t.rows(), t.cols())
        };
        ensure!(
            cols == self.cfg.in_dim,
            Config,
            "media width {cols} != resampler input width {}",
            self.cfg.in_dim
        );
        ensure!(
            groups >= 1 && rows % groups == 0 && rows > 0,
            Dimension,
            "{rows} media rows in {groups} groups"
        );
        let n = rows / groups;
        ensure!(
            n <= self.cfg.max_tokens,
            Dimension,
            "{n} media tokens exceed max_tokens {}",
            self.cfg.max_tokens
        );
        let mut m = self.in_proj.forward(g, store, media)?;
        if let Some(pos) = self.pos {
            let table = g.param(store, pos);
            let p = g.slice_rows(table, 0, n)?;
            m = g.add_broadcast(m, p)?;
        }
        let lat = g.param(store, self.latents);
        let mut x = if groups == 1 { lat } else { g.repeat(lat, groups)? };
        for l in &self.layers {
            let q = l.ln_q.forward(g, store, x)?;
            let kv = l.ln_kv.forward(g, store, m)?;
            let a = l.attn.forward(g, store, q, kv, groups, false, None)?;
            x = g.add(x, a)?;
            let h = l.ln_mlp.forward(g, store, x)?;
            let f = l.mlp.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        self.ln_out.forward(g, store, x)
    }
}
