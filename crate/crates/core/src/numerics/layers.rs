//! Transformer building blocks. Each layer only stores [`ParamId`]s and runs
//! against whichever [`ParamStore`] the caller passes in.

use rand::Rng;

use super::graph::{AttnSpec, Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Scalar;
use crate::error::{ensure, Result};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_init(store, name, in_dim, out_dim, bias, Init::Normal(INIT_STD), rng)
    }

    pub fn with_init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.init(format!("{name}.w"), &[in_dim, out_dim], init, rng);
        let b = bias.then(|| store.init(format!("{name}.b"), &[out_dim], Init::Zeros, rng));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        LayerNorm {
            gamma: store.init(format!("{name}.gamma"), &[dim], Init::Ones, rng),
            beta: store.init(format!("{name}.beta"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention with separate query and key/value source widths.
/// The same kernel serves self-attention (`kv == q`) and cross-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            heads > 0 && dim % heads == 0,
            Config,
            "model dim {dim} not divisible by {heads} heads"
        );
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        })
    }

    /// `groups` independent sequences are packed along rows of `q_src` and
    /// `kv_src`; see [`AttnSpec`].
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q_src: Var,
        kv_src: Var,
        groups: usize,
        causal: bool,
        key_mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, q_src)?;
        let k = self.k.forward(g, store, kv_src)?;
        let v = self.v.forward(g, store, kv_src)?;
        let spec = AttnSpec::new(self.heads, groups).causal(causal).key_mask(key_mask);
        let a = g.attention(q, k, v, &spec)?;
        self.o.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        let y = self.fc2.forward(g, store, h)?;
        g.dropout(y, self.dropout)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention, MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Width of the cross-attention memory, if the block has cross-attention.
    pub cross_dim: Option<usize>,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: BlockDims,
        rng: &mut R,
    ) -> Result<Self> {
        let BlockDims {
            dim,
            heads,
            mlp_hidden,
            cross_dim,
            dropout,
        } = dims;
        let ln_self = LayerNorm::new(store, &format!("{name}.ln_self"), dim, rng);
        let self_attn = MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, dim, heads, rng)?;
        let cross = match cross_dim {
            Some(cd) => Some((
                LayerNorm::new(store, &format!("{name}.ln_cross"), dim, rng),
                MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, cd, heads, rng)?,
            )),
            None => None,
        };
        Ok(TransformerBlock {
            ln_self,
            self_attn,
            cross,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), dim, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, dropout, rng),
            dropout,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        groups: usize,
        causal: bool,
        memory: Option<(Var, usize, Option<Vec<bool>>)>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, groups, causal, None)?;
        let a = g.dropout(a, self.dropout)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, attn)), Some((mem, mem_groups, mask))) = (&self.cross, memory) {
            ensure!(
                mem_groups == groups,
                Dimension,
                "memory has {mem_groups} groups, input {groups}"
            );
            let h = ln.forward(g, store, x)?;
            let c = attn.forward(g, store, h, mem, groups, false, mask)?;
            let c = g.dropout(c, self.dropout)?;
            x = g.add(x, c)?;
        }
        let h = self.ln_mlp.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}
