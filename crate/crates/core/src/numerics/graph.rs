//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers. Nodes
//! that cannot reach a trainable leaf are never visited, so frozen sub-networks
//! cost nothing beyond their forward pass.
//!
//! Tensors are treated as matrices: the last dimension is the column count and
//! everything before it is folded into rows.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{ensure, Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a batched attention call.
///
/// Queries are `groups * sq` rows and keys/values `groups * sk` rows; group `g`
/// only attends within itself.
#[derive(Clone, Debug, Default)]
pub struct AttnSpec {
    pub heads: usize,
    pub groups: usize,
    pub causal: bool,
    /// One flag per key row; `false` keys receive zero attention.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnSpec {
    pub fn new(heads: usize, groups: usize) -> Self {
        AttnSpec {
            heads,
            groups,
            causal: false,
            key_mask: None,
        }
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn key_mask(mut self, mask: Option<Vec<bool>>) -> Self {
        self.key_mask = mask;
        self
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// (mean, 1/std) per row.
        stats: Vec<(T, T)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Repeat {
        x: Var,
        times: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<T>,
        count: usize,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Gather { .. } => "gather",
            Op::Repeat { .. } => "repeat",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "output of {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf input whose gradient should be recorded.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let mut value = p.tensor.clone();
        value.grad = None;
        let v = self
            .push(value, Op::Param, p.trainable)
            .expect("stored parameters are finite");
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape().len() == 2 && tb.shape().len() == 2,
            Dimension,
            "matmul needs rank-2 operands, got {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[1];
        ensure!(
            tb.shape()[0] == k,
            Dimension,
            "matmul inner dims differ: {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::new(ta.data(), 0, m, k, k),
            MatRef::new(tb.data(), 0, k, n, n),
            T::zero(),
            &mut out,
            0,
            n,
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape() == tb.shape(),
            Dimension,
            "add shapes differ: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `a + tile(b)`: row `i` of `a` gets row `i % rows(b)` of `b`.
    /// Covers biases (`b` is one row) and positional tables.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r, nb) = self.dims(b);
        ensure!(
            nb == n && m % r == 0,
            Dimension,
            "cannot broadcast {:?} onto {:?}",
            self.value(b).shape(),
            self.value(a).shape()
        );
        let tb = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let src = &tb[(i % r) * n..(i % r + 1) * n];
            row.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::AddBroadcast(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape() == tb.shape(),
            Dimension,
            "mul shapes differ: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        ensure!(
            self.value(s).numel() == 1,
            Dimension,
            "scale_by needs a one-element scale, got {:?}",
            self.value(s).shape()
        );
        let c = self.value(s).item();
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())?;
        let ng = self.ng(&[x, s]);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.tanh()).collect())?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        ensure!(eps > 0.0, Parameter, "layer_norm eps must be positive, got {eps}");
        let (rows, n) = self.dims(x);
        ensure!(
            self.value(gamma).numel() == n && self.value(beta).numel() == n,
            Dimension,
            "layer_norm affine params must have {n} elements"
        );
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); rows * n];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
            stats.push((mean, rstd));
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, ng)
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`.
    ///
    /// Heads split the model dimension into contiguous column blocks. Output
    /// has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttnSpec) -> Result<Var> {
        let (qr, d) = self.dims(q);
        let (kr, dk) = self.dims(k);
        let (vr, dv) = self.dims(v);
        let AttnSpec {
            heads,
            groups,
            causal,
            ref key_mask,
        } = *spec;
        ensure!(
            heads > 0 && d % heads == 0,
            Config,
            "model dim {d} not divisible by {heads} heads"
        );
        ensure!(
            dk == d && dv == d && kr == vr,
            Dimension,
            "attention q/k/v dims disagree: q {qr}x{d}, k {kr}x{dk}, v {vr}x{dv}"
        );
        ensure!(
            groups > 0 && qr % groups == 0 && kr % groups == 0,
            Dimension,
            "{groups} groups do not divide {qr} query rows and {kr} key rows"
        );
        let (sq, sk) = (qr / groups, kr / groups);
        ensure!(
            !causal || sq == sk,
            Dimension,
            "causal attention needs square blocks, got {sq}x{sk}"
        );
        if let Some(m) = key_mask {
            ensure!(m.len() == kr, Dimension, "key mask has {} flags for {kr} keys", m.len());
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); groups * heads * sq * sk];
        let mut out = vec![T::zero(); qr * d];
        for g in 0..groups {
            for h in 0..heads {
                let p_off = (g * heads + h) * sq * sk;
                let qv = MatRef::new(tq, g * sq * d + h * dh, sq, dh, d);
                let kv = MatRef::new(tk, g * sk * d + h * dh, sk, dh, d);
                gemm(scale, qv, kv.t(), T::zero(), &mut probs, p_off, sk);
                for i in 0..sq {
                    let row = &mut probs[p_off + i * sk..p_off + (i + 1) * sk];
                    let mut max = T::neg_infinity();
                    for (j, s) in row.iter_mut().enumerate() {
                        let masked = (causal && j > i) || key_mask.as_ref().is_some_and(|m| !m[g * sk + j]);
                        if masked {
                            *s = T::neg_infinity();
                        } else if *s > max {
                            max = *s;
                        }
                    }
                    if max == T::neg_infinity() {
                        return Err(Error::Contract(format!("query {i} of group {g} has no visible keys")));
                    }
                    let mut z = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s = *s / z);
                }
                let pv = MatRef::new(&probs, p_off, sq, sk, sk);
                let vv = MatRef::new(tv, g * sk * d + h * dh, sk, dh, d);
                gemm(T::one(), pv, vv, T::zero(), &mut out, g * sq * d + h * dh, d);
            }
        }
        let out = Tensor::new(self.value(q).shape().to_vec(), out)?;
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            ng,
        )
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(table);
        ensure!(!ids.is_empty(), Dimension, "gather with no ids");
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("gather id {bad} out of range 0..{rows}")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        let ng = self.ng(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Stacks `times` copies of `x` along rows.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        ensure!(times > 0, Parameter, "repeat count must be positive");
        let (r, n) = self.dims(x);
        let data = self.value(x).data().repeat(times);
        let out = Tensor::new(vec![r * times, n], data)?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Repeat { x, times }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Dimension, "concat of nothing");
        let n = self.dims(parts[0]).1;
        ensure!(
            parts.iter().all(|&p| self.dims(p).1 == n),
            Dimension,
            "concat parts have different widths"
        );
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / n;
        let out = Tensor::new(vec![rows, n], data)?;
        let ng = self.ng(parts);
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, n) = self.dims(x);
        ensure!(
            len > 0 && start + len <= r,
            Dimension,
            "row slice {start}..{} out of 0..{r}",
            start + len
        );
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Slice { x, start }, ng)
    }

    /// Inverted dropout; the identity outside training graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        ensure!((0.0..1.0).contains(&p), Parameter, "dropout rate {p} outside [0, 1)");
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Mean softmax cross-entropy over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let (rows, v) = self.dims(logits);
        ensure!(
            targets.len() == rows,
            Dimension,
            "{} targets for {rows} logit rows",
            targets.len()
        );
        let tl = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= v {
                return Err(Error::Contract(format!("target {t} out of range 0..{v}")));
            }
            let row = &tl[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let pr = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            pr.iter_mut().for_each(|p| *p = *p / z);
            total += max + z.ln() - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract(
                "cross-entropy mean undefined: every position is ignored".into(),
            ));
        }
        let loss = total / T::of(count as f64);
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            ng,
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let t = self.value(pred);
        ensure!(
            t.numel() == target.len(),
            Dimension,
            "mse target has {} values for {} predictions",
            target.len(),
            t.numel()
        );
        let n = T::of(t.numel() as f64);
        let loss = t.data().iter().zip(target).map(|(&p, &y)| (p - y) * (p - y)).sum::<T>() / n;
        let ng = self.ng(&[pred]);
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).numel() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.vjp(i, &gout, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and writes parameter gradients into `store`.
    /// Trainable parameters not reachable from `loss` end up with zero gradient.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.zero_grads();
        for (&id, &v) in &self.params {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let (Some(src), Some(dst)) = (grads.get(v), p.tensor.grad.as_mut()) {
                dst.copy_from_slice(src);
            }
        }
        Ok(())
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vjp(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! buf {
            ($v:expr) => {
                self.grad_buf(grads, $v)
            };
        }
        let value = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let go = MatRef::new(gout, 0, m, n, n);
                if self.wants(a) {
                    let ga = buf!(a);
                    gemm(T::one(), go, MatRef::new(tb.data(), 0, k, n, n).t(), T::one(), ga, 0, k);
                }
                if self.wants(b) {
                    let gb = buf!(b);
                    gemm(T::one(), MatRef::new(ta.data(), 0, m, k, k).t(), go, T::one(), gb, 0, n);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        buf!(v).iter_mut().zip(gout).for_each(|(g, &x)| *g += x);
                    }
                }
            }
            &Op::AddBroadcast(a, b) => {
                if self.wants(a) {
                    buf!(a).iter_mut().zip(gout).for_each(|(g, &x)| *g += x);
                }
                if self.wants(b) {
                    let gb = buf!(b);
                    let n = self.value(b).cols();
                    let r = self.value(b).rows();
                    for (row_i, row) in gout.chunks(n).enumerate() {
                        let dst = &mut gb[(row_i % r) * n..(row_i % r + 1) * n];
                        dst.iter_mut().zip(row).for_each(|(g, &x)| *g += x);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let ga = buf!(a);
                    for j in 0..gout.len() {
                        ga[j] += gout[j] * db[j];
                    }
                }
                if self.wants(b) {
                    let gb = buf!(b);
                    for j in 0..gout.len() {
                        gb[j] += gout[j] * da[j];
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.wants(x) {
                    buf!(x).iter_mut().zip(gout).for_each(|(g, &go)| *g += go * c);
                }
            }
            &Op::ScaleBy(x, s) => {
                let c = self.value(s).item();
                if self.wants(x) {
                    buf!(x).iter_mut().zip(gout).for_each(|(g, &go)| *g += go * c);
                }
                if self.wants(s) {
                    let dot: T = gout.iter().zip(self.value(x).data()).map(|(&a, &b)| a * b).sum();
                    buf!(s)[0] += dot;
                }
            }
            &Op::Tanh(x) => {
                if self.wants(x) {
                    let gx = buf!(x);
                    for ((g, &go), &y) in gx.iter_mut().zip(gout).zip(value.data()) {
                        *g += go * (T::one() - y * y);
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                    let three = T::of(3.0);
                    let gx = buf!(x);
                    for ((g, &go), &v) in gx.iter_mut().zip(gout).zip(self.value(x).data()) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d =
                            half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        *g += go * d;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let tx = self.value(x).data();
                let tg = self.value(gamma).data();
                let n = tg.len();
                let nf = T::of(n as f64);
                if self.wants(gamma) || self.wants(beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for j in 0..n {
                            let go = gout[r * n + j];
                            dg[j] += go * (tx[r * n + j] - mean) * rstd;
                            db[j] += go;
                        }
                    }
                    if self.wants(gamma) {
                        buf!(gamma).iter_mut().zip(&dg).for_each(|(g, &d)| *g += d);
                    }
                    if self.wants(beta) {
                        buf!(beta).iter_mut().zip(&db).for_each(|(g, &d)| *g += d);
                    }
                }
                if self.wants(x) {
                    let gx = buf!(x);
                    let mut xhat = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            xhat[j] = (tx[r * n + j] - mean) * rstd;
                            dxhat[j] = gout[r * n + j] * tg[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xhat[j];
                        }
                        let (md, mdx) = (sum_d / nf, sum_dx / nf);
                        for j in 0..n {
                            gx[r * n + j] += rstd * (dxhat[j] - md - xhat[j] * mdx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let (q, k, v, heads, groups) = (*q, *k, *v, *heads, *groups);
                let (qr, d) = self.dims(q);
                let kr = self.value(k).rows();
                let (sq, sk) = (qr / groups, kr / groups);
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
                let mut dp = vec![T::zero(); sq * sk];
                let (wq, wk, wv) = (self.wants(q), self.wants(k), self.wants(v));
                for g in 0..groups {
                    for h in 0..heads {
                        let p_off = (g * heads + h) * sq * sk;
                        let pm = MatRef::new(probs, p_off, sq, sk, sk);
                        let go = MatRef::new(gout, g * sq * d + h * dh, sq, dh, d);
                        if wv {
                            let gv = buf!(v);
                            gemm(T::one(), pm.t(), go, T::one(), gv, g * sk * d + h * dh, d);
                        }
                        if !(wq || wk) {
                            continue;
                        }
                        let vv = MatRef::new(tv, g * sk * d + h * dh, sk, dh, d);
                        gemm(T::one(), go, vv.t(), T::zero(), &mut dp, 0, sk);
                        for i in 0..sq {
                            let prow = &probs[p_off + i * sk..p_off + (i + 1) * sk];
                            let drow = &mut dp[i * sk..(i + 1) * sk];
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &x)| p * x).sum();
                            for (x, &p) in drow.iter_mut().zip(prow) {
                                *x = p * (*x - dot);
                            }
                        }
                        let ds = MatRef::new(&dp, 0, sq, sk, sk);
                        if wq {
                            let kv = MatRef::new(tk, g * sk * d + h * dh, sk, dh, d);
                            gemm(scale, ds, kv, T::one(), buf!(q), g * sq * d + h * dh, d);
                        }
                        if wk {
                            let qv = MatRef::new(tq, g * sq * d + h * dh, sq, dh, d);
                            gemm(scale, ds.t(), qv, T::one(), buf!(k), g * sk * d + h * dh, d);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let n = self.value(*table).cols();
                    let gt = buf!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * n..(id + 1) * n];
                        dst.iter_mut()
                            .zip(&gout[r * n..(r + 1) * n])
                            .for_each(|(g, &x)| *g += x);
                    }
                }
            }
            &Op::Repeat { x, times } => {
                if self.wants(x) {
                    let len = self.value(x).numel();
                    let gx = buf!(x);
                    for t in 0..times {
                        gx.iter_mut()
                            .zip(&gout[t * len..(t + 1) * len])
                            .for_each(|(g, &v)| *g += v);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        buf!(p)
                            .iter_mut()
                            .zip(&gout[off..off + len])
                            .for_each(|(g, &v)| *g += v);
                    }
                    off += len;
                }
            }
            &Op::Slice { x, start } => {
                if self.wants(x) {
                    let n = self.value(x).cols();
                    let gx = buf!(x);
                    gx[start * n..start * n + gout.len()]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(g, &v)| *g += v);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let gx = buf!(*x);
                    for ((g, &go), &m) in gx.iter_mut().zip(gout).zip(mask) {
                        *g += go * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let v = self.value(*logits).cols();
                    let w = gout[0] / T::of(*count as f64);
                    let gl = buf!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * v + j] += w * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let tp = self.value(*pred).data();
                    let w = gout[0] * T::of(2.0 / tp.len() as f64);
                    let gp = buf!(*pred);
                    for ((g, &p), &y) in gp.iter_mut().zip(tp).zip(target) {
                        *g += w * (p - y);
                    }
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    buf!(x).iter_mut().for_each(|g| *g += gout[0]);
                }
            }
        }
    }
}
