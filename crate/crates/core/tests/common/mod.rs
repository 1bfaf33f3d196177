#![allow(dead_code)]

//! Gradient-check cases shared by the numerics tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthpair::numerics::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use synthpair::numerics::layers::{BlockDims, Linear, Mlp, MultiHeadAttention, TransformerBlock};
use synthpair::numerics::{AttnSpec, Graph, Init, ParamStore, Tensor, Var};
use synthpair::Result;

pub type CaseFn = fn(u64) -> GradCheckReport;

/// Reduces `out` to a scalar with fixed random weights so no gradient
/// component cancels by symmetry.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(shape, w)?)?;
    let y = g.mul(out, w)?;
    g.sum(y)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, Vec<usize>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.init(*name, shape, Init::Normal(1.0), rng);
    }
    s
}

fn check<F>(store: &ParamStore<f64>, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_gradients(store, f, GradCheckOptions::default()).expect("gradient check runs")
}

fn p(g: &mut Graph<f64>, s: &ParamStore<f64>, name: &str) -> Var {
    g.param(s, s.id(name).unwrap())
}

fn matmul(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
    let s = store_with(&mut rng, &[("a", vec![m, k]), ("b", vec![k, n])]);
    check(&s, |g, s| {
        let (a, b) = (p(g, s, "a"), p(g, s, "b"));
        let y = g.matmul(a, b)?;
        project(g, y, seed)
    })
}

fn add(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
    let s = store_with(&mut rng, &[("a", vec![m, n]), ("b", vec![m, n])]);
    check(&s, |g, s| {
        let (a, b) = (p(g, s, "a"), p(g, s, "b"));
        let y = g.add(a, b)?;
        project(g, y, seed)
    })
}

fn add_broadcast(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, t, n) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 1, 5));
    let s = store_with(&mut rng, &[("a", vec![r * t, n]), ("b", vec![r, n])]);
    check(&s, |g, s| {
        let (a, b) = (p(g, s, "a"), p(g, s, "b"));
        let y = g.add_broadcast(a, b)?;
        project(g, y, seed)
    })
}

fn mul(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
    let s = store_with(&mut rng, &[("a", vec![m, n]), ("b", vec![m, n])]);
    check(&s, |g, s| {
        let (a, b) = (p(g, s, "a"), p(g, s, "b"));
        let y = g.mul(a, b)?;
        let y = g.mul(y, a)?;
        project(g, y, seed)
    })
}

fn scale(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
    let c = rng.random_range(-2.0..2.0);
    let s = store_with(&mut rng, &[("a", vec![m, n]), ("s", vec![1])]);
    check(&s, |g, s| {
        let (a, sc) = (p(g, s, "a"), p(g, s, "s"));
        let y = g.scale(a, c)?;
        let y = g.scale_by(y, sc)?;
        project(g, y, seed)
    })
}

fn tanh_gelu(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
    let s = store_with(&mut rng, &[("a", vec![m, n]), ("b", vec![m, n])]);
    check(&s, |g, s| {
        let (a, b) = (p(g, s, "a"), p(g, s, "b"));
        let y = g.tanh(a)?;
        let z = g.gelu(b)?;
        let y = g.add(y, z)?;
        project(g, y, seed)
    })
}

fn layer_norm(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (dim(&mut rng, 1, 4), dim(&mut rng, 2, 6));
    let s = store_with(&mut rng, &[("x", vec![m, n]), ("g", vec![n]), ("b", vec![n])]);
    check(&s, |g, s| {
        let (x, ga, b) = (p(g, s, "x"), p(g, s, "g"), p(g, s, "b"));
        let y = g.layer_norm(x, ga, b, 1e-5)?;
        project(g, y, seed)
    })
}

fn attention(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = dim(&mut rng, 1, 3);
    let d = heads * dim(&mut rng, 1, 3);
    let groups = dim(&mut rng, 1, 2);
    let causal = rng.random_bool(0.5);
    let sq = dim(&mut rng, 1, 4);
    let sk = if causal { sq } else { dim(&mut rng, 1, 4) };
    // Mask out some keys, but keep key 0 of every group visible.
    let mask: Option<Vec<bool>> = (!causal && rng.random_bool(0.5))
        .then(|| (0..groups * sk).map(|i| i % sk == 0 || rng.random_bool(0.7)).collect());
    let s = store_with(
        &mut rng,
        &[
            ("q", vec![groups * sq, d]),
            ("k", vec![groups * sk, d]),
            ("v", vec![groups * sk, d]),
        ],
    );
    check(&s, move |g, s| {
        let (q, k, v) = (p(g, s, "q"), p(g, s, "k"), p(g, s, "v"));
        let spec = AttnSpec::new(heads, groups).causal(causal).key_mask(mask.clone());
        let y = g.attention(q, k, v, &spec)?;
        project(g, y, seed)
    })
}

fn gather_repeat_concat_slice(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, n) = (dim(&mut rng, 2, 6), dim(&mut rng, 1, 4));
    let ids: Vec<usize> = (0..dim(&mut rng, 1, 6)).map(|_| rng.random_range(0..v)).collect();
    let times = dim(&mut rng, 1, 3);
    let s = store_with(&mut rng, &[("t", vec![v, n]), ("x", vec![2, n])]);
    check(&s, move |g, s| {
        let (t, x) = (p(g, s, "t"), p(g, s, "x"));
        let a = g.gather(t, &ids)?;
        let b = g.repeat(x, times)?;
        let c = g.concat_rows(&[a, b, x])?;
        let rows = g.value(c).rows();
        let d = g.slice_rows(c, 1, rows - 1)?;
        project(g, d, seed)
    })
}

fn dropout(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
    let s = store_with(&mut rng, &[("a", vec![m, n])]);
    check_gradients(
        &s,
        |g, s| {
            let a = p(g, s, "a");
            let y = g.dropout(a, 0.3)?;
            project(g, y, seed)
        },
        GradCheckOptions {
            train_seed: Some(seed),
            ..Default::default()
        },
    )
    .unwrap()
}

fn cross_entropy(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, v) = (dim(&mut rng, 1, 5), dim(&mut rng, 2, 7));
    let mut targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..v)).collect();
    // Ignore some rows but keep at least one.
    let ignore = v;
    for t in targets.iter_mut().skip(1) {
        if rng.random_bool(0.3) {
            *t = ignore;
        }
    }
    let s = store_with(&mut rng, &[("l", vec![rows, v])]);
    check(&s, move |g, s| {
        let l = p(g, s, "l");
        g.cross_entropy(l, &targets, Some(ignore))
    })
}

fn mse(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
    let target: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = store_with(&mut rng, &[("a", vec![m, n])]);
    check(&s, move |g, s| {
        let a = p(g, s, "a");
        g.mse(a, &target)
    })
}

fn linear_mlp(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, d, h) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 5), dim(&mut rng, 1, 6));
    let mut s = store_with(&mut rng, &[("x", vec![r, d])]);
    let lin = Linear::with_init(&mut s, "lin", d, d, true, Init::Normal(0.5), &mut rng);
    let mlp = Mlp::new(&mut s, "mlp", d, h, 0.0, &mut rng);
    perturb_all(&mut s, &mut rng);
    check(&s, move |g, s| {
        let x = p(g, s, "x");
        let y = lin.forward(g, s, x)?;
        let y = mlp.forward(g, s, y)?;
        project(g, y, seed)
    })
}

fn multi_head_attention(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = dim(&mut rng, 1, 2);
    let d = heads * dim(&mut rng, 1, 3);
    let kv_dim = dim(&mut rng, 1, 4);
    let (sq, sk) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
    let mut s = store_with(&mut rng, &[("q", vec![sq, d]), ("kv", vec![sk, kv_dim])]);
    let mha = MultiHeadAttention::new(&mut s, "mha", d, kv_dim, heads, &mut rng).unwrap();
    perturb_all(&mut s, &mut rng);
    check(&s, move |g, s| {
        let (q, kv) = (p(g, s, "q"), p(g, s, "kv"));
        let y = mha.forward(g, s, q, kv, 1, false, None)?;
        project(g, y, seed)
    })
}

fn transformer_block(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = dim(&mut rng, 1, 2);
    let d = heads * dim(&mut rng, 1, 2);
    let mem_dim = dim(&mut rng, 1, 3);
    let groups = dim(&mut rng, 1, 2);
    let (sq, sm) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
    let causal = rng.random_bool(0.5);
    let mut s = store_with(
        &mut rng,
        &[("x", vec![groups * sq, d]), ("m", vec![groups * sm, mem_dim])],
    );
    let dims = BlockDims {
        dim: d,
        heads,
        mlp_hidden: 2 * d,
        cross_dim: Some(mem_dim),
        dropout: 0.0,
    };
    let block = TransformerBlock::new(&mut s, "blk", dims, &mut rng).unwrap();
    perturb_all(&mut s, &mut rng);
    check(&s, move |g, s| {
        let (x, m) = (p(g, s, "x"), p(g, s, "m"));
        let y = block.forward(g, s, x, groups, causal, Some((m, groups, None)))?;
        project(g, y, seed)
    })
}

/// Moves freshly initialised (zero/one) parameters off their special values so
/// every code path carries signal.
pub fn perturb_all(s: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in s.iter_mut() {
        for x in p.tensor.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
}

pub fn op_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", matmul as CaseFn),
        ("add", add),
        ("add_broadcast", add_broadcast),
        ("mul", mul),
        ("scale/scale_by", scale),
        ("tanh/gelu", tanh_gelu),
        ("layer_norm", layer_norm),
        ("attention", attention),
        ("gather/repeat/concat/slice", gather_repeat_concat_slice),
        ("dropout", dropout),
        ("cross_entropy", cross_entropy),
        ("mse", mse),
        ("linear+mlp", linear_mlp),
        ("multi_head_attention", multi_head_attention),
        ("transformer_block", transformer_block),
    ]
}

pub mod fixtures {
    use synthpair::capgen::ClassVocabulary;
    use synthpair::lm::{FrozenLm, LmConfig};
    use synthpair::shapes::{shapes_corpus, ShapesExample};
    use synthpair::t2igen::{CaptionEmbedding, T2iConfig, T2iExample};
    use synthpair::vq::{VqBackbone, VqConfig};

    pub fn shapes(n: usize, seed: u64) -> Vec<ShapesExample> {
        let vocab = ClassVocabulary::builtin().truncated(50).unwrap();
        shapes_corpus(&vocab, &VqConfig::default(), n, seed).unwrap()
    }

    /// Untrained backbone: its grids are still structured (flat patches share ids).
    pub fn raw_vq() -> VqBackbone {
        VqBackbone::new(VqConfig::default()).unwrap()
    }

    pub fn raw_lm() -> FrozenLm {
        FrozenLm::new(LmConfig::default()).unwrap()
    }

    /// Briefly pretrained and frozen on shapes captions; built once per test binary.
    pub fn pretrained_lm() -> &'static FrozenLm {
        static LM: std::sync::OnceLock<FrozenLm> = std::sync::OnceLock::new();
        LM.get_or_init(|| {
            let corpus: Vec<Vec<u32>> = shapes(2000, 1000).into_iter().map(|e| e.caption.token_ids).collect();
            let mut lm = raw_lm();
            let cfg = synthpair::lm::LmPretrainConfig {
                steps: 300,
                ..Default::default()
            };
            lm.pretrain(&corpus, &cfg).unwrap();
            lm.freeze();
            lm
        })
    }

    pub fn t2i_examples(lm: &FrozenLm, vq: &VqBackbone, n: usize, seed: u64) -> Vec<T2iExample> {
        shapes(n, seed)
            .into_iter()
            .map(|e| T2iExample {
                caption: CaptionEmbedding::new(lm.hidden_states(&e.caption.token_ids).unwrap()).unwrap(),
                grid: vq.encode_image(&e.image).unwrap(),
            })
            .collect()
    }

    /// Two-layer, width-64 generator used wherever a test trains one.
    pub fn small_t2i() -> T2iConfig {
        T2iConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 256,
            ..T2iConfig::default()
        }
    }
}

pub mod vlm_fixtures {
    use synthpair::vlm::{ImageInput, Origin, PairRecord};
    use synthpair::vq::VqBackbone;

    pub fn pairs(vq: &VqBackbone, n: usize, seed: u64, pixel: bool, origin: Origin) -> Vec<PairRecord> {
        super::fixtures::shapes(n, seed)
            .into_iter()
            .map(|e| PairRecord {
                caption: e.caption.token_ids.clone(),
                image: if pixel {
                    ImageInput::Pixel(e.image)
                } else {
                    ImageInput::Embedding(vq.encode_image(&e.image).unwrap())
                },
                origin,
            })
            .collect()
    }
}
