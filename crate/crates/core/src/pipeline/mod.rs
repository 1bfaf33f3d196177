//! Orchestration: ingestion, synthetic pair streams, real/synthetic mixing,
//! the baseline-vs-augmented experiment and the throughput benchmark.

pub mod ingest;
mod metrics;
pub mod synth;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::lm::FrozenLm;
use crate::numerics::{AdamW, AdamWConfig, Graph};
use crate::shapes::ShapesExample;
use crate::vlm::{train_vlm, ImageInput, Modality, Origin, PairRecord, VlmConfig, VlmModel, VlmTrainConfig};
use crate::vq::VqBackbone;

pub use ingest::{
    ingest, parse_line, read_token_shard, write_token_shard, write_token_shards, IngestReport, PairLine, ShardHeader,
    SHARD_RECORDS,
};
pub use metrics::{EvalRecord, MetricsLog, MetricsRecord, RunManifest};
pub use synth::{spawn_producer, synth_pairs, SynthPairs, QUEUE_DEPTH};

/// Real fraction for 10.1 parts real to 1 part synthetic.
pub const DEFAULT_MIX_RATIO: f64 = 10.1 / 11.1;
pub const MIN_BENCH_STEPS: usize = 200;

/// Independent child seed for stream `index` of a run seeded `base` (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SHA-256 of the canonical JSON encoding.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

/// Shapes examples as pairs; the embedding modality pre-encodes each image.
pub fn shapes_pairs(
    examples: &[ShapesExample],
    vq: &VqBackbone,
    modality: Modality,
    origin: Origin,
) -> Result<Vec<PairRecord>> {
    examples
        .iter()
        .map(|e| {
            let image = match modality {
                Modality::Pixel => ImageInput::Pixel(e.image.clone()),
                Modality::Embedding => ImageInput::Embedding(vq.encode_image(&e.image)?),
            };
            Ok(PairRecord {
                caption: e.caption.token_ids.clone(),
                image,
                origin,
            })
        })
        .collect()
}

/// Endless stream over `items`, reshuffled every epoch.
pub struct EpochShuffle<T> {
    items: Arc<Vec<T>>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<T: Clone> EpochShuffle<T> {
    pub fn new(items: Arc<Vec<T>>, seed: u64) -> Result<Self> {
        ensure!(!items.is_empty(), Data, "cannot stream an empty set");
        let order = (0..items.len()).collect();
        Ok(EpochShuffle {
            items,
            order,
            pos: usize::MAX,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl<T: Clone> Iterator for EpochShuffle<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.items[self.order[self.pos - 1]].clone())
    }
}

/// Per-slot mixing: every item is drawn from `real` with probability `ratio`,
/// otherwise from `synth`. Ends when the chosen stream runs dry.
pub struct MixedStream<R, S> {
    real: Option<R>,
    synth: Option<S>,
    ratio: f64,
    rng: ChaCha8Rng,
}

pub fn mix_streams<R, S>(real: Option<R>, synth: Option<S>, ratio: f64, seed: u64) -> Result<MixedStream<R, S>> {
    ensure!((0.0..=1.0).contains(&ratio), Config, "mix ratio {ratio} outside [0, 1]");
    ensure!(
        ratio == 0.0 || real.is_some(),
        Config,
        "mix ratio {ratio} needs a real stream"
    );
    ensure!(
        ratio == 1.0 || synth.is_some(),
        Config,
        "mix ratio {ratio} needs a synthetic stream"
    );
    Ok(MixedStream {
        real,
        synth,
        ratio,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl<T, R, S> Iterator for MixedStream<R, S>
where
    R: Iterator<Item = T>,
    S: Iterator<Item = T>,
{
    type Item = T;

    fn next(&mut self) -> Option<T> {
        // One draw per slot regardless of ratio keeps the stream aligned across ratios.
        let u: f64 = self.rng.random();
        if u < self.ratio {
            self.real.as_mut()?.next()
        } else {
            self.synth.as_mut()?.next()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPaths {
    pub real: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    pub synthetic: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub vq: Option<PathBuf>,
    pub t2i: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub eval_every: usize,
    /// Real fraction of the baseline arm (normally 1).
    pub baseline_ratio: f64,
    /// Real fraction of the augmented arm.
    pub mix_ratio: f64,
    pub real_modality: Modality,
    pub vlm: VlmConfig,
    #[serde(default)]
    pub paths: Option<ExperimentPaths>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            steps: 1000,
            batch: 8,
            lr: 1e-3,
            warmup_steps: 50,
            eval_every: 100,
            baseline_ratio: 1.0,
            mix_ratio: DEFAULT_MIX_RATIO,
            real_modality: Modality::Embedding,
            vlm: VlmConfig::default(),
            paths: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for r in [self.baseline_ratio, self.mix_ratio] {
            ensure!((0.0..=1.0).contains(&r), Config, "mix ratio {r} outside [0, 1]");
        }
        ensure!(
            self.steps > 0 && self.batch > 0 && self.eval_every > 0,
            Config,
            "steps, batch and eval_every must be positive"
        );
        if let Some(p) = &self.paths {
            for path in [&p.real, &p.held_out, &p.synthetic, &p.lm, &p.vq, &p.t2i]
                .into_iter()
                .flatten()
            {
                ensure!(
                    path.exists(),
                    Config,
                    "referenced path {} does not exist",
                    path.display()
                );
            }
        }
        Ok(())
    }

    /// Hash of everything both arms share (the ratios zeroed out).
    pub fn shared_hash(&self) -> Result<String> {
        config_hash(&ExperimentConfig {
            baseline_ratio: 0.0,
            mix_ratio: 0.0,
            ..self.clone()
        })
    }
}

/// Everything an experiment trains and evaluates on.
#[derive(Clone)]
pub struct ExperimentData {
    pub lm: Arc<FrozenLm>,
    pub vq: Arc<VqBackbone>,
    pub real: Arc<Vec<PairRecord>>,
    pub synthetic: Arc<Vec<PairRecord>>,
    pub held_out: Vec<PairRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmReport {
    pub ratio: f64,
    pub log: MetricsLog,
    pub final_held_out_loss: f64,
    pub final_token_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub baseline: ArmReport,
    pub augmented: ArmReport,
    /// First evaluation step at which the augmented arm's held-out loss is at
    /// or below the baseline's final held-out loss.
    pub augmented_steps_to_baseline_final: Option<u64>,
}

/// Mean held-out loss (equal-weight chunks of 32) and token accuracy.
pub fn evaluate(model: &VlmModel, held_out: &[PairRecord]) -> Result<(f64, f64)> {
    ensure!(!held_out.is_empty(), Data, "empty held-out set");
    let refs: Vec<&PairRecord> = held_out.iter().collect();
    let mut total = 0.0;
    let mut n = 0.0;
    for chunk in refs.chunks(32) {
        total += model.eval_loss(chunk)? * chunk.len() as f64;
        n += chunk.len() as f64;
    }
    Ok((total / n, model.token_accuracy(&refs)?))
}

/// Trains one arm from scratch with real fraction `ratio`.
pub fn run_arm(cfg: &ExperimentConfig, data: &ExperimentData, ratio: f64) -> Result<ArmReport> {
    let mut model = VlmModel::new(cfg.vlm.clone(), &data.lm, data.vq.clone())?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let real = (ratio > 0.0)
        .then(|| EpochShuffle::new(data.real.clone(), derive_seed(cfg.seed, 1)))
        .transpose()?;
    let synth = (ratio < 1.0)
        .then(|| EpochShuffle::new(data.synthetic.clone(), derive_seed(cfg.seed, 2)))
        .transpose()?;
    let mut stream = mix_streams(real, synth, ratio, derive_seed(cfg.seed, 3))?;
    let mut log = MetricsLog::new(RunManifest {
        config_hash: cfg.shared_hash()?,
        ratio,
        checkpoints: Default::default(),
    });
    let mut done = 0;
    let mut chunk = 0u64;
    while done < cfg.steps {
        let steps = cfg.eval_every.min(cfg.steps - done);
        let tc = VlmTrainConfig {
            steps,
            batch: cfg.batch,
            seed: derive_seed(cfg.seed, 100 + chunk),
            early_stop: None,
        };
        for r in train_vlm(&mut model, &mut stream, &mut opt, &tc)? {
            log.push(MetricsRecord {
                step: r.step,
                loss: r.loss,
                lr: r.lr,
                sps: 1.0 / r.seconds.max(1e-12),
                real: r.real,
                synthetic: r.synthetic,
                seconds: r.seconds,
            })?;
        }
        done += steps;
        chunk += 1;
        let (loss, acc) = evaluate(&model, &data.held_out)?;
        log.evals.push(EvalRecord {
            step: opt.state.step,
            held_out_loss: loss,
            token_accuracy: acc,
        });
    }
    log.manifest.checkpoints.insert("lm".into(), model.lm_hash());
    log.manifest.checkpoints.insert("vq".into(), data.vq.content_hash());
    log.manifest
        .checkpoints
        .insert("resampler".into(), model.resampler_hash());
    log.manifest.checkpoints.insert("xattn".into(), model.xattn_hash());
    let last = log.evals.last().expect("at least one evaluation").clone();
    Ok(ArmReport {
        ratio,
        log,
        final_held_out_loss: last.held_out_loss,
        final_token_accuracy: last.token_accuracy,
    })
}

/// Baseline arm at `baseline_ratio`, augmented arm at `mix_ratio`, identical
/// seeds and settings otherwise.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentReport> {
    cfg.validate()?;
    let baseline = run_arm(cfg, data, cfg.baseline_ratio)?;
    let augmented = run_arm(cfg, data, cfg.mix_ratio)?;
    if baseline.log.manifest.config_hash != augmented.log.manifest.config_hash {
        return Err(Error::Config("arm configurations differ beyond the mix ratio".into()));
    }
    let target = baseline.final_held_out_loss;
    let reach = augmented
        .log
        .evals
        .iter()
        .find(|e| e.held_out_loss <= target)
        .map(|e| e.step);
    Ok(ExperimentReport {
        config_hash: config_hash(cfg)?,
        baseline,
        augmented,
        augmented_steps_to_baseline_final: reach,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub modality: Modality,
    pub steps: usize,
    pub median_sps: f64,
    pub step_seconds: Vec<f64>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct BenchArm {
    model: VlmModel,
    opt: AdamW,
    pairs: Vec<PairRecord>,
    times: Vec<f64>,
}

impl BenchArm {
    fn new(model: &VlmModel, pairs: Vec<PairRecord>) -> Self {
        let model = model.clone();
        let opt = AdamW::new(AdamWConfig::default(), &model.store);
        BenchArm {
            model,
            opt,
            pairs,
            times: Vec::new(),
        }
    }

    /// One full training step; the clock covers media preparation onwards.
    fn step(&mut self, step: usize, batch: usize, timed: bool) -> Result<()> {
        let start = (step * batch) % self.pairs.len();
        let idx: Vec<usize> = (0..batch).map(|i| (start + i) % self.pairs.len()).collect();
        let t0 = Instant::now();
        let media = idx
            .iter()
            .map(|&i| self.model.media(&self.pairs[i].image))
            .collect::<Result<Vec<_>>>()?;
        let caps: Vec<Vec<u32>> = idx.iter().map(|&i| self.pairs[i].caption.clone()).collect();
        let mut g = Graph::new();
        let loss = self.model.loss(&mut g, &self.model.store, &media, &caps)?;
        g.backward_into(loss, &mut self.model.store)?;
        self.opt.step(&mut self.model.store)?;
        if timed {
            self.times.push(t0.elapsed().as_secs_f64());
        }
        Ok(())
    }

    fn report(self, modality: Modality) -> ThroughputReport {
        ThroughputReport {
            modality,
            steps: self.times.len(),
            median_sps: 1.0 / median(&self.times),
            step_seconds: self.times,
        }
    }
}

fn bench_inputs(model: &VlmModel, pairs: &[PairRecord], modality: Modality) -> Result<Vec<PairRecord>> {
    pairs
        .iter()
        .map(|p| {
            let image = match (&p.image, modality) {
                (ImageInput::Pixel(img), Modality::Embedding) => ImageInput::Embedding(model.vq().encode_image(img)?),
                (ImageInput::Embedding(_), Modality::Pixel) => {
                    return Err(Error::Config("pixel benchmark needs pixel records".into()));
                }
                (img, _) => img.clone(),
            };
            Ok(PairRecord { image, ..p.clone() })
        })
        .collect()
}

const WARMUP_STEPS: usize = 3;

/// Median training steps per second on `pairs` (pixel records) in one modality.
/// The embedding modality sees the same grids, pre-encoded.
pub fn benchmark_throughput(
    model: &VlmModel,
    pairs: &[PairRecord],
    modality: Modality,
    steps: usize,
    batch: usize,
) -> Result<ThroughputReport> {
    ensure!(
        steps >= MIN_BENCH_STEPS,
        Measurement,
        "{steps} timed steps; at least {MIN_BENCH_STEPS} required"
    );
    ensure!(
        !pairs.is_empty() && batch > 0,
        Measurement,
        "benchmark needs pairs and a positive batch"
    );
    let mut arm = BenchArm::new(model, bench_inputs(model, pairs, modality)?);
    for s in 0..WARMUP_STEPS + steps {
        arm.step(s, batch, s >= WARMUP_STEPS)?;
    }
    Ok(arm.report(modality))
}

/// Both modalities from the same starting weights, steps interleaved so that
/// machine drift hits both equally. Returns `(pixel, embedding)`.
pub fn compare_modalities(
    model: &VlmModel,
    pairs: &[PairRecord],
    steps: usize,
    batch: usize,
) -> Result<(ThroughputReport, ThroughputReport)> {
    ensure!(
        steps >= MIN_BENCH_STEPS,
        Measurement,
        "{steps} timed steps; at least {MIN_BENCH_STEPS} required"
    );
    ensure!(
        !pairs.is_empty() && batch > 0,
        Measurement,
        "benchmark needs pairs and a positive batch"
    );
    let mut pix = BenchArm::new(model, bench_inputs(model, pairs, Modality::Pixel)?);
    let mut emb = BenchArm::new(model, bench_inputs(model, pairs, Modality::Embedding)?);
    for s in 0..WARMUP_STEPS + steps {
        let timed = s >= WARMUP_STEPS;
        if s % 2 == 0 {
            pix.step(s, batch, timed)?;
            emb.step(s, batch, timed)?;
        } else {
            emb.step(s, batch, timed)?;
            pix.step(s, batch, timed)?;
        }
    }
    Ok((pix.report(Modality::Pixel), emb.report(Modality::Embedding)))
}
