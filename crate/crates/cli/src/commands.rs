use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::json;
use synthpair::capgen::tokenizer::detokenize;
use synthpair::capgen::{llm_corpus, read_jsonl, template_corpus, write_jsonl, ClassVocabulary, HttpChatClient};
use synthpair::diversity::{
    co_cluster, elbow_select, embed_captions, wcss_curve, whiten_jointly, EmbeddingMatrix, KMeansConfig,
};
use synthpair::lm::FrozenLm;
use synthpair::numerics::{AdamW, AdamWConfig};
use synthpair::pipeline::{
    compare_modalities, derive_seed, ingest, read_token_shard, run_experiment, spawn_producer, synth_pairs,
    write_token_shard, write_token_shards, EpochShuffle, ExperimentData, MetricsLog, MetricsRecord, PairLine,
    RunManifest, SHARD_RECORDS,
};
use synthpair::shapes::shapes_corpus;
use synthpair::t2igen::{decode_iterative, train_t2i, CaptionEmbedding, T2iExample, T2iModel, T2iTrainConfig};
use synthpair::vlm::{train_vlm, ImageInput, Modality, Origin, PairRecord, VlmConfig, VlmModel, VlmTrainConfig};
use synthpair::vq::{VqBackbone, VqConfig};

use crate::settings::{self, ExperimentSettings, LmSettings, Seeded, T2iSettings, TrainLoop, VlmSettings, VqSettings};
use crate::{
    BenchmarkArgs, CapgenArgs, DiversityArgs, ExperimentArgs, LmPretrainArgs, MakeCorpusArgs, OriginArg, SourceArg,
    T2iSampleArgs, T2iTrainArgs, VlmCaptionArgs, VlmTrainArgs, VqPretrainArgs,
};

pub struct Ctx {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Ctx {
    fn settings<T: DeserializeOwned + Default + Seeded>(&self) -> Result<T> {
        let mut s: T = settings::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            s.set_seed(seed);
        }
        Ok(s)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// A corpus directory stands for its `pairs.jsonl`.
fn pairs_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("pairs.jsonl")
    } else {
        p.to_path_buf()
    }
}

fn require(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone()
        .with_context(|| format!("{what} is required (flag or config field)"))
}

fn vocabulary(classes: Option<&Path>, keep: Option<usize>, zipf: Option<f64>) -> Result<ClassVocabulary> {
    let mut v = match classes {
        Some(p) => ClassVocabulary::from_file(p)?,
        None => ClassVocabulary::builtin(),
    };
    if let Some(n) = keep {
        v = v.truncated(n)?;
    }
    if let Some(s) = zipf {
        v = v.zipf(s)?;
    }
    Ok(v)
}

fn load_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let report = ingest(&pairs_file(path))?;
    if !report.skipped.is_empty() {
        log::warn!("{}: {} lines skipped", path.display(), report.skipped.len());
    }
    Ok(report.records)
}

/// Converts pixel records to token grids; embedding records pass through.
fn as_embeddings(pairs: Vec<PairRecord>, vq: &VqBackbone) -> Result<Vec<PairRecord>> {
    pairs
        .into_iter()
        .map(|p| {
            let image = match p.image {
                ImageInput::Pixel(img) => ImageInput::Embedding(vq.encode_image(&img)?),
                e => e,
            };
            Ok(PairRecord { image, ..p })
        })
        .collect()
}

fn write_loss_csv(path: &Path, rows: impl Iterator<Item = (u64, f64, f64, f64)>) -> Result<()> {
    let mut w =
        std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "step,loss,lr,sps")?;
    for (step, loss, lr, seconds) in rows {
        writeln!(w, "{step},{loss},{lr},{}", 1.0 / seconds.max(1e-12))?;
    }
    w.flush()?;
    Ok(())
}

fn optimizer(t: &TrainLoop, store: &synthpair::numerics::ParamStore<f32>) -> AdamW {
    AdamW::new(
        AdamWConfig {
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            ..AdamWConfig::default()
        },
        store,
    )
}

pub fn make_corpus(ctx: &Ctx, a: MakeCorpusArgs) -> Result<()> {
    let vocab = vocabulary(a.classes.as_deref(), a.num_classes, a.zipf)?;
    let vq = a.vq.as_deref().map(VqBackbone::load).transpose()?;
    let cfg = vq.as_ref().map_or_else(VqConfig::default, |v| v.config().clone());
    let examples = shapes_corpus(&vocab, &cfg, a.n, ctx.seed())?;
    fs::create_dir_all(&a.out)?;
    let captions: Vec<_> = examples.iter().map(|e| e.caption.clone()).collect();
    write_jsonl(&a.out.join("captions.jsonl"), &captions)?;
    let origin = match a.origin {
        OriginArg::Real => Origin::Real,
        OriginArg::Synthetic => Origin::Synthetic,
    };
    let mut lines = Vec::with_capacity(examples.len());
    match &vq {
        Some(vq) => {
            let grids = examples
                .iter()
                .map(|e| vq.encode_image(&e.image))
                .collect::<synthpair::Result<Vec<_>>>()?;
            let shards = write_token_shards(&a.out, "tokens", &grids, cfg.k, SHARD_RECORDS)?;
            for (i, e) in examples.iter().enumerate() {
                let name = shards[i / SHARD_RECORDS]
                    .file_name()
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                lines.push(PairLine {
                    caption: e.caption.text.clone(),
                    image_path: None,
                    token_shard_ref: Some(format!("{name}#{}", i % SHARD_RECORDS)),
                    origin,
                });
            }
        }
        None => {
            fs::create_dir_all(a.out.join("images"))?;
            for (i, e) in examples.iter().enumerate() {
                let rel = format!("images/{i:05}.png");
                e.image.save_png(&a.out.join(&rel))?;
                lines.push(PairLine {
                    caption: e.caption.text.clone(),
                    image_path: Some(rel),
                    token_shard_ref: None,
                    origin,
                });
            }
        }
    }
    let mut w = std::io::BufWriter::new(fs::File::create(a.out.join("pairs.jsonl"))?);
    for l in &lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    log::info!("wrote {} pairs to {}", lines.len(), a.out.display());
    Ok(())
}

pub fn capgen(ctx: &Ctx, a: CapgenArgs) -> Result<()> {
    let vocab = vocabulary(a.classes.as_deref(), None, a.zipf)?;
    let records = match a.source {
        SourceArg::Template => template_corpus(&vocab, a.n, ctx.seed()),
        SourceArg::Llm => {
            let client = HttpChatClient::from_env()?;
            llm_corpus(
                &client,
                &vocab,
                a.n,
                ctx.seed(),
                Duration::from_secs(a.timeout_secs),
                a.concurrency,
            )?
        }
    };
    write_jsonl(&a.out, &records)?;
    log::info!("wrote {} captions to {}", records.len(), a.out.display());
    Ok(())
}

pub fn vq_pretrain(ctx: &Ctx, a: VqPretrainArgs) -> Result<()> {
    let mut s: VqSettings = ctx.settings()?;
    if let Some(n) = a.steps {
        s.pretrain.steps = n;
    }
    let data = require(&a.data.or(s.data.clone()), "--data")?;
    let images: Vec<_> = load_pairs(&data)?
        .into_iter()
        .filter_map(|p| match p.image {
            ImageInput::Pixel(img) => Some(img),
            ImageInput::Embedding(_) => None,
        })
        .collect();
    ensure!(!images.is_empty(), "{} has no image_path records", data.display());
    let mut vq = VqBackbone::new(s.vq.clone())?;
    let report = vq.pretrain(&images, &s.pretrain)?;
    vq.freeze();
    vq.save(&a.out)?;
    log::info!(
        "vq: final loss {:.4}, {} live codes, {} restarts, mse {:.5}",
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.live_codes,
        report.restarted_codes,
        vq.reconstruction_mse(&images)?
    );
    Ok(())
}

pub fn lm_pretrain(ctx: &Ctx, a: LmPretrainArgs) -> Result<()> {
    let mut s: LmSettings = ctx.settings()?;
    if let Some(n) = a.steps {
        s.pretrain.steps = n;
    }
    let mut corpus = Vec::new();
    for p in &a.captions {
        corpus.extend(read_jsonl(p)?.into_iter().map(|r| r.token_ids));
    }
    let mut lm = FrozenLm::new(s.lm.clone())?;
    let losses = lm.pretrain(&corpus, &s.pretrain)?;
    lm.freeze();
    lm.save(&a.out)?;
    log::info!(
        "lm: {} captions, final loss {:.4}",
        corpus.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn t2i_train(ctx: &Ctx, a: T2iTrainArgs) -> Result<()> {
    let mut s: T2iSettings = ctx.settings()?;
    if let Some(n) = a.steps {
        s.train.steps = n;
    }
    let lm = FrozenLm::load(&require(&a.lm.or(s.inputs.lm.clone()), "--lm")?)?;
    let vq = VqBackbone::load(&require(&a.vq.or(s.inputs.vq.clone()), "--vq")?)?;
    let data = require(&a.data.or(s.inputs.data.clone()), "--data")?;
    let out = require(&a.ckpt.or(s.inputs.ckpt.clone()), "--ckpt")?;
    let pairs = as_embeddings(load_pairs(&data)?, &vq)?;
    let examples = pairs
        .iter()
        .map(|p| {
            let ImageInput::Embedding(grid) = &p.image else {
                unreachable!()
            };
            Ok(T2iExample {
                caption: CaptionEmbedding::new(lm.hidden_states(&p.caption)?)?,
                grid: grid.clone(),
            })
        })
        .collect::<synthpair::Result<Vec<_>>>()?;
    let mut cfg = s.model.clone();
    cfg.k = vq.config().k;
    cfg.side = vq.config().side;
    cfg.text_dim = lm.cfg().dim;
    cfg.ctx_len = lm.cfg().max_len;
    let mut model = T2iModel::new(cfg)?;
    let mut opt = optimizer(&s.train, &model.store);
    let mut stream = EpochShuffle::new(Arc::new(examples), derive_seed(s.train.seed, 1))?;
    let tc = T2iTrainConfig {
        steps: s.train.steps,
        batch: s.train.batch,
        seed: s.train.seed,
        early_stop: None,
    };
    let log = train_t2i(&mut model, &mut stream, &mut opt, &tc)?;
    fs::create_dir_all(&out)?;
    model.save(&out.join("t2i.bin"))?;
    write_loss_csv(
        &out.join("metrics.csv"),
        log.iter().map(|r| (r.step, r.loss, r.lr, r.seconds)),
    )?;
    log::info!(
        "t2i: {} steps, final loss {:.4}",
        log.len(),
        log.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok(())
}

pub fn t2i_sample(ctx: &Ctx, a: T2iSampleArgs) -> Result<()> {
    let decode: synthpair::t2igen::DecodeConfig = ctx.settings()?;
    let ckpt = if a.ckpt.is_dir() {
        a.ckpt.join("t2i.bin")
    } else {
        a.ckpt.clone()
    };
    let model = T2iModel::load(&ckpt)?;
    let lm = FrozenLm::load(&a.lm)?;
    let captions = read_jsonl(&a.captions)?;
    let mut grids = Vec::with_capacity(captions.len());
    for (i, c) in captions.iter().enumerate() {
        let emb = CaptionEmbedding::new(lm.hidden_states(&c.token_ids)?)?;
        let cfg = synthpair::t2igen::DecodeConfig {
            seed: derive_seed(decode.seed, i as u64),
            ..decode.clone()
        };
        grids.push(decode_iterative(&model, &emb, &cfg)?.0);
    }
    write_token_shard(&a.out, &grids, model.cfg.k)?;
    if a.decode_pixels {
        let vq = VqBackbone::load(a.vq.as_deref().context("--decode-pixels needs --vq")?)?;
        for (i, g) in grids.iter().enumerate() {
            vq.decode_tokens(g)?
                .save_png(&a.out.with_extension(format!("{i:05}.png")))?;
        }
    }
    log::info!("wrote {} grids to {}", grids.len(), a.out.display());
    Ok(())
}

pub fn vlm_train(ctx: &Ctx, a: VlmTrainArgs) -> Result<()> {
    let mut s: VlmSettings = ctx.settings()?;
    if let Some(n) = a.steps {
        s.train.steps = n;
    }
    let lm = FrozenLm::load(&require(&a.lm.or(s.inputs.lm.clone()), "--lm")?)?;
    let vq = Arc::new(VqBackbone::load(&require(&a.vq.or(s.inputs.vq.clone()), "--vq")?)?);
    let data = require(&a.data.or(s.inputs.data.clone()), "--data")?;
    let out = require(&a.ckpt.or(s.inputs.ckpt.clone()), "--ckpt")?;
    let pairs = load_pairs(&data)?;
    let mut model = VlmModel::new(s.model.clone(), &lm, vq)?;
    let mut opt = optimizer(&s.train, &model.store);
    let mut stream = EpochShuffle::new(Arc::new(pairs), derive_seed(s.train.seed, 1))?;
    let tc = VlmTrainConfig {
        steps: s.train.steps,
        batch: s.train.batch,
        seed: s.train.seed,
        early_stop: None,
    };
    let records = train_vlm(&mut model, &mut stream, &mut opt, &tc)?;
    let mut log = MetricsLog::new(RunManifest {
        config_hash: synthpair::pipeline::config_hash(&s)?,
        ratio: 1.0,
        checkpoints: Default::default(),
    });
    for r in &records {
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
    log.manifest.checkpoints.insert("lm".into(), model.lm_hash());
    log.manifest.checkpoints.insert("vq".into(), model.vq().content_hash());
    log.manifest
        .checkpoints
        .insert("resampler".into(), model.resampler_hash());
    log.manifest.checkpoints.insert("xattn".into(), model.xattn_hash());
    fs::create_dir_all(&out)?;
    model.save(&out.join("vlm.bin"))?;
    log.write_csv(&out.join("metrics.csv"))?;
    write_json(&out.join("manifest.json"), &log.manifest)?;
    log::info!(
        "vlm: {} steps, final loss {:.4}",
        records.len(),
        records.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok(())
}

pub fn vlm_caption(_ctx: &Ctx, a: VlmCaptionArgs) -> Result<()> {
    let vq = Arc::new(VqBackbone::load(&a.vq)?);
    let ckpt = if a.ckpt.is_dir() {
        a.ckpt.join("vlm.bin")
    } else {
        a.ckpt.clone()
    };
    let model = VlmModel::load(&ckpt, vq)?;
    let image = match (&a.image, &a.tokens) {
        (Some(p), _) => ImageInput::Pixel(synthpair::vq::ToyImage::load_png(p)?),
        (None, Some(t)) => {
            let (file, idx) = match t.rsplit_once('#') {
                Some((f, i)) => (f, i.parse::<usize>().context("bad grid index")?),
                None => (t.as_str(), 0),
            };
            let (_, grids) = read_token_shard(Path::new(file))?;
            let grid = grids
                .into_iter()
                .nth(idx)
                .with_context(|| format!("{file} has no grid {idx}"))?;
            ImageInput::Embedding(grid)
        }
        (None, None) => bail!("one of --image or --tokens is required"),
    };
    println!("{}", detokenize(&model.generate_caption(&image, a.max_len)?));
    Ok(())
}

pub fn diversity(ctx: &Ctx, a: DiversityArgs) -> Result<()> {
    let lm = FrozenLm::load(&a.lm)?;
    let mut corpora = Vec::with_capacity(a.captions.len());
    for p in &a.captions {
        let texts: Vec<String> = read_jsonl(p)?.into_iter().map(|r| r.text).collect();
        let name = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        corpora.push((name, embed_captions(&texts, &lm)?));
    }
    if !a.raw {
        corpora = whiten_jointly(&corpora)?;
    }
    let seed = ctx.seed();
    let (k, curve) = if a.k == "auto" {
        let all = EmbeddingMatrix::concat(&corpora.iter().map(|(_, m)| m).collect::<Vec<_>>())?;
        let curve = wcss_curve(&all, a.k_max.min(all.rows()), seed)?;
        (elbow_select(&curve)?, Some(curve))
    } else {
        (
            a.k.parse::<usize>().context("--k takes `auto` or a positive integer")?,
            None,
        )
    };
    let report = co_cluster(&corpora, &KMeansConfig::new(k, seed))?;
    write_json(
        &a.out,
        &json!({
            "k": k,
            "whitened": !a.raw,
            "wcss_curve": curve,
            "joint": report.joint,
            "corpora": report.corpora,
        }),
    )?;
    if let Some(h) = &a.hist {
        let mut w = std::io::BufWriter::new(fs::File::create(h)?);
        let names: Vec<&str> = report.corpora.iter().map(|c| c.name.as_str()).collect();
        writeln!(w, "cluster,{}", names.join(","))?;
        for c in 0..k {
            let row: Vec<String> = report.corpora.iter().map(|r| r.normalized[c].to_string()).collect();
            writeln!(w, "{c},{}", row.join(","))?;
        }
        w.flush()?;
    }
    for c in &report.corpora {
        println!(
            "{}: k={k} top5={} entropy={:.4} bits",
            c.name,
            c.concentration_top5.map_or("n/a".into(), |v| format!("{v:.2}%")),
            c.entropy_bits
        );
    }
    Ok(())
}

pub fn benchmark(ctx: &Ctx, a: BenchmarkArgs) -> Result<()> {
    let cfg: VlmConfig = ctx.settings()?;
    let lm = FrozenLm::load(&a.lm)?;
    let vq = Arc::new(VqBackbone::load(&a.vq)?);
    let pairs = load_pairs(&a.data)?;
    ensure!(
        pairs.iter().all(|p| p.image.modality() == Modality::Pixel),
        "benchmark needs image_path records so both paths see identical content"
    );
    let model = VlmModel::new(cfg, &lm, vq)?;
    let (pixel, embedding) = compare_modalities(&model, &pairs, a.steps, a.batch)?;
    println!(
        "pixel {:.3} steps/s, embedding {:.3} steps/s ({:+.1}%)",
        pixel.median_sps,
        embedding.median_sps,
        100.0 * (embedding.median_sps / pixel.median_sps - 1.0)
    );
    write_json(&a.out, &json!({ "pixel": pixel, "embedding": embedding }))
}

pub fn experiment(ctx: &Ctx, a: ExperimentArgs) -> Result<()> {
    ensure!(ctx.config.is_some(), "experiment needs --config with experiment.paths");
    let s: ExperimentSettings = ctx.settings()?;
    let cfg = s.experiment.clone();
    cfg.validate()?;
    let paths = cfg.paths.clone().context("experiment.paths is required")?;
    let lm = Arc::new(FrozenLm::load(&require(&paths.lm, "paths.lm")?)?);
    let vq = Arc::new(VqBackbone::load(&require(&paths.vq, "paths.vq")?)?);
    let real = load_pairs(&require(&paths.real, "paths.real")?)?;
    let real = match cfg.real_modality {
        Modality::Embedding => as_embeddings(real, &vq)?,
        Modality::Pixel => {
            ensure!(
                real.iter().all(|p| p.image.modality() == Modality::Pixel),
                "pixel modality needs image_path records"
            );
            real
        }
    };
    let held_out = as_embeddings(load_pairs(&require(&paths.held_out, "paths.held_out")?)?, &vq)?;
    let synthetic = if cfg.mix_ratio < 1.0 || cfg.baseline_ratio < 1.0 {
        let t2i = Arc::new(T2iModel::load(&pairs_t2i(&require(&paths.t2i, "paths.t2i")?))?);
        let captions: Vec<Vec<u32>> = read_jsonl(&require(&paths.synthetic, "paths.synthetic")?)?
            .into_iter()
            .map(|r| r.token_ids)
            .collect();
        let n = a.synthetic_n.unwrap_or(real.len());
        let stream = synth_pairs(captions, lm.clone(), t2i, s.decode.clone(), n, derive_seed(cfg.seed, 4));
        let (rx, worker) = spawn_producer(stream);
        let pool = rx.into_iter().collect::<synthpair::Result<Vec<_>>>()?;
        worker
            .join()
            .map_err(|_| anyhow::anyhow!("synthetic producer panicked"))?;
        log::info!("generated {} synthetic pairs", pool.len());
        pool
    } else {
        Vec::new()
    };
    let data = ExperimentData {
        lm,
        vq,
        real: Arc::new(real),
        synthetic: Arc::new(synthetic),
        held_out,
    };
    let report = run_experiment(&cfg, &data)?;
    fs::create_dir_all(&a.out)?;
    report.baseline.log.write_csv(&a.out.join("baseline.csv"))?;
    report.augmented.log.write_csv(&a.out.join("augmented.csv"))?;
    write_json(&a.out.join("report.json"), &report)?;
    println!(
        "baseline: held-out loss {:.4}, accuracy {:.4}\naugmented: held-out loss {:.4}, accuracy {:.4}",
        report.baseline.final_held_out_loss,
        report.baseline.final_token_accuracy,
        report.augmented.final_held_out_loss,
        report.augmented.final_token_accuracy
    );
    Ok(())
}

fn pairs_t2i(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("t2i.bin")
    } else {
        p.to_path_buf()
    }
}
