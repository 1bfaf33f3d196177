use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{embed, Codebook, TokenGrid, ToyImage, VqConfig};
use crate::checkpoint;
use crate::error::{ensure, Error, Result};
use crate::numerics::layers::{Linear, Mlp};
use crate::numerics::{AdamW, AdamWConfig, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

/// Patch encoder, codebook and patch decoder. Every parameter lives under `vq.`.
///
/// Encoder: linear patch projection followed by a residual GeLU MLP.
/// Decoder: residual GeLU MLP followed by a linear map back to patch pixels.
#[derive(Debug)]
pub struct VqBackbone {
    cfg: VqConfig,
    store: ParamStore<f32>,
    codebook_id: ParamId,
    enc_in: Linear,
    enc_mlp: Mlp,
    dec_mlp: Mlp,
    dec_out: Linear,
    codebook: Codebook,
    decodes: AtomicU64,
}

impl Clone for VqBackbone {
    fn clone(&self) -> Self {
        VqBackbone {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            codebook_id: self.codebook_id,
            enc_in: self.enc_in.clone(),
            enc_mlp: self.enc_mlp.clone(),
            dec_mlp: self.dec_mlp.clone(),
            dec_out: self.dec_out.clone(),
            codebook: self.codebook.clone(),
            decodes: AtomicU64::new(self.decode_count()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Weight of the encoder commitment term.
    pub commitment: f64,
    /// Codes unused for this many steps are moved onto random encoder outputs.
    /// Zero disables restarts.
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch: 16,
            lr: 2e-3,
            warmup_steps: 100,
            commitment: 0.25,
            restart_every: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub restarted_codes: usize,
    /// Codes hit at least once during the final restart window.
    pub live_codes: usize,
}

impl VqBackbone {
    pub fn new(cfg: VqConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let bound = 1.0 / (cfg.d as f64).sqrt();
        let codebook_id = store.init("vq.codebook", &[cfg.k, cfg.d], Init::Uniform(bound), &mut rng);
        let enc_in = Linear::new(&mut store, "vq.enc.in", cfg.patch_dim(), cfg.d, true, &mut rng);
        let enc_mlp = Mlp::new(&mut store, "vq.enc.mlp", cfg.d, cfg.hidden, 0.0, &mut rng);
        let dec_mlp = Mlp::new(&mut store, "vq.dec.mlp", cfg.d, cfg.hidden, 0.0, &mut rng);
        let dec_out = Linear::new(&mut store, "vq.dec.out", cfg.d, cfg.patch_dim(), true, &mut rng);
        let codebook = Codebook::from_tensor(store.tensor(codebook_id))?;
        Ok(VqBackbone {
            cfg,
            store,
            codebook_id,
            enc_in,
            enc_mlp,
            dec_mlp,
            dec_out,
            codebook,
            decodes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    /// SHA-256 over every backbone parameter.
    pub fn content_hash(&self) -> String {
        self.store.content_hash("vq.")
    }

    /// Number of [`VqBackbone::decode_tokens`] calls made on this instance.
    pub fn decode_count(&self) -> u64 {
        self.decodes.load(Ordering::Relaxed)
    }

    fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        let z = self.enc_in.forward(g, store, patches)?;
        let h = self.enc_mlp.forward(g, store, z)?;
        g.add(z, h)
    }

    fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let h = self.dec_mlp.forward(g, store, z)?;
        let h = g.add(z, h)?;
        self.dec_out.forward(g, store, h)
    }

    fn check_image(&self, img: &ToyImage) -> Result<()> {
        ensure!(
            img.side() == self.cfg.image_side(),
            Config,
            "image side {} does not match backbone side {}",
            img.side(),
            self.cfg.image_side()
        );
        Ok(())
    }

    /// Continuous per-patch encodings (`N x D`) before quantization.
    pub fn encode_continuous(&self, img: &ToyImage) -> Result<Tensor> {
        self.check_image(img)?;
        let patches = img.patches(self.cfg.patch)?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![self.cfg.tokens(), self.cfg.patch_dim()], patches)?)?;
        let z = self.encode_graph(&mut g, &self.store, x)?;
        Ok(g.value(z).clone())
    }

    pub fn encode_image(&self, img: &ToyImage) -> Result<TokenGrid> {
        let z = self.encode_continuous(img)?;
        TokenGrid::new(self.cfg.side, self.codebook.nearest_ids(z.data())?)
    }

    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<ToyImage> {
        ensure!(
            grid.side() == self.cfg.side,
            Config,
            "grid side {} does not match backbone side {}",
            grid.side(),
            self.cfg.side
        );
        let z = embed(grid, &self.codebook)?;
        self.decodes.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let z = g.constant(z)?;
        let out = self.decode_graph(&mut g, &self.store, z)?;
        ToyImage::from_patches(self.cfg.side, self.cfg.patch, g.value(out).data())
    }

    /// Mean pixel MSE of `decode(encode(img))` over `images`.
    pub fn reconstruction_mse(&self, images: &[ToyImage]) -> Result<f64> {
        ensure!(!images.is_empty(), Data, "no images to reconstruct");
        let mut total = 0.0;
        for img in images {
            let rec = self.decode_tokens(&self.encode_image(img)?)?;
            total += rec.mse(img)?;
        }
        Ok(total / images.len() as f64)
    }

    /// Reconstruction training with a straight-through codebook.
    ///
    /// Loss = pixel MSE + codebook MSE + `commitment` * encoder MSE.
    pub fn pretrain(&mut self, images: &[ToyImage], cfg: &PretrainConfig) -> Result<PretrainReport> {
        ensure!(!images.is_empty(), Data, "empty pretraining set");
        ensure!(cfg.batch > 0, Config, "batch must be positive");
        for img in images {
            self.check_image(img)?;
        }
        let (n, pd, d, k) = (self.cfg.tokens(), self.cfg.patch_dim(), self.cfg.d, self.cfg.k);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: cfg.lr,
                warmup_steps: cfg.warmup_steps,
                ..AdamWConfig::default()
            },
            &self.store,
        );
        let noise = Normal::new(0.0, 1e-3).expect("normal");
        let mut usage = vec![0usize; k];
        let mut report = PretrainReport::default();
        let all_patches: Vec<Vec<f32>> = images
            .iter()
            .map(|im| im.patches(self.cfg.patch))
            .collect::<Result<_>>()?;

        for step in 0..cfg.steps {
            let b = cfg.batch.min(images.len());
            let picks = sample(&mut rng, images.len(), b);
            let mut pixels = Vec::with_capacity(b * n * pd);
            for i in picks.iter() {
                pixels.extend_from_slice(&all_patches[i]);
            }

            let mut g = Graph::training(rng.random());
            let x = g.constant(Tensor::new(vec![b * n, pd], pixels.clone())?)?;
            let z_e = self.encode_graph(&mut g, &self.store, x)?;
            let ze_vals = g.value(z_e).data().to_vec();
            let ids: Vec<usize> = ze_vals.chunks_exact(d).map(|v| self.codebook.nearest(v)).collect();
            for &i in &ids {
                usage[i] += 1;
            }

            let table = g.param(&self.store, self.codebook_id);
            let z_q = g.gather(table, &ids)?;
            let zq_vals = g.value(z_q).data().to_vec();
            let shift: Vec<f32> = zq_vals.iter().zip(&ze_vals).map(|(q, e)| q - e).collect();
            let shift = g.constant(Tensor::new(vec![b * n, d], shift)?)?;
            let st = g.add(z_e, shift)?;
            let out = self.decode_graph(&mut g, &self.store, st)?;
            let rec = g.mse(out, &pixels)?;
            let cb = g.mse(z_q, &ze_vals)?;
            let commit = g.mse(z_e, &zq_vals)?;
            let commit = g.scale(commit, cfg.commitment)?;
            let loss = g.add(rec, cb)?;
            let loss = g.add(loss, commit)?;
            report.losses.push(g.value(loss).item() as f64);

            g.backward_into(loss, &mut self.store)?;
            opt.step(&mut self.store)?;

            let window_end = cfg.restart_every > 0 && (step + 1) % cfg.restart_every == 0;
            if window_end {
                report.live_codes = usage.iter().filter(|&&u| u > 0).count();
                if step + 1 < cfg.steps {
                    let cb = self.store.get_mut(self.codebook_id).tensor.data_mut();
                    for (code, u) in usage.iter().enumerate() {
                        if *u == 0 {
                            let src = rng.random_range(0..b * n);
                            for j in 0..d {
                                cb[code * d + j] = ze_vals[src * d + j] + noise.sample(&mut rng);
                            }
                            report.restarted_codes += 1;
                        }
                    }
                }
                usage.iter_mut().for_each(|u| *u = 0);
            }
            self.codebook = Codebook::from_tensor(self.store.tensor(self.codebook_id))?;
        }
        if cfg.restart_every == 0 || cfg.steps % cfg.restart_every != 0 {
            report.live_codes = usage.iter().filter(|&&u| u > 0).count();
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "component": "vq",
            "config": self.cfg,
            "k": self.cfg.k,
            "d": self.cfg.d,
            "side": self.cfg.side,
            "patch": self.cfg.patch,
            "seed": self.cfg.seed,
            "hash": self.content_hash(),
        });
        checkpoint::save_params(path, meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load_params(path)?;
        ensure!(
            meta["component"] == "vq",
            Data,
            "{} is not a vq checkpoint",
            path.display()
        );
        let cfg: VqConfig = serde_json::from_value(meta["config"].clone())?;
        let mut vq = VqBackbone::new(cfg)?;
        let copied = vq.store.copy_values_from(&store, "vq.")?;
        if copied != vq.store.len() {
            return Err(Error::Data(format!(
                "{}: {copied} of {} vq parameters present",
                path.display(),
                vq.store.len()
            )));
        }
        vq.codebook = Codebook::from_tensor(vq.store.tensor(vq.codebook_id))?;
        Ok(vq)
    }

    /// Marks every backbone parameter frozen.
    pub fn freeze(&mut self) {
        self.store.set_trainable_prefix("vq.", false);
    }
}
