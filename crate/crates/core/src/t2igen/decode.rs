//! Iterative parallel decoding with classifier-free guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{CaptionEmbedding, Condition, T2iModel};
use super::schedule::masked_count_at_step;
use crate::error::{ensure, Error, Result};
use crate::numerics::Graph;
use crate::vq::TokenGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Scale of the Gumbel noise added to candidate confidences.
    pub choice_temperature: f64,
    /// Softmax temperature for drawing candidate ids; 0 picks the argmax.
    pub sample_temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            steps: 24,
            guidance_scale: 4.0,
            choice_temperature: 32.5,
            sample_temperature: 1.0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Parameter, "decode needs at least one step");
        ensure!(
            self.guidance_scale >= 0.0,
            Parameter,
            "guidance scale {} < 0",
            self.guidance_scale
        );
        ensure!(
            self.choice_temperature >= 0.0,
            Parameter,
            "choice temperature {} < 0",
            self.choice_temperature
        );
        ensure!(
            self.sample_temperature >= 0.0,
            Parameter,
            "sample temperature {} < 0",
            self.sample_temperature
        );
        Ok(())
    }
}

/// Masked-token counts before the first step and after every step (`steps + 1` entries).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub masked_counts: Vec<usize>,
}

/// `(1 + s) * cond - s * uncond`. With `s == 0` the result is `cond` bit for bit.
pub fn guide(cond: &[f32], uncond: Option<&[f32]>, s: f64) -> Vec<f32> {
    match uncond {
        Some(u) if s != 0.0 => {
            let (a, b) = ((1.0 + s) as f32, s as f32);
            cond.iter().zip(u).map(|(c, u)| a * c - b * u).collect()
        }
        _ => cond.to_vec(),
    }
}

fn log_softmax(row: &[f32], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let scaled: Vec<f64> = row.iter().map(|&x| x as f64 / t).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    scaled.iter().map(|x| x - lse).collect()
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Conditional logits and, when guidance is on, unconditional logits for one grid.
fn step_logits(
    model: &T2iModel,
    grid: &TokenGrid,
    caption: &CaptionEmbedding,
    s: f64,
) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    let mut g = Graph::new();
    if s == 0.0 {
        let l = model.logits(&mut g, &model.store, &[grid], &[Some(caption)])?;
        return Ok((g.value(l).data().to_vec(), None));
    }
    let conds: [Condition; 2] = [Some(caption), None];
    let l = model.logits(&mut g, &model.store, &[grid, grid], &conds)?;
    let data = g.value(l).data();
    let half = data.len() / 2;
    Ok((data[..half].to_vec(), Some(data[half..].to_vec())))
}

/// Starts from an all-dropped grid and fills it over `cfg.steps` steps.
///
/// Step `t` (1-based) samples a candidate at every masked position, scores it
/// by log-probability plus `choice_temperature * (1 - t / steps)` Gumbel
/// noise, and keeps the best candidates so that exactly
/// `masked_count_at_step(t)` positions stay masked. Kept ids are final.
pub fn decode_iterative(
    model: &T2iModel,
    caption: &CaptionEmbedding,
    cfg: &DecodeConfig,
) -> Result<(TokenGrid, DecodeTrace)> {
    cfg.validate()?;
    let n = model.cfg.tokens();
    let k = model.cfg.k;
    let drop = model.cfg.drop_id();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grid = TokenGrid::filled(model.cfg.side, drop);
    let mut trace = DecodeTrace { masked_counts: vec![n] };
    for t in 1..=cfg.steps {
        let (cond, uncond) = step_logits(model, &grid, caption, cfg.guidance_scale).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at decode step {t}")),
            other => other,
        })?;
        let keep_masked = masked_count_at_step(t, cfg.steps, n)?;
        let masked: Vec<usize> = (0..n).filter(|&i| grid.ids()[i] == drop).collect();
        let anneal = cfg.choice_temperature * (1.0 - t as f64 / cfg.steps as f64);
        let mut scored: Vec<(f64, usize, u32)> = Vec::with_capacity(masked.len());
        for &i in &masked {
            let row = guide(
                &cond[i * k..(i + 1) * k],
                uncond.as_ref().map(|u| &u[i * k..(i + 1) * k]),
                cfg.guidance_scale,
            );
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("guided logits at decode step {t}")));
            }
            let logp = log_softmax(&row, cfg.sample_temperature);
            let id = if cfg.sample_temperature == 0.0 {
                crate::lm::argmax(&row)
            } else {
                let mut u: f64 = rng.random();
                let mut pick = k - 1;
                for (j, lp) in logp.iter().enumerate() {
                    u -= lp.exp();
                    if u < 0.0 {
                        pick = j;
                        break;
                    }
                }
                pick
            };
            let noise = if anneal > 0.0 { anneal * gumbel(&mut rng) } else { 0.0 };
            scored.push((logp[id] + noise, i, id as u32));
        }
        // Highest confidence first; position breaks ties.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let reveal = masked.len() - keep_masked.min(masked.len());
        for &(_, i, id) in scored.iter().take(reveal) {
            grid.ids_mut()[i] = id;
        }
        trace.masked_counts.push(grid.count(drop));
    }
    grid.check_finalized(k)?;
    Ok((grid, trace))
}
