mod common;

use common::fixtures;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthpair::numerics::gradcheck::{check_gradients, GradCheckOptions};
use synthpair::numerics::{AdamW, AdamWConfig, Graph, Tensor};
use synthpair::t2igen::*;
use synthpair::vq::TokenGrid;
use synthpair::Error;

#[test]
fn mask_fraction_mean_is_two_over_pi() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 256;
    let total: f64 = (0..100_000)
        .map(|_| sample_mask(&mut rng, n).len() as f64 / n as f64)
        .sum();
    let mean = total / 1e5;
    assert!((0.62..=0.66).contains(&mean), "{mean}");
}

#[test]
fn masks_are_distinct_in_range_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let m = sample_mask(&mut rng, 64);
        assert!(!m.is_empty() && m.len() <= 64);
        assert!(m.windows(2).all(|w| w[0] < w[1]));
        assert!(*m.last().unwrap() < 64);
    }
}

#[test]
fn apply_mask_counts() {
    let g = TokenGrid::new(2, vec![1, 2, 3, 4]).unwrap();
    assert_eq!(apply_mask(&g, &[], 9).unwrap(), g);
    assert_eq!(apply_mask(&g, &[0, 1, 2, 3], 9).unwrap(), TokenGrid::filled(2, 9));
    assert_eq!(apply_mask(&g, &[1, 3], 9).unwrap().count(9), 2);
}

/// Ceil of the exact value, computed from the complementary sine and rounded
/// to 9 decimals so float noise around integers cannot move it.
fn schedule_oracle(t: usize, steps: usize, n: usize) -> usize {
    let v = n as f64 * (std::f64::consts::FRAC_PI_2 * (steps - t) as f64 / steps as f64).sin();
    ((v * 1e9).round() / 1e9).ceil() as usize
}

#[test]
fn schedule_matches_oracle_and_is_monotone() {
    for steps in 1..=32 {
        for n in [1, 7, 64, 256] {
            let mut prev = usize::MAX;
            for t in 0..=steps {
                let m = masked_count_at_step(t, steps, n).unwrap();
                assert_eq!(m, schedule_oracle(t, steps, n), "t={t} T={steps} n={n}");
                assert!(m <= prev);
                prev = m;
            }
            assert_eq!(prev, 0);
            if steps > 1 {
                assert!(masked_count_at_step(steps - 1, steps, n).unwrap() >= 1);
            }
        }
    }
    assert!(matches!(masked_count_at_step(3, 2, 8), Err(Error::Parameter(_))));
}

#[test]
fn untrained_loss_is_near_log_k() {
    let (lm, vq) = (fixtures::raw_lm(), fixtures::raw_vq());
    let ex = fixtures::t2i_examples(&lm, &vq, 4, 0);
    let model = T2iModel::new(T2iConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for e in &ex {
        let m = sample_mask(&mut rng, 64);
        let l = model.eval_loss(&e.grid, Some(&e.caption), &m).unwrap();
        assert!((l - 512f64.ln()).abs() < 0.3, "{l}");
    }
}

/// Masked CE computed by hand from the model's logits on the corrupted grid.
fn masked_ce_oracle(logits: &Tensor, targets: &[u32], mask: &[usize]) -> f64 {
    let total: f64 = mask
        .iter()
        .map(|&i| {
            let row: Vec<f64> = logits.row(i).iter().map(|&x| x as f64).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[targets[i] as usize]
        })
        .sum();
    total / mask.len() as f64
}

#[test]
fn loss_scores_only_masked_targets() {
    let (lm, vq) = (fixtures::raw_lm(), fixtures::raw_vq());
    let e = &fixtures::t2i_examples(&lm, &vq, 1, 3)[0];
    let model = T2iModel::new(fixtures::small_t2i()).unwrap();
    let mask: Vec<usize> = (0..64).step_by(3).collect();
    let loss = model.eval_loss(&e.grid, Some(&e.caption), &mask).unwrap();

    let corrupted = apply_mask(&e.grid, &mask, 512).unwrap();
    let mut g = Graph::new();
    let l = model
        .logits(&mut g, &model.store, &[&corrupted], &[Some(&e.caption)])
        .unwrap();
    let logits = g.value(l).clone();
    assert!((loss - masked_ce_oracle(&logits, e.grid.ids(), &mask)).abs() < 1e-5);

    // Ground-truth ids outside the mask are never scored.
    let mut perturbed = e.grid.ids().to_vec();
    for i in (0..64).filter(|i| i % 3 != 0) {
        perturbed[i] = (perturbed[i] + 17) % 512;
    }
    assert_eq!(
        masked_ce_oracle(&logits, &perturbed, &mask),
        masked_ce_oracle(&logits, e.grid.ids(), &mask)
    );
}

#[test]
fn empty_mask_is_contract_error() {
    let (lm, vq) = (fixtures::raw_lm(), fixtures::raw_vq());
    let e = &fixtures::t2i_examples(&lm, &vq, 1, 4)[0];
    let model = T2iModel::new(fixtures::small_t2i()).unwrap();
    assert!(matches!(
        model.eval_loss(&e.grid, Some(&e.caption), &[]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = T2iConfig {
        k: 6,
        side: 2,
        text_dim: 3,
        ctx_len: 3,
        dim: 4,
        layers: 2,
        heads: 2,
        mlp_hidden: 8,
        dropout: 0.0,
        caption_dropout: 0.0,
        seed: 5,
    };
    let model = T2iModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Larger weights than the init so the check is not dominated by tiny values.
    let mut store = model.store.cast::<f64>();
    for (i, _) in store.clone().iter() {
        for x in store.get_mut(i).tensor.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let cap = CaptionEmbedding::new(
        Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap(),
    )
    .unwrap();
    let grid = TokenGrid::new(2, vec![0, 3, 5, 1]).unwrap();
    let mask = vec![0usize, 2, 3];
    let report = check_gradients(
        &store,
        |g, s| {
            let a = model.loss(g, s, &[(&grid, Some(&cap), &mask)])?;
            let b = model.loss(g, s, &[(&grid, None, &mask[..1])])?;
            g.add(a, b)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn caption_dropout_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hits = (0..10_000).filter(|_| drop_caption(&mut rng, 0.1)).count();
    assert!((800..=1200).contains(&hits), "{hits}");
    assert!(!(0..1000).any(|_| drop_caption(&mut rng, 0.0)));
}

fn opt_for(model: &T2iModel, lr: f64) -> AdamW {
    AdamW::new(
        AdamWConfig {
            lr,
            warmup_steps: 20,
            ..AdamWConfig::default()
        },
        &model.store,
    )
}

#[test]
fn zero_steps_leave_parameters_and_empty_stream_errors() {
    let mut model = T2iModel::new(fixtures::small_t2i()).unwrap();
    let before = model.content_hash();
    let mut opt = opt_for(&model, 1e-3);
    let cfg = T2iTrainConfig {
        steps: 0,
        batch: 4,
        seed: 0,
        early_stop: None,
    };
    let log = train_t2i(&mut model, &mut std::iter::empty(), &mut opt, &cfg).unwrap();
    assert!(log.is_empty());
    assert_eq!(model.content_hash(), before);
    let err = train_t2i(
        &mut model,
        &mut std::iter::empty(),
        &mut opt,
        &T2iTrainConfig { steps: 1, ..cfg },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn training_loss_falls_over_100_step_windows() {
    let (lm, vq) = (fixtures::raw_lm(), fixtures::raw_vq());
    let data = fixtures::t2i_examples(&lm, &vq, 500, 10);
    let mut model = T2iModel::new(fixtures::small_t2i()).unwrap();
    let mut opt = opt_for(&model, 1e-3);
    let mut stream = data.iter().cloned().cycle();
    let cfg = T2iTrainConfig {
        steps: 500,
        batch: 8,
        seed: 1,
        early_stop: None,
    };
    let log = train_t2i(&mut model, &mut stream, &mut opt, &cfg).unwrap();
    let windows: Vec<f64> = log
        .chunks(100)
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect();
    eprintln!("t2i window means {windows:?}");
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    let nulls: usize = log.iter().map(|r| r.null_captions).sum();
    assert!(nulls > 0);
}

#[test]
fn decoding_contracts() {
    let (lm, vq) = (fixtures::raw_lm(), fixtures::raw_vq());
    let data = fixtures::t2i_examples(&lm, &vq, 16, 20);
    let mut model = T2iModel::new(fixtures::small_t2i()).unwrap();
    let mut opt = opt_for(&model, 1e-3);
    let mut stream = data.iter().cloned().cycle();
    let cfg = T2iTrainConfig {
        steps: 60,
        batch: 8,
        seed: 2,
        early_stop: None,
    };
    train_t2i(&mut model, &mut stream, &mut opt, &cfg).unwrap();
    let cap = &data[0].caption;

    let dc = DecodeConfig::default();
    let (a, trace) = decode_iterative(&model, cap, &dc).unwrap();
    let want: Vec<usize> = (0..=24).map(|t| masked_count_at_step(t, 24, 64).unwrap()).collect();
    assert_eq!(trace.masked_counts, want);
    assert_eq!(a.count(512), 0);
    let (b, _) = decode_iterative(&model, cap, &dc).unwrap();
    assert_eq!(a, b);
    let (c, _) = decode_iterative(&model, cap, &DecodeConfig { seed: 99, ..dc.clone() }).unwrap();
    assert_ne!(a, c);

    // One greedy step with no guidance fills every position with its argmax.
    let greedy = DecodeConfig {
        steps: 1,
        guidance_scale: 0.0,
        choice_temperature: 0.0,
        sample_temperature: 0.0,
        seed: 0,
    };
    let (gr, _) = decode_iterative(&model, cap, &greedy).unwrap();
    let mut g = Graph::new();
    let l = model
        .logits(&mut g, &model.store, &[&TokenGrid::filled(8, 512)], &[Some(cap)])
        .unwrap();
    let argmax: Vec<u32> = (0..64)
        .map(|i| synthpair::lm::argmax(g.value(l).row(i)) as u32)
        .collect();
    assert_eq!(gr.ids(), argmax.as_slice());
}

#[test]
fn decode_rejects_bad_config() {
    let model = T2iModel::new(fixtures::small_t2i()).unwrap();
    let cap = CaptionEmbedding::new(Tensor::zeros(&[2, 64])).unwrap();
    let bad = DecodeConfig {
        steps: 0,
        ..DecodeConfig::default()
    };
    assert!(matches!(decode_iterative(&model, &cap, &bad), Err(Error::Parameter(_))));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t2i.bin");
    let model = T2iModel::new(fixtures::small_t2i()).unwrap();
    model.save(&p).unwrap();
    let back = T2iModel::load(&p).unwrap();
    assert_eq!(back.content_hash(), model.content_hash());
    assert_eq!(back.cfg, model.cfg);
}
