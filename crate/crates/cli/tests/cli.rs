use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn run(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_synthpair"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "synthpair {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, v: Value) -> String {
    std::fs::write(dir.join(name), v.to_string()).unwrap();
    name.to_owned()
}

fn tiny_vlm() -> Value {
    json!({"latents": 4, "resampler_layers": 1, "resampler_heads": 2, "width": 32, "resampler_mlp": 64,
           "xattn_heads": 2, "xattn_mlp": 64, "image_positions": true, "seed": 0})
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    run(
        d,
        &[
            "make-corpus",
            "--n",
            "40",
            "--num-classes",
            "10",
            "--out",
            "real",
            "--seed",
            "1",
        ],
    );
    assert_eq!(lines(&d.join("real/pairs.jsonl")), 40);
    assert!(d.join("real/images/00039.png").exists());
    run(
        d,
        &[
            "make-corpus",
            "--n",
            "20",
            "--num-classes",
            "10",
            "--out",
            "held",
            "--seed",
            "900",
        ],
    );
    run(
        d,
        &[
            "capgen",
            "--n",
            "30",
            "--source",
            "template",
            "--out",
            "caps.jsonl",
            "--seed",
            "5",
        ],
    );
    let first: Value = serde_json::from_str(
        std::fs::read_to_string(d.join("caps.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(first["source"], "template");
    assert_eq!(first["seed"], 5);

    let vq_cfg = write(
        d,
        "vq.json",
        json!({"vq": {"side": 8, "patch": 4, "k": 64, "d": 16, "hidden": 32, "seed": 0},
               "pretrain": {"steps": 10, "batch": 8, "lr": 0.002, "warmup_steps": 2, "commitment": 0.25,
                            "restart_every": 0, "seed": 0}}),
    );
    run(
        d,
        &["vq-pretrain", "--config", &vq_cfg, "--data", "real", "--out", "vq.bin"],
    );
    let lm_cfg = write(
        d,
        "lm.json",
        json!({"lm": {"dim": 32, "layers": 1, "heads": 2, "mlp_hidden": 64, "max_len": 64, "seed": 0},
               "pretrain": {"steps": 5, "batch": 8, "lr": 0.001, "warmup_steps": 1, "seed": 0}}),
    );
    run(
        d,
        &[
            "lm-pretrain",
            "--config",
            &lm_cfg,
            "--captions",
            "real/captions.jsonl",
            "caps.jsonl",
            "--out",
            "lm.bin",
        ],
    );

    // Token-shard corpus through the trained tokenizer.
    run(
        d,
        &[
            "make-corpus",
            "--n",
            "12",
            "--num-classes",
            "10",
            "--vq",
            "vq.bin",
            "--out",
            "tok",
        ],
    );
    assert!(d.join("tok/tokens-00000.bin").exists());

    let t2i_cfg = write(
        d,
        "t2i.json",
        json!({"model": {"k": 0, "side": 0, "text_dim": 0, "ctx_len": 0, "dim": 32, "layers": 1, "heads": 2,
                         "mlp_hidden": 64, "dropout": 0.0, "caption_dropout": 0.1, "seed": 0},
               "train": {"steps": 4, "batch": 4}}),
    );
    run(
        d,
        &[
            "t2i-train",
            "--config",
            &t2i_cfg,
            "--data",
            "tok",
            "--lm",
            "lm.bin",
            "--vq",
            "vq.bin",
            "--ckpt",
            "t2i",
        ],
    );
    assert_eq!(lines(&d.join("t2i/metrics.csv")), 5);
    let dec = write(
        d,
        "decode.json",
        json!({"steps": 4, "guidance_scale": 1.0, "choice_temperature": 4.0, "sample_temperature": 1.0, "seed": 0}),
    );
    run(
        d,
        &[
            "t2i-sample",
            "--config",
            &dec,
            "--ckpt",
            "t2i",
            "--lm",
            "lm.bin",
            "--captions",
            "caps.jsonl",
            "--out",
            "gen.bin",
            "--decode-pixels",
            "--vq",
            "vq.bin",
        ],
    );
    let (header, grids) = synthpair::pipeline::read_token_shard(&d.join("gen.bin")).unwrap();
    assert_eq!((header.count, grids.len(), header.k), (30, 30, 64));
    assert!(d.join("gen.00029.png").exists());

    let vlm_cfg = write(
        d,
        "vlm.json",
        json!({"model": tiny_vlm(), "train": {"steps": 3, "batch": 2}}),
    );
    run(
        d,
        &[
            "vlm-train",
            "--config",
            &vlm_cfg,
            "--data",
            "real",
            "--lm",
            "lm.bin",
            "--vq",
            "vq.bin",
            "--ckpt",
            "vlm",
        ],
    );
    let csv = std::fs::read_to_string(d.join("vlm/metrics.csv")).unwrap();
    assert!(csv.starts_with("step,loss,lr,sps\n"));
    assert_eq!(csv.lines().count(), 4);
    let a = run(
        d,
        &[
            "vlm-caption",
            "--ckpt",
            "vlm",
            "--vq",
            "vq.bin",
            "--image",
            "real/images/00000.png",
            "--max-len",
            "8",
        ],
    );
    let b = run(
        d,
        &[
            "vlm-caption",
            "--ckpt",
            "vlm/vlm.bin",
            "--vq",
            "vq.bin",
            "--tokens",
            "gen.bin#3",
            "--max-len",
            "8",
        ],
    );
    assert!(a.ends_with('\n') && b.ends_with('\n'));

    run(
        d,
        &[
            "diversity",
            "--captions",
            "caps.jsonl",
            "real/captions.jsonl",
            "--lm",
            "lm.bin",
            "--k",
            "auto",
            "--k-max",
            "6",
            "--out",
            "div.json",
            "--hist",
            "hist.csv",
        ],
    );
    let div: Value = serde_json::from_str(&std::fs::read_to_string(d.join("div.json")).unwrap()).unwrap();
    let k = div["k"].as_u64().unwrap() as usize;
    assert_eq!(div["wcss_curve"].as_array().unwrap().len(), 6);
    assert_eq!(div["whitened"], true);
    assert_eq!(div["corpora"].as_array().unwrap().len(), 2);
    assert_eq!(lines(&d.join("hist.csv")), k + 1);

    let exp = write(
        d,
        "exp.json",
        json!({"experiment": {"seed": 0, "steps": 4, "batch": 2, "lr": 0.001, "warmup_steps": 1, "eval_every": 2,
                              "baseline_ratio": 1.0, "mix_ratio": 0.5, "real_modality": "embedding", "vlm": tiny_vlm(),
                              "paths": {"real": "real", "held_out": "held", "synthetic": "caps.jsonl",
                                        "lm": "lm.bin", "vq": "vq.bin", "t2i": "t2i"}},
               "decode": {"steps": 2, "guidance_scale": 1.0, "choice_temperature": 4.0, "sample_temperature": 1.0,
                          "seed": 0}}),
    );
    run(
        d,
        &["experiment", "--config", &exp, "--out", "exp", "--synthetic-n", "8"],
    );
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(d.join("exp/report.json")).unwrap()).unwrap();
    assert_eq!(rep["baseline"]["log"]["evals"].as_array().unwrap().len(), 2);
    assert_eq!(rep["augmented"]["ratio"], 0.5);
    assert_eq!(lines(&d.join("exp/augmented.csv")), 5);
}

#[test]
fn benchmark_reports_both_modalities() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run(d, &["make-corpus", "--n", "16", "--num-classes", "4", "--out", "c"]);
    let vq_cfg = write(
        d,
        "vq.json",
        json!({"vq": {"side": 8, "patch": 4, "k": 32, "d": 8, "hidden": 16, "seed": 0},
               "pretrain": {"steps": 1, "batch": 4, "lr": 0.002, "warmup_steps": 1, "commitment": 0.25,
                            "restart_every": 0, "seed": 0}}),
    );
    run(
        d,
        &["vq-pretrain", "--config", &vq_cfg, "--data", "c", "--out", "vq.bin"],
    );
    let lm_cfg = write(
        d,
        "lm.json",
        json!({"lm": {"dim": 16, "layers": 1, "heads": 2, "mlp_hidden": 32, "max_len": 64, "seed": 0},
               "pretrain": {"steps": 1, "batch": 4, "lr": 0.001, "warmup_steps": 1, "seed": 0}}),
    );
    run(
        d,
        &[
            "lm-pretrain",
            "--config",
            &lm_cfg,
            "--captions",
            "c/captions.jsonl",
            "--out",
            "lm.bin",
        ],
    );
    let vlm = write(d, "vlm.json", tiny_vlm());
    run(
        d,
        &[
            "benchmark",
            "--config",
            &vlm,
            "--data",
            "c",
            "--lm",
            "lm.bin",
            "--vq",
            "vq.bin",
            "--batch",
            "2",
            "--out",
            "b.json",
        ],
    );
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(d.join("b.json")).unwrap()).unwrap();
    assert_eq!(rep["pixel"]["steps"], 200);
    assert!(rep["embedding"]["median_sps"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_invocations_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_synthpair"))
        .current_dir(tmp.path())
        .args(["vlm-caption", "--ckpt", "x", "--vq", "y"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_synthpair"))
        .current_dir(tmp.path())
        .args(["experiment", "--out", "e"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
