//! End-to-end command-line tests: every command runs in-process against
//! temporary directories, checking artifacts and exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use mum::cli::run;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn gen_data(dir: &Path, scenes: u32, views: u32, size: u32, seed: u32) {
    let code = run(vec![
        "mum".to_string(),
        "gen-data".into(),
        "--out".into(),
        dir.display().to_string(),
        "--scenes".into(),
        scenes.to_string(),
        "--views".into(),
        views.to_string(),
        "--size".into(),
        size.to_string(),
        "--seed".into(),
        seed.to_string(),
    ]);
    assert_eq!(code, 0);
}

fn tiny_config(base: &Path, steps: usize) -> PathBuf {
    let path = base.join("cfg.json");
    fs::write(
        &path,
        format!(
            r#"{{
  "seed": 5,
  "model": {{ "enc_width": 16, "enc_depth": 2, "enc_heads": 2, "dec_width": 16,
             "dec_depth": 2, "dec_heads": 2, "patch_size": 4, "pos_mode": "rope",
             "comm_site": "decoder", "rope_base": 100.0, "mlp_ratio": 4.0,
             "head_bias": true }},
  "sampler": {{ "min_len": 2, "max_len": 3, "frames_per_device": 6,
               "single_view_prob": 0.1, "image_size": 32, "flip_prob": 0.5,
               "rng_seed": 5 }},
  "train": {{ "base_lr": 0.1, "batch_size_for_scaling": 6, "warmup_steps": 5,
             "total_steps": {steps} }},
  "probe": {{ "train_steps": 60, "eval_interval": 30, "probe_lr": 0.003 }},
  "log_interval": 1
}}"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn gen_data_is_byte_deterministic() {
    let base = tempfile::tempdir().unwrap();
    let (d1, d2) = (base.path().join("a"), base.path().join("b"));
    gen_data(&d1, 2, 3, 32, 9);
    gen_data(&d2, 2, 3, 32, 9);
    assert_eq!(dir_bytes(&d1), dir_bytes(&d2));

    let d3 = base.path().join("c");
    gen_data(&d3, 2, 3, 32, 10);
    assert_ne!(dir_bytes(&d1), dir_bytes(&d3));
}

#[test]
fn gen_data_single_view_scenes() {
    let base = tempfile::tempdir().unwrap();
    let dir = base.path().join("mono");
    gen_data(&dir, 2, 1, 32, 1);
    let scenes = mum::scene::load_manifest(&dir.join("manifest.json")).unwrap();
    assert_eq!(scenes.len(), 2);
    assert!(scenes.iter().all(|s| s.len() == 1));
    let warps = mum::scene::WarpIndex::open(&dir).unwrap();
    assert!(warps.entries.is_empty());
}

#[test]
fn pretrain_probe_inspect_pipeline() {
    let base = tempfile::tempdir().unwrap();
    let data = base.path().join("data");
    gen_data(&data, 2, 4, 32, 3);
    let cfg = tiny_config(base.path(), 20);
    let out = base.path().join("run");
    let code = run(vec![
        "mum".to_string(),
        "pretrain".into(),
        "--config".into(),
        cfg.display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]);
    assert_eq!(code, 0);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,lr\n"));
    assert_eq!(metrics.lines().count(), 21);
    assert!(out.join("final/manifest.json").is_file());

    // probe with a learning-rate grid
    let probe_out = base.path().join("probe");
    let code = run(vec![
        "mum".to_string(),
        "probe".into(),
        "--config".into(),
        cfg.display().to_string(),
        "--checkpoint".into(),
        out.join("final").display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        probe_out.display().to_string(),
        "--probe-lr".into(),
        "0.003,0.01".into(),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(probe_out.join("probe.csv")).unwrap();
    assert!(csv.starts_with("pair_id,epe,robustness,n_valid\n"));
    assert!(csv.lines().last().unwrap().starts_with("summary,"));
    // one row per ordered pair (2 scenes x 4 views -> 12 pairs each) + header + summary
    assert_eq!(csv.lines().count(), 1 + 24 + 1);

    // layer sweep emits a per-layer table
    let sweep_out = base.path().join("sweep");
    let code = run(vec![
        "mum".to_string(),
        "probe".into(),
        "--config".into(),
        cfg.display().to_string(),
        "--checkpoint".into(),
        out.join("final").display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        sweep_out.display().to_string(),
        "--sweep-layers".into(),
        "--steps".into(),
        "30".into(),
    ]);
    assert_eq!(code, 0);
    let layers = fs::read_to_string(sweep_out.join("layers.csv")).unwrap();
    assert!(layers.starts_with("layer,epe,robustness,n_valid\n"));
    assert_eq!(layers.lines().count(), 1 + 2); // enc_depth = 2

    // held-out evaluation data
    let eval_data = base.path().join("eval_data");
    gen_data(&eval_data, 1, 3, 32, 77);
    let held_out = base.path().join("held_out");
    let code = run(vec![
        "mum".to_string(),
        "probe".into(),
        "--config".into(),
        cfg.display().to_string(),
        "--checkpoint".into(),
        out.join("final").display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--eval-data".into(),
        eval_data.display().to_string(),
        "--out".into(),
        held_out.display().to_string(),
        "--steps".into(),
        "30".into(),
    ]);
    assert_eq!(code, 0);
    let held_csv = fs::read_to_string(held_out.join("probe.csv")).unwrap();
    // rows come from the held-out dataset: 1 scene x 3 views -> 6 pairs
    assert_eq!(held_csv.lines().count(), 1 + 6 + 1);
    assert!(held_csv.contains("synth-0000004d")); // scene id for seed 77

    // cosine mode needs no probe training
    let cos_out = base.path().join("cosine");
    let code = run(vec![
        "mum".to_string(),
        "probe".into(),
        "--checkpoint".into(),
        out.join("final").display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        cos_out.display().to_string(),
        "--mode".into(),
        "cosine".into(),
    ]);
    assert_eq!(code, 0);
    assert!(cos_out.join("probe.csv").is_file());

    // inspect writes the attention grid and an estimated warp
    let insp = base.path().join("insp");
    let code = run(vec![
        "mum".to_string(),
        "inspect".into(),
        "--checkpoint".into(),
        out.join("final").display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        insp.display().to_string(),
        "--query".into(),
        "0,1,2".into(),
        "--block".into(),
        "1".into(),
    ]);
    assert_eq!(code, 0);
    let attn = fs::read_to_string(insp.join("attention.csv")).unwrap();
    assert!(attn.starts_with("view,patch_row,patch_col,weight,weight_per_view\n"));
    // raw weights sum to 1 across all views
    let total: f64 = attn
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(insp.join("warp.csv").is_file());
    assert!(fs::read_dir(&insp).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .ends_with(".mumw")));

    // a frame-wise block is rejected
    let code = run(vec![
        "mum".to_string(),
        "inspect".into(),
        "--checkpoint".into(),
        out.join("final").display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        base.path().join("insp2").display().to_string(),
        "--block".into(),
        "0".into(),
    ]);
    assert_ne!(code, 0);
}

#[test]
fn pretrain_resume_continues_to_total() {
    let base = tempfile::tempdir().unwrap();
    let data = base.path().join("data");
    gen_data(&data, 2, 4, 32, 3);
    let cfg = tiny_config(base.path(), 10);
    let head = base.path().join("head");
    assert_eq!(
        run(vec![
            "mum".to_string(),
            "pretrain".into(),
            "--config".into(),
            cfg.display().to_string(),
            "--data".into(),
            data.display().to_string(),
            "--out".into(),
            head.display().to_string(),
        ]),
        0
    );
    // resume from step 10 with a 16-step schedule
    let cfg16 = tiny_config(base.path(), 16);
    let tail = base.path().join("tail");
    assert_eq!(
        run(vec![
            "mum".to_string(),
            "pretrain".into(),
            "--config".into(),
            cfg16.display().to_string(),
            "--data".into(),
            data.display().to_string(),
            "--out".into(),
            tail.display().to_string(),
            "--resume".into(),
            head.join("final").display().to_string(),
        ]),
        0
    );
    let (_, _, step) = mum::train::load_checkpoint(&tail.join("final")).unwrap();
    assert_eq!(step, 16);
    let metrics = fs::read_to_string(tail.join("metrics.csv")).unwrap();
    let first_row = metrics.lines().nth(1).unwrap();
    assert!(
        first_row.starts_with("11,"),
        "resumed run logs from step 11"
    );
}

#[test]
fn ablation_flags_reach_training() {
    let base = tempfile::tempdir().unwrap();
    let data = base.path().join("data");
    gen_data(&data, 2, 4, 32, 3);
    let cfg = tiny_config(base.path(), 8);
    for toggles in [
        vec!["reference_view=on"],
        vec!["mask_ratio=0.65", "norm_target=off"],
        vec!["pos=absolute"],
        vec!["comm=encoder"],
    ] {
        let out = tempfile::tempdir().unwrap();
        let mut args: Vec<String> = [
            "mum",
            "pretrain",
            "--config",
            &cfg.display().to_string(),
            "--data",
            &data.display().to_string(),
            "--out",
            &out.path().join("r").display().to_string(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for t in &toggles {
            args.push("--ablate".into());
            args.push(t.to_string());
        }
        assert_eq!(run(args), 0, "toggles {toggles:?}");
    }

    // bad toggle is a validation error
    let code = run(vec![
        "mum".to_string(),
        "pretrain".into(),
        "--config".into(),
        cfg.display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        base.path().join("x").display().to_string(),
        "--ablate".into(),
        "bogus=1".into(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn validation_failures_exit_2() {
    let base = tempfile::tempdir().unwrap();

    // missing checkpoint
    let code = run(vec![
        "mum".to_string(),
        "probe".into(),
        "--checkpoint".into(),
        base.path().join("nope").display().to_string(),
        "--data".into(),
        base.path().display().to_string(),
        "--out".into(),
        base.path().join("o").display().to_string(),
    ]);
    assert_eq!(code, 2);

    // unknown keys in the config file are rejected
    let bad_cfg = base.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"seeed": 1}"#).unwrap();
    let code = run(vec![
        "mum".to_string(),
        "config".into(),
        "--config".into(),
        bad_cfg.display().to_string(),
        "--dump".into(),
    ]);
    assert_eq!(code, 2);

    // invalid model configuration collects problems and exits 2
    let invalid = base.path().join("invalid.json");
    fs::write(
        &invalid,
        r#"{"model": { "enc_width": 16, "enc_depth": 2, "enc_heads": 3, "dec_width": 16,
            "dec_depth": 3, "dec_heads": 2, "patch_size": 4, "pos_mode": "rope",
            "comm_site": "decoder", "rope_base": 100.0, "mlp_ratio": 4.0, "head_bias": true }}"#,
    )
    .unwrap();
    let code = run(vec![
        "mum".to_string(),
        "config".into(),
        "--config".into(),
        invalid.display().to_string(),
    ]);
    assert_eq!(code, 2);

    // no data root anywhere
    std::env::remove_var("MUM_DATA_DIR");
    let code = run(vec![
        "mum".to_string(),
        "gen-data".into(),
        "--scenes".into(),
        "1".into(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn config_dump_round_trips() {
    let base = tempfile::tempdir().unwrap();
    let cfg = tiny_config(base.path(), 10);
    assert_eq!(
        run(vec![
            "mum".to_string(),
            "config".into(),
            "--config".into(),
            cfg.display().to_string(),
            "--dump".into(),
        ]),
        0
    );
    // defaults parse back through the same schema
    let dumped = serde_json::to_string(&mum::cli::RunConfig::default()).unwrap();
    let parsed: mum::cli::RunConfig = serde_json::from_str(&dumped).unwrap();
    assert_eq!(parsed.sampler.image_size, 64);
}
