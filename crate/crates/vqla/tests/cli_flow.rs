//! End-to-end command-surface test: fixtures -> data -> two training stages
//! -> evaluation -> inference, all through `cli::run`, plus the
//! byte-determinism contract on repeated identical runs.

use std::path::{Path, PathBuf};

use vqla::cli::run;

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vqla-flow-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn argv(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

const MICRO_MODEL: &[&str] = &[
    "--set",
    "model.image_size=16",
    "--set",
    "model.c_vision=8",
    "--set",
    "model.vision_depth=1",
    "--set",
    "model.vision_heads=2",
    "--set",
    "model.c_lm=16",
    "--set",
    "model.decoder_layers=1",
    "--set",
    "model.decoder_heads=2",
    "--set",
    "model.visual_tokens=4",
    "--set",
    "model.context=96",
    "--set",
    "model.lora_rank=2",
    "--set",
    "model.vss_state=2",
    "--set",
    "model.c_ground=16",
    "--set",
    "model.ground_layers=1",
    "--set",
    "model.ground_heads=2",
    "--set",
    "model.tit_levels=1",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.lr=0.001",
];

fn with_micro(base: &[&str]) -> Vec<String> {
    let mut v = argv(base);
    v.extend(MICRO_MODEL.iter().map(|s| s.to_string()));
    v
}

fn run_stage1(out: &Path, records: &Path, images: &Path) -> i32 {
    run(&with_micro(&[
        "vqla",
        "train-stage1",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "5",
        "--set",
        &format!("data.records={}", records.display()),
        "--set",
        &format!("data.images={}", images.display()),
    ]))
}

#[test]
fn full_pipeline_through_the_cli() {
    let fx = tmp("fx");
    assert_eq!(
        run(&argv(&[
            "vqla",
            "make-fixtures",
            "--out",
            fx.to_str().unwrap(),
            "--seed",
            "7",
            "--set",
            "fixtures.frames=6",
            "--set",
            "fixtures.image_size=16",
            "--set",
            "fixtures.max_instruments=1",
        ])),
        0
    );
    assert!(fx.join("manifest.json").exists());

    let gen = tmp("gen");
    assert_eq!(
        run(&argv(&[
            "vqla",
            "gen-data",
            "--out",
            gen.to_str().unwrap(),
            "--mock-client",
            "--set",
            &format!("data.frames={}", fx.join("annotations.jsonl").display()),
        ])),
        0
    );
    let records = gen.join("records.jsonl");
    assert!(records.exists());
    assert!(gen.join("stats.json").exists());

    let s1 = tmp("s1");
    assert_eq!(run_stage1(&s1, &records, &fx), 0);
    assert!(s1.join("stage1.ckpt").exists());
    assert!(s1.join("adapter.ckpt").exists());
    assert!(s1.join("vocab.txt").exists());
    assert!(s1.join("report.json").exists());

    let s2 = tmp("s2");
    assert_eq!(
        run(&with_micro(&[
            "vqla",
            "train-stage2",
            "--out",
            s2.to_str().unwrap(),
            "--seed",
            "5",
            "--set",
            &format!("data.records={}", records.display()),
            "--set",
            &format!("data.images={}", fx.display()),
            "--set",
            &format!("ckpt.stage1={}", s1.join("stage1.ckpt").display()),
        ])),
        0
    );
    assert!(s2.join("stage2.ckpt").exists());

    let ev = tmp("ev");
    assert_eq!(
        run(&with_micro(&[
            "vqla",
            "evaluate",
            "--out",
            ev.to_str().unwrap(),
            "--seed",
            "5",
            "--mock-client",
            "--set",
            &format!("data.records={}", records.display()),
            "--set",
            &format!("data.images={}", fx.display()),
            "--set",
            &format!("ckpt.model={}", s2.join("stage2.ckpt").display()),
        ])),
        0
    );
    assert!(ev.join("metrics.json").exists());
    assert!(ev.join("records.csv").exists());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["n_samples"].as_u64().unwrap() >= 1);

    // infer on one fixture image
    let frames = std::fs::read_to_string(fx.join("annotations.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(frames.lines().next().unwrap()).unwrap();
    let image_rel = first["image"].as_str().unwrap();
    let inf = tmp("inf");
    assert_eq!(
        run(&with_micro(&[
            "vqla",
            "infer",
            "--out",
            inf.to_str().unwrap(),
            "--seed",
            "5",
            "--set",
            &format!("data.records={}", records.display()),
            "--set",
            &format!("infer.image={}", fx.join(image_rel).display()),
            "--set",
            "infer.question=which organ is undergoing the procedure ?",
            "--set",
            &format!("ckpt.model={}", s2.join("stage2.ckpt").display()),
        ])),
        0
    );
    let out: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(inf.join("inference.json")).unwrap())
            .unwrap();
    assert!(out["bbox"].as_array().unwrap().len() == 4);

    for d in [fx, gen, s1, s2, ev, inf] {
        std::fs::remove_dir_all(&d).ok();
    }
}

#[test]
fn identical_runs_emit_identical_artifacts() {
    let fx = tmp("det-fx");
    run(&argv(&[
        "vqla",
        "make-fixtures",
        "--out",
        fx.to_str().unwrap(),
        "--seed",
        "7",
        "--set",
        "fixtures.frames=4",
        "--set",
        "fixtures.image_size=16",
        "--set",
        "fixtures.max_instruments=1",
    ]));
    let gen = tmp("det-gen");
    run(&argv(&[
        "vqla",
        "gen-data",
        "--out",
        gen.to_str().unwrap(),
        "--set",
        &format!("data.frames={}", fx.join("annotations.jsonl").display()),
    ]));
    let records = gen.join("records.jsonl");

    let a = tmp("det-a");
    let b = tmp("det-b");
    assert_eq!(run_stage1(&a, &records, &fx), 0);
    assert_eq!(run_stage1(&b, &records, &fx), 0);
    assert_eq!(
        std::fs::read(a.join("stage1.ckpt")).unwrap(),
        std::fs::read(b.join("stage1.ckpt")).unwrap(),
        "identical argv + config + seed must give identical checkpoint bytes"
    );
    assert_eq!(
        std::fs::read(a.join("vocab.txt")).unwrap(),
        std::fs::read(b.join("vocab.txt")).unwrap()
    );
    let series = |dir: &Path| {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap())
                .unwrap();
        v["loss_series"].to_string()
    };
    assert_eq!(series(&a), series(&b));
    for d in [fx, gen, a, b] {
        std::fs::remove_dir_all(&d).ok();
    }
}

#[test]
fn gradcheck_subcommand_passes_and_reports() {
    let out = tmp("gc");
    let code = run(&argv(&["vqla", "gradcheck", "--out", out.to_str().unwrap()]));
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(report["passed"], true);
    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    // run the real binary so the env var cannot leak into parallel tests
    let out = tmp("threads");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_vqla"))
        .args([
            "make-fixtures",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "fixtures.frames=1",
            "--set",
            "fixtures.image_size=16",
        ])
        .env("SLVM_THREADS", "many")
        .status()
        .expect("binary runs");
    assert_eq!(status.code(), Some(2));
    std::fs::remove_dir_all(&out).ok();
}
