//! End-to-end two-stage training on a small synthetic corpus, then
//! evaluation on the held-out split. Sized to finish in a couple of minutes
//! on a laptop CPU.
//!
//! ```bash
//! cargo run --release --example train_two_stage
//! ```

use vqla::datagen::{
    generate_pairs, ingest_annotations, records_in_split, GeneratorClient, QaKind, QaRecord,
};
use vqla::decoder::Vocab;
use vqla::fixtures::make_fixtures;
use vqla::grounding::AnswerVocab;
use vqla::model::{ModelConfig, VqlaModel};
use vqla::pipeline::{evaluate_model, train_stage1, train_stage2, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("vqla-example-train");
    std::fs::create_dir_all(&dir).unwrap();
    make_fixtures(&dir, 20, 32, 1, 7).unwrap();
    let frames = ingest_annotations(&dir.join("annotations.jsonl")).unwrap();
    let records = generate_pairs(&frames, &QaKind::ALL, &GeneratorClient::mock()).unwrap();
    let train: Vec<QaRecord> = records_in_split(&records, "train")
        .into_iter()
        .cloned()
        .collect();
    let test: Vec<QaRecord> = records_in_split(&records, "test")
        .into_iter()
        .cloned()
        .collect();
    println!("{} train records, {} test records", train.len(), test.len());

    let mut corpus: Vec<String> = vec!["user : assistant :".into()];
    for r in &train {
        for t in &r.turns {
            corpus.push(t.content.clone());
        }
    }
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()));
    let answers = AnswerVocab::build(train.iter().filter_map(|r| r.answer.as_deref()));
    println!("vocab {} tokens, {} answer classes", vocab.len(), answers.len());

    let config = ModelConfig {
        image_size: 32,
        patch: 8,
        c_vision: 32,
        vision_depth: 2,
        vision_heads: 4,
        c_lm: 64,
        decoder_layers: 2,
        decoder_heads: 4,
        visual_tokens: 16,
        context: 128,
        lora_rank: 32,
        lora_alpha: 64.0,
        vss_state: 4,
        vss_expand: 1,
        c_ground: 64,
        ground_layers: 1,
        ground_heads: 4,
        tit_levels: 2,
    };
    let model = VqlaModel::<f32>::new(config, vocab, answers, 42).unwrap();
    let mut store = model.param_store().unwrap();
    println!("{} parameters", store.total_params());

    let s1 = dir.join("stage1");
    let cfg1 = TrainConfig {
        epochs: 60,
        batch_size: 8,
        lr: 2e-3,
        weight_decay: 0.0,
        seed: 42,
        vision_trainable: true,
        max_steps: 0,
        max_answer_len: 12,
    };
    let report1 = train_stage1(&model, &mut store, &train, &cfg1, &s1, &dir).unwrap();
    println!(
        "stage 1: {} steps in {:.0}s, ce {:.3} -> {:.3}",
        report1.steps,
        report1.wall_time_s,
        report1.loss_series.first().unwrap(),
        report1.loss_series.last().unwrap()
    );

    let s2 = dir.join("stage2");
    let cfg2 = TrainConfig {
        epochs: 80,
        batch_size: 8,
        lr: 7e-4,
        weight_decay: 0.0,
        seed: 43,
        vision_trainable: true,
        max_steps: 0,
        max_answer_len: 12,
    };
    let report2 = train_stage2(
        &model,
        &mut store,
        &train,
        &cfg2,
        &s2,
        &dir,
        &s1.join("stage1.ckpt"),
    )
    .unwrap();
    println!(
        "stage 2: {} steps in {:.0}s, loss {:.3} -> {:.3}",
        report2.steps,
        report2.wall_time_s,
        report2.loss_series.first().unwrap(),
        report2.loss_series.last().unwrap()
    );

    let judge = GeneratorClient::mock();
    for (name, set) in [("train", &train), ("test", &test)] {
        let metrics = evaluate_model(&model, set, &dir, &judge, 12).unwrap();
        println!(
            "{name}: n {} accuracy {:.3} f-score {:.3} miou {:.3} mean-giou {:.3} rubric {:.1}",
            metrics.n_samples,
            metrics.accuracy,
            metrics.f_score,
            metrics.miou,
            metrics.mean_giou,
            metrics.rubric_score.unwrap_or(0.0)
        );
    }
    println!("checkpoints under {}", dir.display());
}
