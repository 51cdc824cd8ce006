//! Trains a small model on one scene and asks it questions: prints the
//! generated answer text, the grounded answer class, and the predicted box
//! against the annotated one.
//!
//! ```bash
//! cargo run --release --example inference
//! ```

use vqla::datagen::{generate_pairs, ingest_annotations, GeneratorClient, QaKind, QaRecord};
use vqla::decoder::Vocab;
use vqla::encoder::ImageTensor;
use vqla::fixtures::make_fixtures;
use vqla::grounding::{iou, AnswerVocab, BBox};
use vqla::model::{ModelConfig, VqlaModel};
use vqla::pipeline::{train_stage1, train_stage2, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("vqla-example-infer");
    std::fs::create_dir_all(&dir).unwrap();
    make_fixtures(&dir, 4, 32, 1, 7).unwrap();
    let frames = ingest_annotations(&dir.join("annotations.jsonl")).unwrap();
    let records = generate_pairs(&frames, &QaKind::ALL, &GeneratorClient::mock()).unwrap();

    let mut corpus: Vec<String> = vec!["user : assistant :".into()];
    for r in &records {
        for t in &r.turns {
            corpus.push(t.content.clone());
        }
    }
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()));
    let answers = AnswerVocab::build(records.iter().filter_map(|r| r.answer.as_deref()));
    let config = ModelConfig {
        image_size: 32,
        patch: 8,
        c_vision: 32,
        vision_depth: 1,
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
    let model = VqlaModel::<f32>::new(config, vocab, answers, 1).unwrap();
    let mut store = model.param_store().unwrap();

    let cfg = |seed, lr, epochs| TrainConfig {
        epochs,
        batch_size: 4,
        lr,
        weight_decay: 0.0,
        seed,
        vision_trainable: true,
        max_steps: 0,
        max_answer_len: 12,
    };
    let s1 = dir.join("s1");
    train_stage1(&model, &mut store, &records, &cfg(1, 2e-3, 120), &s1, &dir).unwrap();
    train_stage2(
        &model,
        &mut store,
        &records,
        &cfg(2, 1e-3, 120),
        &dir.join("s2"),
        &dir,
        &s1.join("stage1.ckpt"),
    )
    .unwrap();

    // chat-style questions exercise the language response
    println!("-- language responses (stage-1 capability) --");
    for record in records.iter().filter(|r| r.kind != QaKind::Vqla).take(3) {
        let img = ImageTensor::from_file(&dir.join(&record.image)).unwrap();
        let response = model.generate(&img, record.question_text(), 24).unwrap();
        println!("frame {}", record.frame_id);
        println!("  q:   {}", record.question_text());
        println!("  ref: {}", record.turns[1].content);
        println!("  gen: {}", response.text);
    }

    // localized-answer questions exercise the grounding head
    println!("-- grounded answers (stage-2 capability) --");
    let vqla_records: Vec<&QaRecord> =
        records.iter().filter(|r| r.kind == QaKind::Vqla).collect();
    for record in vqla_records.iter().take(4) {
        let img = ImageTensor::from_file(&dir.join(&record.image)).unwrap();
        let (_, grounded) = model.infer(&img, record.question_text(), 12).unwrap();
        let gt = BBox::from_array(record.bbox.unwrap()).unwrap();
        println!("frame {}", record.frame_id);
        println!("  q: {}", record.question_text());
        println!(
            "  class: {} (gold {})",
            model
                .answers
                .class(grounded.predicted_class())
                .unwrap_or("?"),
            record.answer.as_deref().unwrap_or("?")
        );
        let b = grounded.bbox();
        println!(
            "  box: [{:.2}, {:.2}, {:.2}, {:.2}] iou {:.3}",
            b.cx,
            b.cy,
            b.w,
            b.h,
            iou(&b, &gt)
        );
    }
}
