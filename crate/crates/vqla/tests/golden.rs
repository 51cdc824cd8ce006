//! Golden-file and corpus-level text checks.

use vqla::datagen::{
    build_prompt, generate_pairs, ingest_annotations, FrameAnnotation, GeneratorClient,
    Interaction, ObjectAnnotation, QaKind,
};
use vqla::decoder::Vocab;
use vqla::fixtures::make_fixtures;

fn golden_frame() -> FrameAnnotation {
    FrameAnnotation {
        schema_version: 1,
        frame_id: "frame_0001".into(),
        image: "images/frame_0001.png".into(),
        objects: vec![
            ObjectAnnotation {
                name: "bipolar forceps".into(),
                bbox: [0.3, 0.4, 0.2, 0.15],
            },
            ObjectAnnotation {
                name: "kidney".into(),
                bbox: [0.5, 0.55, 0.85, 0.75],
            },
        ],
        interactions: vec![Interaction {
            subject: "bipolar forceps".into(),
            verb: "grasping".into(),
            object: "kidney".into(),
        }],
        qa_pairs: vec![],
    }
}

#[test]
fn reasoning_prompt_matches_golden_file() {
    let prompt = build_prompt(&golden_frame(), QaKind::Reasoning);
    let golden = include_str!("golden/reasoning_prompt.txt");
    assert_eq!(prompt, golden);
}

#[test]
fn reasoning_prompt_contains_instruction_block() {
    let prompt = build_prompt(&golden_frame(), QaKind::Reasoning);
    assert!(prompt.contains("complex reasoning question"));
    assert!(prompt.contains("bounding boxes :"));
}

#[test]
fn every_fixture_corpus_string_roundtrips_through_the_tokenizer() {
    let dir = std::env::temp_dir().join(format!("vqla-golden-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    make_fixtures(&dir, 20, 16, 2, 7).unwrap();
    let frames = ingest_annotations(&dir.join("annotations.jsonl")).unwrap();
    let records = generate_pairs(&frames, &QaKind::ALL, &GeneratorClient::mock()).unwrap();

    let mut corpus: Vec<String> = Vec::new();
    for r in &records {
        for t in &r.turns {
            corpus.push(t.content.clone());
        }
    }
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()));
    for s in &corpus {
        let roundtrip = vocab.detokenize(&vocab.tokenize(s));
        assert_eq!(&roundtrip, s, "corpus string failed to round-trip");
    }
    std::fs::remove_dir_all(&dir).ok();
}
