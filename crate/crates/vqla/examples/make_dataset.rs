//! Generates the synthetic corpus and the instruction-tuning records with
//! the deterministic mock client, then prints split statistics and a sample
//! record of each kind.
//!
//! ```bash
//! cargo run --release --example make_dataset
//! ```

use vqla::datagen::{generate_pairs, ingest_annotations, split_stats, GeneratorClient, QaKind};
use vqla::fixtures::make_fixtures;

fn main() {
    let out = std::env::temp_dir().join("vqla-example-dataset");
    std::fs::create_dir_all(&out).unwrap();

    let summary = make_fixtures(&out, 100, 64, 2, 7).unwrap();
    println!(
        "fixtures: {} frames ({} train / {} test) under {}",
        summary.frames,
        summary.train_frames,
        summary.test_frames,
        out.display()
    );

    let frames = ingest_annotations(&summary.annotations).unwrap();
    let records = generate_pairs(&frames, &QaKind::ALL, &GeneratorClient::mock()).unwrap();
    let records_path = out.join("records.jsonl");
    vqla::datagen::write_records(&records_path, &records).unwrap();
    println!("{} records -> {}", records.len(), records_path.display());

    let stats = split_stats(&records);
    for (split, count) in &stats.per_split {
        println!("split {split}: {count} records");
        for (kind, n) in &stats.per_split_kind[split] {
            println!("  {kind}: {n}");
        }
    }

    for kind in QaKind::ALL {
        if let Some(record) = records.iter().find(|r| r.kind == kind) {
            println!("\nsample {kind} record ({}):", record.id);
            for turn in &record.turns {
                println!("  {:?}: {}", turn.role, turn.content);
            }
            if let (Some(answer), Some(bbox)) = (&record.answer, &record.bbox) {
                println!("  answer class: {answer}, box {bbox:?}");
            }
        }
    }
}
