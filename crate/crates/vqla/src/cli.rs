//! Command surface: every subcommand reads one config file plus repeatable
//! `--set key=value` overrides, writes a run manifest before doing any work,
//! and reports its outcome through process exit codes (0 ok, 1 usage,
//! 2 data/validation, 3 numeric, 4 external client).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::Config;
use crate::datagen::{
    generate_pairs, ingest_annotations, read_records, records_in_split, split_stats, write_records,
    GeneratorClient, QaKind, QaRecord,
};
use crate::decoder::Vocab;
use crate::error::{exit_code, Result, VqlaError};
use crate::grounding::AnswerVocab;
use crate::model::VqlaModel;
use crate::pipeline::{evaluate_model, train_stage1, train_stage2, TrainConfig};

#[derive(Parser)]
#[command(
    name = "vqla",
    about = "Grounded visual question answering: data generation, two-stage training, evaluation, inference, and gradient checking",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; the run manifest and all artifacts land here.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Repeatable config override.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Force the deterministic mock generator/judge regardless of config.
    #[arg(long)]
    mock_client: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate instruction-tuning records from frame annotations.
    GenData(CommonArgs),
    /// Stage 1: instruction fine-tuning of the adapters.
    TrainStage1(CommonArgs),
    /// Stage 2: grounding alignment over a frozen decoder.
    TrainStage2(CommonArgs),
    /// Metrics over the test split of the record set.
    Evaluate(CommonArgs),
    /// Answer and localize one question about one image.
    Infer(CommonArgs),
    /// f64 gradient-check suite; exits 3 if any module fails.
    Gradcheck(CommonArgs),
    /// Procedurally generate the synthetic annotation corpus.
    MakeFixtures(CommonArgs),
}

pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    let (name, args) = match &cli.command {
        Command::GenData(a) => ("gen-data", a),
        Command::TrainStage1(a) => ("train-stage1", a),
        Command::TrainStage2(a) => ("train-stage2", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Infer(a) => ("infer", a),
        Command::Gradcheck(a) => ("gradcheck", a),
        Command::MakeFixtures(a) => ("make-fixtures", a),
    };
    match execute(name, args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    git: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    threads: Option<u32>,
    config: BTreeMap<String, String>,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn load_config(args: &CommonArgs) -> Result<Config> {
    let mut config = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    config.apply_overrides(&args.set)?;
    if let Some(seed) = args.seed {
        config.set("train.seed", &seed.to_string())?;
    }
    if args.mock_client {
        config.set("gen.endpoint", "mock")?;
    }
    Ok(config)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// `SLVM_THREADS` caps internal parallelism. Execution is single-threaded
/// (the deterministic normative mode), which satisfies every cap; the value
/// is still validated and recorded.
fn thread_cap() -> Result<Option<u32>> {
    match std::env::var("SLVM_THREADS") {
        Ok(v) => v
            .parse::<u32>()
            .map(Some)
            .map_err(|_| VqlaError::Config(format!("SLVM_THREADS=`{v}` is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn execute(name: &str, args: &CommonArgs) -> Result<i32> {
    let config = load_config(args)?;
    let threads = thread_cap()?;
    std::fs::create_dir_all(&args.out)?;
    let manifest = Manifest {
        command: name,
        seed: config.u64("train.seed")?,
        git: git_describe(),
        threads,
        config: config.echo(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;

    match name {
        "make-fixtures" => cmd_make_fixtures(&config, &args.out),
        "gen-data" => cmd_gen_data(&config, &args.out),
        "train-stage1" => cmd_train_stage1(&config, &args.out),
        "train-stage2" => cmd_train_stage2(&config, &args.out),
        "evaluate" => cmd_evaluate(&config, &args.out),
        "infer" => cmd_infer(&config, &args.out),
        "gradcheck" => cmd_gradcheck(&config, &args.out),
        _ => unreachable!("subcommands are exhaustive"),
    }
}

fn client_from(config: &Config) -> Result<GeneratorClient> {
    match config.str("gen.endpoint") {
        "mock" => Ok(GeneratorClient::mock()),
        other => Err(VqlaError::Client(format!(
            "no chat-completion backend is bound for endpoint `{other}`; \
             bind one through the library api or run with --mock-client"
        ))),
    }
}

fn cmd_make_fixtures(config: &Config, out: &Path) -> Result<i32> {
    let summary = crate::fixtures::make_fixtures(
        out,
        config.usize("fixtures.frames")?,
        config.usize("fixtures.image_size")?,
        config.usize("fixtures.max_instruments")?,
        config.u64("train.seed")?,
    )?;
    write_json(&out.join("fixtures.json"), &summary)?;
    println!(
        "wrote {} frames ({} train / {} test) under {}",
        summary.frames,
        summary.train_frames,
        summary.test_frames,
        out.display()
    );
    Ok(0)
}

fn parse_kinds(config: &Config) -> Result<Vec<QaKind>> {
    config
        .str("gen.kinds")
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(QaKind::parse)
        .collect()
}

fn cmd_gen_data(config: &Config, out: &Path) -> Result<i32> {
    let frames_path = config.required_path("data.frames")?;
    let frames = ingest_annotations(&frames_path)?;
    let kinds = parse_kinds(config)?;
    let client = client_from(config)?;
    let records = generate_pairs(&frames, &kinds, &client)?;
    let records_path = out.join("records.jsonl");
    write_records(&records_path, &records)?;
    let stats = split_stats(&records);
    write_json(&out.join("stats.json"), &stats)?;
    println!(
        "wrote {} records ({} kinds) to {}",
        records.len(),
        kinds.len(),
        records_path.display()
    );
    Ok(0)
}

/// Vocabulary and answer classes derive from the train split, so every
/// stage and evaluation sees the same model dimensions for one record set.
fn build_vocab_and_answers(records: &[QaRecord]) -> (Vocab, AnswerVocab) {
    let train = records_in_split(records, "train");
    let mut corpus: Vec<String> = vec!["user : assistant :".into()];
    for record in &train {
        for turn in &record.turns {
            corpus.push(turn.content.clone());
        }
    }
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()));
    let labels: Vec<&str> = train
        .iter()
        .filter_map(|r| r.answer.as_deref())
        .collect();
    let answers = if labels.is_empty() {
        AnswerVocab::build(["none"])
    } else {
        AnswerVocab::build(labels)
    };
    (vocab, answers)
}

fn image_root(config: &Config, records_path: &Path) -> PathBuf {
    config.path("data.images").unwrap_or_else(|| {
        records_path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn load_model_for_records(
    config: &Config,
    records: &[QaRecord],
) -> Result<(VqlaModel<f32>, vqla_tensor::ParamStore<f32>)> {
    let (vocab, answers) = build_vocab_and_answers(records);
    let model = VqlaModel::new(
        config.model_config()?,
        vocab,
        answers,
        config.u64("train.seed")?,
    )?;
    let store = model.param_store()?;
    Ok((model, store))
}

fn cmd_train_stage1(config: &Config, out: &Path) -> Result<i32> {
    let records_path = config.required_path("data.records")?;
    let records = read_records(&records_path)?;
    let train: Vec<QaRecord> = records_in_split(&records, "train")
        .into_iter()
        .cloned()
        .collect();
    let (model, mut store) = load_model_for_records(config, &records)?;
    let cfg: TrainConfig = config.train_config()?;
    let root = image_root(config, &records_path);
    let mut report = train_stage1(&model, &mut store, &train, &cfg, out, &root)?;
    report.config_echo = config.echo();
    write_json(&out.join("report.json"), &report)?;
    println!(
        "stage 1 done: {} steps, final epoch loss {:.4}",
        report.steps,
        report.loss_series.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn cmd_train_stage2(config: &Config, out: &Path) -> Result<i32> {
    let records_path = config.required_path("data.records")?;
    let records = read_records(&records_path)?;
    let train: Vec<QaRecord> = records_in_split(&records, "train")
        .into_iter()
        .cloned()
        .collect();
    let (model, mut store) = load_model_for_records(config, &records)?;
    let cfg: TrainConfig = config.train_config()?;
    let stage1 = config.required_path("ckpt.stage1")?;
    let root = image_root(config, &records_path);
    let mut report = train_stage2(&model, &mut store, &train, &cfg, out, &root, &stage1)?;
    report.config_echo = config.echo();
    write_json(&out.join("report.json"), &report)?;
    println!(
        "stage 2 done: {} steps, final epoch loss {:.4}",
        report.steps,
        report.loss_series.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn cmd_evaluate(config: &Config, out: &Path) -> Result<i32> {
    let records_path = config.required_path("data.records")?;
    let records = read_records(&records_path)?;
    let split = config.str("eval.split");
    let subset: Vec<QaRecord> = records_in_split(&records, split)
        .into_iter()
        .cloned()
        .collect();
    let (model, store) = load_model_for_records(config, &records)?;
    if let Some(ckpt) = config.path("ckpt.model") {
        crate::pipeline::load_checkpoint_into(&ckpt, &store)?;
    }
    let judge = client_from(config)?;
    let root = image_root(config, &records_path);
    let report = evaluate_model(
        &model,
        &subset,
        &root,
        &judge,
        config.usize("train.max_answer_len")?,
    )?;
    write_json(&out.join("metrics.json"), &report)?;
    std::fs::write(out.join("records.csv"), report.to_csv())?;
    println!(
        "evaluated {} samples: accuracy {:.4}, f-score {:.4}, miou {:.4}, mean giou {:.4}{}",
        report.n_samples,
        report.accuracy,
        report.f_score,
        report.miou,
        report.mean_giou,
        report
            .rubric_score
            .map(|s| format!(", rubric {s:.2}"))
            .unwrap_or_default()
    );
    Ok(0)
}

#[derive(Serialize)]
struct InferOutput {
    question: String,
    answer_text: String,
    answer_class: String,
    bbox: [f64; 4],
}

fn cmd_infer(config: &Config, out: &Path) -> Result<i32> {
    let image = config.required_path("infer.image")?;
    let question = config.str("infer.question").to_string();
    if question.is_empty() {
        return Err(VqlaError::Config("infer.question is required".into()));
    }
    let records_path = config.required_path("data.records")?;
    let records = read_records(&records_path)?;
    let (model, store) = load_model_for_records(config, &records)?;
    if let Some(ckpt) = config.path("ckpt.model") {
        crate::pipeline::load_checkpoint_into(&ckpt, &store)?;
    }
    let img = crate::encoder::ImageTensor::from_file(&image)?;
    let (response, grounded) =
        model.infer(&img, &question, config.usize("train.max_answer_len")?)?;
    let output = InferOutput {
        question,
        answer_text: response.text,
        answer_class: model
            .answers
            .class(grounded.predicted_class())
            .unwrap_or("<unknown>")
            .to_string(),
        bbox: grounded.bbox().to_array(),
    };
    write_json(&out.join("inference.json"), &output)?;
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(0)
}

#[derive(Serialize)]
struct GradcheckReport {
    tolerance: f64,
    entries: Vec<GradcheckEntry>,
    passed: bool,
}

#[derive(Serialize)]
struct GradcheckEntry {
    module: String,
    max_rel_error: f64,
    instances: usize,
    passed: bool,
}

fn cmd_gradcheck(config: &Config, out: &Path) -> Result<i32> {
    let _finite = vqla_tensor::finite_checks();
    let entries = crate::gradsuite::run_suite(5, config.u64("train.seed")?);
    let mut all_pass = true;
    let mut report_entries = Vec::new();
    for entry in &entries {
        let ok = entry.passed();
        all_pass &= ok;
        println!(
            "{:<16} max_rel_error = {:.3e}  [{}]",
            entry.module,
            entry.max_rel_error,
            if ok { "pass" } else { "FAIL" }
        );
        report_entries.push(GradcheckEntry {
            module: entry.module.clone(),
            max_rel_error: entry.max_rel_error,
            instances: entry.instances,
            passed: ok,
        });
    }
    let report = GradcheckReport {
        tolerance: crate::gradsuite::TOLERANCE,
        entries: report_entries,
        passed: all_pass,
    };
    write_json(&out.join("gradcheck.json"), &report)?;
    Ok(if all_pass { 0 } else { 3 })
}
