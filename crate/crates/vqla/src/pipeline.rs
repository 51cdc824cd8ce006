//! Two-stage training orchestration.
//!
//! Stage 1 fine-tunes the adapters (and optionally the vision side) with
//! next-token cross-entropy over chat-formatted records while the base
//! decoder stays frozen. Stage 2 freezes the whole vision-language decoder
//! and trains the alignment projection plus the grounding head on
//! localized-answer records. Both stages write checkpoints that round-trip
//! bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::Serialize;
use vqla_tensor::{checkpoint, derive_seed, no_grad, AdamW, ParamStore, Scalar, SeededRng, Tensor};

use crate::datagen::{QaKind, QaRecord, Role};
use crate::decoder::{Vocab, EOS};
use crate::encoder::ImageTensor;
use crate::error::{Result, VqlaError};
use crate::evaluation::{compute_metrics, rubric_score, LabeledExample, MetricsReport};
use crate::grounding::{vqla_loss, BBox};
use crate::model::VqlaModel;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stage 1 also trains the toy vision encoder and resampler when set.
    pub vision_trainable: bool,
    /// Optional hard cap on optimizer steps (0 = none); epochs still bound
    /// the run.
    pub max_steps: usize,
    /// Generation budget for stage-2 feature extraction and evaluation.
    pub max_answer_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-5,
            weight_decay: 0.01,
            seed: 0,
            vision_trainable: true,
            max_steps: 0,
            max_answer_len: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(VqlaError::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(VqlaError::Config("train.batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(VqlaError::Config("train.lr must be > 0".into()));
        }
        if self.max_answer_len < 1 {
            return Err(VqlaError::Config("train.max_answer_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub stage: u32,
    pub seed: u64,
    pub epochs_run: usize,
    pub steps: usize,
    /// Mean per-token (stage 1) or per-sample (stage 2) loss per epoch.
    pub loss_series: Vec<f64>,
    /// Wall time is informational only and excluded from the determinism
    /// guarantees.
    pub wall_time_s: f64,
    pub checkpoint: String,
    pub config_echo: BTreeMap<String, String>,
}

pub fn save_checkpoint<E: Scalar>(path: &Path, store: &ParamStore<E>) -> Result<()> {
    checkpoint::save(path, store)?;
    Ok(())
}

pub fn load_checkpoint<E: Scalar>(path: &Path) -> Result<ParamStore<E>> {
    Ok(checkpoint::load(path)?)
}

pub fn load_checkpoint_into<E: Scalar>(path: &Path, store: &ParamStore<E>) -> Result<usize> {
    Ok(checkpoint::load_into(path, store)?)
}

/// Chat token stream plus its target training mask: targets covering
/// assistant content (and the eos closing each assistant turn) are trained,
/// user and role-marker tokens are context only.
pub fn chat_tokens(record: &QaRecord, vocab: &Vocab) -> (Vec<usize>, Vec<bool>) {
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for turn in &record.turns {
        let marker = match turn.role {
            Role::User => "user :",
            Role::Assistant => "assistant :",
        };
        for id in vocab.tokenize(marker) {
            ids.push(id);
            mask.push(false);
        }
        let trained = turn.role == Role::Assistant;
        for id in vocab.tokenize(&turn.content) {
            ids.push(id);
            mask.push(trained);
        }
        if trained {
            ids.push(EOS);
            mask.push(true);
        }
    }
    (ids, mask)
}

struct ImageCache<E: Scalar> {
    root: PathBuf,
    images: HashMap<String, ImageTensor<E>>,
}

impl<E: Scalar> ImageCache<E> {
    fn new(root: &Path) -> Self {
        ImageCache {
            root: root.to_path_buf(),
            images: HashMap::new(),
        }
    }

    fn get(&mut self, rel: &str) -> Result<&ImageTensor<E>> {
        if !self.images.contains_key(rel) {
            let img = ImageTensor::from_file(&self.root.join(rel))?;
            self.images.insert(rel.to_string(), img);
        }
        Ok(&self.images[rel])
    }
}

fn chat_records(records: &[QaRecord]) -> Vec<&QaRecord> {
    records
        .iter()
        .filter(|r| r.kind != QaKind::Vqla)
        .collect()
}

fn vqla_records(records: &[QaRecord]) -> Vec<&QaRecord> {
    records
        .iter()
        .filter(|r| r.kind == QaKind::Vqla)
        .collect()
}

/// Instruction fine-tuning: next-token cross-entropy on chat records.
/// Trainable set = adapters (+ vision when flagged); the base decoder is
/// frozen and asserted bit-identical by the caller's tests.
pub fn train_stage1(
    model: &VqlaModel<f32>,
    store: &mut ParamStore<f32>,
    records: &[QaRecord],
    cfg: &TrainConfig,
    out_dir: &Path,
    image_root: &Path,
) -> Result<RunReport> {
    cfg.validate()?;
    let samples = chat_records(records);
    if samples.is_empty() {
        return Err(VqlaError::Config(
            "stage 1 needs conversation/description/reasoning records".into(),
        ));
    }

    store.unfreeze_prefix("");
    store.freeze_prefix("decoder.");
    store.freeze_prefix("projection.");
    store.freeze_prefix("ground.");
    if !cfg.vision_trainable {
        store.freeze_prefix("vision.");
    }

    let tokenized: Vec<(Vec<usize>, Vec<bool>)> = samples
        .iter()
        .map(|r| chat_tokens(r, &model.vocab))
        .collect();
    let mut cache = ImageCache::new(image_root);
    let mut optimizer = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let started = std::time::Instant::now();
    let mut loss_series = Vec::new();
    let mut steps = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        SeededRng::new(derive_seed(cfg.seed, 1000 + epoch as u64)).shuffle(&mut order);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_tokens = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            store.zero_grads();
            let mut ce_sum: Option<Tensor<f32>> = None;
            let mut token_count = 0usize;
            for &si in batch {
                let record = samples[si];
                let (ids, mask) = &tokenized[si];
                if ids.is_empty() {
                    continue;
                }
                let img = cache.get(&record.image)?;
                let grid = model.encode_image(img)?;
                let prefix = model.visual_prefix(&grid)?;
                let (logits, _) = model.decoder.forward(Some(&prefix), ids)?;
                // predictions at text rows 0..L target ids[0..L]
                let preds = logits.slice(0, 0, ids.len())?;
                let (sum, count) = preds.cross_entropy_sum(ids, Some(mask))?;
                token_count += count;
                ce_sum = Some(match ce_sum {
                    Some(acc) => acc.add(&sum)?,
                    None => sum,
                });
            }
            let Some(total) = ce_sum else { continue };
            if token_count == 0 {
                continue;
            }
            let loss = total.mul_scalar(1.0 / token_count as f64)?;
            let loss_value = loss.item_f64();
            if !loss_value.is_finite() {
                return Err(VqlaError::Numeric(format!(
                    "non-finite stage-1 loss at epoch {epoch} batch {batch_idx}"
                )));
            }
            loss.backward().map_err(VqlaError::Tensor)?;
            optimizer.step(store)?;
            steps += 1;
            epoch_loss_sum += loss_value * token_count as f64;
            epoch_tokens += token_count;
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                loss_series.push(epoch_loss_sum / epoch_tokens.max(1) as f64);
                break 'epochs;
            }
        }
        loss_series.push(epoch_loss_sum / epoch_tokens.max(1) as f64);
    }

    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("stage1.ckpt");
    save_checkpoint(&ckpt_path, store)?;
    save_checkpoint(&out_dir.join("adapter.ckpt"), &store.filtered("adapter."))?;
    model.vocab.save(&out_dir.join("vocab.txt"))?;
    model.answers.save(&out_dir.join("answers.txt"))?;

    Ok(RunReport {
        stage: 1,
        seed: cfg.seed,
        epochs_run: loss_series.len(),
        steps,
        loss_series,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: ckpt_path.display().to_string(),
        config_echo: BTreeMap::new(),
    })
}

/// Grounding alignment: the full decoder (adapters included) is frozen and
/// used as a fixed feature extractor; only `projection.` and `ground.`
/// parameters train. Per-sample features are computed once up front since
/// the frozen decoder makes them constant across steps.
pub fn train_stage2(
    model: &VqlaModel<f32>,
    store: &mut ParamStore<f32>,
    records: &[QaRecord],
    cfg: &TrainConfig,
    out_dir: &Path,
    image_root: &Path,
    stage1_ckpt: &Path,
) -> Result<RunReport> {
    cfg.validate()?;
    if !stage1_ckpt.exists() {
        return Err(VqlaError::Config(format!(
            "stage-2 depends on a stage-1 checkpoint; `{}` does not exist",
            stage1_ckpt.display()
        )));
    }
    load_checkpoint_into(stage1_ckpt, store)?;

    let samples = vqla_records(records);
    if samples.is_empty() {
        return Err(VqlaError::Config(
            "stage 2 needs vqla records with labels and boxes".into(),
        ));
    }

    store.unfreeze_prefix("");
    store.freeze_prefix("vision.");
    store.freeze_prefix("decoder.");
    store.freeze_prefix("adapter.");

    // frozen decoder => responses and visual grids are constants per sample
    struct Stage2Sample<'r> {
        record: &'r QaRecord,
        hidden: Tensor<f32>,
        grid_tokens: Tensor<f32>,
        grid_h: usize,
        grid_w: usize,
        label: usize,
        gt: BBox,
    }
    let mut cache = ImageCache::new(image_root);
    let mut prepared = Vec::with_capacity(samples.len());
    {
        let _guard = no_grad();
        for record in &samples {
            let answer = record.answer.as_deref().expect("validated vqla record");
            let label = model.answers.id(answer).ok_or_else(|| {
                VqlaError::Vocab(format!(
                    "record {}: answer class `{answer}` missing from the answer vocabulary",
                    record.id
                ))
            })?;
            let gt = BBox::from_array(record.bbox.expect("validated vqla record"))?;
            let img = cache.get(&record.image)?;
            let grid = model.encode_image(img)?;
            let prefix = model.visual_prefix(&grid)?;
            let prompt = model.format_prompt(record.question_text());
            let response =
                model
                    .decoder
                    .generate(Some(&prefix), &prompt, cfg.max_answer_len, &model.vocab)?;
            prepared.push(Stage2Sample {
                record,
                hidden: response.hidden.detach(),
                grid_tokens: grid.tokens.detach(),
                grid_h: grid.h,
                grid_w: grid.w,
                label,
                gt,
            });
        }
    }

    let mut optimizer = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let started = std::time::Instant::now();
    let mut loss_series = Vec::new();
    let mut steps = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        SeededRng::new(derive_seed(cfg.seed, 2000 + epoch as u64)).shuffle(&mut order);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_samples = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            store.zero_grads();
            let mut loss_sum: Option<Tensor<f32>> = None;
            for &si in batch {
                let sample = &prepared[si];
                let grid = crate::encoder::GridTokens::new(
                    sample.grid_tokens.clone(),
                    sample.grid_h,
                    sample.grid_w,
                )?;
                let out = model.ground_response(&sample.hidden, &grid)?;
                let loss = vqla_loss(&out, sample.label, &sample.gt).map_err(|e| {
                    VqlaError::Validation(format!("record {}: {e}", sample.record.id))
                })?;
                loss_sum = Some(match loss_sum {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let Some(total) = loss_sum else { continue };
            let loss = total.mul_scalar(1.0 / batch.len() as f64)?;
            let loss_value = loss.item_f64();
            if !loss_value.is_finite() {
                return Err(VqlaError::Numeric(format!(
                    "non-finite stage-2 loss at epoch {epoch} batch {batch_idx}"
                )));
            }
            loss.backward().map_err(VqlaError::Tensor)?;
            optimizer.step(store)?;
            steps += 1;
            epoch_loss_sum += loss_value * batch.len() as f64;
            epoch_samples += batch.len();
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                loss_series.push(epoch_loss_sum / epoch_samples.max(1) as f64);
                break 'epochs;
            }
        }
        loss_series.push(epoch_loss_sum / epoch_samples.max(1) as f64);
    }

    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("stage2.ckpt");
    save_checkpoint(&ckpt_path, store)?;
    model.vocab.save(&out_dir.join("vocab.txt"))?;
    model.answers.save(&out_dir.join("answers.txt"))?;

    Ok(RunReport {
        stage: 2,
        seed: cfg.seed,
        epochs_run: loss_series.len(),
        steps,
        loss_series,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: ckpt_path.display().to_string(),
        config_echo: BTreeMap::new(),
    })
}

/// Generation + grounding over localized-answer records, scored against the
/// gold classes, boxes, and reference texts.
pub fn evaluate_model(
    model: &VqlaModel<f32>,
    records: &[QaRecord],
    image_root: &Path,
    judge: &crate::datagen::GeneratorClient,
    max_answer_len: usize,
) -> Result<MetricsReport> {
    let samples = vqla_records(records);
    if samples.is_empty() {
        return Err(VqlaError::Validation(
            "evaluation needs at least one vqla record".into(),
        ));
    }
    let mut cache = ImageCache::new(image_root);
    let mut preds = Vec::with_capacity(samples.len());
    let mut golds = Vec::with_capacity(samples.len());
    for record in &samples {
        let img = cache.get(&record.image)?;
        let (response, output) = model.infer(img, record.question_text(), max_answer_len)?;
        let pred_class = model
            .answers
            .class(output.predicted_class())
            .unwrap_or("<unknown>")
            .to_string();
        preds.push(LabeledExample {
            class: pred_class,
            bbox: output.bbox(),
            text: response.text,
        });
        golds.push(LabeledExample {
            class: record.answer.clone().expect("validated vqla record"),
            bbox: BBox::from_array(record.bbox.expect("validated vqla record"))?,
            text: record.reference_text().to_string(),
        });
    }
    let mut report = compute_metrics(&preds, &golds)?;
    for (r, sample) in report.records.iter_mut().zip(&samples) {
        r.id = sample.id.clone();
    }
    let pred_texts: Vec<String> = preds.iter().map(|p| p.text.clone()).collect();
    let ref_texts: Vec<String> = golds.iter().map(|g| g.text.clone()).collect();
    report.rubric_score = Some(rubric_score(&pred_texts, &ref_texts, judge)?);
    Ok(report)
}
