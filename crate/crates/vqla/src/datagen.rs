//! Instruction-data factory: frame annotations in, chat-format QA records
//! out. Three generated kinds (conversation, description, reasoning) come
//! from a generator client — a deterministic mock by default, or any bound
//! chat-completion backend — while the localized-answer kind is lifted
//! directly from the frame's base QA pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqlaError};
use crate::grounding::BBox;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub name: String,
    pub bbox: [f64; 4], // normalized (cx, cy, w, h)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interaction {
    pub subject: String,
    pub verb: String,
    pub object: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseQa {
    pub question: String,
    pub answer: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub schema_version: u32,
    pub frame_id: String,
    pub image: String,
    pub objects: Vec<ObjectAnnotation>,
    pub interactions: Vec<Interaction>,
    pub qa_pairs: Vec<BaseQa>,
}

impl FrameAnnotation {
    pub fn validate(&self) -> Result<()> {
        let named: std::collections::BTreeSet<&str> =
            self.objects.iter().map(|o| o.name.as_str()).collect();
        for obj in &self.objects {
            BBox::from_array(obj.bbox).map_err(|e| {
                VqlaError::Validation(format!(
                    "frame {}: object `{}`: {e}",
                    self.frame_id, obj.name
                ))
            })?;
        }
        for inter in &self.interactions {
            for name in [&inter.subject, &inter.object] {
                if !named.contains(name.as_str()) {
                    return Err(VqlaError::Validation(format!(
                        "frame {}: interaction references unknown object `{name}`",
                        self.frame_id
                    )));
                }
            }
        }
        for qa in &self.qa_pairs {
            if qa.question.trim().is_empty() || qa.answer.trim().is_empty() {
                return Err(VqlaError::Validation(format!(
                    "frame {}: empty question or answer",
                    self.frame_id
                )));
            }
            BBox::from_array(qa.bbox).map_err(|e| {
                VqlaError::Validation(format!("frame {}: qa box: {e}", self.frame_id))
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaKind {
    Conversation,
    Description,
    Reasoning,
    Vqla,
}

impl QaKind {
    pub const ALL: [QaKind; 4] = [
        QaKind::Conversation,
        QaKind::Description,
        QaKind::Reasoning,
        QaKind::Vqla,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            QaKind::Conversation => "conversation",
            QaKind::Description => "description",
            QaKind::Reasoning => "reasoning",
            QaKind::Vqla => "vqla",
        }
    }

    pub fn parse(s: &str) -> Result<QaKind> {
        match s.trim() {
            "conversation" => Ok(QaKind::Conversation),
            "description" => Ok(QaKind::Description),
            "reasoning" => Ok(QaKind::Reasoning),
            "vqla" => Ok(QaKind::Vqla),
            other => Err(VqlaError::Config(format!("unknown qa kind `{other}`"))),
        }
    }
}

impl fmt::Display for QaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub schema_version: u32,
    pub id: String,
    pub frame_id: String,
    pub image: String,
    pub kind: QaKind,
    pub turns: Vec<Turn>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    /// Explicit split assignment; records without one fall under the stable
    /// frame-id hash rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl QaRecord {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(VqlaError::Validation(format!(
                "record {}: no turns",
                self.id
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != want {
                return Err(VqlaError::Validation(format!(
                    "record {}: turn {i} must alternate starting with user",
                    self.id
                )));
            }
            if turn.content.trim().is_empty() {
                return Err(VqlaError::Validation(format!(
                    "record {}: turn {i} has empty content",
                    self.id
                )));
            }
        }
        if self.kind == QaKind::Vqla && (self.answer.is_none() || self.bbox.is_none()) {
            return Err(VqlaError::Validation(format!(
                "record {}: vqla records need an answer class and a box",
                self.id
            )));
        }
        if let Some(b) = self.bbox {
            BBox::from_array(b)
                .map_err(|e| VqlaError::Validation(format!("record {}: {e}", self.id)))?;
        }
        Ok(())
    }

    /// Reference answer text: the last assistant turn.
    pub fn reference_text(&self) -> &str {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::Assistant)
            .map(|t| t.content.as_str())
            .unwrap_or("")
    }

    /// First user turn, used as the generation prompt.
    pub fn question_text(&self) -> &str {
        self.turns.first().map(|t| t.content.as_str()).unwrap_or("")
    }
}

// ---------------------------------------------------------------------------
// jsonl io

pub fn ingest_annotations(path: &Path) -> Result<Vec<FrameAnnotation>> {
    let file = std::fs::File::open(path)
        .map_err(|e| VqlaError::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut frames = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: FrameAnnotation = serde_json::from_str(&line).map_err(|e| VqlaError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        frame.validate()?;
        frames.push(frame);
    }
    frames.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    Ok(frames)
}

pub fn read_records(path: &Path) -> Result<Vec<QaRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| VqlaError::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QaRecord = serde_json::from_str(&line).map_err(|e| VqlaError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[QaRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// prompts

fn caption(frame: &FrameAnnotation) -> String {
    let mut lines = Vec::new();
    let names: Vec<&str> = frame.objects.iter().map(|o| o.name.as_str()).collect();
    lines.push(format!("the scene contains : {}", names.join(" , ")));
    for inter in &frame.interactions {
        lines.push(format!(
            "the {} is {} the {}",
            inter.subject, inter.verb, inter.object
        ));
    }
    lines.join("\n")
}

fn box_list(frame: &FrameAnnotation) -> String {
    frame
        .objects
        .iter()
        .map(|o| {
            format!(
                "{} at [{:.2}, {:.2}, {:.2}, {:.2}]",
                o.name, o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

const CONVERSATION_INSTRUCTION: &str = "instruction : write a short conversation between a trainee and a mentor about this scene . keep the questions simple and factual , and answer only from the listed context . respond as a json array of { \"role\" , \"content\" } objects alternating user and assistant .";

const DESCRIPTION_INSTRUCTION: &str = "instruction : write one question asking for a detailed description of the scene , then a thorough answer that mentions every listed object and interaction . respond as a json array of { \"role\" , \"content\" } objects alternating user and assistant .";

const REASONING_INSTRUCTION: &str = "instruction : write one complex reasoning question that requires multi-step inference about why the instruments act on the tissue , then a careful step-by-step answer grounded in the listed context . respond as a json array of { \"role\" , \"content\" } objects alternating user and assistant .";

const VQLA_INSTRUCTION: &str = "instruction : write one fixed-format question about an instrument , organ , or action , answer with a single class word , and name the object whose box localizes the answer . respond as a json array of { \"role\" , \"content\" } objects alternating user and assistant .";

/// Deterministic prompt: synthesized caption, box list, kind instruction.
pub fn build_prompt(frame: &FrameAnnotation, kind: QaKind) -> String {
    let instruction = match kind {
        QaKind::Conversation => CONVERSATION_INSTRUCTION,
        QaKind::Description => DESCRIPTION_INSTRUCTION,
        QaKind::Reasoning => REASONING_INSTRUCTION,
        QaKind::Vqla => VQLA_INSTRUCTION,
    };
    format!(
        "context for frame {} :\n{}\nbounding boxes :\n{}\n{}\n",
        frame.frame_id,
        caption(frame),
        box_list(frame),
        instruction
    )
}

// ---------------------------------------------------------------------------
// generator client

/// Abstract chat-completion transport: prompt in, raw text out. Any backend
/// can be bound; only the mock is exercised by the test suite.
pub trait ChatBackend {
    fn complete(&self, prompt: &str) -> Result<String>;
    fn name(&self) -> &str;
}

pub enum GeneratorClient {
    /// Fully deterministic template filler keyed on the frame annotation and
    /// the requested kind.
    Mock,
    Remote {
        backend: Box<dyn ChatBackend>,
        retries: u32,
    },
}

impl GeneratorClient {
    pub fn mock() -> GeneratorClient {
        GeneratorClient::Mock
    }

    pub fn remote(backend: Box<dyn ChatBackend>, retries: u32) -> GeneratorClient {
        GeneratorClient::Remote { backend, retries }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, GeneratorClient::Mock)
    }

    /// Raw completion with the retry budget; the mock has no raw transport.
    pub fn complete_with_retries(&self, prompt: &str) -> Result<String> {
        match self {
            GeneratorClient::Mock => Err(VqlaError::Client(
                "mock client has no raw completion endpoint".into(),
            )),
            GeneratorClient::Remote { backend, retries } => {
                let mut last_err = String::new();
                for _ in 0..=*retries {
                    match backend.complete(prompt) {
                        Ok(text) => return Ok(text),
                        Err(e) => last_err = e.to_string(),
                    }
                }
                Err(VqlaError::Client(format!(
                    "backend `{}` failed after {} attempts: {last_err}",
                    backend.name(),
                    retries + 1
                )))
            }
        }
    }

    fn turns_for(&self, frame: &FrameAnnotation, kind: QaKind) -> Result<Vec<Turn>> {
        match self {
            GeneratorClient::Mock => Ok(mock_turns(frame, kind)),
            GeneratorClient::Remote { .. } => {
                let prompt = build_prompt(frame, kind);
                let raw = self
                    .complete_with_retries(&prompt)
                    .map_err(|e| VqlaError::Client(format!("frame {}: {e}", frame.frame_id)))?;
                let turns: Vec<Turn> = serde_json::from_str(&raw).map_err(|e| {
                    VqlaError::Client(format!(
                        "frame {}: schema-invalid response rejected ({e}); raw payload: {raw}",
                        frame.frame_id
                    ))
                })?;
                Ok(turns)
            }
        }
    }
}

fn primary_instrument(frame: &FrameAnnotation) -> Option<&ObjectAnnotation> {
    frame
        .objects
        .iter()
        .find(|o| {
            frame.interactions.iter().any(|i| i.subject == o.name)
                || frame.qa_pairs.iter().any(|qa| qa.question.contains(&o.name))
        })
        .or_else(|| frame.objects.first())
}

fn interaction_for<'a>(frame: &'a FrameAnnotation, name: &str) -> Option<&'a Interaction> {
    frame.interactions.iter().find(|i| i.subject == name)
}

/// Template answers filled from annotation fields; a pure function of
/// (frame, kind). Text is emitted pre-tokenized: lowercase words and
/// punctuation separated by single spaces.
pub fn mock_turns(frame: &FrameAnnotation, kind: QaKind) -> Vec<Turn> {
    let user = |content: String| Turn {
        role: Role::User,
        content,
    };
    let assistant = |content: String| Turn {
        role: Role::Assistant,
        content,
    };
    match kind {
        QaKind::Conversation => {
            let mut turns = Vec::new();
            let instr = primary_instrument(frame).map(|o| o.name.clone());
            turns.push(user("what instrument do you see in the image ?".into()));
            match &instr {
                Some(name) => turns.push(assistant(format!("i can see the {name} ."))),
                None => turns.push(assistant("no instrument is clearly visible .".into())),
            }
            if let Some(name) = instr {
                turns.push(user(format!("what is the {name} doing ?")));
                match interaction_for(frame, &name) {
                    Some(i) => turns.push(assistant(format!(
                        "the {} is {} the {} .",
                        i.subject, i.verb, i.object
                    ))),
                    None => turns.push(assistant(format!("the {name} is idle right now ."))),
                }
            }
            turns
        }
        QaKind::Description => {
            let names: Vec<&str> = frame.objects.iter().map(|o| o.name.as_str()).collect();
            let mut body = format!("the image shows {} .", names.join(" and "));
            for i in &frame.interactions {
                body.push_str(&format!(
                    " the {} is {} the {} .",
                    i.subject, i.verb, i.object
                ));
            }
            if frame.interactions.is_empty() {
                body.push_str(" no active interaction is taking place .");
            }
            vec![
                user("describe the surgical scene in detail .".into()),
                assistant(body),
            ]
        }
        QaKind::Reasoning => match frame.interactions.first() {
            Some(i) => vec![
                user(format!(
                    "why is the {} positioned near the {} ?",
                    i.subject, i.object
                )),
                assistant(format!(
                    "the {} is positioned near the {} because it is {} the {} . this action requires direct contact with the target tissue , so the instrument must stay within the operative field .",
                    i.subject, i.object, i.verb, i.object
                )),
            ],
            None => {
                let name = primary_instrument(frame)
                    .map(|o| o.name.clone())
                    .unwrap_or_else(|| "instrument".into());
                vec![
                    user(format!("why is the {name} held away from the tissue ?")),
                    assistant(format!(
                        "the {name} is held away from the tissue because no step currently needs it , which avoids accidental injury while the surgeon inspects the scene ."
                    )),
                ]
            }
        },
        QaKind::Vqla => Vec::new(), // localized answers come from the base qa pairs
    }
}

/// One record per (frame, generated kind), plus one record per base QA pair
/// when `vqla` is requested. Output is sorted by (frame, kind, index) so
/// serialization is byte-deterministic.
pub fn generate_pairs(
    frames: &[FrameAnnotation],
    kinds: &[QaKind],
    client: &GeneratorClient,
) -> Result<Vec<QaRecord>> {
    let mut records = Vec::new();
    let mut sorted_kinds = kinds.to_vec();
    sorted_kinds.sort();
    sorted_kinds.dedup();
    for frame in frames {
        for kind in &sorted_kinds {
            if *kind == QaKind::Vqla {
                for (qi, qa) in frame.qa_pairs.iter().enumerate() {
                    let record = QaRecord {
                        schema_version: SCHEMA_VERSION,
                        id: format!("{}-vqla-{qi}", frame.frame_id),
                        frame_id: frame.frame_id.clone(),
                        image: frame.image.clone(),
                        kind: QaKind::Vqla,
                        turns: vec![
                            Turn {
                                role: Role::User,
                                content: qa.question.clone(),
                            },
                            Turn {
                                role: Role::Assistant,
                                content: qa.answer.clone(),
                            },
                        ],
                        answer: Some(qa.answer.clone()),
                        bbox: Some(qa.bbox),
                        split: None,
                    };
                    record.validate()?;
                    records.push(record);
                }
            } else {
                let turns = client.turns_for(frame, *kind)?;
                let record = QaRecord {
                    schema_version: SCHEMA_VERSION,
                    id: format!("{}-{}-0", frame.frame_id, kind),
                    frame_id: frame.frame_id.clone(),
                    image: frame.image.clone(),
                    kind: *kind,
                    turns,
                    answer: None,
                    bbox: None,
                    split: None,
                };
                record.validate()?;
                records.push(record);
            }
        }
    }
    records.sort_by(|a, b| (&a.frame_id, a.kind, &a.id).cmp(&(&b.frame_id, b.kind, &b.id)));
    Ok(records)
}

// ---------------------------------------------------------------------------
// splits

/// Stable 64-bit FNV-1a over the frame id.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Explicit split when declared, otherwise hash(frame_id) mod 10 < 9 = train.
pub fn assigned_split(record: &QaRecord) -> String {
    match &record.split {
        Some(s) => s.clone(),
        None => {
            if stable_hash(&record.frame_id) % 10 < 9 {
                "train".into()
            } else {
                "test".into()
            }
        }
    }
}

pub fn frame_split(frame_id: &str) -> &'static str {
    if stable_hash(frame_id) % 10 < 9 {
        "train"
    } else {
        "test"
    }
}

#[derive(Debug, Clone, Serialize, Default, PartialEq)]
pub struct SplitStats {
    pub total: usize,
    pub per_split: BTreeMap<String, usize>,
    pub per_split_kind: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn split_stats(records: &[QaRecord]) -> SplitStats {
    let mut stats = SplitStats {
        total: records.len(),
        ..Default::default()
    };
    for record in records {
        let split = assigned_split(record);
        *stats.per_split.entry(split.clone()).or_default() += 1;
        *stats
            .per_split_kind
            .entry(split)
            .or_default()
            .entry(record.kind.as_str().to_string())
            .or_default() += 1;
    }
    stats
}

pub fn records_in_split<'a>(records: &'a [QaRecord], split: &str) -> Vec<&'a QaRecord> {
    records
        .iter()
        .filter(|r| assigned_split(r) == split)
        .collect()
}
