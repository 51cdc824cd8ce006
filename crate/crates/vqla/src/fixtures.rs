//! Procedural synthetic corpus: colored-rectangle scenes standing in for
//! instruments over organ-colored backgrounds, with annotations in the same
//! schema real frame data would use. Everything derives from one seed, so
//! the repository ships no binary fixtures.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vqla_tensor::SeededRng;

use crate::datagen::{
    frame_split, BaseQa, FrameAnnotation, Interaction, ObjectAnnotation, SCHEMA_VERSION,
};
use crate::error::{Result, VqlaError};

pub const INSTRUMENTS: [&str; 7] = [
    "bipolar forceps",
    "prograsp forceps",
    "large needle driver",
    "monopolar curved scissors",
    "ultrasound probe",
    "suction instrument",
    "clip applier",
];

pub const ORGANS: [&str; 4] = ["kidney", "gallbladder", "liver", "spleen"];

pub const VERBS: [&str; 7] = [
    "grasping",
    "retracting",
    "cutting",
    "cauterizing",
    "suturing",
    "clipping",
    "idle",
];

/// 18 answer classes: instruments, organs, and states.
pub fn answer_classes() -> Vec<&'static str> {
    INSTRUMENTS.iter().chain(&ORGANS).chain(&VERBS).copied().collect()
}

fn instrument_color(name: &str) -> [u8; 3] {
    match name {
        "bipolar forceps" => [220, 40, 40],
        "prograsp forceps" => [40, 220, 40],
        "large needle driver" => [40, 40, 220],
        "monopolar curved scissors" => [230, 230, 40],
        "ultrasound probe" => [40, 220, 220],
        "suction instrument" => [220, 40, 220],
        _ => [240, 140, 40], // clip applier
    }
}

fn organ_color(name: &str) -> [u8; 3] {
    match name {
        "kidney" => [120, 60, 60],
        "gallbladder" => [90, 110, 50],
        "liver" => [100, 50, 40],
        _ => [110, 60, 90], // spleen
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FixturesSummary {
    pub frames: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub annotations: PathBuf,
    pub images_dir: PathBuf,
    pub seed: u64,
}

/// Frame ids are chosen so the stable hash split lands exactly on a 90/10
/// train/test partition of the corpus.
fn pick_frame_ids(n: usize) -> (Vec<String>, usize, usize) {
    let train_target = n * 9 / 10;
    let test_target = n - train_target;
    let mut ids = Vec::with_capacity(n);
    let (mut train, mut test) = (0usize, 0usize);
    let mut i = 0usize;
    while ids.len() < n {
        let id = format!("frame_{i:04}");
        match frame_split(&id) {
            "train" if train < train_target => {
                train += 1;
                ids.push(id);
            }
            "test" if test < test_target => {
                test += 1;
                ids.push(id);
            }
            _ => {}
        }
        i += 1;
    }
    ids.sort();
    (ids, train, test)
}

fn write_png(path: &Path, size: usize, pixels: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| VqlaError::Validation(format!("png encode: {e}")))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| VqlaError::Validation(format!("png encode: {e}")))?;
    Ok(())
}

fn fill_rect(pixels: &mut [u8], size: usize, bbox: [f64; 4], color: [u8; 3]) {
    let x1 = ((bbox[0] - bbox[2] / 2.0) * size as f64).max(0.0) as usize;
    let y1 = ((bbox[1] - bbox[3] / 2.0) * size as f64).max(0.0) as usize;
    let x2 = (((bbox[0] + bbox[2] / 2.0) * size as f64) as usize).min(size);
    let y2 = (((bbox[1] + bbox[3] / 2.0) * size as f64) as usize).min(size);
    for y in y1..y2 {
        for x in x1..x2 {
            let px = (y * size + x) * 3;
            pixels[px..px + 3].copy_from_slice(&color);
        }
    }
}

fn make_frame(id: &str, rng: &mut SeededRng, max_instruments: usize) -> FrameAnnotation {
    let organ = ORGANS[rng.below(ORGANS.len())];
    let n_instr = 1 + rng.below(max_instruments.max(1));
    let mut pool: Vec<&str> = INSTRUMENTS.to_vec();
    rng.shuffle(&mut pool);
    let chosen: Vec<&str> = pool.into_iter().take(n_instr).collect();

    let organ_box = [0.5, 0.5, 0.9, 0.8];
    let mut objects = Vec::new();
    let mut interactions = Vec::new();
    let mut qa_pairs = Vec::new();

    for (slot, name) in chosen.iter().enumerate() {
        // one instrument per horizontal band keeps boxes distinguishable
        let band = 1.0 / n_instr as f64;
        let cx = 0.25 + rng.uniform() * 0.5;
        let cy = (slot as f64 + 0.5) * band * 0.7 + 0.15 + rng.uniform() * band * 0.15;
        let w = 0.15 + rng.uniform() * 0.15;
        let h = 0.12 + rng.uniform() * 0.12;
        let bbox = [cx, cy, w, h];
        objects.push(ObjectAnnotation {
            name: name.to_string(),
            bbox,
        });
        let verb = VERBS[rng.below(VERBS.len())];
        if verb != "idle" {
            interactions.push(Interaction {
                subject: name.to_string(),
                verb: verb.to_string(),
                object: organ.to_string(),
            });
        }
        qa_pairs.push(BaseQa {
            question: format!("what is the state of the {name} ?"),
            answer: verb.to_string(),
            bbox,
        });
    }
    objects.push(ObjectAnnotation {
        name: organ.to_string(),
        bbox: organ_box,
    });
    qa_pairs.push(BaseQa {
        question: "which organ is undergoing the procedure ?".into(),
        answer: organ.to_string(),
        bbox: organ_box,
    });
    if chosen.len() == 1 {
        qa_pairs.push(BaseQa {
            question: "what instrument is visible in the image ?".into(),
            answer: chosen[0].to_string(),
            bbox: objects[0].bbox,
        });
    }

    FrameAnnotation {
        schema_version: SCHEMA_VERSION,
        frame_id: id.to_string(),
        image: format!("images/{id}.png"),
        objects,
        interactions,
        qa_pairs,
    }
}

/// Generates `n_frames` scenes under `out_dir`: `images/*.png` plus
/// `annotations.jsonl`. A fixed seed reproduces identical bytes.
pub fn make_fixtures(
    out_dir: &Path,
    n_frames: usize,
    image_size: usize,
    max_instruments: usize,
    seed: u64,
) -> Result<FixturesSummary> {
    if n_frames == 0 {
        return Err(VqlaError::Config("fixtures.frames must be >= 1".into()));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let (ids, train, test) = pick_frame_ids(n_frames);
    let mut frames = Vec::with_capacity(n_frames);
    for id in &ids {
        // one stream per frame id keeps frames independent of corpus size
        let mut rng = SeededRng::new(vqla_tensor::derive_seed(
            seed,
            crate::datagen::stable_hash(id),
        ));
        let frame = make_frame(id, &mut rng, max_instruments);
        frame.validate()?;

        let organ = frame
            .objects
            .last()
            .map(|o| o.name.as_str())
            .unwrap_or("kidney");
        let mut pixels = vec![0u8; image_size * image_size * 3];
        let bg = organ_color(organ);
        for px in pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&bg);
        }
        for obj in &frame.objects[..frame.objects.len() - 1] {
            fill_rect(&mut pixels, image_size, obj.bbox, instrument_color(&obj.name));
        }
        write_png(&out_dir.join(&frame.image), image_size, &pixels)?;
        frames.push(frame);
    }

    let annotations = out_dir.join("annotations.jsonl");
    let mut out = String::new();
    for frame in &frames {
        out.push_str(&serde_json::to_string(frame)?);
        out.push('\n');
    }
    std::fs::write(&annotations, out)?;

    Ok(FixturesSummary {
        frames: n_frames,
        train_frames: train,
        test_frames: test,
        annotations,
        images_dir,
        seed,
    })
}
