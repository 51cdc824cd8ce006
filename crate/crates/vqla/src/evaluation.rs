//! Metrics: class accuracy, macro-F1, mean IoU (with mean generalized IoU
//! alongside), and a 0-100 rubric score from a pluggable judge whose mock is
//! token-overlap F1.

use serde::Serialize;

use crate::datagen::GeneratorClient;
use crate::error::{Result, VqlaError};
use crate::grounding::{giou, iou, BBox};

/// One side of an evaluation pair: answer class, localization box, and the
/// free-text answer used for the rubric score.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub class: String,
    pub bbox: BBox,
    pub text: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionRecord {
    pub id: String,
    pub pred_class: String,
    pub gold_class: String,
    pub pred_text: String,
    pub ref_text: String,
    pub pred_box: [f64; 4],
    pub gold_box: [f64; 4],
    pub iou: f64,
    pub giou: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub f_score: f64,
    pub miou: f64,
    pub mean_giou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rubric_score: Option<f64>,
    pub records: Vec<PredictionRecord>,
}

impl MetricsReport {
    /// CSV export of the per-sample records.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "id,pred_class,gold_class,iou,giou,correct,pred_text,ref_text\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},\"{}\",\"{}\"\n",
                r.id,
                r.pred_class,
                r.gold_class,
                r.iou,
                r.giou,
                r.correct,
                r.pred_text.replace('"', "'"),
                r.ref_text.replace('"', "'"),
            ));
        }
        out
    }

    /// Recomputes every aggregate from the per-sample records and checks it
    /// against the stored value.
    pub fn aggregates_consistent(&self, tol: f64) -> bool {
        let n = self.records.len() as f64;
        if self.records.is_empty() {
            return self.n_samples == 0;
        }
        let acc = self.records.iter().filter(|r| r.correct).count() as f64 / n;
        let miou = self.records.iter().map(|r| r.iou).sum::<f64>() / n;
        let mgiou = self.records.iter().map(|r| r.giou).sum::<f64>() / n;
        (acc - self.accuracy).abs() < tol
            && (miou - self.miou).abs() < tol
            && (mgiou - self.mean_giou).abs() < tol
    }
}

/// Macro-averaged F1 over the union of classes present in golds or preds;
/// a class predicted but absent from the golds contributes an F1 of zero.
fn macro_f1(pairs: &[(&str, &str)]) -> f64 {
    let mut classes: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    for (pred, gold) in pairs {
        classes.insert(pred);
        classes.insert(gold);
    }
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for class in &classes {
        let tp = pairs
            .iter()
            .filter(|(p, g)| p == class && g == class)
            .count() as f64;
        let fp = pairs
            .iter()
            .filter(|(p, g)| p == class && g != class)
            .count() as f64;
        let fn_ = pairs
            .iter()
            .filter(|(p, g)| p != class && g == class)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            sum += 2.0 * tp / denom;
        }
    }
    sum / classes.len() as f64
}

/// Exact class-match accuracy, macro-F1, mean IoU and mean generalized IoU
/// over paired predictions and golds.
pub fn compute_metrics(
    preds: &[LabeledExample],
    golds: &[LabeledExample],
) -> Result<MetricsReport> {
    if preds.len() != golds.len() {
        return Err(VqlaError::Validation(format!(
            "{} predictions against {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let mut records = Vec::with_capacity(preds.len());
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        let iou_v = iou(&p.bbox, &g.bbox);
        let giou_v = giou(&p.bbox, &g.bbox)?;
        records.push(PredictionRecord {
            id: format!("{i}"),
            pred_class: p.class.clone(),
            gold_class: g.class.clone(),
            pred_text: p.text.clone(),
            ref_text: g.text.clone(),
            pred_box: p.bbox.to_array(),
            gold_box: g.bbox.to_array(),
            iou: iou_v,
            giou: giou_v,
            correct: p.class == g.class,
        });
    }
    let n = records.len();
    let (accuracy, miou, mean_giou, f_score) = if n == 0 {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        let pairs: Vec<(&str, &str)> = records
            .iter()
            .map(|r| (r.pred_class.as_str(), r.gold_class.as_str()))
            .collect();
        (
            records.iter().filter(|r| r.correct).count() as f64 / n as f64,
            records.iter().map(|r| r.iou).sum::<f64>() / n as f64,
            records.iter().map(|r| r.giou).sum::<f64>() / n as f64,
            macro_f1(&pairs),
        )
    };
    Ok(MetricsReport {
        n_samples: n,
        accuracy,
        f_score,
        miou,
        mean_giou,
        rubric_score: None,
        records,
    })
}

/// Lowercased alphanumeric words, punctuation stripped.
fn rubric_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Multiset token-overlap F1 between two texts, in [0, 1]. Identical texts
/// score 1, disjoint vocabularies 0.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta = rubric_tokens(a);
    let tb = rubric_tokens(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for t in &ta {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &tb {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / ta.len() as f64;
    let recall = overlap as f64 / tb.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Fixed rubric prompt sent to a remote judge for one prediction/reference
/// pair; the reply must parse as an integer 0..=100.
pub fn judge_prompt(pred: &str, reference: &str) -> String {
    format!(
        "you are grading a generated answer against a reference answer .\n\
         score the generated answer from 0 to 100 for factual agreement and completeness .\n\
         reply with the integer score only .\n\
         reference : {reference}\n\
         generated : {pred}\n"
    )
}

/// Mean judged quality over paired texts, scaled 0-100. The mock judge is
/// 100 x mean token-overlap F1; a remote judge is prompted per pair and must
/// answer with an integer score.
pub fn rubric_score(
    pred_texts: &[String],
    ref_texts: &[String],
    judge: &GeneratorClient,
) -> Result<f64> {
    if pred_texts.len() != ref_texts.len() {
        return Err(VqlaError::Validation(format!(
            "{} predictions against {} references",
            pred_texts.len(),
            ref_texts.len()
        )));
    }
    if pred_texts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pred, reference) in pred_texts.iter().zip(ref_texts) {
        let score = if judge.is_mock() {
            100.0 * token_f1(pred, reference)
        } else {
            let raw = judge.complete_with_retries(&judge_prompt(pred, reference))?;
            let parsed: i64 = raw.trim().parse().map_err(|_| {
                VqlaError::Judge(format!("judge reply `{raw}` is not an integer 0-100"))
            })?;
            if !(0..=100).contains(&parsed) {
                return Err(VqlaError::Judge(format!(
                    "judge reply {parsed} outside 0-100"
                )));
            }
            parsed as f64
        };
        total += score;
    }
    Ok(total / pred_texts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(class: &str, bbox: [f64; 4], text: &str) -> LabeledExample {
        LabeledExample {
            class: class.into(),
            bbox: BBox::from_array(bbox).unwrap(),
            text: text.into(),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let golds = vec![
            ex("a", [0.3, 0.3, 0.2, 0.2], "x"),
            ex("b", [0.6, 0.6, 0.2, 0.2], "y"),
        ];
        let report = compute_metrics(&golds, &golds).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.f_score, 1.0);
        assert!((report.miou - 1.0).abs() < 1e-12);
        assert!((report.mean_giou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_class_confusion_hand_case() {
        // golds [a, a, b, b], preds [a, b, b, b]:
        // accuracy 3/4; f1(a) = 2/3, f1(b) = 4/5, macro 11/15
        let b = [0.5, 0.5, 0.2, 0.2];
        let golds = vec![ex("a", b, ""), ex("a", b, ""), ex("b", b, ""), ex("b", b, "")];
        let preds = vec![ex("a", b, ""), ex("b", b, ""), ex("b", b, ""), ex("b", b, "")];
        let report = compute_metrics(&preds, &golds).unwrap();
        assert!((report.accuracy - 0.75).abs() < 1e-12);
        assert!((report.f_score - 11.0 / 15.0).abs() < 1e-9, "{}", report.f_score);
    }

    #[test]
    fn miou_hand_fixture() {
        // five box pairs with ious {1, 0.25, 0, 0.5, 0.25} -> mean 0.4
        let golds = vec![
            ex("a", [0.25, 0.25, 0.5, 0.5], ""),
            ex("a", [0.25, 0.25, 0.5, 0.5], ""), // quarter-area nested
            ex("a", [0.15, 0.15, 0.2, 0.2], ""), // disjoint
            ex("a", [0.5, 0.5, 0.4, 0.4], ""),   // half-area nested
            ex("a", [0.25, 0.25, 0.5, 0.5], ""),
        ];
        let preds = vec![
            ex("a", [0.25, 0.25, 0.5, 0.5], ""),
            ex("a", [0.25, 0.25, 0.25, 0.25], ""),
            ex("a", [0.75, 0.75, 0.2, 0.2], ""),
            ex("a", [0.5, 0.5, 0.4, 0.2], ""),
            ex("a", [0.25, 0.25, 0.25, 0.25], ""),
        ];
        let report = compute_metrics(&preds, &golds).unwrap();
        let expected = [1.0, 0.25, 0.0, 0.5, 0.25];
        for (r, e) in report.records.iter().zip(expected) {
            assert!((r.iou - e).abs() < 1e-9, "{} vs {}", r.iou, e);
        }
        assert!((report.miou - 0.4).abs() < 1e-9, "{}", report.miou);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let b = [0.5, 0.5, 0.2, 0.2];
        assert!(compute_metrics(&[ex("a", b, "")], &[]).is_err());
    }

    #[test]
    fn metrics_are_permutation_and_duplication_invariant() {
        let b1 = [0.3, 0.3, 0.2, 0.2];
        let b2 = [0.62, 0.58, 0.3, 0.24];
        let golds = vec![ex("a", b1, ""), ex("b", b2, ""), ex("c", b1, "")];
        let preds = vec![ex("a", b2, ""), ex("b", b2, ""), ex("a", b1, "")];
        let r0 = compute_metrics(&preds, &golds).unwrap();

        let perm = [2usize, 0, 1];
        let golds_p: Vec<_> = perm.iter().map(|&i| golds[i].clone()).collect();
        let preds_p: Vec<_> = perm.iter().map(|&i| preds[i].clone()).collect();
        let r1 = compute_metrics(&preds_p, &golds_p).unwrap();
        assert!((r0.accuracy - r1.accuracy).abs() < 1e-9);
        assert!((r0.f_score - r1.f_score).abs() < 1e-9);
        assert!((r0.miou - r1.miou).abs() < 1e-9);
        assert!((r0.mean_giou - r1.mean_giou).abs() < 1e-9);

        let golds_d: Vec<_> = golds.iter().chain(&golds).cloned().collect();
        let preds_d: Vec<_> = preds.iter().chain(&preds).cloned().collect();
        let r2 = compute_metrics(&preds_d, &golds_d).unwrap();
        assert!((r0.accuracy - r2.accuracy).abs() < 1e-9);
        assert!((r0.f_score - r2.f_score).abs() < 1e-9);
        assert!((r0.miou - r2.miou).abs() < 1e-9);
        assert!((r0.mean_giou - r2.mean_giou).abs() < 1e-9);
    }

    #[test]
    fn mean_giou_never_exceeds_miou() {
        let mut rng = vqla_tensor::SeededRng::new(77);
        let mut rand_box = || {
            [
                0.1 + rng.uniform() * 0.8,
                0.1 + rng.uniform() * 0.8,
                0.05 + rng.uniform() * 0.5,
                0.05 + rng.uniform() * 0.5,
            ]
        };
        let golds: Vec<_> = (0..200).map(|_| ex("a", rand_box(), "")).collect();
        let preds: Vec<_> = (0..200).map(|_| ex("a", rand_box(), "")).collect();
        let report = compute_metrics(&preds, &golds).unwrap();
        assert!(report.mean_giou <= report.miou + 1e-9);
        for r in &report.records {
            assert!(r.giou <= r.iou + 1e-12);
        }
    }

    #[test]
    fn rubric_identical_and_disjoint() {
        let judge = GeneratorClient::mock();
        let same = rubric_score(
            &["the forceps grasp tissue".into()],
            &["the forceps grasp tissue".into()],
            &judge,
        )
        .unwrap();
        assert!((same - 100.0).abs() < 1e-9);
        let none = rubric_score(
            &["alpha beta".into()],
            &["gamma delta".into()],
            &judge,
        )
        .unwrap();
        assert_eq!(none, 0.0);
    }

    #[test]
    fn rubric_hand_overlap_case() {
        let judge = GeneratorClient::mock();
        let score = rubric_score(
            &["the bipolar forceps is grasping tissue".into()],
            &["bipolar forceps grasping kidney tissue".into()],
            &judge,
        )
        .unwrap();
        assert!((score - 800.0 / 11.0).abs() < 1e-6, "{score}");
    }

    #[test]
    fn mock_rubric_is_symmetric() {
        let judge = GeneratorClient::mock();
        let a = "the scissors cut the liver".to_string();
        let b = "scissors cutting liver tissue now".to_string();
        let ab = rubric_score(&[a.clone()], &[b.clone()], &judge).unwrap();
        let ba = rubric_score(&[b], &[a], &judge).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    struct FixedJudge(String);

    impl crate::datagen::ChatBackend for FixedJudge {
        fn complete(&self, _prompt: &str) -> crate::error::Result<String> {
            Ok(self.0.clone())
        }

        fn name(&self) -> &str {
            "fixed"
        }
    }

    #[test]
    fn remote_judge_parses_integer_scores() {
        let judge = GeneratorClient::remote(Box::new(FixedJudge("87".into())), 0);
        let score = rubric_score(&["a".into()], &["b".into()], &judge).unwrap();
        assert_eq!(score, 87.0);
    }

    #[test]
    fn remote_judge_rejects_non_integer_reply() {
        let judge = GeneratorClient::remote(Box::new(FixedJudge("very good".into())), 0);
        assert!(matches!(
            rubric_score(&["a".into()], &["b".into()], &judge),
            Err(VqlaError::Judge(_))
        ));
    }
}
