//! Grounding: co-attention of aligned text over visual tokens, gated fusion,
//! a joint encoder, and parallel answer/box heads with the combined
//! classification + L1 + generalized-IoU loss.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vqla_tensor::{Result as TResult, Scalar, SeededRng, Tensor};

use crate::encoder::{GridTokens, VitBlock};
use crate::error::{Result, VqlaError};
use crate::nn::{attention, Linear, ParamVisitor};
use crate::projection::AlignedTextEmbedding;

/// Axis-aligned box as center/size, normalized to the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<BBox> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if !ok {
            return Err(VqlaError::Validation(format!(
                "invalid box cx={} cy={} w={} h={}",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn from_array(a: [f64; 4]) -> Result<BBox> {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corner form `(x1, y1, x2, y2)`, clipped to the unit square.
    pub fn corners(&self) -> [f64; 4] {
        [
            (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        ]
    }
}

/// Plain-corner IoU; boxes as `[x1, y1, x2, y2]`.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU on corner boxes: `iou - (enclose - union) / enclose`,
/// range (-1, 1]. Zero-area boxes are a domain error.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    if area_a <= 0.0 || area_b <= 0.0 {
        return Err(VqlaError::Validation(
            "generalized iou of a zero-area box".into(),
        ));
    }
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = area_a + area_b - inter;
    let ex = a[2].max(b[2]) - a[0].min(b[0]);
    let ey = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = ex * ey;
    Ok(inter / union - (enclose - union) / enclose)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_xyxy(a.corners(), b.corners())
}

pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    giou_xyxy(a.corners(), b.corners())
}

/// Answer classes with dense ids, built from dataset labels.
pub struct AnswerVocab {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn build<'a>(labels: impl IntoIterator<Item = &'a str>) -> AnswerVocab {
        let set: std::collections::BTreeSet<String> =
            labels.into_iter().map(|s| s.to_string()).collect();
        let classes: Vec<String> = set.into_iter().collect();
        let index = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        AnswerVocab { classes, index }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn id(&self, class: &str) -> Option<usize> {
        self.index.get(class).copied()
    }

    pub fn class(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.classes.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AnswerVocab> {
        let text = std::fs::read_to_string(path)?;
        let classes: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if classes.is_empty() {
            return Err(VqlaError::Vocab(format!(
                "{}: empty answer vocabulary",
                path.display()
            )));
        }
        let index = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Ok(AnswerVocab { classes, index })
    }
}

/// Class logits over the answer vocabulary plus sigmoid-parameterized box
/// coordinates; both stay differentiable for the loss path.
pub struct GroundingOutput<E: Scalar> {
    pub class_logits: Tensor<E>, // [n_answers]
    pub box_params: Tensor<E>,   // [4] = (cx, cy, w, h), each in (0, 1)
}

impl<E: Scalar> GroundingOutput<E> {
    pub fn bbox(&self) -> BBox {
        let d = self.box_params.data_vec();
        BBox {
            cx: d[0].to_f64(),
            cy: d[1].to_f64(),
            w: d[2].to_f64(),
            h: d[3].to_f64(),
        }
    }

    /// Argmax class id, ties toward the lower id.
    pub fn predicted_class(&self) -> usize {
        let d = self.class_logits.data_vec();
        let mut best = 0usize;
        for (i, v) in d.iter().enumerate() {
            if *v > d[best] {
                best = i;
            }
        }
        best
    }
}

pub const LAMBDA_L1: f64 = 5.0;
pub const LAMBDA_GIOU: f64 = 2.0;

pub struct GroundingHead<E: Scalar> {
    pub vis_proj: Linear<E>,
    pub co_q: Linear<E>,
    pub co_k: Linear<E>,
    pub co_v: Linear<E>,
    pub co_o: Linear<E>,
    pub gate: Linear<E>,
    pub encoder: Vec<VitBlock<E>>,
    pub cls_hidden: Linear<E>,
    pub cls_out: Linear<E>,
    pub box_hidden: Linear<E>,
    pub box_out: Linear<E>,
    pub heads: usize,
}

impl<E: Scalar> GroundingHead<E> {
    pub fn new(
        c_vision: usize,
        c_ground: usize,
        n_answers: usize,
        layers: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<GroundingHead<E>> {
        let encoder = (0..layers)
            .map(|_| VitBlock::new(c_ground, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundingHead {
            vis_proj: Linear::new(c_vision, c_ground, true, rng),
            co_q: Linear::new(c_ground, c_ground, true, rng),
            co_k: Linear::new(c_ground, c_ground, true, rng),
            co_v: Linear::new(c_ground, c_ground, true, rng),
            co_o: Linear::new(c_ground, c_ground, true, rng),
            gate: Linear::new(2 * c_ground, c_ground, true, rng),
            encoder,
            cls_hidden: Linear::new(c_ground, c_ground, true, rng),
            cls_out: Linear::new(c_ground, n_answers, true, rng),
            box_hidden: Linear::new(c_ground, c_ground, true, rng),
            box_out: Linear::new(c_ground, 4, true, rng),
            heads,
        })
    }

    /// Residual cross-attention: text queries attend over projected visual
    /// tokens. Shape preserved.
    pub fn co_attention(
        &self,
        text: &Tensor<E>,
        vis: &Tensor<E>,
    ) -> TResult<(Tensor<E>, Tensor<E>)> {
        let q = self.co_q.forward(text)?;
        let k = self.co_k.forward(vis)?;
        let v = self.co_v.forward(vis)?;
        let (mixed, attn) = attention(&q, &k, &v, self.heads, None)?;
        Ok((text.add(&self.co_o.forward(&mixed)?)?, attn))
    }

    /// `g = sigmoid(gate([t ; v]))`, `fused = g*t + (1-g)*v`, with the pooled
    /// visual token broadcast across text positions.
    pub fn gated_fuse(&self, text: &Tensor<E>, vis_pooled: &Tensor<E>) -> TResult<Tensor<E>> {
        let t_len = text.shape()[0];
        let c = text.shape()[1];
        let v_rows = Tensor::full(&[t_len, 1], E::ONE).matmul(&vis_pooled.reshape(&[1, c])?)?;
        let joint = Tensor::concat(&[text, &v_rows], 1)?;
        let g = self.gate.forward(&joint)?.sigmoid()?;
        let one_minus = g.mul_scalar(-1.0)?.add_scalar(1.0)?;
        g.mul(text)?.add(&one_minus.mul(&v_rows)?)
    }

    /// Full head: fuse, encode the joint sequence, pool, and emit class
    /// logits plus sigmoid box parameters.
    pub fn predict(
        &self,
        text: &AlignedTextEmbedding<E>,
        vis: &GridTokens<E>,
    ) -> Result<GroundingOutput<E>> {
        let pv = self.vis_proj.forward(&vis.tokens)?;
        let (attended, _) = self.co_attention(&text.tokens, &pv)?;
        let pooled_vis = pv.mean_axis(0)?;
        let fused_text = self.gated_fuse(&attended, &pooled_vis)?;
        let mut seq = Tensor::concat(&[&fused_text, &pv], 0)?;
        for block in &self.encoder {
            seq = block.forward(&seq)?;
        }
        let pooled = seq.mean_axis(0)?.reshape(&[1, seq.shape()[1]])?;
        let cls = self
            .cls_out
            .forward(&self.cls_hidden.forward(&pooled)?.gelu()?)?;
        let box_params = self
            .box_out
            .forward(&self.box_hidden.forward(&pooled)?.gelu()?)?
            .sigmoid()?;
        Ok(GroundingOutput {
            class_logits: cls.reshape(&[self.cls_out.d_out()])?,
            box_params: box_params.reshape(&[4])?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.vis_proj.visit(&format!("{prefix}.vis_proj"), f);
        self.co_q.visit(&format!("{prefix}.co.q"), f);
        self.co_k.visit(&format!("{prefix}.co.k"), f);
        self.co_v.visit(&format!("{prefix}.co.v"), f);
        self.co_o.visit(&format!("{prefix}.co.o"), f);
        self.gate.visit(&format!("{prefix}.gate"), f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("{prefix}.encoder.{i}"), f);
        }
        self.cls_hidden.visit(&format!("{prefix}.cls.hidden"), f);
        self.cls_out.visit(&format!("{prefix}.cls.out"), f);
        self.box_hidden.visit(&format!("{prefix}.box.hidden"), f);
        self.box_out.visit(&format!("{prefix}.box.out"), f);
    }
}

/// Differentiable generalized IoU of the predicted `[4]` box parameters
/// against a fixed ground-truth box, via clipped corners.
pub fn giou_tensor<E: Scalar>(box_params: &Tensor<E>, gt: &BBox) -> TResult<Tensor<E>> {
    let cx = box_params.slice(0, 0, 1)?;
    let cy = box_params.slice(0, 1, 1)?;
    let w = box_params.slice(0, 2, 1)?;
    let h = box_params.slice(0, 3, 1)?;
    let half_w = w.mul_scalar(0.5)?;
    let half_h = h.mul_scalar(0.5)?;
    let x1 = cx.sub(&half_w)?.clamp(0.0, 1.0)?;
    let y1 = cy.sub(&half_h)?.clamp(0.0, 1.0)?;
    let x2 = cx.add(&half_w)?.clamp(0.0, 1.0)?;
    let y2 = cy.add(&half_h)?.clamp(0.0, 1.0)?;

    let g = gt.corners();
    let gx1 = Tensor::scalar(E::from_f64(g[0]));
    let gy1 = Tensor::scalar(E::from_f64(g[1]));
    let gx2 = Tensor::scalar(E::from_f64(g[2]));
    let gy2 = Tensor::scalar(E::from_f64(g[3]));
    let zero = Tensor::scalar(E::ZERO);

    let ix = x2.minimum(&gx2)?.sub(&x1.maximum(&gx1)?)?.maximum(&zero)?;
    let iy = y2.minimum(&gy2)?.sub(&y1.maximum(&gy1)?)?.maximum(&zero)?;
    let inter = ix.mul(&iy)?;
    let area_p = x2.sub(&x1)?.mul(&y2.sub(&y1)?)?;
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);
    let union = area_p.add_scalar(area_g)?.sub(&inter)?;
    let ex = x2.maximum(&gx2)?.sub(&x1.minimum(&gx1)?)?;
    let ey = y2.maximum(&gy2)?.sub(&y1.minimum(&gy1)?)?;
    let enclose = Tensor::mul(&ex, &ey)?;
    let iou_term = inter.div(&union)?;
    let penalty = enclose.sub(&union)?.div(&enclose)?;
    iou_term.sub(&penalty)
}

/// `ce(class) + 5 * l1(box) + 2 * (1 - giou(box))`; every term is
/// non-negative, so the loss is too.
pub fn vqla_loss<E: Scalar>(
    out: &GroundingOutput<E>,
    label: usize,
    gt: &BBox,
) -> Result<Tensor<E>> {
    let n = out.class_logits.shape()[0];
    if label >= n {
        return Err(VqlaError::Vocab(format!(
            "label id {label} outside the {n}-class answer vocabulary"
        )));
    }
    gt.validate()?;
    let ce = out
        .class_logits
        .reshape(&[1, n])?
        .cross_entropy(&[label], None)?;
    let gt_t = Tensor::from_f64_slice(&[4], &gt.to_array())?;
    let l1 = out.box_params.sub(&gt_t)?.abs()?.sum_all()?;
    let giou_v = giou_tensor(&out.box_params, gt)?;
    let giou_term = giou_v.mul_scalar(-1.0)?.add_scalar(1.0)?;
    Ok(ce
        .add(&l1.mul_scalar(LAMBDA_L1)?)?
        .add(&giou_term.mul_scalar(LAMBDA_GIOU)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vqla_tensor::{grad_check, init_gaussian, ParamStore, DEFAULT_EPS};

    #[test]
    fn giou_identical_boxes_is_one() {
        let a = BBox::new(0.5, 0.5, 0.4, 0.3).unwrap();
        assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_disjoint_hand_case() {
        // corners (0,0,1,1) vs (2,2,3,3): iou 0, union 2, enclosure 9
        let g = giou_xyxy([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]).unwrap();
        assert!((g - (-7.0 / 9.0)).abs() < 1e-12, "{g}");
    }

    #[test]
    fn giou_nested_equals_iou() {
        let g = giou_xyxy([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((g - 0.25).abs() < 1e-12, "{g}");
    }

    #[test]
    fn giou_zero_area_is_domain_error() {
        assert!(giou_xyxy([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn giou_translation_consistency() {
        let a = BBox::new(0.3, 0.3, 0.2, 0.2).unwrap();
        let b = BBox::new(0.4, 0.35, 0.25, 0.15).unwrap();
        let shift = |x: &BBox, dx: f64, dy: f64| BBox {
            cx: x.cx + dx,
            cy: x.cy + dy,
            ..*x
        };
        let (dx, dy) = (0.2, 0.25);
        let i0 = iou(&a, &b);
        let g0 = giou(&a, &b).unwrap();
        let i1 = iou(&shift(&a, dx, dy), &shift(&b, dx, dy));
        let g1 = giou(&shift(&a, dx, dy), &shift(&b, dx, dy)).unwrap();
        assert!((i0 - i1).abs() < 1e-9);
        assert!((g0 - g1).abs() < 1e-9);
    }

    #[test]
    fn giou_tensor_agrees_with_scalar_route() {
        let mut rng = SeededRng::new(31);
        for _ in 0..200 {
            let p = BBox {
                cx: 0.05 + rng.uniform() * 0.9,
                cy: 0.05 + rng.uniform() * 0.9,
                w: 0.05 + rng.uniform() * 0.9,
                h: 0.05 + rng.uniform() * 0.9,
            };
            let g = BBox {
                cx: 0.05 + rng.uniform() * 0.9,
                cy: 0.05 + rng.uniform() * 0.9,
                w: 0.05 + rng.uniform() * 0.9,
                h: 0.05 + rng.uniform() * 0.9,
            };
            let t = Tensor::<f64>::from_f64_slice(&[4], &p.to_array()).unwrap();
            let via_tensor = giou_tensor(&t, &g).unwrap().item_f64();
            let via_scalar = giou(&p, &g).unwrap();
            assert!(
                (via_tensor - via_scalar).abs() < 1e-9,
                "{via_tensor} vs {via_scalar}"
            );
        }
    }

    fn head(n_answers: usize, seed: u64) -> GroundingHead<f64> {
        let mut rng = SeededRng::new(seed);
        GroundingHead::new(6, 8, n_answers, 1, 2, &mut rng).unwrap()
    }

    fn rand_inputs(rng: &mut SeededRng) -> (AlignedTextEmbedding<f64>, GridTokens<f64>) {
        let text = AlignedTextEmbedding {
            tokens: init_gaussian(&[3, 8], 1.0, rng),
        };
        let vis = GridTokens::new(init_gaussian(&[4, 6], 1.0, rng), 2, 2).unwrap();
        (text, vis)
    }

    #[test]
    fn co_attention_constant_keys_attend_uniformly() {
        let h = head(5, 40);
        let mut rng = SeededRng::new(41);
        let text = init_gaussian::<f64>(&[3, 8], 1.0, &mut rng);
        let row: Vec<f64> = (0..8).map(|i| 0.3 * i as f64).collect();
        let mut vis_data = Vec::new();
        for _ in 0..4 {
            vis_data.extend_from_slice(&row);
        }
        let vis = Tensor::from_vec(&[4, 8], vis_data).unwrap();
        let (out, attn) = h.co_attention(&text, &vis).unwrap();
        // attended value identical per text token, and rows sum to one
        let d = out.sub(&text).unwrap().data_vec();
        for t in 1..3 {
            for c in 0..8 {
                assert!((d[t * 8 + c] - d[c]).abs() < 1e-9);
            }
        }
        for s in attn.sum_axis(2).unwrap().data_vec() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn co_attention_zero_output_projection_is_identity() {
        let mut h = head(5, 42);
        h.co_o = Linear::zeros(8, 8, true);
        let mut rng = SeededRng::new(43);
        let text = init_gaussian::<f64>(&[3, 8], 1.0, &mut rng);
        let vis = init_gaussian::<f64>(&[4, 8], 1.0, &mut rng);
        let (out, _) = h.co_attention(&text, &vis).unwrap();
        assert_eq!(out.data_vec(), text.data_vec());
    }

    #[test]
    fn gate_saturation_keeps_text() {
        let mut h = head(5, 44);
        h.gate = Linear::zeros(16, 8, true);
        h.gate.bias = Some(Tensor::full(&[8], 1e3));
        let mut rng = SeededRng::new(45);
        let text = init_gaussian::<f64>(&[3, 8], 1.0, &mut rng);
        let vis = init_gaussian::<f64>(&[8], 1.0, &mut rng);
        let fused = h.gated_fuse(&text, &vis).unwrap();
        for (a, b) in fused.data_vec().iter().zip(text.data_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_fixed_point_when_text_equals_visual() {
        let h = head(5, 46);
        let mut rng = SeededRng::new(47);
        let v = init_gaussian::<f64>(&[8], 1.0, &mut rng);
        let text = Tensor::full(&[2, 1], 1.0)
            .matmul(&v.reshape(&[1, 8]).unwrap())
            .unwrap();
        let fused = h.gated_fuse(&text, &v).unwrap();
        for (a, b) in fused.data_vec().iter().zip(text.data_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_values_strictly_inside_unit_interval() {
        let h = head(5, 48);
        let mut rng = SeededRng::new(49);
        let text = init_gaussian::<f64>(&[4, 8], 2.0, &mut rng);
        let vis = init_gaussian::<f64>(&[8], 2.0, &mut rng);
        let t_len = text.shape()[0];
        let v_rows = Tensor::full(&[t_len, 1], 1.0)
            .matmul(&vis.reshape(&[1, 8]).unwrap())
            .unwrap();
        let joint = Tensor::concat(&[&text, &v_rows], 1).unwrap();
        let g = h.gate.forward(&joint).unwrap().sigmoid().unwrap();
        for v in g.data_vec() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn predict_output_contracts() {
        let h = head(7, 50);
        let mut rng = SeededRng::new(51);
        let (text, vis) = rand_inputs(&mut rng);
        let out = h.predict(&text, &vis).unwrap();
        assert_eq!(out.class_logits.shape(), &[7]);
        let b = out.bbox();
        for v in [b.cx, b.cy, b.w, b.h] {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn loss_components_vanish_at_perfect_prediction() {
        let gt = BBox::new(0.5, 0.5, 0.4, 0.4).unwrap();
        let mut logits = vec![-30.0f64; 6];
        logits[2] = 30.0;
        let out = GroundingOutput {
            class_logits: Tensor::from_vec(&[6], logits).unwrap(),
            box_params: Tensor::from_f64_slice(&[4], &gt.to_array()).unwrap(),
        };
        let loss = vqla_loss(&out, 2, &gt).unwrap().item_f64();
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn loss_uniform_logits_is_ln_classes() {
        let gt = BBox::new(0.5, 0.5, 0.4, 0.4).unwrap();
        let out = GroundingOutput {
            class_logits: Tensor::from_vec(&[18], vec![0.0; 18]).unwrap(),
            box_params: Tensor::from_f64_slice(&[4], &gt.to_array()).unwrap(),
        };
        let loss = vqla_loss(&out, 4, &gt).unwrap().item_f64();
        assert!((loss - (18f64).ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn loss_is_nonnegative_on_random_inputs() {
        let mut rng = SeededRng::new(52);
        for _ in 0..100 {
            let out = GroundingOutput::<f64> {
                class_logits: init_gaussian(&[6], 2.0, &mut rng),
                box_params: Tensor::from_f64_slice(
                    &[4],
                    &[
                        0.1 + rng.uniform() * 0.8,
                        0.1 + rng.uniform() * 0.8,
                        0.1 + rng.uniform() * 0.8,
                        0.1 + rng.uniform() * 0.8,
                    ],
                )
                .unwrap(),
            };
            let gt = BBox::new(
                0.1 + rng.uniform() * 0.8,
                0.1 + rng.uniform() * 0.8,
                0.1 + rng.uniform() * 0.8,
                0.1 + rng.uniform() * 0.8,
            )
            .unwrap();
            let label = rng.below(6);
            assert!(vqla_loss(&out, label, &gt).unwrap().item_f64() >= 0.0);
        }
    }

    #[test]
    fn unknown_label_is_vocabulary_error() {
        let gt = BBox::new(0.5, 0.5, 0.4, 0.4).unwrap();
        let out = GroundingOutput {
            class_logits: Tensor::<f64>::from_vec(&[3], vec![0.0; 3]).unwrap(),
            box_params: Tensor::from_f64_slice(&[4], &gt.to_array()).unwrap(),
        };
        assert!(matches!(
            vqla_loss(&out, 7, &gt),
            Err(VqlaError::Vocab(_))
        ));
    }

    #[test]
    fn full_head_loss_gradients_check_out() {
        let h = head(5, 53);
        let mut rng = SeededRng::new(54);
        let mut store = ParamStore::<f64>::new();
        h.visit("ground", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store
            .insert("text", init_gaussian(&[3, 8], 1.0, &mut rng))
            .unwrap();
        store
            .insert("vis", init_gaussian(&[4, 6], 1.0, &mut rng))
            .unwrap();
        let gt = BBox::new(0.4, 0.6, 0.3, 0.2).unwrap();
        let err = grad_check(
            |s| {
                let text = AlignedTextEmbedding {
                    tokens: s.get("text").unwrap().clone(),
                };
                let vis = GridTokens::new(s.get("vis").unwrap().clone(), 2, 2).map_err(|_| {
                    vqla_tensor::TensorError::Contract {
                        op: "test",
                        msg: "grid".into(),
                    }
                })?;
                let out = h
                    .predict(&text, &vis)
                    .map_err(|_| vqla_tensor::TensorError::Contract {
                        op: "test",
                        msg: "predict".into(),
                    })?;
                vqla_loss(&out, 1, &gt).map_err(|_| vqla_tensor::TensorError::Contract {
                    op: "test",
                    msg: "loss".into(),
                })
            },
            &store,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel error {err}");
    }
}
