//! The assembled stack: vision encoder -> resampler -> adapted decoder ->
//! alignment projection -> grounding head, with one named parameter store
//! covering every piece.
//!
//! Parameter path prefixes double as freeze/export groups:
//! `vision.` (encoder + resampler), `decoder.` (frozen base weights),
//! `adapter.` (low-rank factors + state-space blocks), `projection.`,
//! `ground.`.

use vqla_tensor::{derive_seed, ParamStore, Scalar, SeededRng};

use crate::decoder::{DecoderConfig, LanguageResponse, Resampler, VlDecoder, Vocab};
use crate::encoder::{GridTokens, ImageTensor, VisionEncoder};
use crate::error::{Result, VqlaError};
use crate::grounding::{AnswerVocab, GroundingHead, GroundingOutput};
use crate::projection::{ProjectionTit, TitConfig};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub c_vision: usize,
    pub vision_depth: usize,
    pub vision_heads: usize,
    pub c_lm: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub visual_tokens: usize,
    pub context: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub vss_state: usize,
    pub vss_expand: usize,
    pub c_ground: usize,
    pub ground_layers: usize,
    pub ground_heads: usize,
    pub tit_levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            c_vision: 64,
            vision_depth: 4,
            vision_heads: 4,
            c_lm: 128,
            decoder_layers: 4,
            decoder_heads: 4,
            visual_tokens: 16,
            context: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
            vss_state: 8,
            vss_expand: 1,
            c_ground: 128,
            ground_layers: 2,
            ground_heads: 4,
            tit_levels: 2,
        }
    }
}

impl ModelConfig {
    /// The resampled prefix is laid out as a square grid for the scan stage.
    pub fn prefix_grid(&self) -> Result<(usize, usize)> {
        let side = (self.visual_tokens as f64).sqrt().round() as usize;
        if side * side != self.visual_tokens {
            return Err(VqlaError::Config(format!(
                "visual_tokens = {} must be a perfect square",
                self.visual_tokens
            )));
        }
        Ok((side, side))
    }

    pub fn validate(&self) -> Result<()> {
        self.prefix_grid()?;
        if self.image_size % self.patch != 0 {
            return Err(VqlaError::Config(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.c_vision % self.vision_heads != 0
            || self.c_lm % self.decoder_heads != 0
            || self.c_ground % self.ground_heads != 0
        {
            return Err(VqlaError::Config(
                "channel widths must be divisible by their head counts".into(),
            ));
        }
        if self.lora_rank == 0 || self.vss_state == 0 || self.vss_expand == 0 {
            return Err(VqlaError::Config(
                "lora_rank, vss_state, and vss_expand must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub struct VqlaModel<E: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub answers: AnswerVocab,
    pub encoder: VisionEncoder<E>,
    pub resampler: Resampler<E>,
    pub decoder: VlDecoder<E>,
    pub projection: ProjectionTit<E>,
    pub grounding: GroundingHead<E>,
}

impl<E: Scalar> VqlaModel<E> {
    /// Deterministic construction: each component draws from its own derived
    /// stream, so adding parameters to one never shifts another.
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        answers: AnswerVocab,
        seed: u64,
    ) -> Result<VqlaModel<E>> {
        config.validate()?;
        let (prefix_h, prefix_w) = config.prefix_grid()?;
        let mut enc_rng = SeededRng::new(derive_seed(seed, 1));
        let encoder = VisionEncoder::new(
            config.image_size,
            config.patch,
            config.c_vision,
            config.vision_depth,
            config.vision_heads,
            &mut enc_rng,
        )?;
        let mut res_rng = SeededRng::new(derive_seed(seed, 2));
        let resampler = Resampler::new(
            config.c_vision,
            config.c_lm,
            config.visual_tokens,
            &mut res_rng,
        );
        let mut dec_rng = SeededRng::new(derive_seed(seed, 3));
        let base = VlDecoder::new(
            DecoderConfig {
                vocab_size: vocab.len(),
                c_lm: config.c_lm,
                layers: config.decoder_layers,
                heads: config.decoder_heads,
                context: config.context,
                prefix_h,
                prefix_w,
            },
            &mut dec_rng,
        )?;
        let mut adapter_rng = SeededRng::new(derive_seed(seed, 4));
        let decoder = base.inject_adapters(
            config.lora_rank,
            config.lora_alpha,
            config.c_lm * config.vss_expand,
            config.vss_state,
            &mut adapter_rng,
        );
        let mut proj_rng = SeededRng::new(derive_seed(seed, 5));
        let projection = ProjectionTit::new(
            TitConfig {
                levels: config.tit_levels,
                c_in: config.c_lm,
                c_ground: config.c_ground,
            },
            &mut proj_rng,
        );
        let mut ground_rng = SeededRng::new(derive_seed(seed, 6));
        let grounding = GroundingHead::new(
            config.c_vision,
            config.c_ground,
            answers.len().max(1),
            config.ground_layers,
            config.ground_heads,
            &mut ground_rng,
        )?;
        Ok(VqlaModel {
            config,
            vocab,
            answers,
            encoder,
            resampler,
            decoder,
            projection,
            grounding,
        })
    }

    pub fn param_store(&self) -> Result<ParamStore<E>> {
        let mut store = ParamStore::new();
        let mut err = None;
        {
            let mut add = |path: String, t: &vqla_tensor::Tensor<E>| {
                if err.is_none() {
                    if let Err(e) = store.insert(path, t.clone()) {
                        err = Some(e);
                    }
                }
            };
            self.encoder.visit("vision.encoder", &mut add);
            self.resampler.visit("vision.resampler", &mut add);
            self.decoder.visit_base("decoder", &mut add);
            self.decoder.visit_adapters("adapter", &mut add);
            self.projection.visit("projection", &mut add);
            self.grounding.visit("ground", &mut add);
        }
        match err {
            Some(e) => Err(VqlaError::Tensor(e)),
            None => Ok(store),
        }
    }

    pub fn encode_image(&self, img: &ImageTensor<E>) -> Result<GridTokens<E>> {
        self.encoder.forward(img)
    }

    pub fn visual_prefix(&self, grid: &GridTokens<E>) -> Result<vqla_tensor::Tensor<E>> {
        self.resampler.forward(grid)
    }

    /// Chat-format prompt for a question: `user : ... assistant :`.
    pub fn format_prompt(&self, question: &str) -> Vec<usize> {
        let text = format!("user : {question} assistant :");
        self.vocab.tokenize(&text)
    }

    /// Greedy answer generation for an image + question.
    pub fn generate(
        &self,
        img: &ImageTensor<E>,
        question: &str,
        max_len: usize,
    ) -> Result<LanguageResponse<E>> {
        let grid = self.encode_image(img)?;
        let prefix = self.visual_prefix(&grid)?;
        let prompt = self.format_prompt(question);
        self.decoder
            .generate(Some(&prefix), &prompt, max_len, &self.vocab)
    }

    /// Projection and grounding over a language response and the encoder
    /// grid; this is the trainable path of the second stage.
    pub fn ground_response(
        &self,
        response_hidden: &vqla_tensor::Tensor<E>,
        grid: &GridTokens<E>,
    ) -> Result<GroundingOutput<E>> {
        let aligned = self.projection.forward(response_hidden)?;
        self.grounding.predict(&aligned, grid)
    }

    /// Full inference: generate an answer, then localize it.
    pub fn infer(
        &self,
        img: &ImageTensor<E>,
        question: &str,
        max_len: usize,
    ) -> Result<(LanguageResponse<E>, GroundingOutput<E>)> {
        let grid = self.encode_image(img)?;
        let prefix = self.visual_prefix(&grid)?;
        let prompt = self.format_prompt(question);
        let response = self
            .decoder
            .generate(Some(&prefix), &prompt, max_len, &self.vocab)?;
        let _guard = vqla_tensor::no_grad();
        let output = self.ground_response(&response.hidden, &grid)?;
        Ok((response, output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vqla_tensor::Tensor;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch: 8,
            c_vision: 8,
            vision_depth: 1,
            vision_heads: 2,
            c_lm: 16,
            decoder_layers: 1,
            decoder_heads: 2,
            visual_tokens: 4,
            context: 64,
            lora_rank: 2,
            lora_alpha: 4.0,
            vss_state: 2,
            vss_expand: 1,
            c_ground: 16,
            ground_layers: 1,
            ground_heads: 2,
            tit_levels: 1,
        }
    }

    fn tiny_model(seed: u64) -> VqlaModel<f32> {
        let vocab = Vocab::build(["user : what is this ? assistant : kidney ."]);
        let answers = AnswerVocab::build(["kidney", "grasping"]);
        VqlaModel::new(tiny_config(), vocab, answers, seed).unwrap()
    }

    #[test]
    fn store_covers_all_prefixes() {
        let model = tiny_model(3);
        let store = model.param_store().unwrap();
        for prefix in ["vision.", "decoder.", "adapter.", "projection.", "ground."] {
            assert!(
                store.paths().any(|p| p.starts_with(prefix)),
                "missing prefix {prefix}"
            );
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = tiny_model(9);
        let b = tiny_model(9);
        let sa = a.param_store().unwrap();
        let sb = b.param_store().unwrap();
        assert_eq!(sa.len(), sb.len());
        for (path, t) in sa.iter() {
            let u = sb.get(path).unwrap();
            let ta: Vec<u32> = t.data_vec().iter().map(|v| v.to_bits()).collect();
            let ub: Vec<u32> = u.data_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ta, ub, "{path}");
        }
    }

    #[test]
    fn non_square_prefix_rejected() {
        let mut cfg = tiny_config();
        cfg.visual_tokens = 6;
        let vocab = Vocab::build(["a"]);
        let answers = AnswerVocab::build(["a"]);
        assert!(matches!(
            VqlaModel::<f32>::new(cfg, vocab, answers, 0),
            Err(VqlaError::Config(_))
        ));
    }

    #[test]
    fn end_to_end_inference_shapes() {
        let model = tiny_model(5);
        let img = ImageTensor::new(Tensor::zeros(&[3, 16, 16])).unwrap();
        let (resp, out) = model.infer(&img, "what is this ?", 3).unwrap();
        assert!(!resp.token_ids.is_empty());
        assert_eq!(out.class_logits.shape(), &[2]);
        let b = out.bbox();
        assert!(b.w > 0.0 && b.h > 0.0);
    }
}
