//! Word-level tokenizer, learned-query visual resampler, and a small causal
//! decoder with adapter injection points on its attention projections.

use std::collections::HashMap;
use std::path::Path;

use vqla_tensor::{init_gaussian, no_grad, Scalar, SeededRng, Tensor, TensorError};

use crate::encoder::GridTokens;
use crate::error::{Result, VqlaError};
use crate::nn::{attention, prefix_causal_mask, LayerNorm, Linear, Mlp, ParamVisitor};
use crate::vp_lora::{GridSpec, VpLoraLinear};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const UNK: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<img>", "<unk>"];

/// Whitespace + punctuation word-level vocabulary with dense ids.
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Splits text into lowercase word and single-character punctuation tokens.
    pub fn split_text(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_whitespace() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
            } else if ch.is_alphanumeric() || ch == '_' || ch == '-' || ch == '<' || ch == '>' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut words = std::collections::BTreeSet::new();
        for text in corpus {
            for tok in Self::split_text(text) {
                if !RESERVED.contains(&tok.as_str()) {
                    words.insert(tok);
                }
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        Self::split_text(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces; structural ids (pad, bos, eos, img)
    /// are dropped, unknown renders as the literal `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS && id != IMG)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect();
        words.join(" ")
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len() {
            return Err(VqlaError::Vocab(format!(
                "{}: too few entries for a vocabulary",
                path.display()
            )));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(VqlaError::Vocab(format!(
                    "{}: line {} must be the reserved token {want}",
                    path.display(),
                    i
                )));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, index })
    }
}

/// Generated text plus the final-layer states of the generated tokens.
pub struct LanguageResponse<E: Scalar> {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub hidden: Tensor<E>, // [t_out, c_lm]
}

/// Learned queries cross-attending over grid tokens, compressing a variable
/// number of visual tokens to a fixed-length prefix at decoder width.
pub struct Resampler<E: Scalar> {
    pub queries: Tensor<E>, // [m, c_lm]
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub out: Linear<E>,
}

impl<E: Scalar> Resampler<E> {
    pub fn new(c_vision: usize, c_lm: usize, m: usize, rng: &mut SeededRng) -> Resampler<E> {
        assert!(m >= 1, "need at least one query token");
        Resampler {
            queries: init_gaussian(&[m, c_lm], 0.02, rng),
            wq: Linear::new(c_lm, c_lm, true, rng),
            wk: Linear::new(c_vision, c_lm, true, rng),
            wv: Linear::new(c_vision, c_lm, true, rng),
            out: Linear::new(c_lm, c_lm, true, rng),
        }
    }

    pub fn token_count(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn forward(&self, grid: &GridTokens<E>) -> Result<Tensor<E>> {
        Ok(self.forward_with_attn(grid)?.0)
    }

    pub fn forward_with_attn(&self, grid: &GridTokens<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let q = self.wq.forward(&self.queries)?;
        let k = self.wk.forward(&grid.tokens)?;
        let v = self.wv.forward(&grid.tokens)?;
        let (mixed, attn) = attention(&q, &k, &v, 1, None)?;
        Ok((self.out.forward(&mixed)?, attn))
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        f(format!("{prefix}.queries"), &self.queries);
        self.wq.visit(&format!("{prefix}.q"), f);
        self.wk.visit(&format!("{prefix}.k"), f);
        self.wv.visit(&format!("{prefix}.v"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
}

/// Attention projection that may carry a state-space adapter.
pub enum QvProjection<E: Scalar> {
    Plain(Linear<E>),
    Adapted(VpLoraLinear<E>),
}

impl<E: Scalar> QvProjection<E> {
    fn forward(&self, x: &Tensor<E>, grid: Option<&GridSpec>) -> Result<Tensor<E>> {
        match self {
            QvProjection::Plain(lin) => Ok(lin.forward(x)?),
            QvProjection::Adapted(layer) => layer.forward(x, grid),
        }
    }

    fn share_base(&self) -> Linear<E> {
        let base = match self {
            QvProjection::Plain(lin) => lin,
            QvProjection::Adapted(layer) => &layer.base,
        };
        Linear {
            weight: base.weight.clone(),
            bias: base.bias.clone(),
        }
    }

    fn visit_base(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        match self {
            QvProjection::Plain(lin) => lin.visit(prefix, f),
            QvProjection::Adapted(layer) => layer.visit_base(prefix, f),
        }
    }

    fn visit_adapter(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        if let QvProjection::Adapted(layer) = self {
            layer.visit_adapter(prefix, f);
        }
    }
}

pub struct DecoderLayer<E: Scalar> {
    pub norm1: LayerNorm<E>,
    pub q: QvProjection<E>,
    pub k: Linear<E>,
    pub v: QvProjection<E>,
    pub o: Linear<E>,
    pub norm2: LayerNorm<E>,
    pub mlp: Mlp<E>,
    pub heads: usize,
}

impl<E: Scalar> DecoderLayer<E> {
    fn new(dim: usize, heads: usize, rng: &mut SeededRng) -> DecoderLayer<E> {
        DecoderLayer {
            norm1: LayerNorm::new(dim),
            q: QvProjection::Plain(Linear::new(dim, dim, true, rng)),
            k: Linear::new(dim, dim, true, rng),
            v: QvProjection::Plain(Linear::new(dim, dim, true, rng)),
            o: Linear::new(dim, dim, true, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * 4, rng),
            heads,
        }
    }

    fn forward(
        &self,
        x: &Tensor<E>,
        mask: &Tensor<E>,
        grid: Option<&GridSpec>,
    ) -> Result<Tensor<E>> {
        let xn = self.norm1.forward(x)?;
        let q = self.q.forward(&xn, grid)?;
        let k = self.k.forward(&xn)?;
        let v = self.v.forward(&xn, grid)?;
        let (att, _) = attention(&q, &k, &v, self.heads, Some(mask))?;
        let x = x.add(&self.o.forward(&att)?)?;
        Ok(x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Decoder hyperparameters, desk scale by default.
#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub c_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    /// Grid layout assigned to the resampled visual prefix.
    pub prefix_h: usize,
    pub prefix_w: usize,
}

impl DecoderConfig {
    pub fn prefix_len(&self) -> usize {
        self.prefix_h * self.prefix_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_lm % self.heads != 0 {
            return Err(VqlaError::Config(format!(
                "c_lm {} not divisible by {} heads",
                self.c_lm, self.heads
            )));
        }
        if self.prefix_len() == 0 {
            return Err(VqlaError::Config("visual prefix must be non-empty".into()));
        }
        Ok(())
    }
}

pub struct VlDecoder<E: Scalar> {
    pub config: DecoderConfig,
    pub embed: Tensor<E>, // [vocab, c_lm]
    pub pos: Tensor<E>,   // [context, c_lm]
    pub layers: Vec<DecoderLayer<E>>,
    pub norm_f: LayerNorm<E>,
    pub lm_head: Linear<E>,
}

impl<E: Scalar> VlDecoder<E> {
    pub fn new(config: DecoderConfig, rng: &mut SeededRng) -> Result<VlDecoder<E>> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|_| DecoderLayer::new(config.c_lm, config.heads, rng))
            .collect();
        Ok(VlDecoder {
            embed: init_gaussian(&[config.vocab_size, config.c_lm], 0.02, rng),
            pos: init_gaussian(&[config.context, config.c_lm], 0.02, rng),
            layers,
            norm_f: LayerNorm::new(config.c_lm),
            lm_head: Linear::new_scaled(config.c_lm, config.vocab_size, false, 4.0, rng),
            config,
        })
    }

    /// A decoder sharing every base tensor with `self`, with fresh adapters
    /// wrapped around the q/v projections of each layer. At initialization
    /// the adapted decoder computes exactly the same function.
    pub fn inject_adapters(
        &self,
        rank: usize,
        alpha: f64,
        vss_inner: usize,
        vss_state: usize,
        rng: &mut SeededRng,
    ) -> VlDecoder<E> {
        let layers = self
            .layers
            .iter()
            .map(|layer| DecoderLayer {
                norm1: LayerNorm {
                    gamma: layer.norm1.gamma.clone(),
                    beta: layer.norm1.beta.clone(),
                    eps: layer.norm1.eps,
                },
                q: QvProjection::Adapted(VpLoraLinear::inject(
                    layer.q.share_base(),
                    rank,
                    alpha,
                    vss_inner,
                    vss_state,
                    rng,
                )),
                k: Linear {
                    weight: layer.k.weight.clone(),
                    bias: layer.k.bias.clone(),
                },
                v: QvProjection::Adapted(VpLoraLinear::inject(
                    layer.v.share_base(),
                    rank,
                    alpha,
                    vss_inner,
                    vss_state,
                    rng,
                )),
                o: Linear {
                    weight: layer.o.weight.clone(),
                    bias: layer.o.bias.clone(),
                },
                norm2: LayerNorm {
                    gamma: layer.norm2.gamma.clone(),
                    beta: layer.norm2.beta.clone(),
                    eps: layer.norm2.eps,
                },
                mlp: Mlp {
                    fc1: Linear {
                        weight: layer.mlp.fc1.weight.clone(),
                        bias: layer.mlp.fc1.bias.clone(),
                    },
                    fc2: Linear {
                        weight: layer.mlp.fc2.weight.clone(),
                        bias: layer.mlp.fc2.bias.clone(),
                    },
                },
                heads: layer.heads,
            })
            .collect();
        VlDecoder {
            config: self.config.clone(),
            embed: self.embed.clone(),
            pos: self.pos.clone(),
            layers,
            norm_f: LayerNorm {
                gamma: self.norm_f.gamma.clone(),
                beta: self.norm_f.beta.clone(),
                eps: self.norm_f.eps,
            },
            lm_head: Linear {
                weight: self.lm_head.weight.clone(),
                bias: self.lm_head.bias.clone(),
            },
        }
    }

    /// Runs `[img-marked prefix ; bos ; ids]` through the stack. Returns
    /// logits and final hidden states for the text positions (bos + ids).
    pub fn forward(
        &self,
        visual_prefix: Option<&Tensor<E>>,
        ids: &[usize],
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let m = visual_prefix.map_or(0, |p| p.shape()[0]);
        let text_ids: Vec<usize> = std::iter::once(BOS).chain(ids.iter().copied()).collect();
        let total = m + text_ids.len();
        if total > self.config.context {
            return Err(VqlaError::Tensor(TensorError::Contract {
                op: "decoder_forward",
                msg: format!(
                    "sequence length {total} exceeds context {}",
                    self.config.context
                ),
            }));
        }
        let text_emb = self.embed.embedding_lookup(&text_ids)?;
        let x = match visual_prefix {
            Some(prefix) => {
                let img_mark = self
                    .embed
                    .embedding_lookup(&[IMG])?
                    .reshape(&[self.config.c_lm])?;
                let marked = prefix.add(&img_mark)?;
                Tensor::concat(&[&marked, &text_emb], 0)?
            }
            None => text_emb,
        };
        let x = x.add(&self.pos.slice(0, 0, total)?)?;
        let mask = prefix_causal_mask::<E>(m, total);
        let grid = if m > 0 {
            GridSpec::Region {
                offset: 0,
                h: self.config.prefix_h,
                w: self.config.prefix_w,
            }
        } else {
            GridSpec::NoGrid
        };
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(&h, &mask, Some(&grid))?;
        }
        let h = self.norm_f.forward(&h)?;
        let text_hidden = h.slice(0, m, text_ids.len())?;
        let logits = self.lm_head.forward(&text_hidden)?;
        Ok((logits, text_hidden))
    }

    /// Greedy decoding, ties broken toward the lower token id. Gradients are
    /// never recorded. Returns the generated tokens (including a terminating
    /// eos when emitted) and their final hidden states.
    pub fn generate(
        &self,
        visual_prefix: Option<&Tensor<E>>,
        prompt_ids: &[usize],
        max_len: usize,
        vocab: &Vocab,
    ) -> Result<LanguageResponse<E>> {
        assert!(max_len >= 1, "max_len must be >= 1");
        let _guard = no_grad();
        let mut ids = prompt_ids.to_vec();
        let mut generated = Vec::new();
        for _ in 0..max_len {
            let (logits, _) = self.forward(visual_prefix, &ids)?;
            let t = logits.shape()[0];
            let v = logits.shape()[1];
            let row = &logits.data()[(t - 1) * v..t * v];
            let mut best = 0usize;
            for (j, val) in row.iter().enumerate() {
                if *val > row[best] {
                    best = j;
                }
            }
            ids.push(best);
            generated.push(best);
            if best == EOS {
                break;
            }
        }
        let (_, hidden) = self.forward(visual_prefix, &ids)?;
        // text rows are [bos ; prompt ; generated]; keep the generated tail
        let t_text = hidden.shape()[0];
        let out_hidden = hidden.slice(0, t_text - generated.len(), generated.len())?;
        Ok(LanguageResponse {
            text: vocab.detokenize(&generated),
            token_ids: generated,
            hidden: out_hidden.detach(),
        })
    }

    pub fn visit_base(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        f(format!("{prefix}.embed"), &self.embed);
        f(format!("{prefix}.pos"), &self.pos);
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = format!("{prefix}.layers.{i}");
            layer.norm1.visit(&format!("{lp}.norm1"), f);
            layer.q.visit_base(&format!("{lp}.attn.q"), f);
            layer.k.visit(&format!("{lp}.attn.k"), f);
            layer.v.visit_base(&format!("{lp}.attn.v"), f);
            layer.o.visit(&format!("{lp}.attn.o"), f);
            layer.norm2.visit(&format!("{lp}.norm2"), f);
            layer.mlp.visit(&format!("{lp}.mlp"), f);
        }
        self.norm_f.visit(&format!("{prefix}.norm_f"), f);
        self.lm_head.visit(&format!("{prefix}.lm_head"), f);
    }

    pub fn visit_adapters(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.q.visit_adapter(&format!("{prefix}.layers.{i}.q"), f);
            layer.v.visit_adapter(&format!("{prefix}.layers.{i}.v"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size,
            c_lm: 16,
            layers: 1,
            heads: 2,
            context: 64,
            prefix_h: 2,
            prefix_w: 2,
        }
    }

    #[test]
    fn tokenize_roundtrip() {
        let vocab = Vocab::build(["what is the state of bipolar forceps"]);
        let text = "what is the state of bipolar forceps";
        let ids = vocab.tokenize(text);
        assert_eq!(vocab.detokenize(&ids), text);
    }

    #[test]
    fn empty_string_roundtrip() {
        let vocab = Vocab::build(["hello"]);
        let ids = vocab.tokenize("");
        assert!(ids.is_empty());
        assert_eq!(vocab.detokenize(&ids), "");
    }

    #[test]
    fn out_of_vocab_maps_to_unk() {
        let vocab = Vocab::build(["kidney"]);
        let ids = vocab.tokenize("spleen");
        assert_eq!(ids, vec![UNK]);
        assert_eq!(vocab.detokenize(&ids), "<unk>");
    }

    #[test]
    fn punctuation_splits() {
        let vocab = Vocab::build(["what is visible ?"]);
        let ids = vocab.tokenize("what is visible ?");
        assert_eq!(vocab.detokenize(&ids), "what is visible ?");
    }

    #[test]
    fn vocab_save_load() {
        let vocab = Vocab::build(["alpha beta gamma"]);
        let dir = std::env::temp_dir().join(format!("vqla-vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), vocab.len());
        assert_eq!(loaded.id("beta"), vocab.id("beta"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn resampler_constant_grid_gives_identical_rows() {
        let mut rng = SeededRng::new(21);
        let rs: Resampler<f64> = Resampler::new(8, 16, 4, &mut rng);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(&row);
        }
        let grid = GridTokens::new(Tensor::from_vec(&[6, 8], data).unwrap(), 2, 3).unwrap();
        let (out, attn) = rs.forward_with_attn(&grid).unwrap();
        assert_eq!(out.shape(), &[4, 16]);
        let d = out.data_vec();
        for q in 1..4 {
            for c in 0..16 {
                assert!((d[q * 16 + c] - d[c]).abs() < 1e-9);
            }
        }
        for s in attn.sum_axis(2).unwrap().data_vec() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adapted_decoder_matches_base_at_init() {
        let mut rng = SeededRng::new(22);
        let vocab = Vocab::build(["a b c d e f g"]);
        let base: VlDecoder<f64> = VlDecoder::new(tiny_config(vocab.len()), &mut rng).unwrap();
        let adapted = base.inject_adapters(2, 4.0, 8, 2, &mut rng);
        let prefix = init_gaussian(&[4, 16], 1.0, &mut rng);
        let ids = vocab.tokenize("a c e");
        let (logits_base, _) = base.forward(Some(&prefix), &ids).unwrap();
        let (logits_adapted, _) = adapted.forward(Some(&prefix), &ids).unwrap();
        for (a, b) in logits_base.data_vec().iter().zip(logits_adapted.data_vec()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn causality_perturbation() {
        let mut rng = SeededRng::new(23);
        let vocab = Vocab::build(["a b c d e f g"]);
        let dec: VlDecoder<f64> = VlDecoder::new(tiny_config(vocab.len()), &mut rng).unwrap();
        let prefix = init_gaussian(&[4, 16], 1.0, &mut rng);
        let ids = vocab.tokenize("a b c d e");
        let (logits, _) = dec.forward(Some(&prefix), &ids).unwrap();

        for t in 1..ids.len() {
            let mut perturbed = ids.clone();
            perturbed[t] = if perturbed[t] == 5 { 6 } else { 5 };
            let (logits_p, _) = dec.forward(Some(&prefix), &perturbed).unwrap();
            let v = logits.shape()[1];
            let a = logits.data_vec();
            let b = logits_p.data_vec();
            // text row for ids[t] is t + 1 (bos shifts by one)
            for row in 0..logits.shape()[0] {
                let differs = (0..v).any(|j| (a[row * v + j] - b[row * v + j]).abs() > 1e-12);
                if row <= t {
                    assert!(!differs, "position {row} changed by perturbing token {t}");
                }
            }
            // the perturbed position itself must influence its own logits row
            let row = t + 1;
            let differs = (0..v).any(|j| (a[row * v + j] - b[row * v + j]).abs() > 1e-12);
            assert!(differs, "perturbing token {t} had no downstream effect");
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let mut rng = SeededRng::new(24);
        let vocab = Vocab::build(["a"]);
        let mut cfg = tiny_config(vocab.len());
        cfg.context = 8;
        let dec: VlDecoder<f64> = VlDecoder::new(cfg, &mut rng).unwrap();
        let prefix = init_gaussian(&[4, 16], 1.0, &mut rng);
        let ids = vec![5usize; 10];
        assert!(dec.forward(Some(&prefix), &ids).is_err());
    }

    #[test]
    fn one_layer_decoder_gradients_check_out() {
        use vqla_tensor::{grad_check, ParamStore};
        let mut rng = SeededRng::new(26);
        let vocab = Vocab::build(["a b c d e"]);
        let mut cfg = tiny_config(vocab.len());
        cfg.context = 16;
        let dec: VlDecoder<f64> = VlDecoder::new(cfg, &mut rng).unwrap();
        let ids = vocab.tokenize("a c b e");
        let mut store = ParamStore::new();
        dec.visit_base("decoder", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store
            .insert("prefix", init_gaussian(&[4, 16], 1.0, &mut rng))
            .unwrap();
        let err = grad_check(
            |s| {
                let (logits, _) = dec
                    .forward(Some(s.get("prefix").unwrap()), &ids)
                    .map_err(|_| TensorError::Contract {
                        op: "test",
                        msg: "decoder".into(),
                    })?;
                logits.slice(0, 0, ids.len())?.cross_entropy(&ids, None)
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel error {err}");
    }

    #[test]
    fn generate_respects_max_len_and_determinism() {
        let mut rng = SeededRng::new(25);
        let vocab = Vocab::build(["a b c"]);
        let dec: VlDecoder<f64> = VlDecoder::new(tiny_config(vocab.len()), &mut rng).unwrap();
        let prefix = init_gaussian(&[4, 16], 1.0, &mut rng);
        let prompt = vocab.tokenize("a b");
        let r1 = dec.generate(Some(&prefix), &prompt, 1, &vocab).unwrap();
        assert_eq!(r1.token_ids.len(), 1);
        assert_eq!(r1.hidden.shape()[0], 1);
        let r2 = dec.generate(Some(&prefix), &prompt, 5, &vocab).unwrap();
        let r3 = dec.generate(Some(&prefix), &prompt, 5, &vocab).unwrap();
        assert_eq!(r2.token_ids, r3.token_ids);
        assert_eq!(r2.text, r3.text);
        let h2: Vec<u64> = r2.hidden.data_vec().iter().map(|v| v.to_bits()).collect();
        let h3: Vec<u64> = r3.hidden.data_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(h2, h3);
    }
}
