//! Alignment projection between the language response and the grounding
//! module: a residual linear map followed by a two-flow token-interaction
//! stage whose first flow modulates a query with gated multi-scale context.

use vqla_tensor::{Result as TResult, Scalar, SeededRng, Tensor};

use crate::error::Result;
use crate::nn::{Linear, ParamVisitor};

/// Focal levels use 1-d windows `2l + 1` for `l = 1..=levels`, plus one
/// global level spanning the whole sequence.
#[derive(Debug, Clone)]
pub struct TitConfig {
    pub levels: usize,
    pub c_in: usize,
    pub c_ground: usize,
}

impl TitConfig {
    pub fn window(&self, level: usize) -> usize {
        2 * level + 1
    }
}

/// Edge-clipped window-mean matrix `[t, t]`: row `i` averages the positions
/// within the window of size `w` centered at `i`, clipped to the sequence.
fn window_mean_matrix<E: Scalar>(t: usize, window: usize) -> Tensor<E> {
    let half = window / 2;
    let mut data = vec![E::ZERO; t * t];
    for i in 0..t {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(t - 1);
        let inv = E::from_f64(1.0 / (hi - lo + 1) as f64);
        for j in lo..=hi {
            data[i * t + j] = inv;
        }
    }
    Tensor::from_vec(&[t, t], data).expect("window matrix shape")
}

fn ones<E: Scalar>(shape: &[usize]) -> Tensor<E> {
    Tensor::full(shape, E::ONE)
}

pub struct ProjectionTit<E: Scalar> {
    pub config: TitConfig,
    pub lin_p: Linear<E>,     // residual projection over the response
    pub lin_in: Linear<E>,    // flow-1 query
    pub lin_gate: Linear<E>,  // per-position level gates
    pub lin_mod: Linear<E>,   // modulator mix
    pub lin_out1: Linear<E>,  // flow-1 output
    pub lin_v: Linear<E>,     // flow-2 linear
    pub lin_final: Linear<E>, // merge to grounding width
}

impl<E: Scalar> ProjectionTit<E> {
    pub fn new(config: TitConfig, rng: &mut SeededRng) -> ProjectionTit<E> {
        let c = config.c_in;
        ProjectionTit {
            lin_p: Linear::new(c, c, true, rng),
            lin_in: Linear::new(c, c, true, rng),
            lin_gate: Linear::new(c, config.levels + 1, true, rng),
            lin_mod: Linear::new(c, c, true, rng),
            lin_out1: Linear::new(c, c, true, rng),
            lin_v: Linear::new(c, c, true, rng),
            lin_final: Linear::new(c, config.c_ground, true, rng),
            config,
        }
    }

    /// `u = hidden + lin_p(hidden)`.
    pub fn project_residual(&self, hidden: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(hidden.add(&self.lin_p.forward(hidden)?)?)
    }

    /// Per-position context: gated sum over level window means (plus the
    /// global mean), each passed through a GELU.
    pub fn aggregate(&self, u: &Tensor<E>) -> TResult<Tensor<E>> {
        let (t, c) = (u.shape()[0], u.shape()[1]);
        let gates = self.lin_gate.forward(u)?.softmax(1)?; // [t, levels+1]
        let mut acc: Option<Tensor<E>> = None;
        for level in 1..=self.config.levels + 1 {
            let context = if level <= self.config.levels {
                window_mean_matrix::<E>(t, self.config.window(level)).matmul(u)?
            } else {
                // global level: every position sees the sequence mean
                ones::<E>(&[t, 1]).matmul(&u.mean_axis(0)?.reshape(&[1, c])?)?
            };
            let gate_col = gates
                .slice(1, level - 1, 1)?
                .matmul(&ones::<E>(&[1, c]))?;
            let term = context.gelu()?.mul(&gate_col)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one level"))
    }

    /// Flow-1 before the merge: `lin_out1(lin_mod(aggregate(u)) * lin_in(u))`.
    /// Exposed so locality can be probed ahead of the global final linear.
    pub fn interaction_flow(&self, u: &Tensor<E>) -> TResult<Tensor<E>> {
        let q = self.lin_in.forward(u)?;
        let modulator = self.lin_mod.forward(&self.aggregate(u)?)?;
        self.lin_out1.forward(&modulator.mul(&q)?)
    }

    /// Both flows merged and projected to grounding width.
    pub fn tit_forward(&self, u: &Tensor<E>) -> Result<AlignedTextEmbedding<E>> {
        let flow1 = self.interaction_flow(u)?;
        let flow2 = self.lin_v.forward(u)?;
        let tokens = self.lin_final.forward(&flow1.add(&flow2)?)?;
        Ok(AlignedTextEmbedding { tokens })
    }

    /// Full module: residual projection then token interaction.
    pub fn forward(&self, hidden: &Tensor<E>) -> Result<AlignedTextEmbedding<E>> {
        let u = self.project_residual(hidden)?;
        self.tit_forward(&u)
    }

    pub fn gates(&self, u: &Tensor<E>) -> TResult<Tensor<E>> {
        self.lin_gate.forward(u)?.softmax(1)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.lin_p.visit(&format!("{prefix}.residual"), f);
        self.lin_in.visit(&format!("{prefix}.tit.q"), f);
        self.lin_gate.visit(&format!("{prefix}.tit.gate"), f);
        self.lin_mod.visit(&format!("{prefix}.tit.modulator"), f);
        self.lin_out1.visit(&format!("{prefix}.tit.out1"), f);
        self.lin_v.visit(&format!("{prefix}.tit.v"), f);
        self.lin_final.visit(&format!("{prefix}.tit.merge"), f);
    }
}

/// Text embedding aligned to the grounding width; length is preserved from
/// the language response.
pub struct AlignedTextEmbedding<E: Scalar> {
    pub tokens: Tensor<E>, // [t_out, c_ground]
}
