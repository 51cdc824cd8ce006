//! Small shared building blocks: linear layers, layer norm, an MLP, and the
//! scaled-dot-product attention core used by every attention site.

use vqla_tensor::{init_uniform, init_zero, Result, Scalar, SeededRng, Tensor};

pub type ParamVisitor<'v, E> = dyn FnMut(String, &Tensor<E>) + 'v;

pub struct Linear<E: Scalar> {
    pub weight: Tensor<E>, // [d_out, d_in]
    pub bias: Option<Tensor<E>>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut SeededRng) -> Linear<E> {
        let limit = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: init_uniform(&[d_out, d_in], limit, rng),
            bias: bias.then(|| init_zero(&[d_out])),
        }
    }

    /// Weight and bias start at exactly zero, so the layer is the zero map.
    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Linear<E> {
        Linear {
            weight: init_zero(&[d_out, d_in]),
            bias: bias.then(|| init_zero(&[d_out])),
        }
    }

    /// Fan-in init scaled by `gain`. Readout layers that stay frozen while
    /// upstream adapters train need a wider range than 1/sqrt(d_in), or the
    /// reachable logit margins cap the attainable confidence.
    pub fn new_scaled(
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Linear<E> {
        let limit = gain / (d_in as f64).sqrt();
        Linear {
            weight: init_uniform(&[d_out, d_in], limit, rng),
            bias: bias.then(|| init_zero(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.linear(&self.weight, self.bias.as_ref())
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

pub struct LayerNorm<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: f64,
}

impl<E: Scalar> LayerNorm<E> {
    pub fn new(dim: usize) -> LayerNorm<E> {
        LayerNorm {
            gamma: Tensor::full(&[dim], E::ONE),
            beta: init_zero(&[dim]),
            eps: 1e-5,
        }
    }

    /// Normalizes over the last axis.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.gamma, &self.beta, x.rank() - 1, self.eps)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
}

pub struct Mlp<E: Scalar> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Scalar> Mlp<E> {
    pub fn new(dim: usize, hidden: usize, rng: &mut SeededRng) -> Mlp<E> {
        Mlp {
            fc1: Linear::new(dim, hidden, true, rng),
            fc2: Linear::new(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

/// Multi-head scaled dot-product attention over already-projected q/k/v of
/// shape `[t, c]`. Returns the merged output `[t_q, c]` and the attention
/// weights `[heads, t_q, t_k]`. `mask` is added to the scores pre-softmax.
pub fn attention<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    heads: usize,
    mask: Option<&Tensor<E>>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (t_q, c) = (q.shape()[0], q.shape()[1]);
    let t_k = k.shape()[0];
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // [t, c] -> [heads, t, dh]
    let qh = q.reshape(&[t_q, heads, dh])?.transpose(&[1, 0, 2])?;
    let kh = k.reshape(&[t_k, heads, dh])?.transpose(&[1, 0, 2])?;
    let vh = v.reshape(&[t_k, heads, dh])?.transpose(&[1, 0, 2])?;

    let mut scores = qh.matmul(&kh.transpose(&[0, 2, 1])?)?.mul_scalar(scale)?;
    if let Some(m) = mask {
        scores = scores.add(m)?; // [t_q, t_k] broadcasts over heads
    }
    let attn = scores.softmax(2)?;
    let out = attn
        .matmul(&vh)?
        .transpose(&[1, 0, 2])?
        .reshape(&[t_q, c])?;
    Ok((out, attn))
}

/// Additive causal mask for a prefix-LM layout: the first `prefix` positions
/// attend only among themselves (bidirectionally), text positions attend the
/// whole prefix plus text positions up to and including their own.
pub fn prefix_causal_mask<E: Scalar>(prefix: usize, total: usize) -> Tensor<E> {
    let blocked = E::from_f64(-1e9);
    let mut data = vec![E::ZERO; total * total];
    for i in 0..total {
        for j in 0..total {
            let allowed = if j < prefix { true } else { i >= prefix && j <= i };
            if !allowed {
                data[i * total + j] = blocked;
            }
        }
    }
    Tensor::from_vec(&[total, total], data).expect("mask shape is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = SeededRng::new(11);
        let q: Tensor<f64> = vqla_tensor::init_gaussian(&[3, 8], 1.0, &mut rng);
        let k: Tensor<f64> = vqla_tensor::init_gaussian(&[5, 8], 1.0, &mut rng);
        let v: Tensor<f64> = vqla_tensor::init_gaussian(&[5, 8], 1.0, &mut rng);
        let (_, attn) = attention(&q, &k, &v, 2, None).unwrap();
        let sums = attn.sum_axis(2).unwrap();
        for s in sums.data_vec() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_mask_blocks_future_text() {
        let m: Tensor<f64> = prefix_causal_mask(2, 5);
        let d = m.data_vec();
        let at = |row: usize, col: usize| d[row * 5 + col];
        // prefix rows see only the prefix
        assert_eq!(at(0, 3), -1e9);
        // text row 3 sees prefix and text up to itself
        assert_eq!(at(3, 0), 0.0);
        assert_eq!(at(3, 3), 0.0);
        assert_eq!(at(3, 4), -1e9);
    }
}
