//! The differentiable op set.
//!
//! Elementwise transcendentals evaluate through f64 so that forward and
//! backward agree to the last bit in f64 gradient-check mode. Matrix kernels
//! stay in the element type for speed.

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// kernels

fn mm<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    // out[m,n] += a[m,k] . b[k,n], ikj order so the inner loop is contiguous
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * *bv;
            }
        }
    }
}

fn mm_nt<E: Scalar>(g: &[E], b: &[E], m: usize, n: usize, k: usize, out: &mut [E]) {
    // out[m,k] += g[m,n] . b[k,n]^T (row-row dot products)
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let mut acc = E::ZERO;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += *gv * *bv;
            }
            out[i * k + l] += acc;
        }
    }
}

fn mm_tn<E: Scalar>(a: &[E], g: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    // out[k,n] += a[m,k]^T . g[m,n]
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, gv) in out_row.iter_mut().zip(g_row) {
                *o += a_il * *gv;
            }
        }
    }
}

/// (outer, lane, inner) decomposition of `shape` around `axis`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn permute_raw<E: Copy>(shape: &[usize], perm: &[usize], data: &[E]) -> (Vec<usize>, Vec<E>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let mut src = 0;
        for (i, &p) in perm.iter().enumerate() {
            src += idx[i] * in_strides[p];
        }
        out.push(data[src]);
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// broadcast binary / unary scaffolding

/// Suffix broadcasting: the smaller operand must be a single element or its
/// shape must equal the trailing dims of the larger one.
fn broadcast_check(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    a_numel: usize,
    b_numel: usize,
) -> Result<bool> {
    let (big, small, big_numel) = if a_numel >= b_numel {
        (a, b, true)
    } else {
        (b, a, false)
    };
    let (big_n, small_n) = if big_numel {
        (a_numel, b_numel)
    } else {
        (b_numel, a_numel)
    };
    let ok = small_n == 1
        || (small.len() <= big.len() && big[big.len() - small.len()..] == *small && big_n % small_n == 0);
    if !ok {
        return shape_err(op, format!("cannot broadcast {:?} with {:?}", a, b));
    }
    Ok(big_numel)
}

impl<E: Scalar> Tensor<E> {
    fn binary_broadcast(
        &self,
        rhs: &Tensor<E>,
        op: &'static str,
        f: fn(E, E) -> E,
        partials: fn(E, E) -> (E, E),
    ) -> Result<Tensor<E>> {
        let a_big = broadcast_check(op, self.shape(), rhs.shape(), self.numel(), rhs.numel())?;
        let (big, small) = if a_big { (self, rhs) } else { (rhs, self) };
        let nb = small.numel();
        let data = {
            let bd = big.data();
            let sd = small.data();
            bd.iter()
                .enumerate()
                .map(|(i, &bv)| {
                    if a_big {
                        f(bv, sd[i % nb])
                    } else {
                        f(sd[i % nb], bv)
                    }
                })
                .collect::<Vec<E>>()
        };
        let out_shape = big.shape().to_vec();
        Tensor::from_custom_op(op, out_shape, data, &[self, rhs], move |g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let (big, small) = if a_big { (a, b) } else { (b, a) };
            let bd = big.data();
            let sd = small.data();
            let nb = sd.len();
            if big.requires_grad() {
                let mut gb = vec![E::ZERO; bd.len()];
                for i in 0..bd.len() {
                    let (av, bv) = if a_big {
                        (bd[i], sd[i % nb])
                    } else {
                        (sd[i % nb], bd[i])
                    };
                    let (pa, pb) = partials(av, bv);
                    gb[i] = g[i] * if a_big { pa } else { pb };
                }
                big.accumulate_grad(&gb);
            }
            if small.requires_grad() {
                let mut gs = vec![E::ZERO; nb];
                for i in 0..bd.len() {
                    let (av, bv) = if a_big {
                        (bd[i], sd[i % nb])
                    } else {
                        (sd[i % nb], bd[i])
                    };
                    let (pa, pb) = partials(av, bv);
                    gs[i % nb] += g[i] * if a_big { pb } else { pa };
                }
                small.accumulate_grad(&gs);
            }
        })
    }

    fn unary_f64(
        &self,
        op: &'static str,
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    ) -> Result<Tensor<E>> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&v| E::from_f64(f(v.to_f64())))
            .collect();
        Tensor::from_custom_op(op, self.shape().to_vec(), data, &[self], move |g, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                let xd = x.data();
                let gx: Vec<E> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| E::from_f64(gv.to_f64() * df(xv.to_f64())))
                    .collect();
                x.accumulate_grad(&gx);
            }
        })
    }

    // -----------------------------------------------------------------------
    // elementwise

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_broadcast(rhs, "add", |a, b| a + b, |_, _| (E::ONE, E::ONE))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_broadcast(rhs, "sub", |a, b| a - b, |_, _| (E::ONE, E::ZERO - E::ONE))
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_broadcast(rhs, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_broadcast(
            rhs,
            "div",
            |a, b| a / b,
            |a, b| (E::ONE / b, E::ZERO - a / (b * b)),
        )
    }

    pub fn maximum(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        fn pick<E: Scalar>(a: E, b: E) -> E {
            if a >= b {
                a
            } else {
                b
            }
        }
        self.binary_broadcast(rhs, "maximum", pick::<E>, |a, b| {
            let half = E::from_f64(0.5);
            if a > b {
                (E::ONE, E::ZERO)
            } else if a < b {
                (E::ZERO, E::ONE)
            } else {
                (half, half)
            }
        })
    }

    pub fn minimum(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        fn pick<E: Scalar>(a: E, b: E) -> E {
            if a <= b {
                a
            } else {
                b
            }
        }
        self.binary_broadcast(rhs, "minimum", pick::<E>, |a, b| {
            let half = E::from_f64(0.5);
            if a < b {
                (E::ONE, E::ZERO)
            } else if a > b {
                (E::ZERO, E::ONE)
            } else {
                (half, half)
            }
        })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<E>> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&v| E::from_f64(v.to_f64() + c))
            .collect();
        Tensor::from_custom_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            &[self],
            |g, parents| parents[0].accumulate_grad(g),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor<E>> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&v| E::from_f64(v.to_f64() * c))
            .collect();
        Tensor::from_custom_op(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            &[self],
            move |g, parents| {
                let gx: Vec<E> = g.iter().map(|&gv| E::from_f64(gv.to_f64() * c)).collect();
                parents[0].accumulate_grad(&gx);
            },
        )
    }

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Result<Tensor<E>> {
        self.unary_f64("exp", f64::exp, f64::exp)
    }

    pub fn tanh(&self) -> Result<Tensor<E>> {
        self.unary_f64("tanh", f64::tanh, |x| 1.0 - x.tanh().powi(2))
    }

    pub fn softplus(&self) -> Result<Tensor<E>> {
        self.unary_f64("softplus", stable_softplus, sigmoid_f64)
    }

    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        self.unary_f64("sigmoid", sigmoid_f64, |x| {
            let s = sigmoid_f64(x);
            s * (1.0 - s)
        })
    }

    pub fn silu(&self) -> Result<Tensor<E>> {
        self.unary_f64("silu", |x| x * sigmoid_f64(x), |x| {
            let s = sigmoid_f64(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn gelu(&self) -> Result<Tensor<E>> {
        self.unary_f64("gelu", gelu_f64, dgelu_f64)
    }

    pub fn abs(&self) -> Result<Tensor<E>> {
        self.unary_f64("abs", f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor<E>> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&v| E::from_f64(v.to_f64().clamp(lo, hi)))
            .collect();
        Tensor::from_custom_op(
            "clamp",
            self.shape().to_vec(),
            data,
            &[self],
            move |g, parents| {
                let x = &parents[0];
                if x.requires_grad() {
                    let xd = x.data();
                    let gx: Vec<E> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gv, &xv)| {
                            let v = xv.to_f64();
                            if (lo..=hi).contains(&v) {
                                gv
                            } else {
                                E::ZERO
                            }
                        })
                        .collect();
                    x.accumulate_grad(&gx);
                }
            },
        )
    }

    /// Elementwise op with a caller-supplied derivative. The derivative is
    /// trusted as given, which also makes this the hook for planting known-bad
    /// backward passes when exercising the gradient checker.
    pub fn custom_unary(
        &self,
        f: impl Fn(f64) -> f64 + 'static,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Tensor<E>> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&v| E::from_f64(f(v.to_f64())))
            .collect();
        Tensor::from_custom_op(
            "custom_unary",
            self.shape().to_vec(),
            data,
            &[self],
            move |g, parents| {
                let x = &parents[0];
                if x.requires_grad() {
                    let xd = x.data();
                    let gx: Vec<E> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gv, &xv)| E::from_f64(gv.to_f64() * df(xv.to_f64())))
                        .collect();
                    x.accumulate_grad(&gx);
                }
            },
        )
    }

    // -----------------------------------------------------------------------
    // matrix ops

    /// Matrix product with equal leading batch dims: `[.., m, k] x [.., k, n]`.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", "operands must have rank >= 2");
        }
        if sa[..sa.len() - 2] != sb[..sb.len() - 2] || sa.len() != sb.len() {
            return shape_err(
                "matmul",
                format!("batch dims differ: {:?} vs {:?}", sa, sb),
            );
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err("matmul", format!("inner dims differ: {k} vs {k2}"));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![E::ZERO; batch * m * n];
        {
            let ad = self.data();
            let bd = rhs.data();
            for t in 0..batch {
                mm(
                    &ad[t * m * k..(t + 1) * m * k],
                    &bd[t * k * n..(t + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Tensor::from_custom_op("matmul", out_shape, out, &[self, rhs], move |g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let ad = a.data();
            let bd = b.data();
            if a.requires_grad() {
                let mut ga = vec![E::ZERO; ad.len()];
                for t in 0..batch {
                    mm_nt(
                        &g[t * m * n..(t + 1) * m * n],
                        &bd[t * k * n..(t + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut ga[t * m * k..(t + 1) * m * k],
                    );
                }
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                let mut gb = vec![E::ZERO; bd.len()];
                for t in 0..batch {
                    mm_tn(
                        &ad[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[t * k * n..(t + 1) * k * n],
                    );
                }
                b.accumulate_grad(&gb);
            }
        })
    }

    /// Affine map `y = x W^T + b` with `w: [d_out, d_in]`, flattening any
    /// leading dims of `x`.
    pub fn linear(&self, w: &Tensor<E>, b: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        let sx = self.shape();
        if sx.is_empty() || w.rank() != 2 {
            return shape_err("linear", "input must have rank >= 1, weight rank 2");
        }
        let d_in = sx[sx.len() - 1];
        let (d_out, wk) = (w.shape()[0], w.shape()[1]);
        if wk != d_in {
            return shape_err(
                "linear",
                format!("input width {d_in} does not match weight width {wk}"),
            );
        }
        if let Some(bias) = b {
            if bias.shape() != [d_out] {
                return shape_err("linear", format!("bias must be [{d_out}]"));
            }
        }
        let rows = self.numel() / d_in;
        let mut out = vec![E::ZERO; rows * d_out];
        {
            let xd = self.data();
            let wd = w.data();
            // y[r,o] = dot(x_row, w_row) -- both contiguous
            for r in 0..rows {
                let x_row = &xd[r * d_in..(r + 1) * d_in];
                let out_row = &mut out[r * d_out..(r + 1) * d_out];
                for (o, ov) in out_row.iter_mut().enumerate() {
                    let w_row = &wd[o * d_in..(o + 1) * d_in];
                    let mut acc = E::ZERO;
                    for (xv, wv) in x_row.iter().zip(w_row) {
                        acc += *xv * *wv;
                    }
                    *ov = acc;
                }
            }
            if let Some(bias) = b {
                let bd = bias.data();
                for r in 0..rows {
                    for (o, bv) in bd.iter().enumerate() {
                        out[r * d_out + o] += *bv;
                    }
                }
            }
        }
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(d_out);
        let mut parents: Vec<&Tensor<E>> = vec![self, w];
        if let Some(bias) = b {
            parents.push(bias);
        }
        Tensor::from_custom_op("linear", out_shape, out, &parents, move |g, parents| {
            let (x, w) = (&parents[0], &parents[1]);
            let xd = x.data();
            let wd = w.data();
            if x.requires_grad() {
                // dx = g . w : [rows, d_out] x [d_out, d_in]
                let mut gx = vec![E::ZERO; xd.len()];
                mm(g, &wd, rows, d_out, d_in, &mut gx);
                x.accumulate_grad(&gx);
            }
            if w.requires_grad() {
                // dw[o,i] = sum_r g[r,o] x[r,i]
                let mut gw = vec![E::ZERO; wd.len()];
                for r in 0..rows {
                    let g_row = &g[r * d_out..(r + 1) * d_out];
                    let x_row = &xd[r * d_in..(r + 1) * d_in];
                    for (o, gv) in g_row.iter().enumerate() {
                        let gw_row = &mut gw[o * d_in..(o + 1) * d_in];
                        for (gwv, xv) in gw_row.iter_mut().zip(x_row) {
                            *gwv += *gv * *xv;
                        }
                    }
                }
                w.accumulate_grad(&gw);
            }
            if parents.len() == 3 && parents[2].requires_grad() {
                let mut gb = vec![E::ZERO; d_out];
                for r in 0..rows {
                    for (o, gbv) in gb.iter_mut().enumerate() {
                        *gbv += g[r * d_out + o];
                    }
                }
                parents[2].accumulate_grad(&gb);
            }
        })
    }

    /// Depthwise 3x3 convolution with zero padding 1 over an `[h*w, c]` grid.
    /// `weight: [c, 3, 3]`, `bias: [c]`.
    pub fn depthwise_conv2d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        h: usize,
        w: usize,
    ) -> Result<Tensor<E>> {
        let c = if self.rank() == 2 { self.shape()[1] } else { 0 };
        if self.rank() != 2 || self.shape()[0] != h * w {
            return shape_err(
                "depthwise_conv2d",
                format!("input must be [{}x{}, c], got {:?}", h, w, self.shape()),
            );
        }
        if weight.shape() != [c, 3, 3] || bias.shape() != [c] {
            return shape_err(
                "depthwise_conv2d",
                format!("weight must be [{c}, 3, 3] and bias [{c}]"),
            );
        }
        let mut out = vec![E::ZERO; h * w * c];
        {
            let xd = self.data();
            let wd = weight.data();
            let bd = bias.data();
            for y in 0..h {
                for x in 0..w {
                    let out_px = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
                    out_px.copy_from_slice(&bd);
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let sx = x as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = (sy as usize * w + sx as usize) * c;
                            for ch in 0..c {
                                out_px[ch] += wd[ch * 9 + dy * 3 + dx] * xd[src + ch];
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_custom_op(
            "depthwise_conv2d",
            vec![h * w, c],
            out,
            &[self, weight, bias],
            move |g, parents| {
                let (x, wt, b) = (&parents[0], &parents[1], &parents[2]);
                let xd = x.data();
                let wd = wt.data();
                let mut gx = vec![E::ZERO; xd.len()];
                let mut gw = vec![E::ZERO; wd.len()];
                let mut gb = vec![E::ZERO; c];
                for y in 0..h {
                    for xx in 0..w {
                        let g_px = &g[(y * w + xx) * c..(y * w + xx + 1) * c];
                        for ch in 0..c {
                            gb[ch] += g_px[ch];
                        }
                        for dy in 0..3usize {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let sx = xx as isize + dx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let src = (sy as usize * w + sx as usize) * c;
                                for ch in 0..c {
                                    gx[src + ch] += g_px[ch] * wd[ch * 9 + dy * 3 + dx];
                                    gw[ch * 9 + dy * 3 + dx] += g_px[ch] * xd[src + ch];
                                }
                            }
                        }
                    }
                }
                if x.requires_grad() {
                    x.accumulate_grad(&gx);
                }
                if wt.requires_grad() {
                    wt.accumulate_grad(&gw);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&gb);
                }
            },
        )
    }

    // -----------------------------------------------------------------------
    // indexing / layout

    /// Row gather from a rank-2 table: `table[v, c][ids] -> [len(ids), c]`.
    /// Serves both embedding lookup and scan-order permutation.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return shape_err("embedding_lookup", "table must have rank 2");
        }
        let (v, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err(
                "embedding_lookup",
                format!("index {bad} out of range for table with {v} rows"),
            );
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        {
            let td = self.data();
            for &i in ids {
                out.extend_from_slice(&td[i * c..(i + 1) * c]);
            }
        }
        let ids_owned = ids.to_vec();
        Tensor::from_custom_op(
            "embedding_lookup",
            vec![ids.len(), c],
            out,
            &[self],
            move |g, parents| {
                let table = &parents[0];
                if table.requires_grad() {
                    let mut gt = vec![E::ZERO; table.numel()];
                    for (r, &i) in ids_owned.iter().enumerate() {
                        for ch in 0..c {
                            gt[i * c + ch] += g[r * c + ch];
                        }
                    }
                    table.accumulate_grad(&gt);
                }
            },
        )
    }

    /// Alias of [`Tensor::embedding_lookup`] for non-embedding row gathers.
    pub fn index_select0(&self, ids: &[usize]) -> Result<Tensor<E>> {
        self.embedding_lookup(ids)
    }

    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return shape_err("concat", "need at least one input");
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return shape_err("concat", format!("axis {axis} out of range"));
        }
        for p in parts {
            if p.rank() != rank {
                return shape_err("concat", "rank mismatch");
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return shape_err(
                        "concat",
                        format!("shapes differ off-axis: {:?} vs {:?}", p.shape(), parts[0].shape()),
                    );
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, _, inner) = lane_dims(&out_shape, axis);
        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total_block: usize = blocks.iter().sum();
        let mut out = vec![E::ZERO; outer * total_block];
        for o in 0..outer {
            let mut off = 0;
            for (p, &blk) in parts.iter().zip(&blocks) {
                let pd = p.data();
                out[o * total_block + off..o * total_block + off + blk]
                    .copy_from_slice(&pd[o * blk..(o + 1) * blk]);
                off += blk;
            }
        }
        Tensor::from_custom_op("concat", out_shape, out, parts, move |g, parents| {
            let mut off = 0;
            for (p, &blk) in parents.iter().zip(&blocks) {
                if p.requires_grad() {
                    let mut gp = vec![E::ZERO; outer * blk];
                    for o in 0..outer {
                        gp[o * blk..(o + 1) * blk]
                            .copy_from_slice(&g[o * total_block + off..o * total_block + off + blk]);
                    }
                    p.accumulate_grad(&gp);
                }
                off += blk;
            }
        })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return shape_err("slice", format!("axis {axis} out of range"));
        }
        let dim = self.shape()[axis];
        if start + len > dim || len == 0 {
            return shape_err(
                "slice",
                format!("range {start}..{} out of bounds for dim {dim}", start + len),
            );
        }
        let (outer, _, inner) = lane_dims(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut out = vec![E::ZERO; outer * len * inner];
        {
            let xd = self.data();
            for o in 0..outer {
                let src = (o * dim + start) * inner;
                out[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&xd[src..src + len * inner]);
            }
        }
        Tensor::from_custom_op("slice", out_shape, out, &[self], move |g, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                let mut gx = vec![E::ZERO; x.numel()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                x.accumulate_grad(&gx);
            }
        })
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() || new_shape.iter().any(|&d| d == 0) {
            return shape_err(
                "reshape",
                format!("cannot reshape {:?} to {:?}", self.shape(), new_shape),
            );
        }
        let data = self.data_vec();
        Tensor::from_custom_op(
            "reshape",
            new_shape.to_vec(),
            data,
            &[self],
            |g, parents| parents[0].accumulate_grad(g),
        )
    }

    /// Axis permutation (a copying transpose).
    pub fn transpose(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err(
                "transpose",
                format!("{:?} is not a permutation of 0..{rank}", perm),
            );
        }
        let (out_shape, out) = permute_raw(self.shape(), perm, &self.data());
        let perm_owned = perm.to_vec();
        let in_shape = self.shape().to_vec();
        Tensor::from_custom_op("transpose", out_shape, out, &[self], move |g, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                let fwd_shape: Vec<usize> = perm_owned.iter().map(|&p| in_shape[p]).collect();
                let (_, gx) = permute_raw(&fwd_shape, &inverse_perm(&perm_owned), g);
                x.accumulate_grad(&gx);
            }
        })
    }

    /// Rank-2 transpose shorthand.
    pub fn t2(&self) -> Result<Tensor<E>> {
        self.transpose(&[1, 0])
    }

    // -----------------------------------------------------------------------
    // lane ops (softmax, layer_norm, reductions)

    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return shape_err("softmax", format!("axis {axis} out of range"));
        }
        let (outer, lane, inner) = lane_dims(self.shape(), axis);
        let mut out = vec![E::ZERO; self.numel()];
        {
            let xd = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for l in 0..lane {
                        max = max.max(xd[base + l * inner].to_f64());
                    }
                    let mut sum = 0.0;
                    for l in 0..lane {
                        sum += (xd[base + l * inner].to_f64() - max).exp();
                    }
                    for l in 0..lane {
                        out[base + l * inner] =
                            E::from_f64((xd[base + l * inner].to_f64() - max).exp() / sum);
                    }
                }
            }
        }
        let y_saved = out.clone();
        Tensor::from_custom_op(
            "softmax",
            self.shape().to_vec(),
            out,
            &[self],
            move |g, parents| {
                let x = &parents[0];
                if x.requires_grad() {
                    let mut gx = vec![E::ZERO; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dot += g[idx].to_f64() * y_saved[idx].to_f64();
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                gx[idx] = E::from_f64(
                                    y_saved[idx].to_f64() * (g[idx].to_f64() - dot),
                                );
                            }
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            },
        )
    }

    /// Layer normalization along `axis` with learned `gamma`/`beta` of length
    /// `shape[axis]`.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        axis: usize,
        eps: f64,
    ) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return shape_err("layer_norm", format!("axis {axis} out of range"));
        }
        let (outer, lane, inner) = lane_dims(self.shape(), axis);
        if gamma.shape() != [lane] || beta.shape() != [lane] {
            return shape_err("layer_norm", format!("gamma/beta must be [{lane}]"));
        }
        let mut out = vec![E::ZERO; self.numel()];
        let mut xhat = vec![0f64; self.numel()];
        let mut inv_std = vec![0f64; outer * inner];
        {
            let xd = self.data();
            let gd = gamma.data();
            let bd = beta.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut mean = 0.0;
                    for l in 0..lane {
                        mean += xd[base + l * inner].to_f64();
                    }
                    mean /= lane as f64;
                    let mut var = 0.0;
                    for l in 0..lane {
                        let d = xd[base + l * inner].to_f64() - mean;
                        var += d * d;
                    }
                    var /= lane as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[o * inner + i] = inv;
                    for l in 0..lane {
                        let idx = base + l * inner;
                        let xh = (xd[idx].to_f64() - mean) * inv;
                        xhat[idx] = xh;
                        out[idx] = E::from_f64(gd[l].to_f64() * xh + bd[l].to_f64());
                    }
                }
            }
        }
        Tensor::from_custom_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            move |g, parents| {
                let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
                let gd = gamma.data();
                let n = lane as f64;
                if x.requires_grad() {
                    let mut gx = vec![E::ZERO; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let inv = inv_std[o * inner + i];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for l in 0..lane {
                                let idx = base + l * inner;
                                let gg = g[idx].to_f64() * gd[l].to_f64();
                                m1 += gg;
                                m2 += gg * xhat[idx];
                            }
                            m1 /= n;
                            m2 /= n;
                            for l in 0..lane {
                                let idx = base + l * inner;
                                let gg = g[idx].to_f64() * gd[l].to_f64();
                                gx[idx] = E::from_f64(inv * (gg - m1 - xhat[idx] * m2));
                            }
                        }
                    }
                    x.accumulate_grad(&gx);
                }
                if gamma.requires_grad() {
                    let mut gg = vec![E::ZERO; lane];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            for l in 0..lane {
                                let idx = base + l * inner;
                                gg[l] += E::from_f64(g[idx].to_f64() * xhat[idx]);
                            }
                        }
                    }
                    gamma.accumulate_grad(&gg);
                }
                if beta.requires_grad() {
                    let mut gb = vec![E::ZERO; lane];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            for l in 0..lane {
                                gb[l] += g[base + l * inner];
                            }
                        }
                    }
                    beta.accumulate_grad(&gb);
                }
            },
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<E>> {
        let op: &'static str = if mean { "mean" } else { "sum" };
        if axis >= self.rank() {
            return shape_err(op, format!("axis {axis} out of range"));
        }
        let (outer, lane, inner) = lane_dims(self.shape(), axis);
        let scale = if mean { 1.0 / lane as f64 } else { 1.0 };
        let mut out = vec![E::ZERO; outer * inner];
        {
            let xd = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut acc = 0.0;
                    for l in 0..lane {
                        acc += xd[base + l * inner].to_f64();
                    }
                    out[o * inner + i] = E::from_f64(acc * scale);
                }
            }
        }
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Tensor::from_custom_op(op, out_shape, out, &[self], move |g, parents| {
            let x = &parents[0];
            if x.requires_grad() {
                let mut gx = vec![E::ZERO; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = E::from_f64(g[o * inner + i].to_f64() * scale);
                        let base = o * lane * inner + i;
                        for l in 0..lane {
                            gx[base + l * inner] = gv;
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }
        })
    }

    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let total: f64 = self.data().iter().map(|v| v.to_f64()).sum();
        let n = self.numel();
        let _ = n;
        Tensor::from_custom_op(
            "sum",
            vec![1],
            vec![E::from_f64(total)],
            &[self],
            |g, parents| {
                let x = &parents[0];
                if x.requires_grad() {
                    let gx = vec![g[0]; x.numel()];
                    x.accumulate_grad(&gx);
                }
            },
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let n = self.numel() as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    // -----------------------------------------------------------------------
    // losses

    /// Summed token cross-entropy over `[t, v]` logits with integer targets.
    /// Rows where `mask` is false contribute nothing. Returns the scalar sum
    /// and the number of counted rows.
    pub fn cross_entropy_sum(
        &self,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<(Tensor<E>, usize)> {
        if self.rank() != 2 {
            return shape_err("cross_entropy", "logits must be [t, v]");
        }
        let (t, v) = (self.shape()[0], self.shape()[1]);
        if targets.len() != t {
            return shape_err(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), t),
            );
        }
        if let Some(m) = mask {
            if m.len() != t {
                return shape_err("cross_entropy", "mask length must match rows");
            }
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!("target class {bad} out of range for {v} classes"),
            });
        }
        let counted: Vec<bool> = (0..t)
            .map(|r| mask.map_or(true, |m| m[r]))
            .collect();
        let count = counted.iter().filter(|&&c| c).count();
        let mut probs = vec![0f64; t * v];
        let mut loss = 0.0;
        {
            let xd = self.data();
            for r in 0..t {
                let row = &xd[r * v..(r + 1) * v];
                let max = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, x) in row.iter().enumerate() {
                    let e = (x.to_f64() - max).exp();
                    probs[r * v + j] = e;
                    sum += e;
                }
                for j in 0..v {
                    probs[r * v + j] /= sum;
                }
                if counted[r] {
                    let lse = max + sum.ln();
                    loss += lse - row[targets[r]].to_f64();
                }
            }
        }
        let targets_owned = targets.to_vec();
        let out = Tensor::from_custom_op(
            "cross_entropy",
            vec![1],
            vec![E::from_f64(loss)],
            &[self],
            move |g, parents| {
                let x = &parents[0];
                if x.requires_grad() {
                    let gs = g[0].to_f64();
                    let mut gx = vec![E::ZERO; t * v];
                    for r in 0..t {
                        if !counted[r] {
                            continue;
                        }
                        for j in 0..v {
                            let p = probs[r * v + j];
                            let onehot = if j == targets_owned[r] { 1.0 } else { 0.0 };
                            gx[r * v + j] = E::from_f64(gs * (p - onehot));
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            },
        )?;
        Ok((out, count))
    }

    /// Mean token cross-entropy over counted rows.
    pub fn cross_entropy(&self, targets: &[usize], mask: Option<&[bool]>) -> Result<Tensor<E>> {
        let (sum, count) = self.cross_entropy_sum(targets, mask)?;
        if count == 0 {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: "no rows selected by the mask".into(),
            });
        }
        sum.mul_scalar(1.0 / count as f64)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != target.shape() {
            return shape_err(
                "l1_loss",
                format!("{:?} vs {:?}", self.shape(), target.shape()),
            );
        }
        self.sub(target)?.abs()?.mean_all()
    }
}

// ---------------------------------------------------------------------------
// scalar math helpers shared with module code

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn dgelu_f64(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
