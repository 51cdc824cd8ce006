//! Gradient checks for every op in the differentiable set: 10 random shapes
//! per op, f64, central differences, max relative error < 1e-6.

use vqla_tensor::{grad_check, init_gaussian, ParamStore, Result, SeededRng, Tensor, DEFAULT_EPS};

const TOL: f64 = 1e-6;

fn store_with(names_shapes: &[(&str, &[usize])], rng: &mut SeededRng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (name, shape) in names_shapes {
        store
            .insert(name.to_string(), init_gaussian(shape, 1.0, rng))
            .unwrap();
    }
    store
}

fn check_n<F>(op: &str, n: usize, mut build: F)
where
    F: FnMut(&mut SeededRng) -> (ParamStore<f64>, Box<dyn Fn(&ParamStore<f64>) -> Result<Tensor<f64>>>),
{
    let mut rng = SeededRng::new(0xC0FFEE ^ op.len() as u64);
    for trial in 0..n {
        let (store, f) = build(&mut rng);
        let err = grad_check(|s| f(s), &store, DEFAULT_EPS)
            .unwrap_or_else(|e| panic!("{op} trial {trial}: {e}"));
        assert!(err < TOL, "{op} trial {trial}: max rel error {err}");
    }
}

fn rand_dims(rng: &mut SeededRng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| lo + rng.below(hi - lo + 1)).collect()
}

#[test]
fn grad_matmul() {
    check_n("matmul", 10, |rng| {
        let d = rand_dims(rng, 3, 1, 5);
        let (m, k, n) = (d[0], d[1], d[2]);
        let store = store_with(&[("a", &[m, k]), ("b", &[k, n])], rng);
        (
            store,
            Box::new(|s: &ParamStore<f64>| s.get("a").unwrap().matmul(s.get("b").unwrap())?.sum_all()),
        )
    });
}

#[test]
fn grad_matmul_batched() {
    check_n("matmul_batched", 10, |rng| {
        let d = rand_dims(rng, 4, 1, 4);
        let (b, m, k, n) = (d[0], d[1], d[2], d[3]);
        let store = store_with(&[("a", &[b, m, k]), ("b", &[b, k, n])], rng);
        (
            store,
            Box::new(|s: &ParamStore<f64>| s.get("a").unwrap().matmul(s.get("b").unwrap())?.sum_all()),
        )
    });
}

#[test]
fn grad_binary_elementwise() {
    for op in ["add", "sub", "mul", "div", "maximum", "minimum"] {
        check_n(op, 10, move |rng| {
            let shape = rand_dims(rng, 2, 1, 6);
            let mut store = store_with(&[("a", &shape)], rng);
            // div needs a denominator bounded away from zero
            let b_raw = init_gaussian::<f64>(&shape, 1.0, rng);
            let b_data: Vec<f64> = b_raw
                .data_vec()
                .iter()
                .map(|v| if op == "div" { v.abs() + 0.5 } else { *v })
                .collect();
            store
                .insert("b", Tensor::from_vec(&shape, b_data).unwrap())
                .unwrap();
            (
                store,
                Box::new(move |s: &ParamStore<f64>| {
                    let a = s.get("a").unwrap();
                    let b = s.get("b").unwrap();
                    let y = match op {
                        "add" => a.add(b)?,
                        "sub" => a.sub(b)?,
                        "mul" => a.mul(b)?,
                        "div" => a.div(b)?,
                        "maximum" => a.maximum(b)?,
                        _ => a.minimum(b)?,
                    };
                    // weight the output so every entry has a distinct gradient
                    y.mul(&y)?.sum_all()
                }),
            )
        });
    }
}

#[test]
fn grad_broadcast_small_side() {
    check_n("broadcast", 10, |rng| {
        let c = 1 + rng.below(5);
        let t = 1 + rng.below(5);
        let store = store_with(&[("x", &[t, c]), ("b", &[c])], rng);
        (
            store,
            Box::new(|s: &ParamStore<f64>| {
                let y = s.get("x").unwrap().mul(s.get("b").unwrap())?;
                y.mul(&y)?.sum_all()
            }),
        )
    });
}

#[test]
fn grad_unary_elementwise() {
    for op in ["exp", "softplus", "sigmoid", "silu", "gelu", "tanh", "abs"] {
        check_n(op, 10, move |rng| {
            let shape = rand_dims(rng, 2, 1, 6);
            let store = store_with(&[("x", &shape)], rng);
            (
                store,
                Box::new(move |s: &ParamStore<f64>| {
                    let x = s.get("x").unwrap();
                    let y = match op {
                        "exp" => x.exp()?,
                        "softplus" => x.softplus()?,
                        "sigmoid" => x.sigmoid()?,
                        "silu" => x.silu()?,
                        "gelu" => x.gelu()?,
                        "tanh" => x.tanh()?,
                        _ => x.abs()?,
                    };
                    y.mul(&y)?.sum_all()
                }),
            )
        });
    }
}

#[test]
fn grad_softmax() {
    check_n("softmax", 10, |rng| {
        let shape = rand_dims(rng, 2, 2, 6);
        let axis = rng.below(2);
        let store = store_with(&[("x", &shape)], rng);
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let y = s.get("x").unwrap().softmax(axis)?;
                y.mul(&y)?.sum_all()
            }),
        )
    });
}

#[test]
fn grad_layer_norm() {
    check_n("layer_norm", 10, |rng| {
        let t = 1 + rng.below(4);
        let c = 2 + rng.below(5);
        let store = store_with(&[("x", &[t, c]), ("g", &[c]), ("b", &[c])], rng);
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let y = s.get("x").unwrap().layer_norm(
                    s.get("g").unwrap(),
                    s.get("b").unwrap(),
                    1,
                    1e-5,
                )?;
                y.mul(&y)?.sum_all()
            }),
        )
    });
}

#[test]
fn grad_linear() {
    check_n("linear", 10, |rng| {
        let d = rand_dims(rng, 3, 1, 5);
        let (t, i, o) = (d[0], d[1], d[2]);
        let store = store_with(&[("x", &[t, i]), ("w", &[o, i]), ("b", &[o])], rng);
        (
            store,
            Box::new(|s: &ParamStore<f64>| {
                let y = s.get("x").unwrap().linear(s.get("w").unwrap(), s.get("b"))?;
                y.mul(&y)?.sum_all()
            }),
        )
    });
}

#[test]
fn grad_depthwise_conv2d() {
    check_n("depthwise_conv2d", 10, |rng| {
        let h = 1 + rng.below(4);
        let w = 1 + rng.below(4);
        let c = 1 + rng.below(4);
        let store = store_with(&[("x", &[h * w, c]), ("k", &[c, 3, 3]), ("b", &[c])], rng);
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let y = s.get("x").unwrap().depthwise_conv2d(
                    s.get("k").unwrap(),
                    s.get("b").unwrap(),
                    h,
                    w,
                )?;
                y.mul(&y)?.sum_all()
            }),
        )
    });
}

#[test]
fn grad_embedding_lookup() {
    check_n("embedding_lookup", 10, |rng| {
        let v = 3 + rng.below(5);
        let c = 1 + rng.below(4);
        let n = 1 + rng.below(6);
        let ids: Vec<usize> = (0..n).map(|_| rng.below(v)).collect();
        let store = store_with(&[("table", &[v, c])], rng);
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let y = s.get("table").unwrap().embedding_lookup(&ids)?;
                y.mul(&y)?.sum_all()
            }),
        )
    });
}

#[test]
fn grad_concat_slice() {
    check_n("concat_slice", 10, |rng| {
        let c = 1 + rng.below(4);
        let t1 = 1 + rng.below(3);
        let t2 = 1 + rng.below(3);
        let store = store_with(&[("a", &[t1, c]), ("b", &[t2, c])], rng);
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let cat = Tensor::concat(&[s.get("a").unwrap(), s.get("b").unwrap()], 0)?;
                let sl = cat.slice(0, 0, t1.min(t1 + t2 - 1).max(1))?;
                let y = sl.mul(&sl)?;
                y.sum_all()
            }),
        )
    });
}

#[test]
fn grad_reshape_transpose() {
    check_n("reshape_transpose", 10, |rng| {
        let d = rand_dims(rng, 3, 1, 4);
        let shape = vec![d[0], d[1], d[2]];
        let store = store_with(&[("x", &shape)], rng);
        let numel = d[0] * d[1] * d[2];
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let y = s
                    .get("x")
                    .unwrap()
                    .transpose(&[2, 0, 1])?
                    .reshape(&[numel])?;
                y.mul(&y)?.sum_all()
            }),
        )
    });
}

#[test]
fn grad_reductions() {
    for op in ["sum_axis", "mean_axis", "sum_all", "mean_all"] {
        check_n(op, 10, move |rng| {
            let shape = rand_dims(rng, 2, 1, 5);
            let axis = rng.below(2);
            let store = store_with(&[("x", &shape)], rng);
            (
                store,
                Box::new(move |s: &ParamStore<f64>| {
                    let x = s.get("x").unwrap();
                    let y = match op {
                        "sum_axis" => x.sum_axis(axis)?,
                        "mean_axis" => x.mean_axis(axis)?,
                        "sum_all" => x.sum_all()?,
                        _ => x.mean_all()?,
                    };
                    y.mul(&y)?.sum_all()
                }),
            )
        });
    }
}

#[test]
fn grad_cross_entropy() {
    check_n("cross_entropy", 10, |rng| {
        let t = 1 + rng.below(5);
        let v = 2 + rng.below(6);
        let targets: Vec<usize> = (0..t).map(|_| rng.below(v)).collect();
        let mask: Vec<bool> = (0..t).map(|i| i == 0 || rng.below(4) > 0).collect();
        let store = store_with(&[("logits", &[t, v])], rng);
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                s.get("logits")
                    .unwrap()
                    .cross_entropy(&targets, Some(&mask))
            }),
        )
    });
}

#[test]
fn grad_l1_loss() {
    check_n("l1_loss", 10, |rng| {
        let shape = rand_dims(rng, 1, 2, 6);
        // keep operands apart so |a - b| never sits on the kink
        let mut store = store_with(&[("a", &shape)], rng);
        let b: Vec<f64> = store
            .get("a")
            .unwrap()
            .data_vec()
            .iter()
            .map(|v| v + 1.0 + v.abs())
            .collect();
        store
            .insert("b", Tensor::from_vec(&shape, b).unwrap())
            .unwrap();
        (
            store,
            Box::new(|s: &ParamStore<f64>| s.get("a").unwrap().l1_loss(s.get("b").unwrap())),
        )
    });
}

#[test]
fn grad_clamp() {
    check_n("clamp", 10, |rng| {
        let shape = rand_dims(rng, 1, 2, 6);
        let store = store_with(&[("x", &shape)], rng);
        (
            store,
            Box::new(|s: &ParamStore<f64>| {
                let y = s.get("x").unwrap().clamp(-0.8, 0.8)?;
                y.mul(&y)?.sum_all()
            }),
        )
    });
}
