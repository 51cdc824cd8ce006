//! Central-difference gradient checking in f64.

use crate::error::{Result, TensorError};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of `f` against central finite
/// differences over every entry of every non-frozen parameter in `store`.
///
/// Returns the maximum of `|analytic - numeric| / max(1, |numeric|)`.
/// `f` must be deterministic; it is evaluated twice up front and a bitwise
/// disagreement is reported as an error.
pub fn grad_check<F>(f: F, store: &ParamStore<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
{
    let first = f(store)?;
    if first.numel() != 1 {
        return Err(TensorError::Contract {
            op: "grad_check",
            msg: format!("function must return a scalar, got {:?}", first.shape()),
        });
    }
    let second = f(store)?;
    if first.item().to_bits() != second.item().to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    store.zero_grads();
    second.backward()?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .trainable()
        .map(|(p, t)| (p.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
        .collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = crate::tensor::no_grad();
        let v = f(s)?.item();
        drop(g);
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for (path, grads) in &analytic {
        let param = store.get(path).expect("trainable path exists");
        let mut values = param.data_vec();
        for i in 0..values.len() {
            let orig = values[i];
            values[i] = orig + eps;
            param.set_data(&values);
            let plus = eval(store)?;
            values[i] = orig - eps;
            param.set_data(&values);
            let minus = eval(store)?;
            values[i] = orig;
            param.set_data(&values);
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (grads[i] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

pub const DEFAULT_EPS: f64 = 1e-5;
