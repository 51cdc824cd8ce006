//! Compares the selective-scan implementation against a naive per-step
//! recurrence, then runs a four-direction grid scan and shows the merge.
//!
//! ```bash
//! cargo run --release --example scan_oracle
//! ```

use vqla::encoder::GridTokens;
use vqla::vp_lora::{selective_scan_1d, ss2d_forward, Ss2dParams};
use vqla_tensor::{init_gaussian, SeededRng, Tensor};

fn naive_scan(
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    d: &[f64],
    t_len: usize,
    ch: usize,
    n: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; t_len * ch];
    for cc in 0..ch {
        let mut h = vec![0.0; n];
        for t in 0..t_len {
            let dt = delta[t * ch + cc];
            for s in 0..n {
                h[s] = (dt * a[cc * n + s]).exp() * h[s] + dt * b[t * n + s] * u[t * ch + cc];
            }
            let mut dot = 0.0;
            for s in 0..n {
                dot += c[t * n + s] * h[s];
            }
            y[t * ch + cc] = dot + d[cc] * u[t * ch + cc];
        }
    }
    y
}

fn main() {
    let mut rng = SeededRng::new(404);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let t = 1 + rng.below(64);
        let ch = 1 + rng.below(16);
        let n = 1 + rng.below(8);
        let u: Tensor<f64> = init_gaussian(&[t, ch], 1.0, &mut rng);
        let delta = Tensor::from_vec(
            &[t, ch],
            (0..t * ch).map(|_| 0.01 + rng.uniform()).collect(),
        )
        .unwrap();
        let b: Tensor<f64> = init_gaussian(&[t, n], 1.0, &mut rng);
        let c: Tensor<f64> = init_gaussian(&[t, n], 1.0, &mut rng);
        let a = Tensor::from_vec(
            &[ch, n],
            (0..ch * n).map(|_| -(0.1 + rng.uniform() * 3.0)).collect(),
        )
        .unwrap();
        let d: Tensor<f64> = init_gaussian(&[ch], 1.0, &mut rng);

        let fast = selective_scan_1d(&u, &delta, &b, &c, &a, &d).unwrap();
        let slow = naive_scan(
            &u.data_vec(),
            &delta.data_vec(),
            &b.data_vec(),
            &c.data_vec(),
            &a.data_vec(),
            &d.data_vec(),
            t,
            ch,
            n,
        );
        let diff = fast
            .data_vec()
            .iter()
            .zip(&slow)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        if trial < 5 {
            println!("trial {trial}: t={t} ch={ch} n={n}  max |fast - naive| = {diff:.2e}");
        }
    }
    println!("worst over 50 instances: {worst:.2e} (bound 1e-10)");
    assert!(worst < 1e-10);

    // four directional scans over a 4x4 grid, merged by summation
    let params = Ss2dParams::<f64>::new(8, 4, &mut rng);
    let grid = GridTokens::new(init_gaussian(&[16, 8], 1.0, &mut rng), 4, 4).unwrap();
    let out = ss2d_forward(&grid, &params).unwrap();
    println!(
        "grid scan: {}x{} x {} channels -> {:?}",
        grid.h,
        grid.w,
        grid.channels(),
        out.tokens.shape()
    );
}
