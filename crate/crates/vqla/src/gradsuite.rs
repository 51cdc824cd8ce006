//! f64 gradient-check suite across every differentiable module, runnable
//! from the `gradcheck` subcommand and the acceptance tests.

use vqla_tensor::{
    grad_check, init_gaussian, ParamStore, Result as TResult, SeededRng, Tensor, TensorError,
    DEFAULT_EPS,
};

use crate::decoder::{DecoderConfig, VlDecoder, Vocab};
use crate::encoder::{GridTokens, VitBlock};
use crate::grounding::{vqla_loss, AnswerVocab, BBox, GroundingHead};
use crate::nn::Linear;
use crate::projection::{ProjectionTit, TitConfig};
use crate::vp_lora::{selective_scan_1d, ss2d_forward, Ss2dParams, VpLoraLinear, VssBlock};

pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub module: String,
    pub max_rel_error: f64,
    pub instances: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn contract(msg: &str) -> TensorError {
    TensorError::Contract {
        op: "gradsuite",
        msg: msg.to_string(),
    }
}

type Case = (
    ParamStore<f64>,
    Box<dyn Fn(&ParamStore<f64>) -> TResult<Tensor<f64>>>,
);

fn check_module_eps(
    name: &str,
    instances: usize,
    seed: u64,
    eps: f64,
    mut build: impl FnMut(&mut SeededRng) -> Case,
) -> SuiteEntry {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (store, f) = build(&mut rng);
        let err = grad_check(|s| f(s), &store, eps).unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(err);
    }
    SuiteEntry {
        module: name.to_string(),
        max_rel_error: worst,
        instances,
    }
}

fn check_module(
    name: &str,
    instances: usize,
    seed: u64,
    build: impl FnMut(&mut SeededRng) -> Case,
) -> SuiteEntry {
    check_module_eps(name, instances, seed, DEFAULT_EPS, build)
}

fn squared_sum(t: &Tensor<f64>) -> TResult<Tensor<f64>> {
    t.mul(t)?.sum_all()
}

/// Runs every module's gradient check; `instances` random instances each.
pub fn run_suite(instances: usize, seed: u64) -> Vec<SuiteEntry> {
    let mut entries = Vec::new();

    entries.push(check_module("tensor_ops", instances, seed ^ 0x01, |rng| {
        let t = 2 + rng.below(3);
        let c = 2 + rng.below(3);
        let mut store = ParamStore::new();
        store.insert("x", init_gaussian(&[t, c], 1.0, rng)).unwrap();
        store.insert("w", init_gaussian(&[c, c], 1.0, rng)).unwrap();
        store.insert("g", init_gaussian(&[c], 1.0, rng)).unwrap();
        store.insert("b", init_gaussian(&[c], 1.0, rng)).unwrap();
        (
            store,
            Box::new(|s: &ParamStore<f64>| {
                // a chain that touches matmul, norm, softmax, activations
                let x = s.get("x").unwrap();
                let h = x.matmul(s.get("w").unwrap())?;
                let h = h.layer_norm(s.get("g").unwrap(), s.get("b").unwrap(), 1, 1e-5)?;
                let h = h.gelu()?.softmax(1)?;
                squared_sum(&h)
            }),
        )
    }));

    entries.push(check_module("selective_scan", instances, seed ^ 0x02, |rng| {
        let (t, ch, n) = (1 + rng.below(4), 1 + rng.below(3), 1 + rng.below(3));
        let mut store = ParamStore::new();
        store.insert("u", init_gaussian(&[t, ch], 1.0, rng)).unwrap();
        let delta: Vec<f64> = (0..t * ch).map(|_| 0.05 + rng.uniform()).collect();
        store
            .insert("delta", Tensor::from_vec(&[t, ch], delta).unwrap())
            .unwrap();
        store.insert("b", init_gaussian(&[t, n], 1.0, rng)).unwrap();
        store.insert("c", init_gaussian(&[t, n], 1.0, rng)).unwrap();
        let a: Vec<f64> = (0..ch * n).map(|_| -(0.2 + rng.uniform() * 2.0)).collect();
        store
            .insert("a", Tensor::from_vec(&[ch, n], a).unwrap())
            .unwrap();
        store.insert("d", init_gaussian(&[ch], 1.0, rng)).unwrap();
        (
            store,
            Box::new(|s: &ParamStore<f64>| {
                let y = selective_scan_1d(
                    s.get("u").unwrap(),
                    s.get("delta").unwrap(),
                    s.get("b").unwrap(),
                    s.get("c").unwrap(),
                    s.get("a").unwrap(),
                    s.get("d").unwrap(),
                )?;
                squared_sum(&y)
            }),
        )
    }));

    entries.push(check_module("ss2d", instances, seed ^ 0x03, |rng| {
        let (h, w, ch) = (1 + rng.below(2), 1 + rng.below(2), 2);
        let params = Ss2dParams::<f64>::new(ch, 2, rng);
        let mut store = ParamStore::new();
        params.visit("ss2d", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store
            .insert("x", init_gaussian(&[h * w, ch], 1.0, rng))
            .unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let grid = GridTokens::new(s.get("x").unwrap().clone(), h, w)
                    .map_err(|_| contract("grid"))?;
                let out = ss2d_forward(&grid, &params).map_err(|_| contract("ss2d"))?;
                squared_sum(&out.tokens)
            }),
        )
    }));

    entries.push(check_module("vss_block", instances, seed ^ 0x04, |rng| {
        let block = VssBlock::<f64>::new(4, 4, 2, rng);
        block
            .lin_out
            .weight
            .set_data(&init_gaussian::<f64>(&[4, 4], 0.3, rng).data_vec());
        let mut store = ParamStore::new();
        block.visit("vss", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store.insert("x", init_gaussian(&[4, 4], 1.0, rng)).unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let grid = GridTokens::new(s.get("x").unwrap().clone(), 2, 2)
                    .map_err(|_| contract("grid"))?;
                let out = block.forward(&grid).map_err(|_| contract("vss"))?;
                squared_sum(&out.tokens)
            }),
        )
    }));

    entries.push(check_module("lora_linear", instances, seed ^ 0x05, |rng| {
        let base = Linear::<f64>::new(4, 4, true, rng);
        let mut layer = VpLoraLinear::inject(base, 2, 4.0, 4, 2, rng);
        layer.factors.b = init_gaussian(&[4, 2], 0.3, rng);
        let mut store = ParamStore::new();
        layer.visit_adapter("adapter", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store.insert("x", init_gaussian(&[3, 4], 1.0, rng)).unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let y = layer
                    .lora_forward(s.get("x").unwrap())
                    .map_err(|_| contract("lora"))?;
                squared_sum(&y)
            }),
        )
    }));

    entries.push(check_module("vit_block", instances, seed ^ 0x06, |rng| {
        let block = VitBlock::<f64>::new(8, 2, rng).expect("valid block");
        let mut store = ParamStore::new();
        block.visit("vit", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store.insert("x", init_gaussian(&[4, 8], 1.0, rng)).unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let y = block.forward(s.get("x").unwrap())?;
                squared_sum(&y)
            }),
        )
    }));

    entries.push(check_module("resampler", instances, seed ^ 0x07, |rng| {
        let rs = crate::decoder::Resampler::<f64>::new(6, 8, 4, rng);
        let mut store = ParamStore::new();
        rs.visit("resampler", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store.insert("grid", init_gaussian(&[4, 6], 1.0, rng)).unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let grid = GridTokens::new(s.get("grid").unwrap().clone(), 2, 2)
                    .map_err(|_| contract("grid"))?;
                let y = rs.forward(&grid).map_err(|_| contract("resampler"))?;
                squared_sum(&y)
            }),
        )
    }));

    // the composed decoder stack has enough curvature that the probe step
    // must shrink below the default to keep truncation under the tolerance
    entries.push(check_module_eps("decoder_layer", instances, seed ^ 0x08, 1e-6, |rng| {
        // one-layer adapted decoder, loss = mean token cross-entropy
        let vocab = Vocab::build(["a b c d e f"]);
        let base = VlDecoder::<f64>::new(
            DecoderConfig {
                vocab_size: vocab.len(),
                c_lm: 8,
                layers: 1,
                heads: 2,
                context: 32,
                prefix_h: 2,
                prefix_w: 2,
            },
            rng,
        )
        .expect("valid decoder");
        let decoder = base.inject_adapters(2, 4.0, 8, 2, rng);
        for layer in &decoder.layers {
            if let crate::decoder::QvProjection::Adapted(l) = &layer.q {
                l.factors.b.set_data(&init_gaussian::<f64>(&[8, 2], 0.3, rng).data_vec());
                let shape = l.vss.lin_out.weight.shape().to_vec();
                l.vss
                    .lin_out
                    .weight
                    .set_data(&init_gaussian::<f64>(&shape, 0.3, rng).data_vec());
            }
            if let crate::decoder::QvProjection::Adapted(l) = &layer.v {
                l.factors.b.set_data(&init_gaussian::<f64>(&[8, 2], 0.3, rng).data_vec());
            }
        }
        let ids = vocab.tokenize("a c e b");
        let mut store = ParamStore::new();
        decoder.visit_base("decoder", &mut |p, t| store.insert(p, t.clone()).unwrap());
        decoder.visit_adapters("adapter", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store.insert("prefix", init_gaussian(&[4, 8], 1.0, rng)).unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let (logits, _) = decoder
                    .forward(Some(s.get("prefix").unwrap()), &ids)
                    .map_err(|_| contract("decoder"))?;
                let preds = logits.slice(0, 0, ids.len())?;
                preds.cross_entropy(&ids, None)
            }),
        )
    }));

    entries.push(check_module("projection_tit", instances, seed ^ 0x09, |rng| {
        let p = ProjectionTit::<f64>::new(
            TitConfig {
                levels: 2,
                c_in: 8,
                c_ground: 8,
            },
            rng,
        );
        let mut store = ParamStore::new();
        p.visit("projection", &mut |path, t| {
            store.insert(path, t.clone()).unwrap()
        });
        store
            .insert("hidden", init_gaussian(&[4, 8], 1.0, rng))
            .unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let out = p
                    .forward(s.get("hidden").unwrap())
                    .map_err(|_| contract("projection"))?;
                squared_sum(&out.tokens)
            }),
        )
    }));

    entries.push(check_module("grounding_head", instances, seed ^ 0x0a, |rng| {
        let answers = AnswerVocab::build(["a", "b", "c"]);
        let head = GroundingHead::<f64>::new(6, 8, answers.len(), 1, 2, rng).expect("valid head");
        let gt = BBox::new(0.4, 0.5, 0.3, 0.25).unwrap();
        let mut store = ParamStore::new();
        head.visit("ground", &mut |p, t| store.insert(p, t.clone()).unwrap());
        store.insert("text", init_gaussian(&[3, 8], 1.0, rng)).unwrap();
        store.insert("vis", init_gaussian(&[4, 6], 1.0, rng)).unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let text = crate::projection::AlignedTextEmbedding {
                    tokens: s.get("text").unwrap().clone(),
                };
                let vis = GridTokens::new(s.get("vis").unwrap().clone(), 2, 2)
                    .map_err(|_| contract("grid"))?;
                let out = head.predict(&text, &vis).map_err(|_| contract("predict"))?;
                vqla_loss(&out, 1, &gt).map_err(|_| contract("loss"))
            }),
        )
    }));

    entries.push(check_module("losses", instances, seed ^ 0x0b, |rng| {
        let t = 2 + rng.below(3);
        let v = 3 + rng.below(4);
        let targets: Vec<usize> = (0..t).map(|_| rng.below(v)).collect();
        let mut store = ParamStore::<f64>::new();
        store
            .insert("logits", init_gaussian(&[t, v], 1.0, rng))
            .unwrap();
        store.insert("a", init_gaussian(&[4], 1.0, rng)).unwrap();
        let b: Vec<f64> = store
            .get("a")
            .unwrap()
            .data_vec()
            .iter()
            .map(|x| x + 1.0 + x.abs())
            .collect();
        store
            .insert("b", Tensor::from_vec(&[4], b).unwrap())
            .unwrap();
        (
            store,
            Box::new(move |s: &ParamStore<f64>| {
                let ce = s.get("logits").unwrap().cross_entropy(&targets, None)?;
                let l1 = s.get("a").unwrap().l1_loss(s.get("b").unwrap())?;
                ce.add(&l1)
            }),
        )
    }));

    entries
}
