//! Finite-difference verification of every kernel and of the full objective.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::model::{Batch, LossOptions, LossToggles, Model, ModelConfig};
use crate::nn::{
    conv2d, conv2d_backward, gelu, gelu_backward, grad_check, layer_norm, layer_norm_backward, linear_backward,
    linear_forward, relu, relu_backward, softmax_rows, softmax_rows_backward, truncated_normal, Attention,
    AttentionConfig, GradCheckReport, Grads, ParamStore, Tensor, WeightInit, DEFAULT_EPS,
};
use crate::objectives::{sample_hard_negatives, SimilarityMatrix};
use crate::reconstruction::CoefficientConfig;

#[derive(Clone, Debug)]
pub struct KernelCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn weighted_sum(out: &Tensor, c: &Tensor) -> f64 {
    out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Checks each kernel on a random small problem with loss `Σ c ⊙ out`.
pub fn kernel_grad_checks(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let x = s.add("x", truncated_normal(&[3, 4], 1.0, &mut rng));
    let w = s.add("w", truncated_normal(&[4, 5], 1.0, &mut rng));
    let b = s.add("b", truncated_normal(&[5], 1.0, &mut rng));
    let c = truncated_normal(&[3, 5], 1.0, &mut rng);
    let report = grad_check(
        |st, g| {
            let y = linear_forward(st.value(x), st.value(w), Some(st.value(b)))?;
            if let Some(g) = g {
                let (mut dw, mut db) = (Tensor::zeros(&[4, 5]), Tensor::zeros(&[5]));
                let dx = linear_backward(st.value(x), st.value(w), &c, &mut dw, Some(&mut db));
                g.accumulate(x, &dx);
                g.accumulate(w, &dw);
                g.accumulate(b, &db);
            }
            Ok(weighted_sum(&y, &c))
        },
        &mut s,
        DEFAULT_EPS,
    )?;
    out.push(KernelCheck { name: "linear", report });

    let mut s = ParamStore::new();
    let x = s.add("x", truncated_normal(&[3, 5], 2.0, &mut rng));
    let c = truncated_normal(&[3, 5], 1.0, &mut rng);
    let report = grad_check(
        |st, g| {
            let y = softmax_rows(st.value(x));
            if let Some(g) = g {
                g.accumulate(x, &softmax_rows_backward(&y, &c));
            }
            Ok(weighted_sum(&y, &c))
        },
        &mut s,
        DEFAULT_EPS,
    )?;
    out.push(KernelCheck { name: "softmax", report });

    let mut s = ParamStore::new();
    let x = s.add("x", truncated_normal(&[3, 6], 1.5, &mut rng));
    let gm = s.add("gamma", uniform(&[6], 0.5, 1.5, &mut rng));
    let bt = s.add("beta", truncated_normal(&[6], 1.0, &mut rng));
    let c = truncated_normal(&[3, 6], 1.0, &mut rng);
    let report = grad_check(
        |st, g| {
            let (y, cache) = layer_norm(st.value(x), st.value(gm), st.value(bt))?;
            if let Some(g) = g {
                let (mut dg, mut db) = (Tensor::zeros(&[6]), Tensor::zeros(&[6]));
                let dx = layer_norm_backward(&cache, st.value(gm), &c, &mut dg, &mut db);
                g.accumulate(x, &dx);
                g.accumulate(gm, &dg);
                g.accumulate(bt, &db);
            }
            Ok(weighted_sum(&y, &c))
        },
        &mut s,
        DEFAULT_EPS,
    )?;
    out.push(KernelCheck { name: "layer_norm", report });

    let mut s = ParamStore::new();
    let x = s.add("x", truncated_normal(&[3, 4], 1.5, &mut rng));
    let c = truncated_normal(&[3, 4], 1.0, &mut rng);
    let report = grad_check(
        |st, g| {
            if let Some(g) = g {
                g.accumulate(x, &gelu_backward(st.value(x), &c));
            }
            Ok(weighted_sum(&gelu(st.value(x)), &c))
        },
        &mut s,
        DEFAULT_EPS,
    )?;
    out.push(KernelCheck { name: "gelu", report });

    let mut s = ParamStore::new();
    let away: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = s.add("x", Tensor::new(&[3, 4], away).unwrap());
    let c = truncated_normal(&[3, 4], 1.0, &mut rng);
    let report = grad_check(
        |st, g| {
            if let Some(g) = g {
                g.accumulate(x, &relu_backward(st.value(x), &c));
            }
            Ok(weighted_sum(&relu(st.value(x)), &c))
        },
        &mut s,
        DEFAULT_EPS,
    )?;
    out.push(KernelCheck { name: "relu", report });

    let mut s = ParamStore::new();
    let x = s.add("x", truncated_normal(&[2, 4, 5], 1.0, &mut rng));
    let k = s.add("kernel", truncated_normal(&[3, 2, 3, 3], 1.0, &mut rng));
    let c = truncated_normal(&[3, 4, 5], 1.0, &mut rng);
    let report = grad_check(
        |st, g| {
            let y = conv2d(st.value(x), st.value(k))?;
            if let Some(g) = g {
                let mut dk = Tensor::zeros(&[3, 2, 3, 3]);
                let dx = conv2d_backward(st.value(x), st.value(k), &c, &mut dk);
                g.accumulate(x, &dx);
                g.accumulate(k, &dk);
            }
            Ok(weighted_sum(&y, &c))
        },
        &mut s,
        DEFAULT_EPS,
    )?;
    out.push(KernelCheck { name: "conv2d", report });

    let mut s = ParamStore::new();
    let cfg = AttentionConfig::new(2, 8)?;
    let attn = Attention::new(&mut s, "attn", cfg, WeightInit::default(), &mut rng);
    for p in s.iter_mut() {
        p.value = truncated_normal(p.value.shape(), 0.5, &mut rng);
    }
    let q = s.add("q", truncated_normal(&[3, 8], 1.0, &mut rng));
    let kv = s.add("kv", truncated_normal(&[5, 8], 1.0, &mut rng));
    let c = truncated_normal(&[3, 8], 1.0, &mut rng);
    let ca = truncated_normal(&[2, 3, 5], 1.0, &mut rng);
    let report = grad_check(
        |st, g| {
            let (y, probs, cache) = attn.forward(st, st.value(q), st.value(kv))?;
            if let Some(g) = g {
                let (dq, dkv) = attn.backward(st, &cache, &c, Some(&ca), g);
                g.accumulate(q, &dq);
                g.accumulate(kv, &dkv);
            }
            Ok(weighted_sum(&y, &c) + weighted_sum(&probs, &ca))
        },
        &mut s,
        DEFAULT_EPS,
    )?;
    out.push(KernelCheck { name: "attention", report });
    Ok(out)
}

/// Micro model for the full-objective check: 16-dim features, 4 image
/// patches and 8 clip patches (two 16 px frames of 8 px patches).
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            layers: 1,
            model_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            frames: 2,
            proj_dim: 8,
            position_embedding: true,
            init: WeightInit::default(),
        },
        decoder: DecoderConfig {
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            init: WeightInit::default(),
        },
        coefficients: CoefficientConfig::default(),
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveCheck {
    pub report: GradCheckReport,
    pub loss: f64,
    pub elapsed: Duration,
}

/// Checks the gradient of `L_c + L_m + α·L_r` on a random two-pair batch,
/// with negatives fixed at their initial selection.
pub fn objective_grad_check(cfg: &ModelConfig, opts: &LossOptions, seed: u64) -> Result<ObjectiveCheck> {
    let start = Instant::now();
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let e = &cfg.encoder;
    let shape = [e.channels, e.image_size, e.image_size];
    let batch = Batch {
        images: (0..2).map(|_| uniform(&shape, -1.0, 1.0, &mut rng)).collect(),
        clips: (0..2)
            .map(|_| (0..e.frames).map(|_| uniform(&shape, -1.0, 1.0, &mut rng)).collect())
            .collect(),
    };
    let opts = LossOptions {
        toggles: LossToggles {
            icl: true,
            pmd: true,
            pfr: true,
        },
        ..opts.clone()
    };
    let gi: Vec<Tensor> = batch.images.iter().map(|i| model.encode_image(&store, i).map(|r| r.1.vec)).collect::<Result<_>>()?;
    let gv: Vec<Tensor> = batch.clips.iter().map(|c| model.encode_clip(&store, c).map(|r| r.1.vec)).collect::<Result<_>>()?;
    let negs = sample_hard_negatives(&SimilarityMatrix::from_embeddings(&gi, &gv, opts.temperature)?, opts.negatives);
    let report = grad_check(
        |st, g: Option<&mut Grads>| Ok(model.objective(st, &batch, &opts, Some(&negs), &mut rng, g)?.total),
        &mut store,
        DEFAULT_EPS,
    )?;
    let loss = model.objective(&store, &batch, &opts, Some(&negs), &mut rng, None)?.total;
    Ok(ObjectiveCheck {
        report,
        loss,
        elapsed: start.elapsed(),
    })
}
