//! Multi-head scaled dot-product attention with input and output projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{linear_backward, linear_forward, softmax_rows, softmax_rows_backward};
use super::tensor::gemm;
use super::{Grads, ParamId, ParamStore, Tensor, WeightInit};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, model_dim: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self { heads, model_dim })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Borrowed projection weights. All matrices are `[d, d]`, biases `[d]`.
#[derive(Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
    mixed: Tensor,
}

impl AttentionCache {
    /// Attention weights `[H, Nq, Nk]`.
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

fn head_columns(x: &Tensor, h: usize, hd: usize) -> Vec<f64> {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.rows() * hd);
    for r in x.data().chunks_exact(d) {
        out.extend_from_slice(&r[h * hd..(h + 1) * hd]);
    }
    out
}

fn scatter_head(dst: &mut Tensor, src: &[f64], h: usize, hd: usize) {
    let d = dst.last_dim();
    for (r, s) in dst.data_mut().chunks_exact_mut(d).zip(src.chunks_exact(hd)) {
        r[h * hd..(h + 1) * hd].copy_from_slice(s);
    }
}

/// Returns the projected output `[Nq, d]`, the attention map `[H, Nq, Nk]`, and
/// the cache needed for the backward pass.
pub fn multi_head_attention(
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    w: AttentionWeights<'_>,
    cfg: AttentionConfig,
) -> Result<(Tensor, Tensor, AttentionCache)> {
    let d = cfg.model_dim;
    for (name, t) in [("query", q_in), ("key", k_in), ("value", v_in)] {
        if t.shape().len() != 2 || t.last_dim() != d {
            return Err(shape_err("attention", format!("{name} [_, {d}]"), format!("{:?}", t.shape())));
        }
    }
    if k_in.rows() != v_in.rows() {
        return Err(shape_err("attention keys/values", k_in.rows(), v_in.rows()));
    }
    let (nq, nk) = (q_in.rows(), k_in.rows());
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let q = linear_forward(q_in, w.wq, Some(w.bq))?;
    let k = linear_forward(k_in, w.wk, Some(w.bk))?;
    let v = linear_forward(v_in, w.wv, Some(w.bv))?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; heads * nq * nk];
    let mut mixed = Tensor::zeros(&[nq, d]);
    let mut head_out = vec![0.0; nq * hd];
    for h in 0..heads {
        let (qh, kh, vh) = (head_columns(&q, h, hd), head_columns(&k, h, hd), head_columns(&v, h, hd));
        let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(nq, hd, nk, scale, &qh, false, &kh, true, 0.0, ph);
        let scores = Tensor::new(&[nq, nk], ph.to_vec())?;
        ph.copy_from_slice(softmax_rows(&scores).data());
        gemm(nq, nk, hd, 1.0, ph, false, &vh, false, 0.0, &mut head_out);
        scatter_head(&mut mixed, &head_out, h, hd);
    }
    let out = linear_forward(&mixed, w.wo, Some(w.bo))?;
    let probs = Tensor::new(&[heads, nq, nk], probs)?;
    let cache = AttentionCache {
        q_in: q_in.clone(),
        k_in: k_in.clone(),
        v_in: v_in.clone(),
        q,
        k,
        v,
        probs: probs.clone(),
        mixed,
    };
    Ok((out, probs, cache))
}

/// Backward pass. `dattn`, when present, is an upstream gradient on the
/// returned attention map (used by consumers of the map itself).
/// Returns `(dq_in, dk_in, dv_in, weight grads)`.
pub fn multi_head_attention_backward(
    cache: &AttentionCache,
    w: AttentionWeights<'_>,
    cfg: AttentionConfig,
    dout: &Tensor,
    dattn: Option<&Tensor>,
) -> (Tensor, Tensor, Tensor, AttentionGrads) {
    let d = cfg.model_dim;
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let (nq, nk) = (cache.q.rows(), cache.k.rows());
    let mut g = AttentionGrads {
        wq: Tensor::zeros(&[d, d]),
        bq: Tensor::zeros(&[d]),
        wk: Tensor::zeros(&[d, d]),
        bk: Tensor::zeros(&[d]),
        wv: Tensor::zeros(&[d, d]),
        bv: Tensor::zeros(&[d]),
        wo: Tensor::zeros(&[d, d]),
        bo: Tensor::zeros(&[d]),
    };
    let dmixed = linear_backward(&cache.mixed, w.wo, dout, &mut g.wo, Some(&mut g.bo));
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Tensor::zeros(&[nq, d]);
    let mut dk = Tensor::zeros(&[nk, d]);
    let mut dv = Tensor::zeros(&[nk, d]);
    let mut dp = vec![0.0; nq * nk];
    let mut dvh = vec![0.0; nk * hd];
    let mut dqh = vec![0.0; nq * hd];
    let mut dkh = vec![0.0; nk * hd];
    for h in 0..heads {
        let (qh, kh, vh) = (
            head_columns(&cache.q, h, hd),
            head_columns(&cache.k, h, hd),
            head_columns(&cache.v, h, hd),
        );
        let doh = head_columns(&dmixed, h, hd);
        let ph = &cache.probs.data()[h * nq * nk..(h + 1) * nq * nk];
        // dP = dO·Vᵀ (+ upstream), dV = Pᵀ·dO
        match dattn {
            Some(da) => dp.copy_from_slice(&da.data()[h * nq * nk..(h + 1) * nq * nk]),
            None => dp.iter_mut().for_each(|v| *v = 0.0),
        }
        gemm(nq, hd, nk, 1.0, &doh, false, &vh, true, 1.0, &mut dp);
        gemm(nk, nq, hd, 1.0, ph, true, &doh, false, 0.0, &mut dvh);
        let p = Tensor::new(&[nq, nk], ph.to_vec()).unwrap();
        let ds = softmax_rows_backward(&p, &Tensor::new(&[nq, nk], dp.clone()).unwrap());
        gemm(nq, nk, hd, scale, ds.data(), false, &kh, false, 0.0, &mut dqh);
        gemm(nk, nq, hd, scale, ds.data(), true, &qh, false, 0.0, &mut dkh);
        scatter_head(&mut dq, &dqh, h, hd);
        scatter_head(&mut dk, &dkh, h, hd);
        scatter_head(&mut dv, &dvh, h, hd);
    }
    let dq_in = linear_backward(&cache.q_in, w.wq, &dq, &mut g.wq, Some(&mut g.bq));
    let dk_in = linear_backward(&cache.k_in, w.wk, &dk, &mut g.wk, Some(&mut g.bk));
    let dv_in = linear_backward(&cache.v_in, w.wv, &dv, &mut g.wv, Some(&mut g.bv));
    (dq_in, dk_in, dv_in, g)
}

/// Attention block whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionConfig,
        init: WeightInit,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.model_dim;
        let mat = |store: &mut ParamStore, n: &str, rng: &mut _| store.add(format!("{prefix}.{n}"), init.sample(&[d, d], d, rng));
        let wq = mat(store, "wq", rng);
        let wk = mat(store, "wk", rng);
        let wv = mat(store, "wv", rng);
        let wo = mat(store, "wo", rng);
        let bq = store.add(format!("{prefix}.bq"), Tensor::zeros(&[d]));
        let bk = store.add(format!("{prefix}.bk"), Tensor::zeros(&[d]));
        let bv = store.add(format!("{prefix}.bv"), Tensor::zeros(&[d]));
        let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(&[d]));
        Self { cfg, wq, bq, wk, bk, wv, bv, wo, bo }
    }

    pub fn weights<'a>(&self, store: &'a ParamStore) -> AttentionWeights<'a> {
        AttentionWeights {
            wq: store.value(self.wq),
            bq: store.value(self.bq),
            wk: store.value(self.wk),
            bk: store.value(self.bk),
            wv: store.value(self.wv),
            bv: store.value(self.bv),
            wo: store.value(self.wo),
            bo: store.value(self.bo),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        q_in: &Tensor,
        kv_in: &Tensor,
    ) -> Result<(Tensor, Tensor, AttentionCache)> {
        multi_head_attention(q_in, kv_in, kv_in, self.weights(store), self.cfg)
    }

    /// Backward for the shared key/value source; returns `(dq_in, dkv_in)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &AttentionCache,
        dout: &Tensor,
        dattn: Option<&Tensor>,
        grads: &mut Grads,
    ) -> (Tensor, Tensor) {
        let (dq, mut dk, dv, g) =
            multi_head_attention_backward(cache, self.weights(store), self.cfg, dout, dattn);
        dk.add_assign(&dv);
        grads.accumulate(self.wq, &g.wq);
        grads.accumulate(self.bq, &g.bq);
        grads.accumulate(self.wk, &g.wk);
        grads.accumulate(self.bk, &g.bk);
        grads.accumulate(self.wv, &g.wv);
        grads.accumulate(self.bv, &g.bv);
        grads.accumulate(self.wo, &g.wo);
        grads.accumulate(self.bo, &g.bo);
        (dq, dk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::nn::truncated_normal;

    struct Owned {
        t: Vec<Tensor>,
    }

    impl Owned {
        fn random(d: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = (0..8)
                .map(|i| {
                    if i % 2 == 0 {
                        truncated_normal(&[d, d], 0.5, &mut rng)
                    } else {
                        truncated_normal(&[d], 0.5, &mut rng)
                    }
                })
                .collect();
            Self { t }
        }
        fn w(&self) -> AttentionWeights<'_> {
            AttentionWeights {
                wq: &self.t[0],
                bq: &self.t[1],
                wk: &self.t[2],
                bk: &self.t[3],
                wv: &self.t[4],
                bv: &self.t[5],
                wo: &self.t[6],
                bo: &self.t[7],
            }
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        truncated_normal(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_key_returns_projected_value() {
        let cfg = AttentionConfig::new(2, 4).unwrap();
        let w = Owned::random(4, 1);
        let kv = random(&[1, 4], 2);
        let v = linear_forward(&kv, w.w().wv, Some(w.w().bv)).unwrap();
        let expected = linear_forward(&v, w.w().wo, Some(w.w().bo)).unwrap();
        for seed in 3..6 {
            let q = random(&[3, 4], seed);
            let (out, attn, _) = multi_head_attention(&q, &kv, &kv, w.w(), cfg).unwrap();
            assert!(attn.data().iter().all(|&a| a == 1.0));
            for r in 0..3 {
                for (a, b) in out.row(r).iter().zip(expected.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let cfg = AttentionConfig::new(8, 16).unwrap();
        let w = Owned::random(16, 7);
        let (_, attn, _) =
            multi_head_attention(&random(&[5, 16], 8), &random(&[9, 16], 9), &random(&[9, 16], 9), w.w(), cfg)
                .unwrap();
        assert_eq!(attn.shape(), &[8, 5, 9]);
        for r in attn.data().chunks_exact(9) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_unfused_scalar_oracle() {
        let (d, heads, nq, nk) = (8, 2, 3, 5);
        let cfg = AttentionConfig::new(heads, d).unwrap();
        let w = Owned::random(d, 11);
        let (qi, ki, vi) = (random(&[nq, d], 12), random(&[nk, d], 13), random(&[nk, d], 14));
        let (out, _, _) = multi_head_attention(&qi, &ki, &vi, w.w(), cfg).unwrap();

        let proj = |x: &Tensor, wt: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            (0..x.rows())
                .map(|r| {
                    (0..d)
                        .map(|j| b.data()[j] + (0..d).map(|i| x.row(r)[i] * wt.data()[i * d + j]).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let ws = w.w();
        let (q, k, v) = (proj(&qi, ws.wq, ws.bq), proj(&ki, ws.wk, ws.bk), proj(&vi, ws.wv, ws.bv));
        let hd = d / heads;
        let mut mixed = vec![vec![0.0; d]; nq];
        for h in 0..heads {
            for i in 0..nq {
                let s: Vec<f64> = (0..nk)
                    .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                for j in 0..nk {
                    for c in 0..hd {
                        mixed[i][h * hd + c] += s[j].exp() / z * v[j][h * hd + c];
                    }
                }
            }
        }
        for i in 0..nq {
            for j in 0..d {
                let o = ws.bo.data()[j] + (0..d).map(|c| mixed[i][c] * ws.wo.data()[c * d + j]).sum::<f64>();
                assert!((out.row(i)[j] - o).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn config_requires_divisibility() {
        assert!(AttentionConfig::new(8, 12).is_err());
        assert_eq!(AttentionConfig::new(8, 32).unwrap().head_dim(), 4);
    }
}
