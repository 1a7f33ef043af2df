//! Pairwise matching decoder.
//!
//! The image tokens `{i_cls, i_1..i_N}` are the queries. Each layer applies
//! self-attention over them, cross-attention into the clip patch features
//! `{v_1..v_M}` (no clip CLS, no key position embedding), and a feed-forward
//! sub-layer, each wrapped in a residual connection followed by layer norm.
//! The match logit is `v · x_cls` for a learned vector `v`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ViewFeatures, ViewKind};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    dot, Attention, AttentionCache, AttentionConfig, Grads, LayerNorm, LayerNormCache, Mlp,
    MlpCache, ParamId, ParamStore, Tensor, WeightInit,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub init: WeightInit,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            layers: 1,
            mlp_ratio: 4,
            init: WeightInit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub x_cls: Tensor,
    pub logit: f64,
    /// Cross-attention of the image patch queries over clip patches, `[H, N, M]`.
    pub attn: Tensor,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    ffn: Mlp,
    ln3: LayerNorm,
}

#[derive(Clone, Debug)]
struct LayerCache {
    sa: AttentionCache,
    ln1: LayerNormCache,
    ca: AttentionCache,
    ln2: LayerNormCache,
    ffn: MlpCache,
    ln3: LayerNormCache,
}

#[derive(Clone, Debug)]
pub struct DecodeCache {
    layers: Vec<LayerCache>,
    x_cls: Tensor,
    n_img: usize,
    n_vid: usize,
}

#[derive(Clone, Debug)]
pub struct PairDecoder {
    pub cfg: DecoderConfig,
    model_dim: usize,
    layers: Vec<DecoderLayer>,
    match_vec: ParamId,
}

/// Gradients flowing back out of one decode.
#[derive(Clone, Debug)]
pub struct DecodeInputGrads {
    pub img_cls: Tensor,
    pub img_patches: Tensor,
    pub vid_patches: Tensor,
}

pub fn match_score(x_cls: &Tensor, v: &Tensor) -> Result<f64> {
    if x_cls.len() != v.len() {
        return Err(shape_err("match_score", v.len(), x_cls.len()));
    }
    Ok(dot(x_cls.data(), v.data()))
}

impl PairDecoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, model_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let att_cfg = AttentionConfig::new(cfg.heads, model_dim)?;
        if cfg.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let d = model_dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("decoder.layers.{l}");
                DecoderLayer {
                    self_attn: Attention::new(store, &format!("{p}.self_attn"), att_cfg, cfg.init, rng),
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    cross_attn: Attention::new(store, &format!("{p}.cross_attn"), att_cfg, cfg.init, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ffn: Mlp::new(store, &format!("{p}.ffn"), d, d * cfg.mlp_ratio, cfg.init, rng),
                    ln3: LayerNorm::new(store, &format!("{p}.ln3"), d),
                }
            })
            .collect();
        let match_vec = store.add("decoder.match_vec", cfg.init.sample(&[d], d, rng));
        Ok(Self {
            cfg,
            model_dim,
            layers,
            match_vec,
        })
    }

    pub fn match_vec(&self) -> ParamId {
        self.match_vec
    }

    pub fn decode_pair(
        &self,
        store: &ParamStore,
        img: &ViewFeatures,
        vid: &ViewFeatures,
    ) -> Result<(DecodeResult, DecodeCache)> {
        let d = self.model_dim;
        if img.kind != ViewKind::Image || vid.kind != ViewKind::Video {
            return Err(Error::Config("decode_pair expects (image, video) features".into()));
        }
        if img.patches.last_dim() != d || vid.patches.last_dim() != d || img.cls.len() != d {
            return Err(shape_err("decode_pair", d, img.patches.last_dim()));
        }
        let (n, m) = (img.patches.rows(), vid.patches.rows());
        let mut x = Tensor::concat_rows(&[&img.cls.clone().reshape(&[1, d])?, &img.patches])?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut attn_full = None;
        for layer in &self.layers {
            let (a, _, sa) = layer.self_attn.forward(store, &x, &x)?;
            let (h1, ln1) = layer.ln1.forward(store, &x.add(&a))?;
            let (b, probs, ca) = layer.cross_attn.forward(store, &h1, &vid.patches)?;
            let (h2, ln2) = layer.ln2.forward(store, &h1.add(&b))?;
            let (f, ffn) = layer.ffn.forward(store, &h2)?;
            let (h3, ln3) = layer.ln3.forward(store, &h2.add(&f))?;
            caches.push(LayerCache { sa, ln1, ca, ln2, ffn, ln3 });
            attn_full = Some(probs);
            x = h3;
        }
        let x_cls = x.slice_rows(0, 1).reshape(&[d])?;
        let logit = match_score(&x_cls, store.value(self.match_vec))?;
        if !logit.is_finite() {
            return Err(Error::NonFinite("match logit".into()));
        }
        let attn_full = attn_full.expect("at least one layer");
        let heads = self.cfg.heads;
        let mut attn = Vec::with_capacity(heads * n * m);
        for h in 0..heads {
            let base = h * (n + 1) * m;
            attn.extend_from_slice(&attn_full.data()[base + m..base + (n + 1) * m]);
        }
        let attn = Tensor::new(&[heads, n, m], attn)?;
        Ok((
            DecodeResult {
                x_cls: x_cls.clone(),
                logit,
                attn,
            },
            DecodeCache {
                layers: caches,
                x_cls,
                n_img: n,
                n_vid: m,
            },
        ))
    }

    /// Backward from a gradient on the logit and, optionally, on the exported
    /// `[H, N, M]` attention map of the last layer.
    pub fn decode_backward(
        &self,
        store: &ParamStore,
        cache: &DecodeCache,
        dlogit: f64,
        dattn: Option<&Tensor>,
        grads: &mut Grads,
    ) -> DecodeInputGrads {
        let d = self.model_dim;
        let (n, m) = (cache.n_img, cache.n_vid);
        let v = store.value(self.match_vec);
        grads
            .get_mut(self.match_vec)
            .data_mut()
            .iter_mut()
            .zip(cache.x_cls.data())
            .for_each(|(g, x)| *g += dlogit * x);
        let mut dx = Tensor::zeros(&[n + 1, d]);
        dx.row_mut(0).iter_mut().zip(v.data()).for_each(|(g, w)| *g = dlogit * w);
        let dattn_full = dattn.map(|da| {
            let heads = self.cfg.heads;
            let mut full = vec![0.0; heads * (n + 1) * m];
            for h in 0..heads {
                let base = h * (n + 1) * m;
                full[base + m..base + (n + 1) * m].copy_from_slice(&da.data()[h * n * m..(h + 1) * n * m]);
            }
            Tensor::new(&[heads, n + 1, m], full).unwrap()
        });
        let mut dvid = Tensor::zeros(&[m, d]);
        let last = self.layers.len() - 1;
        for (li, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let ds3 = layer.ln3.backward(store, &c.ln3, &dx, grads);
            let mut dh2 = layer.ffn.backward(store, &c.ffn, &ds3, grads);
            dh2.add_assign(&ds3);
            let ds2 = layer.ln2.backward(store, &c.ln2, &dh2, grads);
            let da = if li == last { dattn_full.as_ref() } else { None };
            let (mut dh1, dmem) = layer.cross_attn.backward(store, &c.ca, &ds2, da, grads);
            dvid.add_assign(&dmem);
            dh1.add_assign(&ds2);
            let ds1 = layer.ln1.backward(store, &c.ln1, &dh1, grads);
            let (mut dx0, dkv) = layer.self_attn.backward(store, &c.sa, &ds1, None, grads);
            dx0.add_assign(&dkv);
            dx0.add_assign(&ds1);
            dx = dx0;
        }
        DecodeInputGrads {
            img_cls: dx.slice_rows(0, 1).reshape(&[d]).unwrap(),
            img_patches: dx.slice_rows(1, n + 1),
            vid_patches: dvid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum HeadReduce {
    Mean,
    Max,
    PerHead,
}

/// Head-reduced (`[N, M]`) or untouched (`[H, N, M]`) cross-attention map.
pub fn export_attention(result: &DecodeResult, reduce: HeadReduce) -> Tensor {
    let a = &result.attn;
    let (h, n, m) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    match reduce {
        HeadReduce::PerHead => a.clone(),
        HeadReduce::Mean | HeadReduce::Max => {
            let mut out = match reduce {
                HeadReduce::Mean => vec![0.0; n * m],
                _ => vec![f64::NEG_INFINITY; n * m],
            };
            for head in a.data().chunks_exact(n * m) {
                for (o, &v) in out.iter_mut().zip(head) {
                    match reduce {
                        HeadReduce::Mean => *o += v / h as f64,
                        _ => *o = o.max(v),
                    }
                }
            }
            Tensor::new(&[n, m], out).unwrap()
        }
    }
}

/// Reshapes an `[N, M]` map to `[N, F, M / F]` so each frame's slice can be drawn on its patch grid.
pub fn split_frames(map: &Tensor, frames: usize) -> Result<Tensor> {
    let (n, m) = (map.shape()[0], map.last_dim());
    if map.shape().len() != 2 || frames == 0 || m % frames != 0 {
        return Err(shape_err("split_frames", format!("M divisible by {frames}"), m));
    }
    map.clone().reshape(&[n, frames, m / frames])
}

/// Per-frame heatmaps `[F, M / F]`: attention received by each clip patch,
/// averaged over the image patch queries.
pub fn frame_heatmaps(map: &Tensor, frames: usize) -> Result<Tensor> {
    let split = split_frames(map, frames)?;
    let (n, per) = (split.shape()[0], split.shape()[2]);
    let mut out = vec![0.0; frames * per];
    for row in split.data().chunks_exact(frames * per) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v / n as f64;
        }
    }
    Tensor::new(&[frames, per], out)
}
