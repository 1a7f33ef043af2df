//! The full model: shared visual encoder with view-specific projection heads,
//! pairwise matching decoder and reconstruction coefficient network, plus the
//! combined objective with its backward pass.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeCache, DecodeResult, DecoderConfig, PairDecoder};
use crate::encoder::{EncoderConfig, FrameCache, GlobalEmbedding, ProjectionCache, ViewFeatures, ViewKind, VisualEncoder};
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore, Tensor};
use crate::objectives::{
    icl_loss_with_grad, matching_loss_with_grad, sample_hard_negatives, sample_random_negatives, total_loss,
    MatchLogits, NegativeSet, NegativeStrategy, SimilarityMatrix, DEFAULT_ALPHA, DEFAULT_TEMPERATURE,
};
use crate::reconstruction::{reconstruction_loss_with_grads, CoefficientConfig, CoefficientNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub coefficients: CoefficientConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            coefficients: CoefficientConfig::default(),
        }
    }
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub icl: bool,
    pub pmd: bool,
    pub pfr: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            icl: true,
            pmd: true,
            pfr: true,
        }
    }
}

impl LossToggles {
    pub fn validate(&self) -> Result<()> {
        if !self.icl {
            return Err(Error::Config("the contrastive term is required".into()));
        }
        if self.pfr && !self.pmd {
            return Err(Error::Config("reconstruction requires the matching decoder".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub toggles: LossToggles,
    pub alpha: f64,
    pub temperature: f64,
    pub negatives: usize,
    pub negative_strategy: NegativeStrategy,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            toggles: LossToggles::default(),
            alpha: DEFAULT_ALPHA,
            temperature: DEFAULT_TEMPERATURE,
            negatives: 3,
            negative_strategy: NegativeStrategy::Hard,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub icl: f64,
    pub matching: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Shop images and clip frames of one mini-batch; `clips[b]` pairs with `images[b]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub clips: Vec<Vec<Tensor>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: VisualEncoder,
    pub decoder: PairDecoder,
    pub coefficients: CoefficientNet,
}

struct Encoded {
    feats: ViewFeatures,
    emb: GlobalEmbedding,
    proj: ProjectionCache,
}

struct EncodedImage {
    enc: Encoded,
    cache: FrameCache,
}

struct EncodedClip {
    enc: Encoded,
    caches: Vec<FrameCache>,
}

/// Items per deterministic gradient chunk.
const CHUNK: usize = 4;

/// Runs `task` over `0..n` in fixed-size chunks, each accumulating into its own
/// gradient buffer, and merges the buffers in index order.
fn chunked_grads<F>(store: &ParamStore, n: usize, task: F) -> Grads
where
    F: Fn(usize, &mut Grads) + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Grads> = starts
        .par_iter()
        .map(|&s| {
            let mut g = Grads::zeros_like(store);
            for i in s..(s + CHUNK).min(n) {
                task(i, &mut g);
            }
            g
        })
        .collect();
    let mut total = Grads::zeros_like(store);
    for p in &parts {
        total.merge(p);
    }
    total
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = VisualEncoder::new(store, cfg.encoder.clone(), &mut rng)?;
        let decoder = PairDecoder::new(store, cfg.decoder.clone(), cfg.encoder.model_dim, &mut rng)?;
        let coefficients = CoefficientNet::new(store, cfg.coefficients.clone(), cfg.decoder.heads, &mut rng)?;
        Ok(Self {
            cfg,
            encoder,
            decoder,
            coefficients,
        })
    }

    /// Parameters introduced on top of the encoder (decoder and coefficient net).
    pub fn is_new_module(name: &str) -> bool {
        name.starts_with("decoder.") || name.starts_with("pfr.")
    }

    pub fn encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<(ViewFeatures, GlobalEmbedding)> {
        let (f, _) = self.encoder.encode_image(store, image)?;
        let (e, _) = self.encoder.project_global(store, &f.cls, ViewKind::Image)?;
        Ok((f, e))
    }

    pub fn encode_clip(&self, store: &ParamStore, frames: &[Tensor]) -> Result<(ViewFeatures, GlobalEmbedding)> {
        let (f, _) = self.encoder.encode_video(store, frames)?;
        let (e, _) = self.encoder.project_global(store, &f.cls, ViewKind::Video)?;
        Ok((f, e))
    }

    pub fn match_pair(&self, store: &ParamStore, img: &ViewFeatures, clip: &ViewFeatures) -> Result<DecodeResult> {
        Ok(self.decoder.decode_pair(store, img, clip)?.0)
    }

    /// Evaluates the combined objective on `batch`. With `grads`, also
    /// accumulates parameter gradients of the total loss. `fixed_negatives`
    /// overrides negative sampling (used by gradient checks).
    pub fn objective(
        &self,
        store: &ParamStore,
        batch: &Batch,
        opts: &LossOptions,
        fixed_negatives: Option<&NegativeSet>,
        rng: &mut dyn RngCore,
        mut grads: Option<&mut Grads>,
    ) -> Result<LossComponents> {
        opts.toggles.validate()?;
        let want_grads = grads.is_some();
        let b = batch.len();
        if b < 2 || batch.clips.len() != b {
            return Err(Error::DegenerateBatch(b));
        }
        let images: Vec<EncodedImage> = batch
            .images
            .par_iter()
            .map(|img| {
                let (feats, cache) = self.encoder.encode_image(store, img)?;
                let (emb, proj) = self.encoder.project_global(store, &feats.cls, ViewKind::Image)?;
                Ok(EncodedImage {
                    enc: Encoded { feats, emb, proj },
                    cache,
                })
            })
            .collect::<Result<_>>()?;
        let clips: Vec<EncodedClip> = batch
            .clips
            .par_iter()
            .map(|frames| {
                let (feats, caches) = self.encoder.encode_video(store, frames)?;
                let (emb, proj) = self.encoder.project_global(store, &feats.cls, ViewKind::Video)?;
                Ok(EncodedClip {
                    enc: Encoded { feats, emb, proj },
                    caches,
                })
            })
            .collect::<Result<_>>()?;

        let gi: Vec<Tensor> = images.iter().map(|e| e.enc.emb.vec.clone()).collect();
        let gv: Vec<Tensor> = clips.iter().map(|e| e.enc.emb.vec.clone()).collect();
        let sim = SimilarityMatrix::from_embeddings(&gi, &gv, opts.temperature)?;
        let (l_c, dsim) = icl_loss_with_grad(&sim)?;

        let mut l_m = 0.0;
        let mut l_r = 0.0;
        // unique (image, clip) pairs to decode, with their gradient on the logit
        let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut decoded: Vec<(DecodeResult, DecodeCache)> = Vec::new();
        let mut dlogit: Vec<f64> = Vec::new();
        let mut dattn: Vec<Option<Tensor>> = Vec::new();
        let mut d_img_patches: Vec<Option<Tensor>> = vec![None; b];
        let mut d_vid_patches: Vec<Option<Tensor>> = vec![None; b];

        if opts.toggles.pmd {
            let owned;
            let negs = match fixed_negatives {
                Some(n) => n,
                None => {
                    owned = match opts.negative_strategy {
                        NegativeStrategy::Hard => sample_hard_negatives(&sim, opts.negatives),
                        NegativeStrategy::Random => sample_random_negatives(&sim, opts.negatives, &mut *rng),
                    };
                    &owned
                }
            };
            let mut order = Vec::new();
            let mut key = |p: (usize, usize), order: &mut Vec<(usize, usize)>| {
                let n = pairs.len();
                *pairs.entry(p).or_insert_with(|| {
                    order.push(p);
                    n
                })
            };
            let mut img_rows = Vec::with_capacity(b);
            let mut vid_rows = Vec::with_capacity(b);
            for a in 0..b {
                let mut r = vec![key((a, a), &mut order)];
                r.extend(negs.for_images[a].iter().map(|&k| key((a, k), &mut order)));
                img_rows.push(r);
                let mut r = vec![key((a, a), &mut order)];
                r.extend(negs.for_videos[a].iter().map(|&k| key((k, a), &mut order)));
                vid_rows.push(r);
            }
            decoded = order
                .par_iter()
                .map(|&(i, j)| self.decoder.decode_pair(store, &images[i].enc.feats, &clips[j].enc.feats))
                .collect::<Result<_>>()?;
            let logits = MatchLogits {
                image_anchor: img_rows.iter().map(|r| r.iter().map(|&k| decoded[k].0.logit).collect()).collect(),
                video_anchor: vid_rows.iter().map(|r| r.iter().map(|&k| decoded[k].0.logit).collect()).collect(),
            };
            let (lm, glog) = matching_loss_with_grad(&logits)?;
            l_m = lm;
            dlogit = vec![0.0; decoded.len()];
            for (rows, g) in [(&img_rows, &glog.image_anchor), (&vid_rows, &glog.video_anchor)] {
                for (r, gr) in rows.iter().zip(g) {
                    for (&k, &v) in r.iter().zip(gr) {
                        dlogit[k] += v;
                    }
                }
            }
            dattn = vec![None; decoded.len()];

            if opts.toggles.pfr {
                let w_r = opts.alpha / b as f64;
                let per: Vec<(f64, Option<(Tensor, Tensor, Tensor, Grads)>)> = (0..b)
                    .into_par_iter()
                    .map(|a| {
                        let k = pairs[&(a, a)];
                        let (w, cache) = self.coefficients.coefficients_from_attention(store, &decoded[k].0.attn)?;
                        let x = &clips[a].enc.feats.patches;
                        let y = &images[a].enc.feats.patches;
                        let (loss, rg) = reconstruction_loss_with_grads(x, y, &w)?;
                        if !want_grads {
                            return Ok((loss, None));
                        }
                        let mut g = Grads::zeros_like(store);
                        let mut dw = rg.coefficients;
                        dw.scale(w_r);
                        let da = self.coefficients.backward(store, &cache, &dw, &mut g);
                        let mut dx = rg.video_patches;
                        dx.scale(w_r);
                        let mut dy = rg.image_patches;
                        dy.scale(w_r);
                        Ok((loss, Some((da, dx, dy, g))))
                    })
                    .collect::<Result<_>>()?;
                let mut coef_grads = Vec::new();
                for (a, (loss, extra)) in per.into_iter().enumerate() {
                    l_r += loss / b as f64;
                    if let Some((da, dx, dy, g)) = extra {
                        dattn[pairs[&(a, a)]] = Some(da);
                        d_vid_patches[a] = Some(dx);
                        d_img_patches[a] = Some(dy);
                        coef_grads.push(g);
                    }
                }
                if let Some(gr) = grads.as_deref_mut() {
                    for g in &coef_grads {
                        gr.merge(g);
                    }
                }
            }
        }

        let total = total_loss(l_c, l_m, l_r, opts.alpha)?;
        let comps = LossComponents {
            icl: l_c,
            matching: l_m,
            reconstruction: l_r,
            total,
        };
        let Some(grads) = grads else {
            return Ok(comps);
        };

        // global embeddings
        let (dgi, dgv) = sim.backward(&gi, &gv, &dsim);
        let mut d_img_cls: Vec<Tensor> = Vec::with_capacity(b);
        let mut d_vid_cls: Vec<Tensor> = Vec::with_capacity(b);
        let mut g_proj = Grads::zeros_like(store);
        for a in 0..b {
            d_img_cls.push(self.encoder.project_backward(store, &images[a].enc.proj, &dgi[a], &mut g_proj));
            d_vid_cls.push(self.encoder.project_backward(store, &clips[a].enc.proj, &dgv[a], &mut g_proj));
        }
        grads.merge(&g_proj);

        // decoder
        let order: Vec<(usize, usize)> = {
            let mut o = vec![(0, 0); pairs.len()];
            for (&p, &k) in &pairs {
                o[k] = p;
            }
            o
        };
        if !decoded.is_empty() {
            let inputs: Vec<_> = decoded
                .par_iter()
                .enumerate()
                .map(|(k, (_, cache))| {
                    let mut g = Grads::zeros_like(store);
                    let d = self.decoder.decode_backward(store, cache, dlogit[k], dattn[k].as_ref(), &mut g);
                    (d, g)
                })
                .collect();
            for (k, (d, g)) in inputs.into_iter().enumerate() {
                grads.merge(&g);
                let (i, j) = order[k];
                d_img_cls[i].add_assign(&d.img_cls);
                add_opt(&mut d_img_patches[i], &d.img_patches);
                add_opt(&mut d_vid_patches[j], &d.vid_patches);
            }
        }

        // encoder
        let enc_grads = chunked_grads(store, 2 * b, |t, g| {
            if t < b {
                let dp = d_img_patches[t]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(images[t].enc.feats.patches.shape()));
                self.encoder.image_backward(store, &images[t].cache, &d_img_cls[t], &dp, g);
            } else {
                let a = t - b;
                let dp = d_vid_patches[a]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(clips[a].enc.feats.patches.shape()));
                self.encoder.video_backward(store, &clips[a].caches, &d_vid_cls[a], &dp, g);
            }
        });
        grads.merge(&enc_grads);
        Ok(comps)
    }
}

fn add_opt(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}
