//! Training objectives: symmetric instance-level InfoNCE over global
//! embeddings, the pairwise matching loss over decoder logits with sampled
//! negatives, and their weighted sum with the reconstruction term.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{dot, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// `values[i][j] = g_I(i) · g_V(j) / τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub temperature: f64,
}

impl SimilarityMatrix {
    pub fn from_embeddings(images: &[Tensor], videos: &[Tensor], temperature: f64) -> Result<Self> {
        if images.len() != videos.len() {
            return Err(shape_err("similarity", images.len(), videos.len()));
        }
        let b = images.len();
        if b == 0 {
            return Err(Error::DegenerateBatch(0));
        }
        let mut values = Vec::with_capacity(b * b);
        for gi in images {
            for gv in videos {
                if gi.len() != gv.len() {
                    return Err(shape_err("similarity", gi.len(), gv.len()));
                }
                values.push(dot(gi.data(), gv.data()) / temperature);
            }
        }
        Ok(Self {
            values: Tensor::new(&[b, b], values)?,
            temperature,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, image: usize, video: usize) -> f64 {
        self.values.data()[image * self.batch_size() + video]
    }

    /// Chains a gradient on `values` back to the two embedding sets.
    pub fn backward(&self, images: &[Tensor], videos: &[Tensor], dvalues: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
        let b = self.batch_size();
        let inv_t = 1.0 / self.temperature;
        let mut di: Vec<Tensor> = images.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut dv: Vec<Tensor> = videos.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for i in 0..b {
            for j in 0..b {
                let g = dvalues.data()[i * b + j] * inv_t;
                if g == 0.0 {
                    continue;
                }
                for (a, &x) in di[i].data_mut().iter_mut().zip(videos[j].data()) {
                    *a += g * x;
                }
                for (a, &x) in dv[j].data_mut().iter_mut().zip(images[i].data()) {
                    *a += g * x;
                }
            }
        }
        (di, dv)
    }
}

/// `−log softmax(logits)[target]` and its gradient, log-sum-exp stabilized.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, l)| (l - lse).exp() - if k == target { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[target], grad)
}

pub fn icl_loss(sim: &SimilarityMatrix) -> Result<f64> {
    Ok(icl_loss_with_grad(sim)?.0)
}

/// Mean of the image→clip and clip→image InfoNCE terms with the diagonal as
/// positives; also returns the gradient with respect to `sim.values`.
pub fn icl_loss_with_grad(sim: &SimilarityMatrix) -> Result<(f64, Tensor)> {
    let b = sim.batch_size();
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    let s = &sim.values;
    let mut grad = Tensor::zeros(&[b, b]);
    let mut total = 0.0;
    let w = 0.5 / b as f64;
    for i in 0..b {
        let (l, g) = cross_entropy(s.row(i), i);
        total += l;
        for (a, v) in grad.row_mut(i).iter_mut().zip(g) {
            *a += w * v;
        }
    }
    let mut col = vec![0.0; b];
    for j in 0..b {
        for (i, c) in col.iter_mut().enumerate() {
            *c = s.data()[i * b + j];
        }
        let (l, g) = cross_entropy(&col, j);
        total += l;
        for (i, v) in g.into_iter().enumerate() {
            grad.data_mut()[i * b + j] += w * v;
        }
    }
    Ok((total * w, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeStrategy {
    #[default]
    Hard,
    Random,
}

/// Per-anchor negatives, as batch indices into the opposite view.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSet {
    /// For image anchor `i`: clip indices.
    pub for_images: Vec<Vec<usize>>,
    /// For clip anchor `j`: image indices.
    pub for_videos: Vec<Vec<usize>>,
    pub image_hardness: Vec<Vec<f64>>,
    pub video_hardness: Vec<Vec<f64>>,
}

impl NegativeSet {
    pub fn per_anchor(&self) -> usize {
        self.for_images.first().map_or(0, Vec::len)
    }
}

fn clamp_negatives(b: usize, n_neg: usize) -> usize {
    if n_neg > b.saturating_sub(1) {
        log::warn!("requested {n_neg} negatives but batch has {b} elements; clamping to {}", b - 1);
        b - 1
    } else {
        n_neg
    }
}

/// Top-`n_neg` most similar off-diagonal entries by row (image anchors) and by
/// column (clip anchors); ties go to the lower index.
pub fn sample_hard_negatives(sim: &SimilarityMatrix, n_neg: usize) -> NegativeSet {
    let b = sim.batch_size();
    let n_neg = clamp_negatives(b, n_neg);
    let pick = |score: &dyn Fn(usize) -> f64, anchor: usize| -> (Vec<usize>, Vec<f64>) {
        let mut cands: Vec<usize> = (0..b).filter(|&k| k != anchor).collect();
        cands.sort_by(|&x, &y| score(y).total_cmp(&score(x)).then(x.cmp(&y)));
        cands.truncate(n_neg);
        let h = cands.iter().map(|&k| score(k)).collect();
        (cands, h)
    };
    let mut set = NegativeSet {
        for_images: Vec::with_capacity(b),
        for_videos: Vec::with_capacity(b),
        image_hardness: Vec::with_capacity(b),
        video_hardness: Vec::with_capacity(b),
    };
    for a in 0..b {
        let (idx, h) = pick(&|k| sim.get(a, k), a);
        set.for_images.push(idx);
        set.image_hardness.push(h);
        let (idx, h) = pick(&|k| sim.get(k, a), a);
        set.for_videos.push(idx);
        set.video_hardness.push(h);
    }
    set
}

/// Uniformly drawn negatives, for ablating the hard-negative rule.
pub fn sample_random_negatives<R: Rng + ?Sized>(sim: &SimilarityMatrix, n_neg: usize, rng: &mut R) -> NegativeSet {
    let b = sim.batch_size();
    let n_neg = clamp_negatives(b, n_neg);
    let draw = |anchor: usize, rng: &mut R| -> Vec<usize> {
        sample(rng, b - 1, n_neg)
            .into_iter()
            .map(|k| if k >= anchor { k + 1 } else { k })
            .collect()
    };
    let mut set = NegativeSet {
        for_images: Vec::new(),
        for_videos: Vec::new(),
        image_hardness: Vec::new(),
        video_hardness: Vec::new(),
    };
    for a in 0..b {
        let fi = draw(a, rng);
        set.image_hardness.push(fi.iter().map(|&k| sim.get(a, k)).collect());
        set.for_images.push(fi);
        let fv = draw(a, rng);
        set.video_hardness.push(fv.iter().map(|&k| sim.get(k, a)).collect());
        set.for_videos.push(fv);
    }
    set
}

/// Decoder logits per anchor, positive first.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchLogits {
    /// `[f(I_i, V_i), f(I_i, V_k) for k in negatives of image i]`
    pub image_anchor: Vec<Vec<f64>>,
    /// `[f(I_j, V_j), f(I_k, V_j) for k in negatives of clip j]`
    pub video_anchor: Vec<Vec<f64>>,
}

pub fn matching_loss(logits: &MatchLogits) -> Result<f64> {
    Ok(matching_loss_with_grad(logits)?.0)
}

/// Symmetric InfoNCE over the positive plus sampled negatives, averaged over
/// both directions and all anchors. No temperature is applied.
pub fn matching_loss_with_grad(logits: &MatchLogits) -> Result<(f64, MatchLogits)> {
    let b = logits.image_anchor.len();
    if b == 0 || logits.video_anchor.len() != b {
        return Err(shape_err("matching_loss anchors", b, logits.video_anchor.len()));
    }
    let w = 0.5 / b as f64;
    let mut total = 0.0;
    let mut run = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let (l, g) = cross_entropy(r, 0);
                total += l;
                g.into_iter().map(|v| v * w).collect()
            })
            .collect()
    };
    let gi = run(&logits.image_anchor);
    let gv = run(&logits.video_anchor);
    Ok((
        total * w,
        MatchLogits {
            image_anchor: gi,
            video_anchor: gv,
        },
    ))
}

/// `L = L_c + L_m + α·L_r`.
pub fn total_loss(icl: f64, matching: f64, reconstruction: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("icl", icl), ("matching", matching), ("reconstruction", reconstruction)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss component")));
        }
    }
    Ok(icl + matching + alpha * reconstruction)
}
