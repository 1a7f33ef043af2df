//! Patch feature reconstruction.
//!
//! Reconstruction coefficients `W ∈ R^{N×M}` are read off the decoder's
//! cross-attention map `a ∈ R^{H×N×M}` by two convolution + ReLU stages that
//! treat heads as channels over the `N × M` grid. The loss asks every image
//! patch feature to be a `W`-weighted combination of the clip patch features:
//! `‖Y − X·Wᵀ‖²_F / (N·d)` with `X = [v_1..v_M]` and `Y = [i_1..i_N]` as
//! column matrices. Feature tensors here are row-per-patch (`[M, d]`, `[N, d]`),
//! i.e. the transposes of `X` and `Y`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{conv2d, conv2d_backward, gemm, relu, relu_backward, Grads, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoefficientConfig {
    pub mid_channels: usize,
    /// Odd kernel extent shared by both convolutions.
    pub kernel_size: usize,
    /// Apply ReLU after the second convolution (keeps `W ≥ 0`).
    pub final_relu: bool,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            mid_channels: 4,
            kernel_size: 1,
            final_relu: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoefficientNet {
    pub cfg: CoefficientConfig,
    pub conv1: ParamId,
    pub conv2: ParamId,
}

#[derive(Clone, Debug)]
pub struct CoefficientCache {
    a: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
}

impl CoefficientNet {
    /// Kernels start near a head average so that initial `W` rows sum to about one.
    pub fn new(store: &mut ParamStore, cfg: CoefficientConfig, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.kernel_size % 2 == 0 || cfg.mid_channels == 0 {
            return Err(Error::Config("coefficient net needs an odd kernel and ≥1 mid channel".into()));
        }
        let (k, c) = (cfg.kernel_size, cfg.mid_channels);
        let centre = k / 2;
        let kernel = |cout: usize, cin: usize, rng: &mut dyn rand::RngCore| {
            let mut t = Tensor::zeros(&[cout, cin, k, k]);
            for o in 0..cout {
                for i in 0..cin {
                    let z: f64 = StandardNormal.sample(rng);
                    t.data_mut()[((o * cin + i) * k + centre) * k + centre] = (1.0 + 0.1 * z) / cin as f64;
                }
            }
            t
        };
        let conv1 = store.add("pfr.conv1", kernel(c, heads, rng));
        let conv2 = store.add("pfr.conv2", kernel(1, c, rng));
        Ok(Self { cfg, conv1, conv2 })
    }

    pub fn coefficients_from_attention(&self, store: &ParamStore, a: &Tensor) -> Result<(Tensor, CoefficientCache)> {
        a.check_finite("attention map")?;
        if a.shape().len() != 3 {
            return Err(shape_err("coefficients", "[H, N, M]", format!("{:?}", a.shape())));
        }
        let (n, m) = (a.shape()[1], a.shape()[2]);
        let pre1 = conv2d(a, store.value(self.conv1))?;
        let act1 = relu(&pre1);
        let pre2 = conv2d(&act1, store.value(self.conv2))?;
        let w = if self.cfg.final_relu { relu(&pre2) } else { pre2.clone() };
        Ok((
            w.reshape(&[n, m])?,
            CoefficientCache {
                a: a.clone(),
                pre1,
                act1,
                pre2,
            },
        ))
    }

    /// Returns the gradient on the attention map.
    pub fn backward(&self, store: &ParamStore, cache: &CoefficientCache, dw: &Tensor, grads: &mut Grads) -> Tensor {
        let dw = dw.clone().reshape(cache.pre2.shape()).unwrap();
        let dpre2 = if self.cfg.final_relu { relu_backward(&cache.pre2, &dw) } else { dw };
        let mut dk2 = Tensor::zeros(store.value(self.conv2).shape());
        let dact1 = conv2d_backward(&cache.act1, store.value(self.conv2), &dpre2, &mut dk2);
        grads.accumulate(self.conv2, &dk2);
        let dpre1 = relu_backward(&cache.pre1, &dact1);
        let mut dk1 = Tensor::zeros(store.value(self.conv1).shape());
        let da = conv2d_backward(&cache.a, store.value(self.conv1), &dpre1, &mut dk1);
        grads.accumulate(self.conv1, &dk1);
        da
    }
}

fn check_shapes(video: &Tensor, image: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let (m, n, d) = (video.rows(), image.rows(), image.last_dim());
    if video.last_dim() != d {
        return Err(shape_err("reconstruction feature dim", d, video.last_dim()));
    }
    if w.shape() != [n, m] {
        return Err(shape_err("reconstruction coefficients", format!("[{n}, {m}]"), format!("{:?}", w.shape())));
    }
    Ok((m, n, d))
}

/// `‖Y − X·Wᵀ‖²_F / (N·d)` and the residual `Y − X·Wᵀ` in row form `[N, d]`.
fn residual(video: &Tensor, image: &Tensor, w: &Tensor) -> Result<(f64, Tensor)> {
    let (m, n, d) = check_shapes(video, image, w)?;
    let mut r = image.clone();
    gemm(n, m, d, -1.0, w.data(), false, video.data(), false, 1.0, r.data_mut());
    Ok((r.sum_squares() / (n * d) as f64, r))
}

pub fn reconstruction_loss(video_patches: &Tensor, image_patches: &Tensor, w: &Tensor) -> Result<f64> {
    Ok(residual(video_patches, image_patches, w)?.0)
}

pub struct ReconstructionGrads {
    pub video_patches: Tensor,
    pub image_patches: Tensor,
    pub coefficients: Tensor,
}

/// Loss value and its gradients with respect to all three inputs.
pub fn reconstruction_loss_with_grads(
    video_patches: &Tensor,
    image_patches: &Tensor,
    w: &Tensor,
) -> Result<(f64, ReconstructionGrads)> {
    let (loss, mut r) = residual(video_patches, image_patches, w)?;
    let (m, n, d) = (video_patches.rows(), image_patches.rows(), image_patches.last_dim());
    r.scale(2.0 / (n * d) as f64);
    let mut dvideo = vec![0.0; m * d];
    gemm(m, n, d, -1.0, w.data(), true, r.data(), false, 0.0, &mut dvideo);
    let mut dw = vec![0.0; n * m];
    gemm(n, d, m, -1.0, r.data(), false, video_patches.data(), true, 0.0, &mut dw);
    Ok((
        loss,
        ReconstructionGrads {
            video_patches: Tensor::new(&[m, d], dvideo)?,
            image_patches: r,
            coefficients: Tensor::new(&[n, m], dw)?,
        },
    ))
}

pub const LSTSQ_RIDGE: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct LeastSquaresSolution {
    /// Unconstrained minimizer, `[N, M]` like the learned coefficients.
    pub coefficients: Tensor,
    /// Residual under the same `1 / (N·d)` normalization as [`reconstruction_loss`].
    pub residual: f64,
    /// The normal matrix was singular or ill-conditioned and the ridge was added.
    pub ridge_used: bool,
}

fn cholesky(a: &[f64], n: usize, ridge: f64) -> Option<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
    let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j] + if i == j { ridge } else { 0.0 };
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= tol {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Unconstrained least-squares coefficients for reconstructing every image
/// patch feature from the clip patch features, via normal equations.
pub fn least_squares_oracle(video_patches: &Tensor, image_patches: &Tensor) -> Result<LeastSquaresSolution> {
    let (m, n, d) = (video_patches.rows(), image_patches.rows(), image_patches.last_dim());
    if video_patches.last_dim() != d {
        return Err(shape_err("least_squares feature dim", d, video_patches.last_dim()));
    }
    // Normal matrix XᵀX is [M, M] with entries v_i·v_j.
    let mut gram = vec![0.0; m * m];
    gemm(m, d, m, 1.0, video_patches.data(), false, video_patches.data(), true, 0.0, &mut gram);
    let (l, ridge_used) = match cholesky(&gram, m, 0.0) {
        Some(l) => (l, false),
        None => {
            log::debug!("normal matrix ill-conditioned ({m}×{m}); adding ridge {LSTSQ_RIDGE:e}");
            let l = cholesky(&gram, m, LSTSQ_RIDGE)
                .ok_or_else(|| Error::NonFinite("least-squares normal matrix after ridge".into()))?;
            (l, true)
        }
    };
    // Right-hand sides Xᵀ y_n, one per image patch: [N, M].
    let mut coeffs = vec![0.0; n * m];
    gemm(n, d, m, 1.0, image_patches.data(), false, video_patches.data(), true, 0.0, &mut coeffs);
    for row in coeffs.chunks_exact_mut(m) {
        cholesky_solve(&l, m, row);
    }
    let coefficients = Tensor::new(&[n, m], coeffs)?;
    let residual = reconstruction_loss(video_patches, image_patches, &coefficients)?;
    Ok(LeastSquaresSolution {
        coefficients,
        residual,
        ridge_used,
    })
}
