//! Shared-weight patch transformer for shop images and clip frames.
//!
//! A frame is cut into non-overlapping square patches, each patch is linearly
//! projected to a token, a learned CLS token is prepended and the sequence runs
//! through pre-norm transformer blocks. Clips are encoded frame by frame with
//! the same weights: their patch features are concatenated (`M = N × F`) and
//! their CLS features averaged. Global embeddings come from a per-view linear
//! head on the (normalized) CLS feature, followed by L2 normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    truncated_normal, Attention, AttentionCache, AttentionConfig, Grads, LayerNorm, LayerNormCache, Linear, Mlp,
    MlpCache, ParamId, ParamStore, Tensor, WeightInit,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub frames: usize,
    pub proj_dim: usize,
    pub position_embedding: bool,
    /// Initialization of the weight matrices.
    pub init: WeightInit,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            layers: 2,
            model_dim: 32,
            heads: 4,
            mlp_ratio: 4,
            frames: 4,
            proj_dim: 16,
            position_embedding: true,
            init: WeightInit::default(),
        }
    }
}

impl EncoderConfig {
    /// ViT-B/32 geometry on 224-pixel inputs with ten frames per clip.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 32,
            channels: 3,
            layers: 12,
            model_dim: 768,
            heads: 12,
            mlp_ratio: 4,
            frames: 10,
            proj_dim: 512,
            position_embedding: true,
            init: WeightInit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be at least 1".into()));
        }
        AttentionConfig::new(self.heads, self.model_dim)?;
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patches per frame.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches per clip.
    pub fn num_video_patches(&self) -> usize {
        self.num_patches() * self.frames
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Image,
    Video,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub cls: Tensor,
    pub patches: Tensor,
    pub kind: ViewKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEmbedding {
    pub vec: Tensor,
}

/// Flattens `[C, H, W]` into `[N, C·P·P]` rows in raster patch order.
pub fn extract_patches(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(shape_err("patchify", format!("{expect:?}"), format!("{:?}", image.shape())));
    }
    let (p, g, s) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    let px = image.data();
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..cfg.channels {
                for y in 0..p {
                    let row = (c * s + gy * p + y) * s + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], out)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (h, ln1) = self.ln1.forward(store, x)?;
        let (a, _, attn) = self.attn.forward(store, &h, &h)?;
        let mid = x.add(&a);
        let (h2, ln2) = self.ln2.forward(store, &mid)?;
        let (m, mlp) = self.mlp.forward(store, &h2)?;
        Ok((mid.add(&m), BlockCache { ln1, attn, ln2, mlp }))
    }

    fn backward(&self, store: &ParamStore, cache: &BlockCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let dh2 = self.mlp.backward(store, &cache.mlp, dy, grads);
        let mut dmid = self.ln2.backward(store, &cache.ln2, &dh2, grads);
        dmid.add_assign(dy);
        let (mut dh, dkv) = self.attn.backward(store, &cache.attn, &dmid, None, grads);
        dh.add_assign(&dkv);
        let mut dx = self.ln1.backward(store, &cache.ln1, &dh, grads);
        dx.add_assign(&dmid);
        dx
    }
}

/// Activations of one encoded frame, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FrameCache {
    patches: Tensor,
    blocks: Vec<BlockCache>,
}

#[derive(Clone, Debug)]
pub struct ProjectionCache {
    kind: ViewKind,
    ln: LayerNormCache,
    normed: Tensor,
    raw: Tensor,
    norm: f64,
    unit: Tensor,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: EncoderConfig,
    patch_embed: Linear,
    cls_token: ParamId,
    pos_embed: Option<ParamId>,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj_image: Linear,
    proj_video: Linear,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let patch_embed = Linear::new(store, "encoder.patch_embed", (cfg.patch_dim(), d), true, cfg.init, rng);
        let cls_token = store.add("encoder.cls_token", truncated_normal(&[d], 0.02, rng));
        let pos_embed = cfg
            .position_embedding
            .then(|| store.add("encoder.pos_embed", truncated_normal(&[cfg.num_patches() + 1, d], 0.02, rng)));
        let att_cfg = AttentionConfig::new(cfg.heads, d)?;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.blocks.{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    attn: Attention::new(store, &format!("{p}.attn"), att_cfg, cfg.init, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    mlp: Mlp::new(store, &format!("{p}.mlp"), d, d * cfg.mlp_ratio, cfg.init, rng),
                }
            })
            .collect();
        let ln_post = LayerNorm::new(store, "encoder.ln_post", d);
        let proj_image = Linear::new(store, "encoder.proj_image", (d, cfg.proj_dim), false, cfg.init, rng);
        let proj_video = Linear::new(store, "encoder.proj_video", (d, cfg.proj_dim), false, cfg.init, rng);
        Ok(Self {
            cfg,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            ln_post,
            proj_image,
            proj_video,
        })
    }

    /// Every parameter the encoder owns, in creation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_embed.weight];
        ids.extend(self.patch_embed.bias);
        ids.push(self.cls_token);
        ids.extend(self.pos_embed);
        for b in &self.blocks {
            ids.extend([b.ln1.gamma, b.ln1.beta]);
            let a = &b.attn;
            ids.extend([a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]);
            ids.extend([b.ln2.gamma, b.ln2.beta, b.mlp.fc1.weight]);
            ids.extend(b.mlp.fc1.bias);
            ids.push(b.mlp.fc2.weight);
            ids.extend(b.mlp.fc2.bias);
        }
        ids.extend([self.ln_post.gamma, self.ln_post.beta, self.proj_image.weight, self.proj_video.weight]);
        ids
    }

    /// Patch tokens `[N, d]`: projected patches plus their slot position embeddings.
    pub fn patchify(&self, store: &ParamStore, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let patches = extract_patches(image, &self.cfg)?;
        let mut tokens = self.patch_embed.forward(store, &patches)?;
        if let Some(pos) = self.pos_embed {
            let pos = store.value(pos);
            let d = self.cfg.model_dim;
            for (t, p) in tokens.data_mut().iter_mut().zip(&pos.data()[d..]) {
                *t += p;
            }
        }
        Ok((tokens, patches))
    }

    /// Prepends the CLS token and runs the transformer stack over `[N, d]` tokens.
    pub fn encode_tokens(&self, store: &ParamStore, tokens: &Tensor) -> Result<(ViewFeatures, Vec<BlockCacheHandle>)> {
        let d = self.cfg.model_dim;
        if tokens.shape().len() != 2 || tokens.last_dim() != d {
            return Err(shape_err("encode_view", format!("[_, {d}]"), format!("{:?}", tokens.shape())));
        }
        let mut cls = store.value(self.cls_token).clone();
        if let Some(pos) = self.pos_embed {
            for (c, p) in cls.data_mut().iter_mut().zip(store.value(pos).row(0)) {
                *c += p;
            }
        }
        let mut x = Tensor::concat_rows(&[&cls.clone().reshape(&[1, d])?, tokens])?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(store, &x)?;
            caches.push(BlockCacheHandle(c));
            x = y;
        }
        x.check_finite("encoder output")?;
        let n = x.rows();
        Ok((
            ViewFeatures {
                cls: x.slice_rows(0, 1).reshape(&[d])?,
                patches: x.slice_rows(1, n),
                kind: ViewKind::Image,
            },
            caches,
        ))
    }

    fn encode_frame(&self, store: &ParamStore, image: &Tensor) -> Result<(ViewFeatures, FrameCache)> {
        let (tokens, patches) = self.patchify(store, image)?;
        let (f, blocks) = self.encode_tokens(store, &tokens)?;
        Ok((
            f,
            FrameCache {
                patches,
                blocks: blocks.into_iter().map(|h| h.0).collect(),
            },
        ))
    }

    pub fn encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<(ViewFeatures, FrameCache)> {
        self.encode_frame(store, image)
    }

    /// Encodes frames independently, concatenates patch features and averages CLS features.
    pub fn encode_video(&self, store: &ParamStore, frames: &[Tensor]) -> Result<(ViewFeatures, Vec<FrameCache>)> {
        if frames.is_empty() {
            return Err(Error::EmptyClip);
        }
        let mut caches = Vec::with_capacity(frames.len());
        let mut feats = Vec::with_capacity(frames.len());
        for fr in frames {
            let (f, c) = self.encode_frame(store, fr)?;
            feats.push(f);
            caches.push(c);
        }
        let d = self.cfg.model_dim;
        let mut cls = Tensor::zeros(&[d]);
        for f in &feats {
            cls.add_assign(&f.cls);
        }
        cls.scale(1.0 / frames.len() as f64);
        let parts: Vec<&Tensor> = feats.iter().map(|f| &f.patches).collect();
        Ok((
            ViewFeatures {
                cls,
                patches: Tensor::concat_rows(&parts)?,
                kind: ViewKind::Video,
            },
            caches,
        ))
    }

    fn frame_backward(
        &self,
        store: &ParamStore,
        cache: &FrameCache,
        dcls: &[f64],
        dpatches: &[f64],
        grads: &mut Grads,
    ) {
        let d = self.cfg.model_dim;
        let n = cache.patches.rows();
        let mut data = Vec::with_capacity((n + 1) * d);
        data.extend_from_slice(dcls);
        data.extend_from_slice(dpatches);
        let mut dx = Tensor::new(&[n + 1, d], data).expect("frame gradient shape");
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(store, c, &dx, grads);
        }
        grads.get_mut(self.cls_token).data_mut().iter_mut().zip(dx.row(0)).for_each(|(g, v)| *g += v);
        if let Some(pos) = self.pos_embed {
            grads.get_mut(pos).data_mut().iter_mut().zip(dx.data()).for_each(|(g, v)| *g += v);
        }
        let dtokens = dx.slice_rows(1, n + 1);
        self.patch_embed.backward(store, &cache.patches, &dtokens, grads);
    }

    pub fn image_backward(
        &self,
        store: &ParamStore,
        cache: &FrameCache,
        dcls: &Tensor,
        dpatches: &Tensor,
        grads: &mut Grads,
    ) {
        self.frame_backward(store, cache, dcls.data(), dpatches.data(), grads);
    }

    pub fn video_backward(
        &self,
        store: &ParamStore,
        caches: &[FrameCache],
        dcls: &Tensor,
        dpatches: &Tensor,
        grads: &mut Grads,
    ) {
        let f = caches.len();
        let share: Vec<f64> = dcls.data().iter().map(|v| v / f as f64).collect();
        let per = dpatches.len() / f;
        for (i, c) in caches.iter().enumerate() {
            self.frame_backward(store, c, &share, &dpatches.data()[i * per..(i + 1) * per], grads);
        }
    }

    /// Maps a CLS feature through the view-specific head and L2-normalizes it.
    pub fn project_global(
        &self,
        store: &ParamStore,
        cls: &Tensor,
        kind: ViewKind,
    ) -> Result<(GlobalEmbedding, ProjectionCache)> {
        cls.check_finite("cls feature")?;
        let d = self.cfg.model_dim;
        let (normed, ln) = self.ln_post.forward(store, &cls.clone().reshape(&[1, d])?)?;
        let head = match kind {
            ViewKind::Image => &self.proj_image,
            ViewKind::Video => &self.proj_video,
        };
        let raw = head.forward(store, &normed)?;
        let mut norm = raw.sum_squares().sqrt();
        if norm < 1e-12 {
            log::warn!("projected {kind:?} embedding has near-zero norm {norm:e}; clamping");
            norm = 1e-12;
        }
        let mut unit = raw.clone();
        unit.scale(1.0 / norm);
        let unit = unit.reshape(&[self.cfg.proj_dim])?;
        Ok((
            GlobalEmbedding { vec: unit.clone() },
            ProjectionCache {
                kind,
                ln,
                normed,
                raw,
                norm,
                unit,
            },
        ))
    }

    /// Backward of [`Self::project_global`]; returns the gradient on the CLS feature.
    pub fn project_backward(
        &self,
        store: &ParamStore,
        cache: &ProjectionCache,
        demb: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let u = cache.unit.data();
        let s: f64 = u.iter().zip(demb.data()).map(|(a, b)| a * b).sum();
        let draw: Vec<f64> = demb.data().iter().zip(u).map(|(g, y)| (g - y * s) / cache.norm).collect();
        let draw = Tensor::new(cache.raw.shape(), draw).unwrap();
        let head = match cache.kind {
            ViewKind::Image => &self.proj_image,
            ViewKind::Video => &self.proj_video,
        };
        let dnormed = head.backward(store, &cache.normed, &draw, grads);
        let dcls = self.ln_post.backward(store, &cache.ln, &dnormed, grads);
        dcls.reshape(&[self.cfg.model_dim]).unwrap()
    }
}

/// Opaque per-block activations returned by [`VisualEncoder::encode_tokens`].
#[derive(Clone, Debug)]
pub struct BlockCacheHandle(BlockCache);

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: EncoderConfig) -> (ParamStore, VisualEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VisualEncoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    fn image(cfg: &EncoderConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            &[cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patch_counts() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.num_video_patches(), 64);
        let paper = EncoderConfig::paper_scale();
        assert_eq!(paper.num_patches(), 49);
        assert_eq!(paper.num_video_patches(), 490);
        let (store, enc) = setup(cfg.clone());
        let (tokens, _) = enc.patchify(&store, &image(&cfg, 2)).unwrap();
        assert_eq!(tokens.shape(), &[16, 32]);
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let cfg = EncoderConfig::default();
        let (store, enc) = setup(cfg);
        assert!(enc.patchify(&store, &Tensor::zeros(&[3, 16, 16])).is_err());
        let bad = EncoderConfig {
            image_size: 30,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_image_tokens_are_bias_plus_position() {
        let cfg = EncoderConfig::default();
        let (mut store, enc) = setup(cfg.clone());
        let b = store.find("encoder.patch_embed.bias").unwrap();
        store.value_mut(b).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let (tokens, _) = enc.patchify(&store, &Tensor::zeros(&[3, 32, 32])).unwrap();
        let pos = store.value(store.find("encoder.pos_embed").unwrap());
        for n in 0..16 {
            for j in 0..32 {
                assert_eq!(tokens.row(n)[j], store.value(b).data()[j] + pos.row(n + 1)[j]);
            }
        }
        let cfg = EncoderConfig {
            position_embedding: false,
            ..cfg
        };
        let (store, enc) = setup(cfg);
        let (tokens, _) = enc.patchify(&store, &Tensor::zeros(&[3, 32, 32])).unwrap();
        for n in 1..16 {
            assert_eq!(tokens.row(n), tokens.row(0));
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let cfg = EncoderConfig {
            layers: 0,
            ..EncoderConfig::default()
        };
        let (store, enc) = setup(cfg.clone());
        let (tokens, _) = enc.patchify(&store, &image(&cfg, 3)).unwrap();
        let (f, _) = enc.encode_tokens(&store, &tokens).unwrap();
        assert_eq!(f.patches, tokens);
        assert_eq!(f.cls.shape(), &[32]);
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = EncoderConfig {
            position_embedding: false,
            ..EncoderConfig::default()
        };
        let (store, enc) = setup(cfg.clone());
        let (tokens, _) = enc.patchify(&store, &image(&cfg, 4)).unwrap();
        let mut swapped = tokens.clone();
        let (r2, r5) = (tokens.row(2).to_vec(), tokens.row(5).to_vec());
        swapped.row_mut(2).copy_from_slice(&r5);
        swapped.row_mut(5).copy_from_slice(&r2);
        let (a, _) = enc.encode_tokens(&store, &tokens).unwrap();
        let (b, _) = enc.encode_tokens(&store, &swapped).unwrap();
        for j in 0..32 {
            assert!((a.patches.row(2)[j] - b.patches.row(5)[j]).abs() < 1e-12);
            assert!((a.patches.row(5)[j] - b.patches.row(2)[j]).abs() < 1e-12);
            assert!((a.cls.data()[j] - b.cls.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_video_equals_image_bitwise() {
        let cfg = EncoderConfig::default();
        let (store, enc) = setup(cfg.clone());
        let img = image(&cfg, 5);
        let (a, _) = enc.encode_image(&store, &img).unwrap();
        let (v, _) = enc.encode_video(&store, std::slice::from_ref(&img)).unwrap();
        assert_eq!(a.cls, v.cls);
        assert_eq!(a.patches, v.patches);
        assert_eq!(v.kind, ViewKind::Video);
    }

    #[test]
    fn video_shapes_and_cls_mean() {
        let cfg = EncoderConfig::default();
        let (store, enc) = setup(cfg.clone());
        let frames: Vec<Tensor> = (0..4).map(|s| image(&cfg, 10 + s)).collect();
        let (v, caches) = enc.encode_video(&store, &frames).unwrap();
        assert_eq!(v.patches.shape(), &[64, 32]);
        assert_eq!(caches.len(), 4);
        let mut mean = Tensor::zeros(&[32]);
        for f in &frames {
            mean.add_assign(&enc.encode_image(&store, f).unwrap().0.cls);
        }
        mean.scale(0.25);
        for (a, b) in mean.data().iter().zip(v.cls.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(enc.encode_video(&store, &[]), Err(Error::EmptyClip)));
    }

    #[test]
    fn global_embeddings_are_unit_and_scale_invariant() {
        let cfg = EncoderConfig::default();
        let (store, enc) = setup(cfg.clone());
        let cls = truncated_normal(&[32], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let (e, _) = enc.project_global(&store, &cls, ViewKind::Image).unwrap();
        assert!((e.vec.sum_squares().sqrt() - 1.0).abs() < 1e-6);
        let mut big = cls.clone();
        big.scale(10.0);
        let (e2, _) = enc.project_global(&store, &big, ViewKind::Image).unwrap();
        for (a, b) in e.vec.data().iter().zip(e2.vec.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let (ev, _) = enc.project_global(&store, &cls, ViewKind::Video).unwrap();
        let diff: f64 = e.vec.data().iter().zip(ev.vec.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3, "image and video heads should differ");
    }

    #[test]
    fn image_and_video_share_parameters() {
        let cfg = EncoderConfig::default();
        let (mut store, enc) = setup(cfg.clone());
        let frames: Vec<Tensor> = (0..2).map(|s| image(&cfg, 20 + s)).collect();
        let (v0, _) = enc.encode_video(&store, &frames).unwrap();
        // Perturbing a block weight used by the image path changes the video path too.
        let id = store.find("encoder.blocks.0.attn.wq").unwrap();
        store.value_mut(id).data_mut()[0] += 0.5;
        let (v1, _) = enc.encode_video(&store, &frames).unwrap();
        assert_ne!(v0.patches, v1.patches);
        // No parameter exists that only one of the two views reads besides the heads.
        let names: Vec<_> = store.iter().map(|(_, p)| p.name.clone()).collect();
        assert!(names.iter().all(|n| !n.contains("video") || n == "encoder.proj_video.weight"));
    }
}
