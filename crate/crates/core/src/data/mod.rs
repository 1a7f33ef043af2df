//! Pair records and manifests, frame sampling, masking augmentation, the
//! box-crop input path, and the synthetic cross-view generator.

mod synth;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::Tensor;

pub use synth::{
    render_pair, render_shop_image, synth_generate, Glyph, IdentityPlan, RenderedPair, SynthConfig, SynthScene,
    SynthSummary, NUM_IDENTITIES,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const GALLERY_FILE: &str = "gallery.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleTag {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisibilityTag {
    Short,
    Medium,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistractorTag {
    Few,
    Medium,
    Abundant,
}

impl ScaleTag {
    pub const ALL: [ScaleTag; 3] = [ScaleTag::Small, ScaleTag::Medium, ScaleTag::Large];

    /// Bucket of a product's area fraction in the frame.
    pub fn from_fraction(p: f64) -> Self {
        if p <= 0.2 {
            ScaleTag::Small
        } else if p <= 0.4 {
            ScaleTag::Medium
        } else {
            ScaleTag::Large
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleTag::Small => "small",
            ScaleTag::Medium => "medium",
            ScaleTag::Large => "large",
        }
    }
}

impl VisibilityTag {
    pub const ALL: [VisibilityTag; 3] = [VisibilityTag::Short, VisibilityTag::Medium, VisibilityTag::Long];

    /// Bucket of the fraction of frames the product is visible in.
    pub fn from_fraction(p: f64) -> Self {
        if p <= 0.4 {
            VisibilityTag::Short
        } else if p <= 0.7 {
            VisibilityTag::Medium
        } else {
            VisibilityTag::Long
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VisibilityTag::Short => "short",
            VisibilityTag::Medium => "medium",
            VisibilityTag::Long => "long",
        }
    }
}

impl DistractorTag {
    pub const ALL: [DistractorTag; 3] = [DistractorTag::Few, DistractorTag::Medium, DistractorTag::Abundant];

    /// Bucket of the number of products present in a clip.
    pub fn from_count(n: usize) -> Self {
        if n <= 3 {
            DistractorTag::Few
        } else if n <= 7 {
            DistractorTag::Medium
        } else {
            DistractorTag::Abundant
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistractorTag::Few => "few",
            DistractorTag::Medium => "medium",
            DistractorTag::Abundant => "abundant",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariationTags {
    pub scale: ScaleTag,
    pub visibility: VisibilityTag,
    pub distractors: DistractorTag,
}

impl VariationTags {
    /// `axis=value` labels, one per axis.
    pub fn labels(&self) -> [String; 3] {
        [
            format!("scale={}", self.scale.name()),
            format!("visibility={}", self.visibility.name()),
            format!("distractors={}", self.distractors.name()),
        ]
    }
}

impl fmt::Display for VariationTags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.scale.name(), self.visibility.name(), self.distractors.name())
    }
}

/// Axis-aligned box in normalized `[0, 1]` frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn full() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        ok(self.x) && ok(self.y) && ok(self.w) && ok(self.h) && self.x + self.w <= 1.0 + 1e-9 && self.y + self.h <= 1.0 + 1e-9
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Grows the box by `margin` of its size on every side, clipped to the frame.
    pub fn expand(&self, margin: f64) -> Self {
        let x0 = (self.x - margin * self.w).max(0.0);
        let y0 = (self.y - margin * self.h).max(0.0);
        let x1 = (self.x + self.w * (1.0 + margin)).min(1.0);
        let y1 = (self.y + self.h * (1.0 + margin)).min(1.0);
        Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One clip/shop-image pair as stored in `manifest.jsonl`. Paths are
/// relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: u64,
    pub split: Split,
    pub product_id: String,
    pub image_path: String,
    pub frame_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embed_image: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embed_clip: Option<Vec<f64>>,
    /// Per frame; `None` where the product is not visible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<Option<BBox>>>,
    pub variation_tags: VariationTags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SynthScene>,
}

impl PairRecord {
    pub fn validate(&self) -> Result<()> {
        if self.frame_paths.is_empty() {
            return Err(Error::EmptyClip);
        }
        if let Some(boxes) = &self.boxes {
            if boxes.len() != self.frame_paths.len() {
                return Err(shape_err("pair boxes", self.frame_paths.len(), boxes.len()));
            }
            if let Some(b) = boxes.iter().flatten().find(|b| !b.is_valid()) {
                return Err(Error::Config(format!("pair {}: box {b:?} outside [0,1]", self.pair_id)));
            }
        }
        Ok(())
    }
}

/// One shop image as stored in `gallery.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryRecord {
    pub product_id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embed: Option<Vec<f64>>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// A dataset directory: `images/`, `clips/<pair_id>/frame_%03d.png`,
/// `manifest.jsonl` and `gallery.jsonl`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub pairs: Vec<PairRecord>,
    pub gallery: Vec<GalleryRecord>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let pairs: Vec<PairRecord> = read_jsonl(&root.join(MANIFEST_FILE))?;
        for p in &pairs {
            p.validate()?;
        }
        let gallery_path = root.join(GALLERY_FILE);
        let gallery = if gallery_path.exists() {
            read_jsonl(&gallery_path)?
        } else {
            Vec::new()
        };
        Ok(Self { root, pairs, gallery })
    }

    pub fn split(&self, split: Split) -> Vec<PairRecord> {
        self.pairs.iter().filter(|p| p.split == split).cloned().collect()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Maps 8-bit RGB to a `[C, H, W]` tensor in `[-1, 1]`.
pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("non-empty image")
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub record: PairRecord,
    pub image: Tensor,
    pub frames: Vec<Tensor>,
}

/// Reads shop images and `frames` evenly sampled clip frames for each record.
pub fn load_pairs(ds: &Dataset, records: &[PairRecord], frames: usize) -> Result<Vec<LoadedPair>> {
    records
        .par_iter()
        .map(|r| {
            let image = load_image(&ds.path(&r.image_path))?;
            let idx = sample_frames(r.frame_paths.len(), frames);
            let mut cache: Vec<Option<Tensor>> = vec![None; r.frame_paths.len()];
            let mut out = Vec::with_capacity(idx.len());
            for i in idx {
                if cache[i].is_none() {
                    cache[i] = Some(load_image(&ds.path(&r.frame_paths[i]))?);
                }
                out.push(cache[i].clone().unwrap());
            }
            Ok(LoadedPair {
                record: r.clone(),
                image,
                frames: out,
            })
        })
        .collect()
}

/// Evenly spaced indices `round(j·(L−1)/(F−1))`; short clips repeat their last frame.
pub fn sample_frames(len: usize, frames: usize) -> Vec<usize> {
    assert!(len > 0, "clip must have at least one frame");
    if frames <= 1 {
        return vec![0; frames];
    }
    if len < frames {
        return (0..frames).map(|j| j.min(len - 1)).collect();
    }
    (0..frames)
        .map(|j| ((j * (len - 1)) as f64 / (frames - 1) as f64).round() as usize)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub probability: f64,
    pub max_ratio: f64,
    /// Drop whole frames instead of patch regions.
    pub whole_frame: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            max_ratio: 0.9,
            whole_frame: false,
        }
    }
}

/// With probability `cfg.probability`, draws `r ~ U[0, max_ratio]` and zeroes
/// `⌊r·N⌋` randomly chosen `patch × patch` regions in every frame (or `⌊r·F⌋`
/// whole frames).
pub fn mask_augment(frames: &[Tensor], patch: usize, cfg: &MaskConfig, rng: &mut impl Rng) -> Vec<Tensor> {
    let mut out = frames.to_vec();
    if !rng.gen_bool(cfg.probability.clamp(0.0, 1.0)) {
        return out;
    }
    let r = rng.gen::<f64>() * cfg.max_ratio.clamp(0.0, 0.9);
    if cfg.whole_frame {
        let k = (r * out.len() as f64).floor() as usize;
        for i in sample(rng, out.len(), k) {
            out[i].fill(0.0);
        }
        return out;
    }
    for fr in &mut out {
        let (c, h, w) = (fr.shape()[0], fr.shape()[1], fr.shape()[2]);
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let k = (r * n as f64).floor() as usize;
        let data = fr.data_mut();
        for cell in sample(rng, n, k) {
            let (gy, gx) = (cell / gw, cell % gw);
            for ch in 0..c {
                for y in gy * patch..(gy + 1) * patch {
                    let row = (ch * h + y) * w;
                    data[row + gx * patch..row + (gx + 1) * patch].fill(0.0);
                }
            }
        }
    }
    out
}

fn resize_channels(frame: &Tensor, x0: u32, y0: u32, cw: u32, ch: u32, out: usize) -> Tensor {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let mut data = Vec::with_capacity(c * out * out);
    if (cw, ch) == (out as u32, out as u32) {
        for k in 0..c {
            for y in y0 as usize..y0 as usize + out {
                let row = (k * h + y) * w + x0 as usize;
                data.extend_from_slice(&frame.data()[row..row + out]);
            }
        }
        return Tensor::new(&[c, out, out], data).expect("crop shape");
    }
    for k in 0..c {
        // `image` clamps f32 pixels to [0, 1], so each plane is mapped into that range and back
        let src = &frame.data()[k * h * w..(k + 1) * h * w];
        let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
        let span = (src.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lo).max(f64::MIN_POSITIVE);
        let plane: Vec<f32> = src.iter().map(|&v| ((v - lo) / span) as f32).collect();
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, plane).expect("plane size");
        let crop = imageops::crop_imm(&buf, x0, y0, cw, ch).to_image();
        let resized = imageops::resize(&crop, out as u32, out as u32, FilterType::Triangle);
        data.extend(resized.into_raw().into_iter().map(|v| lo + v as f64 * span));
    }
    Tensor::new(&[c, out, out], data).expect("resized shape")
}

/// Crops `frame` (`[C, H, W]`) to `bbox` and resizes to `out × out`. A box
/// narrower than 2 px in either direction falls back to the full frame; the
/// flag reports the fallback.
pub fn crop_to_box(frame: &Tensor, bbox: &BBox, out: usize) -> Result<(Tensor, bool)> {
    if frame.shape().len() != 3 {
        return Err(shape_err("crop_to_box", "[C, H, W]", format!("{:?}", frame.shape())));
    }
    let (h, w) = (frame.shape()[1] as f64, frame.shape()[2] as f64);
    let x0 = (bbox.x * w).floor().clamp(0.0, w);
    let y0 = (bbox.y * h).floor().clamp(0.0, h);
    let x1 = ((bbox.x + bbox.w) * w).ceil().clamp(0.0, w);
    let y1 = ((bbox.y + bbox.h) * h).ceil().clamp(0.0, h);
    if !bbox.is_valid() || x1 - x0 < 2.0 || y1 - y0 < 2.0 {
        return Ok((resize_channels(frame, 0, 0, w as u32, h as u32, out), true));
    }
    Ok((
        resize_channels(frame, x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32, out),
        false,
    ))
}

#[derive(Clone, Debug)]
pub struct BoxedClip {
    pub frames: Vec<Tensor>,
    pub fallbacks: usize,
    /// No frame carried a usable box; the full frames were kept.
    pub missed: bool,
}

/// Replaces a clip by crops of its boxed frames (grown by `margin`), resampled
/// back to `frames.len()`. Frames without a box are dropped.
pub fn box_clip(frames: &[Tensor], boxes: &[Option<BBox>], out: usize, margin: f64) -> Result<BoxedClip> {
    if frames.len() != boxes.len() {
        return Err(shape_err("box_clip", frames.len(), boxes.len()));
    }
    let mut crops = Vec::new();
    let mut fallbacks = 0;
    for (f, b) in frames.iter().zip(boxes) {
        if let Some(b) = b {
            let (t, fell) = crop_to_box(f, &b.expand(margin), out)?;
            if fell {
                fallbacks += 1;
            } else {
                crops.push(t);
            }
        }
    }
    if crops.is_empty() {
        let kept = frames
            .iter()
            .map(|f| crop_to_box(f, &BBox::full(), out).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        return Ok(BoxedClip {
            frames: kept,
            fallbacks,
            missed: true,
        });
    }
    let idx = sample_frames(crops.len(), frames.len());
    Ok(BoxedClip {
        frames: idx.into_iter().map(|i| crops[i].clone()).collect(),
        fallbacks,
        missed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_sampling_examples() {
        assert_eq!(sample_frames(10, 10), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_frames(19, 10), (0..10).map(|j| 2 * j).collect::<Vec<_>>());
        assert_eq!(sample_frames(3, 4), vec![0, 1, 2, 2]);
        assert_eq!(sample_frames(5, 1), vec![0]);
    }

    #[test]
    fn tag_thresholds() {
        assert_eq!(ScaleTag::from_fraction(0.2), ScaleTag::Small);
        assert_eq!(ScaleTag::from_fraction(0.21), ScaleTag::Medium);
        assert_eq!(ScaleTag::from_fraction(0.41), ScaleTag::Large);
        assert_eq!(VisibilityTag::from_fraction(0.4), VisibilityTag::Short);
        assert_eq!(VisibilityTag::from_fraction(0.7), VisibilityTag::Medium);
        assert_eq!(VisibilityTag::from_fraction(0.75), VisibilityTag::Long);
        assert_eq!(DistractorTag::from_count(3), DistractorTag::Few);
        assert_eq!(DistractorTag::from_count(7), DistractorTag::Medium);
        assert_eq!(DistractorTag::from_count(8), DistractorTag::Abundant);
    }

    fn ramp(c: usize, s: usize) -> Tensor {
        Tensor::new(&[c, s, s], (0..c * s * s).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap()
    }

    #[test]
    fn mask_probability_miss_and_determinism() {
        let frames = vec![ramp(3, 16); 3];
        let never = MaskConfig {
            probability: 0.0,
            ..MaskConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mask_augment(&frames, 4, &never, &mut rng), frames);
        let zero_ratio = MaskConfig {
            probability: 1.0,
            max_ratio: 0.0,
            whole_frame: false,
        };
        assert_eq!(mask_augment(&frames, 4, &zero_ratio, &mut rng), frames);

        let cfg = MaskConfig {
            probability: 1.0,
            ..MaskConfig::default()
        };
        let a = mask_augment(&frames, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = mask_augment(&frames, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mask_never_covers_everything() {
        let frames = vec![Tensor::filled(&[1, 8, 8], 1.0); 2];
        for whole_frame in [false, true] {
            let cfg = MaskConfig {
                probability: 1.0,
                max_ratio: 0.9,
                whole_frame,
            };
            for seed in 0..200 {
                let out = mask_augment(&frames, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
                let kept: usize = out.iter().map(|f| f.data().iter().filter(|&&v| v != 0.0).count()).sum();
                let total: usize = frames.iter().map(Tensor::len).sum();
                assert!(kept as f64 >= 0.1 * total as f64 - 1e-9 && kept > 0);
            }
        }
    }

    #[test]
    fn crop_examples() {
        let f = ramp(3, 8);
        let (t, fell) = crop_to_box(&f, &BBox::full(), 8).unwrap();
        assert!(!fell);
        assert_eq!(t, f);

        let half = BBox {
            x: 0.25,
            y: 0.25,
            w: 0.5,
            h: 0.5,
        };
        let (t, fell) = crop_to_box(&f, &half, 4).unwrap();
        assert!(!fell);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = f.data()[(c * 8 + y + 2) * 8 + x + 2];
                    assert!((t.data()[(c * 4 + y) * 4 + x] - want).abs() < 1e-6);
                }
            }
        }

        let thin = BBox {
            x: 0.5,
            y: 0.1,
            w: 0.0,
            h: 0.5,
        };
        let (t, fell) = crop_to_box(&f, &thin, 8).unwrap();
        assert!(fell);
        assert_eq!(t, f);
    }

    #[test]
    fn resized_crop_keeps_negative_pixels() {
        let flat = Tensor::new(&[3, 16, 16], vec![-0.6; 3 * 256]).unwrap();
        let half = BBox { x: 0.25, y: 0.25, w: 0.5, h: 0.5 };
        let (c, fell) = crop_to_box(&flat, &half, 16).unwrap();
        assert!(!fell);
        assert!(c.data().iter().all(|v| (v + 0.6).abs() < 1e-6));
        let signed = Tensor::new(&[1, 16, 16], (0..256).map(|i| (i % 16) as f64 / 7.5 - 1.0).collect()).unwrap();
        let (c, _) = crop_to_box(&signed, &BBox { x: 0.0, y: 0.0, w: 0.5, h: 1.0 }, 16).unwrap();
        let row = &c.data()[..16];
        assert!(row[0] < -0.9 && row.windows(2).all(|p| p[1] >= p[0] - 1e-6));
    }

    #[test]
    fn box_clip_drops_unboxed_frames() {
        let frames = vec![ramp(3, 8), Tensor::zeros(&[3, 8, 8]), ramp(3, 8)];
        let boxes = vec![Some(BBox::full()), None, Some(BBox::full())];
        let c = box_clip(&frames, &boxes, 8, 0.0).unwrap();
        assert!(!c.missed);
        assert_eq!(c.frames.len(), 3);
        assert!(c.frames.iter().all(|f| *f == frames[0]));
        let none = box_clip(&frames, &[None, None, None], 8, 0.0).unwrap();
        assert!(none.missed);
    }

    #[test]
    fn record_validation() {
        let mut r = PairRecord {
            pair_id: 1,
            split: Split::Train,
            product_id: "p0001".into(),
            image_path: "images/p0001.png".into(),
            frame_paths: vec!["a.png".into()],
            text_embed_image: None,
            text_embed_clip: None,
            boxes: Some(vec![Some(BBox {
                x: 0.8,
                y: 0.0,
                w: 0.5,
                h: 0.1,
            })]),
            variation_tags: VariationTags {
                scale: ScaleTag::Small,
                visibility: VisibilityTag::Long,
                distractors: DistractorTag::Few,
            },
            scene: None,
        };
        assert!(r.validate().is_err());
        r.boxes = None;
        r.validate().unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<PairRecord>(&json).unwrap(), r);
        r.frame_paths.clear();
        assert!(matches!(r.validate(), Err(Error::EmptyClip)));
    }
}
