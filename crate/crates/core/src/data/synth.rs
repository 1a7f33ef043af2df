//! Procedural glyph scenes standing in for livestream clips and shop images.
//!
//! A product identity is a glyph: shape × fill pattern × primary colour ×
//! secondary colour. Identities differing in one attribute act as near
//! duplicates. Clips show the intended glyph at a sampled scale in a subset of
//! frames, over a cluttered, jittered background with static distractor
//! glyphs taken from a background catalogue shared by every split.

use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    write_jsonl, BBox, DistractorTag, GalleryRecord, PairRecord, ScaleTag, Split, VariationTags, VisibilityTag,
    GALLERY_FILE, MANIFEST_FILE,
};
use crate::error::{Error, Result};

const SHAPES: usize = 6;
const PATTERNS: usize = 4;
const COLOURS: usize = 8;
pub const NUM_IDENTITIES: usize = SHAPES * PATTERNS * COLOURS * (COLOURS - 1);

const PALETTE: [[f32; 3]; COLOURS] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.98, 0.55, 0.05],
    [0.05, 0.05, 0.05],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Glyph {
    pub shape: u8,
    pub pattern: u8,
    pub colour: u8,
    pub secondary: u8,
}

impl Glyph {
    pub fn from_identity(id: usize) -> Self {
        assert!(id < NUM_IDENTITIES, "identity {id} out of range");
        let secondary = id % (COLOURS - 1);
        let rest = id / (COLOURS - 1);
        Self {
            shape: (rest % SHAPES) as u8,
            pattern: (rest / SHAPES % PATTERNS) as u8,
            colour: (rest / SHAPES / PATTERNS) as u8,
            secondary: secondary as u8,
        }
    }

    pub fn identity(&self) -> usize {
        ((self.colour as usize * PATTERNS + self.pattern as usize) * SHAPES + self.shape as usize) * (COLOURS - 1)
            + self.secondary as usize
    }

    /// Shape membership in unit box coordinates, with `t` half a pixel; every
    /// shape touches all four edges of its box.
    fn covers(&self, u: f64, v: f64, t: f64) -> bool {
        let (du, dv) = ((u - 0.5).abs(), (v - 0.5).abs());
        match self.shape {
            0 => true,
            1 => du * du + dv * dv <= (0.5 + t) * (0.5 + t),
            2 => du <= v / 2.0 + t,
            3 => du + dv <= 0.5 + t,
            4 => du + 0.5 * dv <= 0.5 + t,
            _ => du <= 1.0 / 6.0 || dv <= 1.0 / 6.0,
        }
    }

    fn colour_at(&self, u: f64, v: f64) -> [f32; 3] {
        let second = match self.pattern {
            0 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.04,
            1 => ((v * 4.0).floor() as i64) % 2 == 1,
            2 => ((u * 4.0).floor() as i64) % 2 == 1,
            _ => ((u * 3.0).floor() as i64 + (v * 3.0).floor() as i64) % 2 == 1,
        };
        let c = self.colour as usize;
        if second {
            PALETTE[(c + 1 + self.secondary as usize) % COLOURS]
        } else {
            PALETTE[c]
        }
    }
}

pub fn product_id(identity: usize) -> String {
    format!("p{identity:04}")
}

/// Ground truth of one rendered clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub product_glyph: Glyph,
    pub distractor_glyphs: Vec<Glyph>,
    /// Configured area fraction of the product's bounding box.
    pub scale_fraction: f64,
    pub visible_fraction: f64,
    /// Products in the clip, the intended one included.
    pub n_products: usize,
    pub visible_frames: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Records in the manifest, test pairs included.
    pub pairs: usize,
    pub test_pairs: usize,
    /// Shop images in the gallery beyond the test products.
    pub gallery_extra: usize,
    /// Size of the distractor catalogue.
    pub background_pool: usize,
    pub image_size: usize,
    pub frames: usize,
    pub text_dim: usize,
    pub text_noise_image: f64,
    pub text_noise_clip: f64,
    pub scale_small: [f64; 2],
    pub scale_medium: [f64; 2],
    pub scale_large: [f64; 2],
    pub products_few: [usize; 2],
    pub products_medium: [usize; 2],
    pub products_abundant: [usize; 2],
    /// Area fraction range of distractor glyphs.
    pub distractor_area: [f64; 2],
    /// Side of the shop-image glyph relative to the canvas.
    pub shop_fill: f64,
    pub clutter: usize,
    pub illumination: f64,
    /// Per-frame displacement of the product, in pixels.
    pub motion: usize,
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pairs: 700,
            test_pairs: 100,
            gallery_extra: 200,
            background_pool: 100,
            image_size: 32,
            frames: 4,
            text_dim: 16,
            text_noise_image: 0.2,
            text_noise_clip: 0.8,
            scale_small: [0.06, 0.2],
            scale_medium: [0.2, 0.4],
            scale_large: [0.4, 0.6],
            products_few: [1, 3],
            products_medium: [4, 7],
            products_abundant: [8, 10],
            distractor_area: [0.02, 0.08],
            shop_fill: 0.75,
            clutter: 6,
            illumination: 0.2,
            motion: 2,
            pixel_noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let need = self.pairs + self.gallery_extra + self.background_pool;
        if need > NUM_IDENTITIES {
            return Err(Error::Config(format!(
                "{need} identities requested but only {NUM_IDENTITIES} glyphs exist"
            )));
        }
        if self.test_pairs > self.pairs {
            return Err(Error::Config("test_pairs exceeds pairs".into()));
        }
        if self.frames == 0 || self.image_size < 8 {
            return Err(Error::Config("need at least one frame and an 8 px canvas".into()));
        }
        if self.products_abundant[1] > self.background_pool + 1 {
            return Err(Error::Config("background pool smaller than the largest distractor set".into()));
        }
        Ok(())
    }

    fn scale_range(&self, tag: ScaleTag) -> [f64; 2] {
        match tag {
            ScaleTag::Small => self.scale_small,
            ScaleTag::Medium => self.scale_medium,
            ScaleTag::Large => self.scale_large,
        }
    }

    fn product_range(&self, tag: DistractorTag) -> [usize; 2] {
        match tag {
            DistractorTag::Few => self.products_few,
            DistractorTag::Medium => self.products_medium,
            DistractorTag::Abundant => self.products_abundant,
        }
    }
}

/// Identity assignment for a generated dataset; all lists are disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityPlan {
    /// Product identity of each pair, train pairs first.
    pub pair_products: Vec<usize>,
    pub gallery_extra: Vec<usize>,
    pub background: Vec<usize>,
    pub train_pairs: usize,
}

impl IdentityPlan {
    pub fn new(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ids: Vec<usize> = (0..NUM_IDENTITIES).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut it = ids.into_iter();
        let pair_products = it.by_ref().take(cfg.pairs).collect();
        let gallery_extra = it.by_ref().take(cfg.gallery_extra).collect();
        let background = it.take(cfg.background_pool).collect();
        Ok(Self {
            pair_products,
            gallery_extra,
            background,
            train_pairs: cfg.pairs - cfg.test_pairs,
        })
    }

    pub fn split_of(&self, pair_id: u64) -> Split {
        if (pair_id as usize) < self.train_pairs {
            Split::Train
        } else {
            Split::Test
        }
    }

    /// Cell of a pair, cycling through all 27 combinations within its split.
    pub fn tags_of(&self, pair_id: u64) -> VariationTags {
        let k = match self.split_of(pair_id) {
            Split::Train => pair_id as usize,
            Split::Test => pair_id as usize - self.train_pairs,
        };
        VariationTags {
            scale: ScaleTag::ALL[k % 3],
            visibility: VisibilityTag::ALL[k / 3 % 3],
            distractors: DistractorTag::ALL[k / 9 % 3],
        }
    }
}

struct Raster {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Raster {
    fn filled(size: usize, c: [f32; 3]) -> Self {
        Self {
            size,
            px: vec![c; size * size],
        }
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: [f32; 3]) {
        let s = self.size as i64;
        for y in y0.max(0)..(y0 + h).min(s) {
            for x in x0.max(0)..(x0 + w).min(s) {
                self.px[(y * s + x) as usize] = c;
            }
        }
    }

    /// Draws a glyph in the `side × side` box at `(x0, y0)`; returns the
    /// inclusive pixel bounds actually painted.
    fn draw(&mut self, g: &Glyph, x0: i64, y0: i64, side: usize) -> Option<[i64; 4]> {
        let s = self.size as i64;
        let mut bounds: Option<[i64; 4]> = None;
        for dy in 0..side as i64 {
            for dx in 0..side as i64 {
                let (x, y) = (x0 + dx, y0 + dy);
                if x < 0 || y < 0 || x >= s || y >= s {
                    continue;
                }
                let u = (dx as f64 + 0.5) / side as f64;
                let v = (dy as f64 + 0.5) / side as f64;
                if !g.covers(u, v, 0.5 / side as f64) {
                    continue;
                }
                self.px[(y * s + x) as usize] = g.colour_at(u, v);
                bounds = Some(match bounds {
                    None => [x, y, x, y],
                    Some([a, b, c, d]) => [a.min(x), b.min(y), c.max(x), d.max(y)],
                });
            }
        }
        bounds
    }

    fn to_image(&self) -> RgbImage {
        let s = self.size as u32;
        RgbImage::from_fn(s, s, |x, y| {
            let p = self.px[(y * s + x) as usize];
            image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }
}

/// A clean, centred glyph on a plain light background.
pub fn render_shop_image(identity: usize, cfg: &SynthConfig) -> RgbImage {
    let s = cfg.image_size;
    let mut r = Raster::filled(s, [0.92, 0.92, 0.92]);
    let side = ((cfg.shop_fill * s as f64).round() as usize).clamp(2, s);
    let off = ((s - side) / 2) as i64;
    r.draw(&Glyph::from_identity(identity), off, off, side);
    r.to_image()
}

#[derive(Clone, Debug)]
pub struct RenderedPair {
    pub record: PairRecord,
    pub shop: RgbImage,
    pub frames: Vec<RgbImage>,
}

fn overlap(a: [i64; 4], b: [i64; 4]) -> i64 {
    let w = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let h = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    w.max(0) * h.max(0)
}

fn normal_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_noisy(base: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = base.iter().map(|b| b + noise * rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn text_base(identity: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874_0000_0000 ^ identity as u64);
    normal_vec(dim, &mut rng)
}

/// Text embedding attached to a product's shop image.
pub fn shop_text_embedding(identity: usize, cfg: &SynthConfig, seed: u64) -> Vec<f64> {
    let base = text_base(identity, cfg.text_dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7368_6f70_0000_0000 ^ identity as u64);
    unit_noisy(&base, cfg.text_noise_image, &mut rng)
}

fn pick_in(range: [usize; 2], rng: &mut impl Rng) -> usize {
    rng.gen_range(range[0]..=range[1])
}

/// Renders one pair in memory. The per-pair stream is seeded with
/// `seed ⊕ pair_id`, so pairs can be generated in any order.
const LAYOUT_ATTEMPTS: usize = 64;

/// Places `n` distractor squares that each overlap the product and every other
/// distractor by at most half their area; `None` when random search fails.
fn place_distractors(cfg: &SynthConfig, product_box: [i64; 4], n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<[i64; 4]>> {
    let s = cfg.image_size as i64;
    let mut placed: Vec<[i64; 4]> = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.gen_range(cfg.distractor_area[0]..=cfg.distractor_area[1]);
        let ds = ((a.sqrt() * s as f64).round() as i64).clamp(3, s);
        let area = ds * ds;
        let spot = (0..400).find_map(|_| {
            let cand = [rng.gen_range(0..=s - ds), rng.gen_range(0..=s - ds), ds, ds];
            let clash = placed.iter().any(|&q| 2 * overlap(q, cand) > area.min(q[2] * q[3]))
                || 2 * overlap(product_box, cand) > area;
            (!clash).then_some(cand)
        })?;
        placed.push(spot);
    }
    Some(placed)
}

pub fn render_pair(cfg: &SynthConfig, plan: &IdentityPlan, pair_id: u64, seed: u64) -> Result<RenderedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pair_id);
    let s = cfg.image_size;
    let f = cfg.frames;
    let identity = plan.pair_products[pair_id as usize];
    let tags = plan.tags_of(pair_id);
    let cell = tags.to_string();

    let [lo, hi] = cfg.scale_range(tags.scale);
    let p = hi - rng.gen::<f64>() * (hi - lo);
    let side = ((p.sqrt() * s as f64).round() as usize).clamp(2, s);

    let ks: Vec<usize> = (1..=f)
        .filter(|&k| VisibilityTag::from_fraction(k as f64 / f as f64) == tags.visibility)
        .collect();
    let k = *ks
        .choose(&mut rng)
        .ok_or_else(|| Error::InfeasibleLayout(format!("{cell}: no visible-frame count fits {f} frames")))?;
    let mut visible = vec![false; f];
    for i in sample(&mut rng, f, k) {
        visible[i] = true;
    }

    let n_products = pick_in(cfg.product_range(tags.distractors), &mut rng);
    let distractor_ids: Vec<usize> = sample(&mut rng, plan.background.len(), n_products - 1)
        .into_iter()
        .map(|i| plan.background[i])
        .collect();

    let max_off = (s - side) as i64;
    let mut layout = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        let base = [rng.gen_range(0..=max_off), rng.gen_range(0..=max_off)];
        if let Some(placed) = place_distractors(cfg, [base[0], base[1], side as i64, side as i64], distractor_ids.len(), &mut rng) {
            layout = Some((base, placed));
            break;
        }
    }
    let (base, placed) = layout
        .ok_or_else(|| Error::InfeasibleLayout(format!("{cell}: cannot place {} distractors", distractor_ids.len())))?;

    let bg = [
        rng.gen_range(0.3..0.6f32),
        rng.gen_range(0.3..0.6f32),
        rng.gen_range(0.3..0.6f32),
    ];
    let clutter: Vec<([i64; 4], [f32; 3])> = (0..cfg.clutter)
        .map(|_| {
            let long = rng.gen_range(3..=(s as i64 / 2).max(3));
            let thick = rng.gen_range(1..=2);
            let (w, h) = if rng.gen_bool(0.5) { (long, thick) } else { (thick, long) };
            let g = rng.gen_range(0.2..0.8f32);
            let tint = rng.gen_range(-0.08..0.08f32);
            ([rng.gen_range(0..s as i64), rng.gen_range(0..s as i64), w, h], [g + tint, g, g - tint])
        })
        .collect();

    let motion = cfg.motion as i64;
    let mut frames = Vec::with_capacity(f);
    let mut boxes = Vec::with_capacity(f);
    for &vis in &visible {
        let mut r = Raster::filled(s, bg);
        for px in r.px.iter_mut() {
            let n = cfg.pixel_noise as f32 * rng.sample::<f32, _>(StandardNormal);
            *px = px.map(|c| c + n);
        }
        for (rect, c) in &clutter {
            r.fill_rect(rect[0], rect[1], rect[2], rect[3], *c);
        }
        for (g, b) in distractor_ids.iter().zip(&placed) {
            let (jx, jy) = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
            r.draw(&Glyph::from_identity(*g), b[0] + jx, b[1] + jy, b[2] as usize);
        }
        let mut bbox = None;
        if vis {
            let x = (base[0] + rng.gen_range(-motion..=motion)).clamp(0, max_off);
            let y = (base[1] + rng.gen_range(-motion..=motion)).clamp(0, max_off);
            if let Some([x0, y0, x1, y1]) = r.draw(&Glyph::from_identity(identity), x, y, side) {
                bbox = Some(BBox {
                    x: x0 as f64 / s as f64,
                    y: y0 as f64 / s as f64,
                    w: (x1 - x0 + 1) as f64 / s as f64,
                    h: (y1 - y0 + 1) as f64 / s as f64,
                });
            }
        }
        let gain = 1.0 + cfg.illumination as f32 * rng.gen_range(-1.0..1.0f32);
        let bias: [f32; 3] = [0; 3].map(|_| rng.gen_range(-0.03..0.03f32));
        for px in r.px.iter_mut() {
            for c in 0..3 {
                px[c] = px[c] * gain + bias[c];
            }
        }
        frames.push(r.to_image());
        boxes.push(bbox);
    }

    let base_text = text_base(identity, cfg.text_dim, seed);
    let text_clip = unit_noisy(&base_text, cfg.text_noise_clip, &mut rng);
    let pid = product_id(identity);
    let record = PairRecord {
        pair_id,
        split: plan.split_of(pair_id),
        product_id: pid.clone(),
        image_path: format!("images/{pid}.png"),
        frame_paths: (0..f).map(|i| format!("clips/{pair_id}/frame_{i:03}.png")).collect(),
        text_embed_image: Some(shop_text_embedding(identity, cfg, seed)),
        text_embed_clip: Some(text_clip),
        boxes: Some(boxes),
        variation_tags: tags,
        scene: Some(SynthScene {
            product_glyph: Glyph::from_identity(identity),
            distractor_glyphs: distractor_ids.iter().map(|&g| Glyph::from_identity(g)).collect(),
            scale_fraction: p,
            visible_fraction: k as f64 / f as f64,
            n_products,
            visible_frames: visible,
        }),
    };
    Ok(RenderedPair {
        shop: render_shop_image(identity, cfg),
        frames,
        record,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub gallery_size: usize,
}

/// Writes `images/`, `clips/<pair_id>/frame_%03d.png`, `manifest.jsonl`,
/// `gallery.jsonl` and `synth_config.json` under `out`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<SynthSummary> {
    let plan = IdentityPlan::new(cfg, seed)?;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("clips"))?;
    let records: Vec<PairRecord> = (0..cfg.pairs as u64)
        .into_par_iter()
        .map(|id| {
            let r = render_pair(cfg, &plan, id, seed)?;
            let dir = out.join("clips").join(id.to_string());
            fs::create_dir_all(&dir)?;
            for (path, img) in r.record.frame_paths.iter().zip(&r.frames) {
                img.save(out.join(path))?;
            }
            r.shop.save(out.join(&r.record.image_path))?;
            Ok(r.record)
        })
        .collect::<Result<_>>()?;

    let gallery_ids: Vec<usize> = plan.pair_products[plan.train_pairs..]
        .iter()
        .chain(&plan.gallery_extra)
        .copied()
        .collect();
    let gallery: Vec<GalleryRecord> = gallery_ids
        .par_iter()
        .map(|&id| {
            let pid = product_id(id);
            let path = format!("images/{pid}.png");
            render_shop_image(id, cfg).save(out.join(&path))?;
            Ok(GalleryRecord {
                product_id: pid,
                image_path: path,
                text_embed: Some(shop_text_embedding(id, cfg, seed)),
            })
        })
        .collect::<Result<_>>()?;

    write_jsonl(&out.join(MANIFEST_FILE), &records)?;
    write_jsonl(&out.join(GALLERY_FILE), &gallery)?;
    fs::write(out.join("synth_config.json"), serde_json::to_vec_pretty(&(cfg, seed))?)?;
    Ok(SynthSummary {
        train_pairs: plan.train_pairs,
        test_pairs: cfg.test_pairs,
        gallery_size: gallery.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            pairs: 40,
            test_pairs: 10,
            gallery_extra: 10,
            background_pool: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn identity_roundtrip() {
        let mut seen = HashSet::new();
        for id in 0..NUM_IDENTITIES {
            let g = Glyph::from_identity(id);
            assert_eq!(g.identity(), id);
            assert!(seen.insert(g));
        }
    }

    #[test]
    fn shapes_touch_their_box() {
        for shape in 0..SHAPES as u8 {
            let g = Glyph {
                shape,
                pattern: 0,
                colour: 0,
                secondary: 0,
            };
            let mut r = Raster::filled(40, [0.0; 3]);
            assert_eq!(r.draw(&g, 4, 6, 30), Some([4, 6, 33, 35]), "shape {shape}");
        }
    }

    #[test]
    fn plan_is_disjoint() {
        let plan = IdentityPlan::new(&SynthConfig::default(), 3).unwrap();
        let train: HashSet<_> = plan.pair_products[..plan.train_pairs].iter().collect();
        let test: HashSet<_> = plan.pair_products[plan.train_pairs..].iter().collect();
        let bg: HashSet<_> = plan.background.iter().collect();
        let extra: HashSet<_> = plan.gallery_extra.iter().collect();
        assert!(train.is_disjoint(&test));
        assert!(bg.is_disjoint(&train) && bg.is_disjoint(&test) && bg.is_disjoint(&extra));
        assert!(extra.is_disjoint(&train) && extra.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 700);
    }

    #[test]
    fn rendered_tags_follow_thresholds() {
        let cfg = small_cfg();
        let plan = IdentityPlan::new(&cfg, 5).unwrap();
        for id in 0..cfg.pairs as u64 {
            let r = render_pair(&cfg, &plan, id, 5).unwrap();
            let sc = r.record.scene.as_ref().unwrap();
            let tags = r.record.variation_tags;
            assert_eq!(ScaleTag::from_fraction(sc.scale_fraction), tags.scale);
            assert_eq!(VisibilityTag::from_fraction(sc.visible_fraction), tags.visibility);
            assert_eq!(DistractorTag::from_count(sc.n_products), tags.distractors);
            let shown = sc.visible_frames.iter().filter(|&&v| v).count();
            if tags.visibility == VisibilityTag::Short {
                assert!(shown as f64 <= 0.4 * cfg.frames as f64);
            }
            if tags.scale == ScaleTag::Large {
                assert!(sc.scale_fraction > 0.4);
            }
            let boxes = r.record.boxes.as_ref().unwrap();
            for (b, v) in boxes.iter().zip(&sc.visible_frames) {
                assert_eq!(b.is_some(), *v);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small_cfg();
        let plan = IdentityPlan::new(&cfg, 8).unwrap();
        let a = render_pair(&cfg, &plan, 3, 8).unwrap();
        let b = render_pair(&cfg, &plan, 3, 8).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.frames, b.frames);
        let c = render_pair(&cfg, &plan, 3, 9).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn one_frame_cannot_be_medium_visibility() {
        let cfg = SynthConfig {
            frames: 1,
            ..small_cfg()
        };
        let plan = IdentityPlan::new(&cfg, 1).unwrap();
        // pair 3 is in the medium-visibility cell
        assert!(matches!(render_pair(&cfg, &plan, 3, 1), Err(Error::InfeasibleLayout(_))));
    }

    #[test]
    fn too_many_identities_rejected() {
        let cfg = SynthConfig {
            pairs: NUM_IDENTITIES,
            ..SynthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn measured_box_area_tracks_scale_over_1000_scenes() {
        let cfg = SynthConfig {
            pairs: 1000,
            test_pairs: 100,
            gallery_extra: 100,
            background_pool: 100,
            ..SynthConfig::default()
        };
        let plan = IdentityPlan::new(&cfg, 21).unwrap();
        let mut checked = 0;
        for id in 0..cfg.pairs as u64 {
            let r = render_pair(&cfg, &plan, id, 21).unwrap_or_else(|e| panic!("{e}"));
            let p = r.record.scene.as_ref().unwrap().scale_fraction;
            for b in r.record.boxes.as_ref().unwrap().iter().flatten() {
                assert!((b.area() - p).abs() <= 0.05, "pair {id}: area {} vs p {p}", b.area());
                checked += 1;
            }
        }
        assert!(checked >= 1000);
    }

    fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).unwrap() {
                let path = e.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_writes_byte_identical_dataset() {
        let cfg = small_cfg();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_generate(&cfg, 4, a.path()).unwrap();
        synth_generate(&cfg, 4, b.path()).unwrap();
        let (fa, fb) = (files_under(a.path()), files_under(b.path()));
        assert!(fa.len() > cfg.pairs * cfg.frames);
        assert!(fa == fb);
        let c = tempfile::tempdir().unwrap();
        synth_generate(&cfg, 5, c.path()).unwrap();
        assert!(files_under(c.path()) != fa);
    }
}
