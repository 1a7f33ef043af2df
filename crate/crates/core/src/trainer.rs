//! Deterministic mini-batch training: batch selection, augmentation, Adam with
//! two learning-rate groups, warmup plus cosine decay, global-norm clipping,
//! CSV loss logging and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, sha256_hex, write_archive, DType};
use crate::data::{box_clip, LoadedPair, MaskConfig};
use crate::error::{Error, Result};
use crate::model::{Batch, LossComponents, LossOptions, LossToggles, Model, ModelConfig};
use crate::nn::{Grads, ParamStore, Tensor, WeightInit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossOptions,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_encoder: f64,
    pub lr_new: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Apply masking augmentation to training clips.
    pub augment: bool,
    pub mask: MaskConfig,
    /// Feed clips cropped to the product boxes instead of full frames.
    pub box_input: bool,
    pub box_margin: f64,
    /// Warm-start parameters with matching names from a checkpoint.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossOptions::default(),
            batch_size: 16,
            steps: 1000,
            lr_encoder: 1e-4,
            lr_new: 1e-3,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            seed: 0,
            augment: true,
            mask: MaskConfig::default(),
            box_input: false,
            box_margin: 0.15,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Settings that train the desk-scale model from scratch on the synthetic
    /// data within minutes: fan-in initialization, τ = 0.07, one learning rate
    /// for every module, and no masking.
    pub fn desk() -> Self {
        let mut cfg = Self {
            batch_size: 32,
            steps: 600,
            lr_encoder: 1e-3,
            lr_new: 1e-3,
            augment: false,
            ..Self::default()
        };
        cfg.model.encoder.init = WeightInit::FanIn;
        cfg.model.decoder.init = WeightInit::FanIn;
        cfg.loss.temperature = 0.07;
        cfg
    }

    /// Learning rates used when fine-tuning a pretrained encoder at full scale.
    pub fn with_pretrained_rates(mut self) -> Self {
        self.lr_encoder = 1e-7;
        self.lr_new = 1e-4;
        self
    }

    pub fn with_toggles(mut self, toggles: LossToggles) -> Self {
        self.loss.toggles = toggles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::DegenerateBatch(self.batch_size));
        }
        self.loss.toggles.validate()?;
        self.model.encoder.validate()?;
        if !(0.0..1.0).contains(&self.warmup_fraction) || self.clip_norm <= 0.0 {
            return Err(Error::Config("warmup_fraction must lie in [0, 1) and clip_norm be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Multiplier on the base rates: linear warmup then cosine decay to zero.
pub fn lr_factor(step: usize, total: usize, warmup_fraction: f64) -> f64 {
    let warm = (warmup_fraction * total as f64).ceil() as usize;
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let t = ((step - warm) as f64 / span as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update with a learning rate per parameter.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lrs: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in store.iter_mut().enumerate() {
            let g = grads.0[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let lr = lrs[k];
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One training example after input preparation.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Tensor,
    pub frames: Vec<Tensor>,
}

/// Builds training inputs, cropping clips to their boxes when `box_input` is set.
/// Returns the items and the number of crop fallbacks.
pub fn prepare_items(pairs: &[LoadedPair], cfg: &TrainConfig) -> Result<(Vec<TrainItem>, usize)> {
    let mut fallbacks = 0;
    let items = pairs
        .iter()
        .map(|p| {
            let frames = if cfg.box_input {
                let boxes = p.record.boxes.clone().unwrap_or_else(|| vec![None; p.frames.len()]);
                let boxes = if boxes.len() == p.frames.len() {
                    boxes
                } else {
                    // frames were resampled at load time
                    let idx = crate::data::sample_frames(boxes.len(), p.frames.len());
                    idx.into_iter().map(|i| boxes[i]).collect()
                };
                let c = box_clip(&p.frames, &boxes, cfg.model.encoder.image_size, cfg.box_margin)?;
                fallbacks += c.fallbacks;
                c.frames
            } else {
                p.frames.clone()
            };
            Ok(TrainItem {
                image: p.image.clone(),
                frames,
            })
        })
        .collect::<Result<_>>()?;
    Ok((items, fallbacks))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub losses: LossComponents,
    pub grad_norm: f64,
    pub lr_factor: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,L_c,L_m,L_r,total";

    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{}", self.step, l.icl, l.matching, l.reconstruction, l.total)
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    /// Steps completed.
    pub step: usize,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg.model.clone(), cfg.seed)?;
        if let Some(path) = &cfg.init_checkpoint {
            let arch = read_archive(path)?;
            let mut loaded = 0;
            for p in store.iter_mut() {
                if let Some(t) = arch.get(&p.name) {
                    if t.shape() != p.value.shape() {
                        return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
                    }
                    p.value = t.clone();
                    loaded += 1;
                }
            }
            log::info!("initialized {loaded} tensors from {}", path.display());
        }
        let adam = Adam::new(&store);
        Ok(Self {
            cfg,
            model,
            store,
            adam,
            step: 0,
        })
    }

    fn learning_rates(&self, factor: f64) -> Vec<f64> {
        self.store
            .iter()
            .map(|(_, p)| {
                let base = if Model::is_new_module(&p.name) {
                    self.cfg.lr_new
                } else {
                    self.cfg.lr_encoder
                };
                base * factor
            })
            .collect()
    }

    /// Item indices of the batch for `step`: epochs are seeded permutations,
    /// incomplete trailing batches are dropped.
    pub fn batch_indices(&self, n: usize, step: usize) -> Result<Vec<usize>> {
        let b = self.cfg.batch_size;
        if n < b {
            return Err(Error::Config(format!("{n} training pairs cannot fill a batch of {b}")));
        }
        let per_epoch = n / b;
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xE90C ^ ((epoch as u64) << 20)));
        Ok(perm[k * b..(k + 1) * b].to_vec())
    }

    /// Forward, backward and one optimizer update on the batch for the current step.
    pub fn train_step(&mut self, items: &[TrainItem]) -> Result<StepReport> {
        let step = self.step;
        let mut rng = step_rng(self.cfg.seed, step);
        let idx = self.batch_indices(items.len(), step)?;
        let patch = self.cfg.model.encoder.patch_size;
        let mut batch = Batch {
            images: Vec::with_capacity(idx.len()),
            clips: Vec::with_capacity(idx.len()),
        };
        for &i in &idx {
            batch.images.push(items[i].image.clone());
            let frames = if self.cfg.augment {
                crate::data::mask_augment(&items[i].frames, patch, &self.cfg.mask, &mut rng)
            } else {
                items[i].frames.clone()
            };
            batch.clips.push(frames);
        }
        let mut grads = Grads::zeros_like(&self.store);
        let losses = self
            .model
            .objective(&self.store, &batch, &self.cfg.loss, None, &mut rng, Some(&mut grads))?;
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        if grad_norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / grad_norm);
        }
        let factor = lr_factor(step, self.cfg.steps, self.cfg.warmup_fraction);
        let lrs = self.learning_rates(factor);
        self.adam.update(&mut self.store, &grads, &lrs);
        self.step += 1;
        Ok(StepReport {
            step,
            losses,
            grad_norm,
            lr_factor: factor,
        })
    }

    /// Trains until `self.step == until`, writing one CSV line per step. A
    /// non-finite loss dumps the current state under `dump_dir` before failing.
    pub fn train_until(
        &mut self,
        items: &[TrainItem],
        until: usize,
        mut log: Option<&mut dyn Write>,
        dump_dir: Option<&Path>,
    ) -> Result<Vec<StepReport>> {
        let mut out = Vec::new();
        while self.step < until {
            match self.train_step(items) {
                Ok(r) => {
                    if let Some(w) = log.as_deref_mut() {
                        writeln!(w, "{}", r.csv_line())?;
                    }
                    if r.step % 50 == 0 {
                        log::debug!("step {} total {:.5}", r.step, r.losses.total);
                    }
                    out.push(r);
                }
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = dump_dir {
                        let p = dir.join(format!("nonfinite_step{}.bin", self.step));
                        self.save(&p)?;
                        log::error!("non-finite value at step {}; state dumped to {}", self.step, p.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn train(&mut self, items: &[TrainItem], log: Option<&mut dyn Write>) -> Result<Vec<StepReport>> {
        let until = self.cfg.steps;
        self.train_until(items, until, log, None)
    }

    /// Saves parameters and optimizer moments; returns the blob's SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::with_capacity(3 * self.store.len());
        for (_, p) in self.store.iter() {
            tensors.push((p.name.clone(), &p.value));
        }
        for (k, (_, p)) in self.store.iter().enumerate() {
            tensors.push((format!("adam.m.{}", p.name), &self.adam.m[k]));
            tensors.push((format!("adam.v.{}", p.name), &self.adam.v[k]));
        }
        let meta = serde_json::json!({
            "step": self.step,
            "adam_t": self.adam.t,
            "config_hash": self.cfg.hash(),
            "config": self.cfg,
        });
        write_archive(path, &tensors, DType::F64, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arch = read_archive(path)?;
        let meta = &arch.manifest.metadata;
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        let expect = meta["config_hash"].as_str().unwrap_or_default();
        if cfg.hash() != expect {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let mut t = Self::new(TrainConfig {
            init_checkpoint: None,
            ..cfg.clone()
        })?;
        t.cfg = cfg;
        let names: Vec<String> = t.store.iter().map(|(_, p)| p.name.clone()).collect();
        for (k, name) in names.iter().enumerate() {
            let missing = || Error::Checkpoint(format!("missing tensor {name}"));
            let v = arch.get(name).ok_or_else(missing)?;
            if v.shape() != t.store.get(crate::nn::ParamId(k)).value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *t.store.value_mut(crate::nn::ParamId(k)) = v.clone();
            t.adam.m[k] = arch.get(&format!("adam.m.{name}")).ok_or_else(missing)?.clone();
            t.adam.v[k] = arch.get(&format!("adam.v.{name}")).ok_or_else(missing)?.clone();
        }
        t.step = meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step".into()))? as usize;
        t.adam.t = meta["adam_t"].as_u64().unwrap_or(t.step as u64);
        Ok(t)
    }
}
