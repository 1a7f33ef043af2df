//! Dataset-level plumbing shared by the CLI and the acceptance suite:
//! loading train/test/gallery tensors, train-then-evaluate runs, and the
//! component ablation over rows a–f.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_image, load_pairs, Dataset, LoadedPair, Split};
use crate::error::{Error, Result};
use crate::model::LossToggles;
use crate::retrieval::{build_gallery, evaluate, GalleryItem, QueryInput, QueryItem, RetrievalConfig, RetrievalReport};
use crate::trainer::{prepare_items, TrainConfig, Trainer};

/// In-memory tensors for one dataset.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<LoadedPair>,
    pub test: Vec<LoadedPair>,
    pub gallery: Vec<GalleryItem>,
}

impl ExperimentData {
    pub fn load(ds: &Dataset, frames: usize) -> Result<Self> {
        let train = load_pairs(ds, &ds.split(Split::Train), frames)?;
        let test = load_pairs(ds, &ds.split(Split::Test), frames)?;
        if ds.gallery.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let gallery = ds
            .gallery
            .par_iter()
            .map(|g| {
                Ok(GalleryItem {
                    id: g.product_id.clone(),
                    image: load_image(&ds.path(&g.image_path))?,
                    text: g.text_embed.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { train, test, gallery })
    }

    pub fn queries(&self) -> Vec<QueryItem> {
        self.test
            .iter()
            .map(|p| QueryItem {
                ground_truth: p.record.product_id.clone(),
                frames: p.frames.clone(),
                boxes: p.record.boxes.as_ref().map(|b| {
                    crate::data::sample_frames(b.len(), p.frames.len())
                        .into_iter()
                        .map(|i| b[i])
                        .collect()
                }),
                text: p.record.text_embed_clip.clone(),
                tags: Some(p.record.variation_tags),
            })
            .collect()
    }
}

/// Encodes the gallery and scores every test query with a trained model.
pub fn evaluate_trainer(trainer: &Trainer, data: &ExperimentData, cfg: &RetrievalConfig) -> Result<RetrievalReport> {
    let index = build_gallery(&trainer.model, &trainer.store, &data.gallery)?;
    let input = QueryInput {
        box_input: trainer.cfg.box_input,
        box_margin: trainer.cfg.box_margin,
        image_size: trainer.cfg.model.encoder.image_size,
    };
    evaluate(&trainer.model, &trainer.store, &index, &data.queries(), input, cfg)
}

pub fn train_on(cfg: &TrainConfig, data: &ExperimentData) -> Result<(Trainer, Duration)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    let (items, fallbacks) = prepare_items(&data.train, cfg)?;
    if fallbacks > 0 {
        log::info!("{fallbacks} box crops fell back to full frames");
    }
    trainer.train(&items, None)?;
    Ok((trainer, start.elapsed()))
}

/// Component configurations: contrastive only, plus text, plus matching
/// decoder, plus reconstruction, plus box input, plus box input and text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblationRow {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::A,
        AblationRow::B,
        AblationRow::C,
        AblationRow::D,
        AblationRow::E,
        AblationRow::F,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::A => "ICL",
            AblationRow::B => "ICL+Txt",
            AblationRow::C => "ICL+PMD",
            AblationRow::D => "ICL+PMD+PFR",
            AblationRow::E => "ICL+PMD+PFR+IPD",
            AblationRow::F => "ICL+PMD+PFR+IPD+Txt",
        }
    }

    pub fn toggles(self) -> LossToggles {
        let (pmd, pfr) = match self {
            AblationRow::A | AblationRow::B => (false, false),
            AblationRow::C => (true, false),
            _ => (true, true),
        };
        LossToggles { icl: true, pmd, pfr }
    }

    pub fn box_input(self) -> bool {
        matches!(self, AblationRow::E | AblationRow::F)
    }

    pub fn text(self) -> bool {
        matches!(self, AblationRow::B | AblationRow::F)
    }

    /// Training configuration for this row derived from `base`.
    pub fn train_config(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            box_input: self.box_input(),
            ..base.clone().with_toggles(self.toggles())
        }
    }

    pub fn retrieval_config(self, base: &RetrievalConfig) -> RetrievalConfig {
        RetrievalConfig {
            rerank: self.toggles().pmd,
            text: self.text(),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seed: u64,
    pub train_seconds: f64,
    pub config_hash: String,
    pub report: RetrievalReport,
}

/// Trains every distinct configuration among `rows` once per seed (rows that
/// differ only at evaluation share a run) and evaluates each row.
pub fn run_ablation_suite(
    data: &ExperimentData,
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    retrieval: &RetrievalConfig,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut cache: Vec<(String, Trainer, f64)> = Vec::new();
        for &row in rows {
            let cfg = row.train_config(base, seed);
            let hash = cfg.hash();
            if !cache.iter().any(|(h, _, _)| *h == hash) {
                let (t, dt) = train_on(&cfg, data)?;
                log::info!("row {} seed {seed}: trained in {:.1}s", row.label(), dt.as_secs_f64());
                cache.push((hash.clone(), t, dt.as_secs_f64()));
            }
            let (_, trainer, secs) = cache.iter().find(|(h, _, _)| *h == hash).unwrap();
            let report = evaluate_trainer(trainer, data, &row.retrieval_config(retrieval))?;
            out.push(AblationResult {
                row,
                seed,
                train_seconds: *secs,
                config_hash: hash,
                report,
            });
        }
    }
    Ok(out)
}

/// Mean of `f` over the results of one row.
pub fn mean_over_seeds(results: &[AblationResult], row: AblationRow, f: impl Fn(&RetrievalReport) -> f64) -> f64 {
    let v: Vec<f64> = results.iter().filter(|r| r.row == row).map(|r| f(&r.report)).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// One line per row and seed, then per-row means.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut s = String::from("row,label,seed,R1,R5,R10,train_seconds\n");
    for r in results {
        let _ = writeln!(
            s,
            "{:?},{},{},{:.4},{:.4},{:.4},{:.1}",
            r.row,
            r.row.label(),
            r.seed,
            r.report.r(1),
            r.report.r(5),
            r.report.r(10),
            r.train_seconds
        );
    }
    let mut rows: Vec<AblationRow> = results.iter().map(|r| r.row).collect();
    rows.dedup();
    rows.sort();
    rows.dedup();
    for row in rows {
        let _ = writeln!(
            s,
            "{:?},{},mean,{:.4},{:.4},{:.4},",
            row,
            row.label(),
            mean_over_seeds(results, row, |r| r.r(1)),
            mean_over_seeds(results, row, |r| r.r(5)),
            mean_over_seeds(results, row, |r| r.r(10)),
        );
    }
    s
}
