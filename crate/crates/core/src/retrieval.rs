//! Two-stage retrieval (global-embedding shortlist, then matching-decoder
//! re-rank), optional text fusion, and rank-k metrics with a per-variation
//! breakdown.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{box_clip, BBox, VariationTags};
use crate::encoder::ViewFeatures;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{dot, ParamStore, Tensor};

/// Encoded shop images.
#[derive(Clone, Debug)]
pub struct GalleryIndex {
    pub ids: Vec<String>,
    /// `[G, proj_dim]`, unit rows.
    pub embeddings: Tensor,
    pub features: Vec<ViewFeatures>,
    pub text: Vec<Option<Vec<f64>>>,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// One gallery entry before encoding.
#[derive(Clone, Debug)]
pub struct GalleryItem {
    pub id: String,
    pub image: Tensor,
    pub text: Option<Vec<f64>>,
}

pub fn build_gallery(model: &Model, store: &ParamStore, items: &[GalleryItem]) -> Result<GalleryIndex> {
    if items.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut seen = HashSet::new();
    for it in items {
        if !seen.insert(it.id.as_str()) {
            return Err(Error::DuplicateId(it.id.clone()));
        }
    }
    let enc: Vec<(ViewFeatures, Tensor)> = items
        .par_iter()
        .map(|it| model.encode_image(store, &it.image).map(|(f, e)| (f, e.vec)))
        .collect::<Result<_>>()?;
    let rows: Vec<&[f64]> = enc.iter().map(|(_, e)| e.data()).collect();
    let embeddings = Tensor::from_rows(&rows)?;
    Ok(GalleryIndex {
        ids: items.iter().map(|i| i.id.clone()).collect(),
        embeddings,
        features: enc.into_iter().map(|(f, _)| f).collect(),
        text: items.iter().map(|i| i.text.clone()).collect(),
    })
}

/// An encoded query clip.
#[derive(Clone, Debug)]
pub struct Query {
    pub features: ViewFeatures,
    pub embedding: Tensor,
    pub text: Option<Vec<f64>>,
}

pub fn encode_query(model: &Model, store: &ParamStore, frames: &[Tensor], text: Option<Vec<f64>>) -> Result<Query> {
    let (features, emb) = model.encode_clip(store, frames)?;
    Ok(Query {
        features,
        embedding: emb.vec,
        text,
    })
}

/// Gallery positions with their global similarity, best first; ties go to
/// the lexically smaller id.
pub fn shortlist(query: &Tensor, index: &GalleryIndex, k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|g| (g, dot(query.data(), index.embeddings.row(g))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| index.ids[a.0].cmp(&index.ids[b.0])));
    scored.truncate(k.min(index.len()));
    scored
}

/// Sorts by descending score, ties to the lexically smaller id.
fn sort_scored(scored: &mut [(usize, f64)], index: &GalleryIndex) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| index.ids[a.0].cmp(&index.ids[b.0])));
}

/// Scores every candidate with the matching decoder and returns them by
/// descending logit.
pub fn rerank(
    model: &Model,
    store: &ParamStore,
    query: &Query,
    candidates: &[usize],
    index: &GalleryIndex,
) -> Result<Vec<(usize, f64)>> {
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&g| Ok((g, model.match_pair(store, &index.features[g], &query.features)?.logit)))
        .collect::<Result<_>>()?;
    sort_scored(&mut scored, index);
    Ok(scored)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        log::warn!("text embedding has norm {n:.6}; normalizing");
        if n > 0.0 {
            return v.iter().map(|x| x / n).collect();
        }
    }
    v.to_vec()
}

/// `visual + ⟨t_clip, t_image⟩`; missing text leaves the score unchanged.
pub fn fuse_text_similarity(visual: f64, text_clip: Option<&[f64]>, text_image: Option<&[f64]>) -> f64 {
    match (text_clip, text_image) {
        (Some(a), Some(b)) => visual + dot(&unit(a), &unit(b)),
        _ => visual,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub shortlist: usize,
    /// Re-rank the shortlist with the matching decoder.
    pub rerank: bool,
    /// Add text similarity to shortlisted candidates.
    pub text: bool,
    pub ks: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            shortlist: 16,
            rerank: true,
            text: false,
            ks: vec![1, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Full gallery order.
    pub order: Vec<usize>,
    /// Stage-one shortlist, before re-ranking.
    pub shortlist: Vec<usize>,
}

/// Shortlist by global similarity, re-score the shortlist (decoder logit or
/// cosine, plus optional text), and append the rest in stage-one order.
pub fn retrieve(
    model: &Model,
    store: &ParamStore,
    query: &Query,
    index: &GalleryIndex,
    cfg: &RetrievalConfig,
) -> Result<Ranking> {
    let full = shortlist(&query.embedding, index, index.len());
    let k = cfg.shortlist.min(index.len()).max(1);
    let short: Vec<usize> = full[..k].iter().map(|&(g, _)| g).collect();
    let mut head = if cfg.rerank {
        rerank(model, store, query, &short, index)?
    } else {
        full[..k].to_vec()
    };
    if cfg.text {
        for (g, s) in head.iter_mut() {
            *s = fuse_text_similarity(*s, query.text.as_deref(), index.text[*g].as_deref());
        }
        sort_scored(&mut head, index);
    }
    let mut order: Vec<usize> = head.iter().map(|&(g, _)| g).collect();
    order.extend(full[k..].iter().map(|&(g, _)| g));
    Ok(Ranking { order, shortlist: short })
}

/// Evaluation outcome of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub ground_truth: String,
    /// Zero-based rank of the ground truth; `None` if absent from the ranking.
    pub rank: Option<usize>,
    pub in_shortlist: bool,
    pub tags: Option<VariationTags>,
    /// No valid input remained after box fallback; a failure at every k.
    pub missed: bool,
}

impl QueryOutcome {
    pub fn from_ranking(ranking: &Ranking, index: &GalleryIndex, gt: &str, tags: Option<VariationTags>, missed: bool) -> Result<Self> {
        let g = index.position(gt).ok_or_else(|| Error::MissingGroundTruth(gt.to_string()))?;
        Ok(Self {
            ground_truth: gt.to_string(),
            rank: ranking.order.iter().position(|&x| x == g),
            in_shortlist: ranking.shortlist.contains(&g),
            tags,
            missed,
        })
    }

    pub fn hit(&self, k: usize) -> bool {
        !self.missed && self.rank.is_some_and(|r| r < k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationCell {
    pub queries: usize,
    pub rank_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub queries: usize,
    pub rank_k: BTreeMap<usize, f64>,
    /// Keyed by `axis=value`.
    pub per_variation: BTreeMap<String, VariationCell>,
    pub missed_queries: usize,
    pub shortlist_k: usize,
    pub stage1_recall: f64,
    pub outcomes: Vec<QueryOutcome>,
}

impl RetrievalReport {
    pub fn r(&self, k: usize) -> f64 {
        self.rank_k.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Rank-1 over the queries selected by `keep`.
    pub fn rank1_where(&self, keep: impl Fn(&VariationTags) -> bool) -> (usize, f64) {
        let sel: Vec<&QueryOutcome> = self.outcomes.iter().filter(|o| o.tags.as_ref().is_some_and(&keep)).collect();
        let hits = sel.iter().filter(|o| o.hit(1)).count();
        (sel.len(), if sel.is_empty() { f64::NAN } else { hits as f64 / sel.len() as f64 })
    }

    /// Overall row followed by one row per variation cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subset,queries");
        for k in self.rank_k.keys() {
            let _ = write!(s, ",R{k}");
        }
        s.push('\n');
        let _ = write!(s, "overall,{}", self.queries);
        for v in self.rank_k.values() {
            let _ = write!(s, ",{v:.4}");
        }
        s.push('\n');
        for (name, cell) in &self.per_variation {
            let _ = write!(s, "{name},{},{:.4}", cell.queries, cell.rank_1);
            for _ in 1..self.rank_k.len() {
                s.push(',');
            }
            s.push('\n');
        }
        s
    }
}

/// Fraction of queries with the ground truth in the top k, for each k, plus
/// rank-1 per variation cell.
pub fn rank_k_accuracy(outcomes: &[QueryOutcome], ks: &[usize], shortlist_k: usize) -> RetrievalReport {
    let n = outcomes.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let rank_k = ks
        .iter()
        .map(|&k| (k, frac(outcomes.iter().filter(|o| o.hit(k)).count())))
        .collect();
    let mut cells: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        if let Some(t) = &o.tags {
            for label in t.labels() {
                let e = cells.entry(label).or_default();
                e.0 += 1;
                e.1 += o.hit(1) as usize;
            }
        }
    }
    RetrievalReport {
        queries: n,
        rank_k,
        per_variation: cells
            .into_iter()
            .map(|(k, (q, h))| {
                (
                    k,
                    VariationCell {
                        queries: q,
                        rank_1: h as f64 / q as f64,
                    },
                )
            })
            .collect(),
        missed_queries: outcomes.iter().filter(|o| o.missed).count(),
        shortlist_k,
        stage1_recall: frac(outcomes.iter().filter(|o| o.in_shortlist && !o.missed).count()),
        outcomes: outcomes.to_vec(),
    }
}

/// A test query before encoding.
#[derive(Clone, Debug)]
pub struct QueryItem {
    pub ground_truth: String,
    pub frames: Vec<Tensor>,
    pub boxes: Option<Vec<Option<BBox>>>,
    pub text: Option<Vec<f64>>,
    pub tags: Option<VariationTags>,
}

/// Input handling for queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryInput {
    pub box_input: bool,
    pub box_margin: f64,
    pub image_size: usize,
}

/// Runs every query through [`retrieve`] and aggregates a report. Queries
/// whose boxes all fall back are counted as missed.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    index: &GalleryIndex,
    queries: &[QueryItem],
    input: QueryInput,
    cfg: &RetrievalConfig,
) -> Result<RetrievalReport> {
    let outcomes: Vec<QueryOutcome> = queries
        .par_iter()
        .map(|q| {
            let (frames, missed) = match (&q.boxes, input.box_input) {
                (Some(b), true) => {
                    let c = box_clip(&q.frames, b, input.image_size, input.box_margin)?;
                    (c.frames, c.missed)
                }
                _ => (q.frames.clone(), false),
            };
            let query = encode_query(model, store, &frames, q.text.clone())?;
            let ranking = retrieve(model, store, &query, index, cfg)?;
            QueryOutcome::from_ranking(&ranking, index, &q.ground_truth, q.tags, missed)
        })
        .collect::<Result<_>>()?;
    let report = rank_k_accuracy(&outcomes, &cfg.ks, cfg.shortlist.min(index.len()));
    assert!(
        report.r(1).is_nan() || report.r(1) <= report.stage1_recall + 1e-12,
        "final rank-1 exceeds stage-one recall"
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(rank: usize) -> QueryOutcome {
        QueryOutcome {
            ground_truth: "g".into(),
            rank: Some(rank),
            in_shortlist: true,
            tags: None,
            missed: false,
        }
    }

    fn index_from(rows: Vec<Vec<f64>>, ids: &[&str]) -> GalleryIndex {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        GalleryIndex {
            ids: ids.iter().map(|s| s.to_string()).collect(),
            embeddings: Tensor::from_rows(&refs).unwrap(),
            features: Vec::new(),
            text: vec![None; ids.len()],
        }
    }

    #[test]
    fn rank_k_examples() {
        let r = rank_k_accuracy(&[outcome(0), outcome(0)], &[1, 5, 10], 16);
        assert_eq!(r.rank_k.values().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 1.0]);
        let r = rank_k_accuracy(&[outcome(6)], &[1, 5, 10], 16);
        assert_eq!((r.r(5), r.r(10)), (0.0, 1.0));
        let r = rank_k_accuracy(&[outcome(0), outcome(3)], &[1], 16);
        assert_eq!(r.r(1), 0.5);
        let mut m = outcome(0);
        m.missed = true;
        let r = rank_k_accuracy(&[m], &[1, 5], 16);
        assert_eq!((r.r(1), r.r(5), r.missed_queries), (0.0, 0.0, 1));
    }

    #[test]
    fn shortlist_order_and_ties() {
        let idx = index_from(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.6, 0.8], vec![1.0, 0.0]], &["d", "c", "b", "a"]);
        let q = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let full = shortlist(&q, &idx, 4);
        assert_eq!(full.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 1, 2, 0]);
        assert_eq!(shortlist(&q, &idx, 2).len(), 2);
        let q = Tensor::vector(vec![0.6, 0.8]).unwrap();
        assert_eq!(shortlist(&q, &idx, 1)[0].0, 2);
    }

    #[test]
    fn text_fusion_examples() {
        let a = [0.6, 0.8];
        assert_eq!(fuse_text_similarity(2.5, None, Some(&a)), 2.5);
        assert!((fuse_text_similarity(2.5, Some(&a), Some(&a)) - 3.5).abs() < 1e-12);
        assert_eq!(fuse_text_similarity(2.5, Some(&[1.0, 0.0]), Some(&[0.0, 1.0])), 2.5);
        assert!((fuse_text_similarity(0.0, Some(&[3.0, 4.0]), Some(&a)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_csv_has_overall_and_cells() {
        use crate::data::{DistractorTag, ScaleTag, VisibilityTag};
        let mut o = outcome(0);
        o.tags = Some(VariationTags {
            scale: ScaleTag::Small,
            visibility: VisibilityTag::Long,
            distractors: DistractorTag::Few,
        });
        let r = rank_k_accuracy(&[o, outcome(2)], &[1, 5], 16);
        let csv = r.to_csv();
        assert!(csv.starts_with("subset,queries,R1,R5\noverall,2,0.5000,1.0000\n"));
        assert!(csv.contains("scale=small,1,1.0000,"));
        assert_eq!(r.rank1_where(|t| t.scale == ScaleTag::Small), (1, 1.0));
    }

    fn micro() -> (Model, ParamStore, Vec<GalleryItem>, Vec<Tensor>) {
        use crate::diagnostics::micro_model_config;
        use crate::nn::WeightInit;
        use rand::{Rng, SeedableRng};
        let mut cfg = micro_model_config();
        cfg.encoder.init = WeightInit::FanIn;
        cfg.decoder.init = WeightInit::FanIn;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg.clone(), 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let s = cfg.encoder.image_size;
        let mut img = || Tensor::new(&[3, s, s], (0..3 * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let items = (0..6)
            .map(|k| GalleryItem {
                id: format!("g{k}"),
                image: img(),
                text: None,
            })
            .collect();
        let frames = (0..cfg.encoder.frames).map(|_| img()).collect();
        (model, store, items, frames)
    }

    #[test]
    fn gallery_rows_are_unit_and_rebuild_identically() {
        let (model, store, items, _) = micro();
        assert!(matches!(build_gallery(&model, &store, &[]), Err(Error::EmptyGallery)));
        let idx = build_gallery(&model, &store, &items[..3]).unwrap();
        assert_eq!(idx.embeddings.shape()[0], 3);
        for g in 0..3 {
            let n: f64 = idx.embeddings.row(g).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(build_gallery(&model, &store, &items[..3]).unwrap().embeddings, idx.embeddings);
        let dup = vec![items[0].clone(), items[0].clone()];
        assert!(matches!(build_gallery(&model, &store, &dup), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn rerank_matches_exhaustive_scoring() {
        let (model, mut store, items, frames) = micro();
        // Hand-set readout: the logit is the sum of the first four decoder output features.
        let v = model.decoder.match_vec();
        let d = store.value(v).len();
        *store.value_mut(v) = Tensor::vector((0..d).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect()).unwrap();
        let index = build_gallery(&model, &store, &items).unwrap();
        let query = encode_query(&model, &store, &frames, None).unwrap();
        let cands = [4usize, 1, 3, 0];
        let got = rerank(&model, &store, &query, &cands, &index).unwrap();
        let mut oracle: Vec<(usize, f64)> = cands
            .iter()
            .map(|&g| {
                let (img, _) = model.encode_image(&store, &items[g].image).unwrap();
                let x = model.match_pair(&store, &img, &query.features).unwrap().x_cls;
                (g, x.data()[..4].iter().sum())
            })
            .collect();
        for (i, a) in oracle.clone().iter().enumerate() {
            let beats = oracle.iter().filter(|b| b.1 > a.1).count();
            assert!(got.iter().position(|x| x.0 == a.0).unwrap() == beats, "candidate {i}");
        }
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
        for (x, y) in got.iter().zip(&oracle) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() < 1e-12);
        }
        assert_eq!(rerank(&model, &store, &query, &[2], &index).unwrap()[0].0, 2);
    }

    #[test]
    fn full_shortlist_without_rerank_is_pure_global_ranking() {
        let (model, store, items, frames) = micro();
        let index = build_gallery(&model, &store, &items).unwrap();
        let query = encode_query(&model, &store, &frames, None).unwrap();
        let cfg = RetrievalConfig {
            shortlist: index.len(),
            rerank: false,
            ..RetrievalConfig::default()
        };
        let ranking = retrieve(&model, &store, &query, &index, &cfg).unwrap();
        let mut oracle: Vec<(usize, f64)> = (0..index.len())
            .map(|g| {
                let e = model.encode_image(&store, &items[g].image).unwrap().1.vec;
                (g, e.data().iter().zip(query.embedding.data()).map(|(a, b)| a * b).sum())
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
        assert_eq!(ranking.order, oracle.iter().map(|x| x.0).collect::<Vec<_>>());
        assert_eq!(ranking.order, ranking.shortlist);
    }

    proptest::proptest! {
        #[test]
        fn rank_k_is_monotone(ranks in proptest::collection::vec(proptest::option::of(0usize..40), 1..60)) {
            let outs: Vec<QueryOutcome> = ranks
                .iter()
                .map(|r| QueryOutcome { rank: *r, ..outcome(0) })
                .collect();
            let rep = rank_k_accuracy(&outs, &[1, 5, 10, 20], 16);
            proptest::prop_assert!(rep.r(1) <= rep.r(5) && rep.r(5) <= rep.r(10) && rep.r(10) <= rep.r(20));
        }
    }
}
