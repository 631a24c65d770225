//! Retrieval metrics over image-by-caption similarity matrices.
//!
//! Rankings sort by descending similarity and break ties by ascending
//! gallery index. Recalls, PMRP and RPC² are reported as percentages in
//! [`RetrievalReport`]; the free functions return fractions where noted.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::gaussian::{uncertainty, GaussianEmbedding};
use crate::metrics::{similarity, similarity_matrix, SimilarityMetric};
use crate::model::{Modality, ProbModel};

/// Ground-truth and plausible-match annotations for one split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchAnnotations {
    /// Caption index to its image.
    pub base_matches: BTreeMap<usize, usize>,
    /// Binary object-presence vector per image, shared by its captions.
    pub label_vectors: BTreeMap<usize, Vec<u8>>,
    /// Additional `(image, caption)` positives beyond the base matches.
    pub extended_positives: BTreeSet<(usize, usize)>,
}

impl MatchAnnotations {
    pub fn validate(&self) -> Result<()> {
        for &(image, caption) in &self.extended_positives {
            if self.base_matches.get(&caption) == Some(&image) {
                return Err(Error::Annotation(format!(
                    "extended positive (image {image}, caption {caption}) repeats a base match"
                )));
            }
        }
        let mut lengths = self.label_vectors.values().map(Vec::len);
        if let Some(first) = lengths.next() {
            if lengths.any(|l| l != first) {
                return Err(Error::Annotation("label vectors differ in length".into()));
            }
        }
        if let Some((image, _)) = self.label_vectors.iter().find(|(_, v)| v.iter().any(|&b| b > 1)) {
            return Err(Error::Annotation(format!(
                "label vector of image {image} is not binary"
            )));
        }
        Ok(())
    }

    /// Base captions of every image, ascending.
    pub fn captions_per_image(&self, n_images: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_images];
        for (&caption, &image) in &self.base_matches {
            if image < n_images {
                out[image].push(caption);
            }
        }
        out
    }

    /// Positive sets for image-to-text queries.
    pub fn image_positives(&self, n_images: usize, extended: bool) -> Vec<Vec<usize>> {
        let mut out = self.captions_per_image(n_images);
        if extended {
            for &(image, caption) in &self.extended_positives {
                if image < n_images {
                    out[image].push(caption);
                }
            }
            for p in out.iter_mut() {
                p.sort_unstable();
                p.dedup();
            }
        }
        out
    }

    /// Positive sets for text-to-image queries.
    pub fn caption_positives(&self, n_captions: usize, extended: bool) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = (0..n_captions)
            .map(|k| self.base_matches.get(&k).map(|&j| vec![j]).unwrap_or_default())
            .collect();
        if extended {
            for &(image, caption) in &self.extended_positives {
                if caption < n_captions {
                    out[caption].push(image);
                }
            }
            for p in out.iter_mut() {
                p.sort_unstable();
                p.dedup();
            }
        }
        out
    }

    fn caption_labels(&self, n_captions: usize) -> Result<Vec<Vec<u8>>> {
        (0..n_captions)
            .map(|k| {
                let image = self
                    .base_matches
                    .get(&k)
                    .ok_or_else(|| Error::Annotation(format!("caption {k} has no base match")))?;
                self.label_vectors
                    .get(image)
                    .cloned()
                    .ok_or_else(|| Error::Annotation(format!("image {image} has no label vector")))
            })
            .collect()
    }

    fn image_labels(&self, n_images: usize) -> Result<Vec<Vec<u8>>> {
        (0..n_images)
            .map(|j| {
                self.label_vectors
                    .get(&j)
                    .cloned()
                    .ok_or_else(|| Error::Annotation(format!("image {j} has no label vector")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Whole evaluation set as one gallery.
    Full,
    /// Five consecutive folds, metrics averaged.
    FiveFold1k,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Full => "full",
            Protocol::FiveFold1k => "1k5fold",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Protocol::Full),
            "1k5fold" => Ok(Protocol::FiveFold1k),
            _ => Err(Error::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

/// Scores for one retrieval direction, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub pmrp: Option<f64>,
    pub rpc2: Option<f64>,
}

impl DirectionReport {
    pub fn recall_sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub protocol: Protocol,
    pub folds: usize,
    pub image_to_text: DirectionReport,
    pub text_to_image: DirectionReport,
    pub rsum: f64,
}

impl RetrievalReport {
    pub const CSV_HEADER: &'static str = "protocol,direction,r1,r5,r10,pmrp,rpc2,rsum";

    /// One CSV row per direction, without the header.
    pub fn csv_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [&self.image_to_text, &self.text_to_image]
            .iter()
            .map(|d| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    self.protocol.name(),
                    d.direction.name(),
                    d.r1,
                    d.r5,
                    d.r10,
                    opt(d.pmrp),
                    opt(d.rpc2),
                    self.rsum
                )
            })
            .collect()
    }

    /// Human-readable table with one decimal place.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
        let mut out = format!(
            "protocol {} ({} fold{})\n{:<14} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            self.protocol.name(),
            self.folds,
            if self.folds == 1 { "" } else { "s" },
            "direction",
            "R@1",
            "R@5",
            "R@10",
            "PMRP",
            "RPC2"
        );
        for d in [&self.image_to_text, &self.text_to_image] {
            out.push_str(&format!(
                "{:<14} {:>6.1} {:>6.1} {:>6.1} {:>6} {:>6}\n",
                d.direction.name(),
                d.r1,
                d.r5,
                d.r10,
                opt(d.pmrp),
                opt(d.rpc2)
            ));
        }
        out.push_str(&format!("rsum {:.1}\n", self.rsum));
        out
    }
}

fn check_finite(sims: &[Vec<f64>]) -> Result<()> {
    if sims.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "similarity matrix has non-finite entries".into(),
        ));
    }
    Ok(())
}

#[inline]
fn ahead(scores: &[f64], g: usize, p: usize) -> bool {
    scores[g] > scores[p] || (scores[g] == scores[p] && g < p)
}

/// Zero-based position of gallery item `p` in the ranking of `scores`.
fn rank_of(scores: &[f64], p: usize) -> usize {
    (0..scores.len()).filter(|&g| ahead(scores, g, p)).count()
}

/// Gallery indices ordered by descending score, ties by ascending index.
pub fn rank_gallery(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Best (smallest) rank of any positive for every query.
fn best_positive_ranks(sims: &[Vec<f64>], positives: &[Vec<usize>]) -> Result<Vec<usize>> {
    if sims.len() != positives.len() {
        return Err(Error::Shape(format!(
            "{} queries but {} positive sets",
            sims.len(),
            positives.len()
        )));
    }
    sims.par_iter()
        .zip(positives)
        .enumerate()
        .map(|(q, (row, pos))| {
            if pos.is_empty() {
                return Err(Error::Annotation(format!("query {q} has no positives")));
            }
            if let Some(&bad) = pos.iter().find(|&&p| p >= row.len()) {
                return Err(Error::Shape(format!("query {q} positive {bad} outside gallery")));
            }
            Ok(pos.iter().map(|&p| rank_of(row, p)).min().unwrap())
        })
        .collect()
}

fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Percentage of queries with a positive among the top `k`.
pub fn recall_at_k(sims: &[Vec<f64>], positives: &[Vec<usize>], k: usize) -> Result<f64> {
    check_finite(sims)?;
    let gallery = sims.first().map_or(0, Vec::len);
    if k == 0 || k > gallery {
        return Err(Error::Config(format!("k = {k} outside 1..={gallery}")));
    }
    Ok(recall_from_ranks(&best_positive_ranks(sims, positives)?, k))
}

/// Fraction of `positives` among the first `r = |positives|` items of `ranked`.
pub fn r_precision(ranked: &[usize], positives: &BTreeSet<usize>) -> Result<f64> {
    let r = positives.len();
    if r == 0 {
        return Err(Error::UndefinedQuery);
    }
    let hits = ranked.iter().take(r).filter(|g| positives.contains(g)).count();
    Ok(hits as f64 / r as f64)
}

/// Mean R-Precision over queries. Queries with no positives are skipped;
/// the second value counts them.
pub fn mean_r_precision(sims: &[Vec<f64>], positives: &[BTreeSet<usize>]) -> Result<(f64, usize)> {
    check_finite(sims)?;
    if sims.len() != positives.len() {
        return Err(Error::Shape("query count differs from positive sets".into()));
    }
    let scores: Vec<Option<f64>> = sims
        .par_iter()
        .zip(positives)
        .map(|(row, pos)| match r_precision(&rank_gallery(row), pos) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedQuery) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = scores.iter().flatten().copied().collect();
    let skipped = scores.len() - defined.len();
    if defined.is_empty() {
        return Err(Error::UndefinedQuery);
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, skipped))
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

/// Plausible-match positives: gallery items within Hamming distance `zeta`.
pub fn plausible_positives(
    query_labels: &[Vec<u8>],
    gallery_labels: &[Vec<u8>],
    zeta: usize,
) -> Vec<BTreeSet<usize>> {
    query_labels
        .iter()
        .map(|q| {
            gallery_labels
                .iter()
                .enumerate()
                .filter(|(_, g)| hamming(q, g) <= zeta)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Plausible-Match R-Precision as a fraction, averaged over `zetas`.
pub fn pmrp(
    sims: &[Vec<f64>],
    query_labels: &[Vec<u8>],
    gallery_labels: &[Vec<u8>],
    zetas: &[usize],
) -> Result<f64> {
    if zetas.is_empty() {
        return Err(Error::Config("PMRP needs at least one zeta".into()));
    }
    if query_labels.len() != sims.len() || sims.iter().any(|r| r.len() != gallery_labels.len()) {
        return Err(Error::Annotation("label vectors do not cover every item".into()));
    }
    let mut total = 0.0;
    for &zeta in zetas {
        let positives = plausible_positives(query_labels, gallery_labels, zeta);
        total += mean_r_precision(sims, &positives)?.0;
    }
    Ok(total / zetas.len() as f64)
}

pub const PMRP_ZETAS: [usize; 3] = [0, 1, 2];

/// R-Precision with base and extended positives, as a fraction.
pub fn rpc2(sims: &[Vec<f64>], positives: &[Vec<usize>]) -> Result<f64> {
    let sets: Vec<BTreeSet<usize>> = positives.iter().map(|p| p.iter().copied().collect()).collect();
    Ok(mean_r_precision(sims, &sets)?.0)
}

fn transpose(sims: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = sims.first().map_or(0, Vec::len);
    (0..cols)
        .map(|k| sims.iter().map(|row| row[k]).collect())
        .collect()
}

/// Which optional precision metrics to compute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrecisionOptions {
    pub pmrp: bool,
    pub rpc2: bool,
}

/// Full-gallery report from an `images x captions` similarity matrix.
pub fn report_from_similarities(
    sims: &[Vec<f64>],
    annotations: &MatchAnnotations,
    options: PrecisionOptions,
) -> Result<RetrievalReport> {
    check_finite(sims)?;
    let n_images = sims.len();
    let n_captions = sims.first().map_or(0, Vec::len);
    if n_images == 0 || n_captions == 0 {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let by_caption = transpose(sims);

    let direction = |dir: Direction, rows: &[Vec<f64>]| -> Result<DirectionReport> {
        let (positives, extended) = match dir {
            Direction::ImageToText => (
                annotations.image_positives(n_images, false),
                annotations.image_positives(n_images, true),
            ),
            Direction::TextToImage => (
                annotations.caption_positives(n_captions, false),
                annotations.caption_positives(n_captions, true),
            ),
        };
        let ranks = best_positive_ranks(rows, &positives)?;
        let pmrp_value = if options.pmrp {
            let images = annotations.image_labels(n_images)?;
            let captions = annotations.caption_labels(n_captions)?;
            let (q, g) = match dir {
                Direction::ImageToText => (&images, &captions),
                Direction::TextToImage => (&captions, &images),
            };
            Some(100.0 * pmrp(rows, q, g, &PMRP_ZETAS)?)
        } else {
            None
        };
        let rpc2_value = if options.rpc2 {
            Some(100.0 * rpc2(rows, &extended)?)
        } else {
            None
        };
        Ok(DirectionReport {
            direction: dir,
            r1: recall_from_ranks(&ranks, 1),
            r5: recall_from_ranks(&ranks, 5),
            r10: recall_from_ranks(&ranks, 10),
            pmrp: pmrp_value,
            rpc2: rpc2_value,
        })
    };

    let i2t = direction(Direction::ImageToText, sims)?;
    let t2i = direction(Direction::TextToImage, &by_caption)?;
    Ok(RetrievalReport {
        protocol: Protocol::Full,
        folds: 1,
        rsum: i2t.recall_sum() + t2i.recall_sum(),
        image_to_text: i2t,
        text_to_image: t2i,
    })
}

pub const FOLDS: usize = 5;

/// Restricts annotations to one image fold. Returns the fold's caption
/// indices (ascending) and the re-indexed annotations.
pub fn fold_annotations(
    annotations: &MatchAnnotations,
    images: std::ops::Range<usize>,
) -> (Vec<usize>, MatchAnnotations) {
    let captions: Vec<usize> = annotations
        .base_matches
        .iter()
        .filter(|(_, j)| images.contains(j))
        .map(|(&k, _)| k)
        .collect();
    let local: BTreeMap<usize, usize> = captions.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let sub = MatchAnnotations {
        base_matches: captions
            .iter()
            .enumerate()
            .map(|(i, k)| (i, annotations.base_matches[k] - images.start))
            .collect(),
        label_vectors: annotations
            .label_vectors
            .iter()
            .filter(|(j, _)| images.contains(j))
            .map(|(j, v)| (j - images.start, v.clone()))
            .collect(),
        extended_positives: annotations
            .extended_positives
            .iter()
            .filter(|(j, k)| images.contains(j) && local.contains_key(k))
            .map(|(j, k)| (j - images.start, local[k]))
            .collect(),
    };
    (captions, sub)
}

/// Five-fold protocol: images split into five consecutive folds of
/// `fold_size`, captions following their image, metrics averaged.
pub fn five_fold_1k(
    sims: &[Vec<f64>],
    annotations: &MatchAnnotations,
    fold_size: usize,
    options: PrecisionOptions,
) -> Result<RetrievalReport> {
    if fold_size == 0 || sims.len() != FOLDS * fold_size {
        return Err(Error::Config(format!(
            "five-fold protocol needs {FOLDS} x {fold_size} images, got {}",
            sims.len()
        )));
    }
    let mut reports = Vec::with_capacity(FOLDS);
    for f in 0..FOLDS {
        let images = f * fold_size..(f + 1) * fold_size;
        let (captions, sub) = fold_annotations(annotations, images.clone());
        let fold_sims: Vec<Vec<f64>> = sims[images]
            .iter()
            .map(|row| captions.iter().map(|&k| row[k]).collect())
            .collect();
        reports.push(report_from_similarities(&fold_sims, &sub, options)?);
    }
    Ok(average_reports(&reports, Protocol::FiveFold1k))
}

fn average_reports(reports: &[RetrievalReport], protocol: Protocol) -> RetrievalReport {
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&RetrievalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&RetrievalReport) -> Option<f64>| -> Option<f64> {
        reports.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    let dir = |which: Direction| {
        let pick = |r: &RetrievalReport| -> DirectionReport {
            match which {
                Direction::ImageToText => r.image_to_text.clone(),
                Direction::TextToImage => r.text_to_image.clone(),
            }
        };
        DirectionReport {
            direction: which,
            r1: mean(&|r| pick(r).r1),
            r5: mean(&|r| pick(r).r5),
            r10: mean(&|r| pick(r).r10),
            pmrp: mean_opt(&|r| pick(r).pmrp),
            rpc2: mean_opt(&|r| pick(r).rpc2),
        }
    };
    let i2t = dir(Direction::ImageToText);
    let t2i = dir(Direction::TextToImage);
    RetrievalReport {
        protocol,
        folds: reports.len(),
        rsum: i2t.recall_sum() + t2i.recall_sum(),
        image_to_text: i2t,
        text_to_image: t2i,
    }
}

/// Embeds both modalities of a dataset.
pub fn embed_dataset(
    model: &ProbModel,
    dataset: &FeatureDataset,
) -> Result<(Vec<GaussianEmbedding>, Vec<GaussianEmbedding>)> {
    let images = dataset
        .image_features
        .par_iter()
        .map(|f| model.embed(Modality::Image, f))
        .collect::<Result<Vec<_>>>()?;
    let captions = dataset
        .caption_features
        .par_iter()
        .map(|f| model.embed(Modality::Caption, f))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, captions))
}

/// Scores every image against every caption with the model's metric.
pub fn dataset_similarities(model: &ProbModel, dataset: &FeatureDataset) -> Result<Vec<Vec<f64>>> {
    let (images, captions) = embed_dataset(model, dataset)?;
    similarity_matrix(model.metric, &images, &captions)
}

/// Evaluates a model on a dataset under the chosen protocol.
pub fn evaluate_model(
    model: &ProbModel,
    dataset: &FeatureDataset,
    protocol: Protocol,
    fold_size: usize,
    options: PrecisionOptions,
) -> Result<RetrievalReport> {
    let sims = dataset_similarities(model, dataset)?;
    match protocol {
        Protocol::Full => report_from_similarities(&sims, &dataset.annotations, options),
        Protocol::FiveFold1k => five_fold_1k(&sims, &dataset.annotations, fold_size, options),
    }
}

/// Index (0 or 1) of the candidate more similar to the query; ties pick 0.
///
/// `query_modality` tells which argument position the query takes: image
/// queries are scored as `sim(query, candidate)`, caption queries as
/// `sim(candidate, query)`.
pub fn select_candidate(
    metric: SimilarityMetric,
    query: &GaussianEmbedding,
    query_modality: Modality,
    candidates: [&GaussianEmbedding; 2],
) -> Result<usize> {
    let score = |c: &GaussianEmbedding| match query_modality {
        Modality::Image => similarity(metric, query, c),
        Modality::Caption => similarity(metric, c, query),
    };
    let a = score(candidates[0])?;
    let c = score(candidates[1])?;
    Ok(if c > a { 1 } else { 0 })
}

/// Binary selection from raw features: embeds the query and both
/// candidates (of the other modality) and picks the closer candidate.
pub fn binary_selection(
    model: &ProbModel,
    query_modality: Modality,
    query: &[f64],
    candidates: [&[f64]; 2],
) -> Result<usize> {
    let other = match query_modality {
        Modality::Image => Modality::Caption,
        Modality::Caption => Modality::Image,
    };
    let q = model.embed(query_modality, query)?;
    let a = model.embed(other, candidates[0])?;
    let c = model.embed(other, candidates[1])?;
    select_candidate(model.metric, &q, query_modality, [&a, &c])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub id: usize,
    pub modality: Modality,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Sorted by descending uncertainty, then images before captions, then id.
    pub rows: Vec<UncertaintyRow>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl UncertaintyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,modality,uncertainty\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.id, r.modality.name(), r.uncertainty));
        }
        out
    }
}

/// Per-item uncertainty of every image and caption plus summary quantiles.
pub fn uncertainty_report(model: &ProbModel, dataset: &FeatureDataset) -> Result<UncertaintyReport> {
    let (images, captions) = embed_dataset(model, dataset)?;
    let mut rows: Vec<UncertaintyRow> = images
        .iter()
        .enumerate()
        .map(|(id, e)| (id, Modality::Image, e))
        .chain(
            captions
                .iter()
                .enumerate()
                .map(|(id, e)| (id, Modality::Caption, e)),
        )
        .map(|(id, modality, e)| UncertaintyRow {
            id,
            modality,
            uncertainty: uncertainty(e),
        })
        .collect();
    let modality_order = |m: Modality| match m {
        Modality::Image => 0,
        Modality::Caption => 1,
    };
    rows.sort_by(|a, b| {
        b.uncertainty
            .total_cmp(&a.uncertainty)
            .then(modality_order(a.modality).cmp(&modality_order(b.modality)))
            .then(a.id.cmp(&b.id))
    });
    if rows.is_empty() {
        return Err(Error::Config("dataset has no items".into()));
    }
    let n = rows.len();
    let sorted_asc = |i: usize| rows[n - 1 - i].uncertainty;
    let median = if n % 2 == 1 {
        sorted_asc(n / 2)
    } else {
        0.5 * (sorted_asc(n / 2 - 1) + sorted_asc(n / 2))
    };
    Ok(UncertaintyReport {
        min: rows[n - 1].uncertainty,
        max: rows[0].uncertainty,
        median,
        rows,
    })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with tied ranks averaged, and its two-sided
/// p-value from the t approximation with `n - 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidInput(
            "spearman needs two equal-length samples of size >= 3".into(),
        ));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let rho = sxy / (sxx * syy).sqrt();
    let df = n - 2.0;
    if rho.abs() >= 1.0 {
        return Ok((rho.signum(), 0.0));
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((rho, p))
}
