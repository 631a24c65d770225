//! Crop triplets built from region-annotated images: two small crops A and
//! B, their union C, and the conjoined caption "A and B". Used to probe
//! how embedding uncertainty reacts to added visual content.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::binary_selection;
use crate::gaussian::uncertainty;
use crate::model::{Modality, ProbModel};

/// Number of sub-threshold regions a triplet is chosen from.
pub const QUALIFYING_REGIONS: usize = 10;

/// Area thresholds of the uncertainty sweep, as fractions of image area.
pub const SWEEP_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

pub const SWEEP_CSV_HEADER: &str = "threshold,crop_a_unc,crop_c_unc,caption_a_unc,caption_c_unc";

/// Axis-aligned box in pixels; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidInput(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Computed from the edges so a box's overlap with itself equals its area.
    pub fn area(&self) -> f64 {
        (self.right() - self.x) * (self.bottom() - self.y)
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Tightest box covering both.
    pub fn union(&self, other: &Self) -> Self {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Self {
            x,
            y,
            w: self.right().max(other.right()) - x,
            h: self.bottom().max(other.bottom()) - y,
        }
    }

    pub fn contains(&self, other: &Self) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    inter / (a.area() + b.area() - inter)
}

/// One annotated region: its box, short caption, and precomputed features
/// of the crop and of the caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub bbox: BoundingBox,
    pub caption: String,
    /// Latent object ids shown in the region; empty for ingested data.
    #[serde(default)]
    pub objects: Vec<usize>,
    pub feature: Vec<f64>,
    pub caption_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionAnnotatedImage {
    pub id: usize,
    pub width: f64,
    pub height: f64,
    pub regions: Vec<Region>,
}

impl RegionAnnotatedImage {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("image {}: {m}", self.id)));
        if !(self.width > 0.0 && self.height > 0.0 && self.area().is_finite()) {
            return bad("non-positive size".into());
        }
        if self.regions.is_empty() {
            return bad("no regions".into());
        }
        let frame = BoundingBox {
            x: 0.0,
            y: 0.0,
            w: self.width,
            h: self.height,
        };
        for (i, r) in self.regions.iter().enumerate() {
            r.bbox.validate()?;
            if !frame.contains(&r.bbox) {
                return bad(format!("region {i} lies outside the image"));
            }
            if r.caption.is_empty() {
                return bad(format!("region {i} has an empty caption"));
            }
            if r.feature.iter().chain(&r.caption_feature).any(|v| !v.is_finite()) {
                return bad(format!("region {i} has non-finite features"));
            }
        }
        Ok(())
    }
}

/// Features of the four items a selection or sweep needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletFeatures {
    pub crop_a: Vec<f64>,
    pub crop_c: Vec<f64>,
    pub caption_a: Vec<f64>,
    pub caption_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropTriplet {
    pub image_id: usize,
    pub area_threshold: f64,
    pub region_a: usize,
    pub region_b: usize,
    pub crop_a: BoundingBox,
    pub crop_b: BoundingBox,
    pub crop_c: BoundingBox,
    pub caption_a: String,
    pub caption_b: String,
    pub caption_c: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<TripletFeatures>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "area threshold must lie in (0, 1], got {threshold}"
        )));
    }
    Ok(())
}

/// Builds the crop triplet of an image, or `None` when fewer than ten
/// regions fall under the area threshold and the image must be skipped.
pub fn build_triplet(img: &RegionAnnotatedImage, threshold: f64) -> Result<Option<CropTriplet>> {
    check_threshold(threshold)?;
    img.validate()?;
    let limit = threshold * img.area();
    let mut qualifying: Vec<usize> = (0..img.regions.len())
        .filter(|&i| img.regions[i].bbox.area() < limit)
        .collect();
    if qualifying.len() < QUALIFYING_REGIONS {
        return Ok(None);
    }
    let area = |i: usize| img.regions[i].bbox.area();
    qualifying.sort_by(|&a, &b| area(b).total_cmp(&area(a)).then(a.cmp(&b)));
    qualifying.truncate(QUALIFYING_REGIONS);

    let a = qualifying[0];
    let box_a = img.regions[a].bbox;
    let mut b = qualifying[1];
    for &cand in &qualifying[2..] {
        let (o_c, o_b) = (
            iou(&box_a, &img.regions[cand].bbox),
            iou(&box_a, &img.regions[b].bbox),
        );
        // Candidates are visited by descending area then index, so only a
        // strictly smaller overlap displaces the incumbent.
        if o_c < o_b {
            b = cand;
        }
    }
    let (ra, rb) = (&img.regions[a], &img.regions[b]);
    Ok(Some(CropTriplet {
        image_id: img.id,
        area_threshold: threshold,
        region_a: a,
        region_b: b,
        crop_a: ra.bbox,
        crop_b: rb.bbox,
        crop_c: ra.bbox.union(&rb.bbox),
        caption_a: ra.caption.clone(),
        caption_b: rb.caption.clone(),
        caption_c: format!("{} and {}", ra.caption, rb.caption),
        features: None,
    }))
}

/// Supplies features for constructed crops and conjoined captions.
pub trait CropFeatureSource {
    /// Feature of an arbitrary crop of `img`.
    fn crop_feature(&self, img: &RegionAnnotatedImage, bbox: &BoundingBox) -> Result<Vec<f64>>;
    /// Feature of the caption joining the captions of the given regions.
    fn caption_feature(&self, img: &RegionAnnotatedImage, regions: &[usize]) -> Result<Vec<f64>>;
}

/// Fills in the features of a triplet built from `img`.
pub fn attach_features(
    mut triplet: CropTriplet,
    img: &RegionAnnotatedImage,
    source: &dyn CropFeatureSource,
) -> Result<CropTriplet> {
    let ra = &img.regions[triplet.region_a];
    triplet.features = Some(TripletFeatures {
        crop_a: ra.feature.clone(),
        crop_c: source.crop_feature(img, &triplet.crop_c)?,
        caption_a: ra.caption_feature.clone(),
        caption_c: source.caption_feature(img, &[triplet.region_a, triplet.region_b])?,
    });
    Ok(triplet)
}

/// Triplets at one threshold from up to `n` images visited in a seeded
/// random order; images without enough small regions are passed over.
pub fn sample_triplets(
    images: &[RegionAnnotatedImage],
    source: Option<&dyn CropFeatureSource>,
    threshold: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<CropTriplet>> {
    check_threshold(threshold)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    for i in order {
        if out.len() == n {
            break;
        }
        if let Some(t) = build_triplet(&images[i], threshold)? {
            out.push(match source {
                Some(s) => attach_features(t, &images[i], s)?,
                None => t,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub crop_a_unc: f64,
    pub crop_c_unc: f64,
    pub caption_a_unc: f64,
    pub caption_c_unc: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// One line per threshold that fell short of the requested sample size.
    pub warnings: Vec<String>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.threshold, r.crop_a_unc, r.crop_c_unc, r.caption_a_unc, r.caption_c_unc
            ));
        }
        out
    }
}

fn triplet_features(t: &CropTriplet) -> Result<&TripletFeatures> {
    t.features
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("triplet of image {} has no features", t.image_id)))
}

/// Mean uncertainty of crop A, crop C, caption A and caption C per area
/// threshold, averaged over up to `sample_n` sampled images.
pub fn threshold_sweep(
    model: &ProbModel,
    images: &[RegionAnnotatedImage],
    source: &dyn CropFeatureSource,
    thresholds: &[f64],
    sample_n: usize,
    seed: u64,
) -> Result<SweepResult> {
    let mut rows = Vec::with_capacity(thresholds.len());
    let mut warnings = Vec::new();
    for &t in thresholds {
        let triplets = sample_triplets(images, Some(source), t, sample_n, seed)?;
        let values = triplets
            .par_iter()
            .map(|tr| {
                let f = triplet_features(tr)?;
                Ok([
                    uncertainty(&model.embed(Modality::Image, &f.crop_a)?),
                    uncertainty(&model.embed(Modality::Image, &f.crop_c)?),
                    uncertainty(&model.embed(Modality::Caption, &f.caption_a)?),
                    uncertainty(&model.embed(Modality::Caption, &f.caption_c)?),
                ])
            })
            .collect::<Result<Vec<[f64; 4]>>>()?;
        if values.len() < sample_n {
            warnings.push(format!(
                "threshold {t}: only {} of {sample_n} requested images have {QUALIFYING_REGIONS} qualifying regions",
                values.len()
            ));
        }
        let mut sums = [0.0; 4];
        for v in &values {
            for (s, x) in sums.iter_mut().zip(v) {
                *s += x;
            }
        }
        let n = values.len() as f64;
        let mean = |s: f64| if values.is_empty() { f64::NAN } else { s / n };
        rows.push(SweepRow {
            threshold: t,
            crop_a_unc: mean(sums[0]),
            crop_c_unc: mean(sums[1]),
            caption_a_unc: mean(sums[2]),
            caption_c_unc: mean(sums[3]),
            samples: values.len(),
        });
    }
    Ok(SweepResult { rows, warnings })
}

/// Binary selection accuracies in percent, laid out by query type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Image-to-text, query crop A: candidates caption A and caption C.
    pub crop_a: f64,
    /// Image-to-text, query crop C.
    pub crop_c: f64,
    /// Text-to-image, query caption A: candidates crop A and crop C.
    pub caption_a: f64,
    /// Text-to-image, query caption C.
    pub caption_c: f64,
    pub count: usize,
}

impl SelectionReport {
    pub const CSV_HEADER: &'static str = "crop_a,crop_c,caption_a,caption_c,count";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.crop_a,
            self.crop_c,
            self.caption_a,
            self.caption_c,
            self.count
        )
    }
}

/// Per-triplet outcome of the four selection queries: whether the correct
/// candidate was chosen.
pub fn selection_outcomes(model: &ProbModel, triplet: &CropTriplet) -> Result<[bool; 4]> {
    let f = triplet_features(triplet)?;
    let captions = [f.caption_a.as_slice(), f.caption_c.as_slice()];
    let crops = [f.crop_a.as_slice(), f.crop_c.as_slice()];
    Ok([
        binary_selection(model, Modality::Image, &f.crop_a, captions)? == 0,
        binary_selection(model, Modality::Image, &f.crop_c, captions)? == 1,
        binary_selection(model, Modality::Caption, &f.caption_a, crops)? == 0,
        binary_selection(model, Modality::Caption, &f.caption_c, crops)? == 1,
    ])
}

pub fn selection_experiment(model: &ProbModel, triplets: &[CropTriplet]) -> Result<SelectionReport> {
    let outcomes = triplets
        .par_iter()
        .map(|t| selection_outcomes(model, t))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = [0usize; 4];
    for o in &outcomes {
        for (h, &ok) in hits.iter_mut().zip(o) {
            *h += usize::from(ok);
        }
    }
    let pct = |h: usize| {
        if triplets.is_empty() {
            0.0
        } else {
            100.0 * h as f64 / triplets.len() as f64
        }
    };
    Ok(SelectionReport {
        crop_a: pct(hits[0]),
        crop_c: pct(hits[1]),
        caption_a: pct(hits[2]),
        caption_c: pct(hits[3]),
        count: triplets.len(),
    })
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn manifest_to_jsonl(triplets: &[CropTriplet]) -> String {
    to_jsonl(triplets)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<CropTriplet>> {
    parse_jsonl(text, path)
}

pub fn load_manifest(path: &Path) -> Result<Vec<CropTriplet>> {
    parse_manifest(&read_text(path)?, path)
}

pub fn regions_to_jsonl(images: &[RegionAnnotatedImage]) -> String {
    to_jsonl(images)
}

pub fn parse_regions(text: &str, path: &Path) -> Result<Vec<RegionAnnotatedImage>> {
    let images: Vec<RegionAnnotatedImage> = parse_jsonl(text, path)?;
    for img in &images {
        img.validate()?;
    }
    Ok(images)
}

pub fn load_regions(path: &Path) -> Result<Vec<RegionAnnotatedImage>> {
    parse_regions(&read_text(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::CovarianceShape;
    use crate::metrics::SimilarityMetric;
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn region(b: BoundingBox, i: usize) -> Region {
        Region {
            bbox: b,
            caption: format!("thing {i}"),
            objects: vec![i],
            feature: vec![i as f64, 1.0],
            caption_feature: vec![1.0, i as f64],
        }
    }

    fn image(boxes: Vec<BoundingBox>) -> RegionAnnotatedImage {
        RegionAnnotatedImage {
            id: 7,
            width: 100.0,
            height: 100.0,
            regions: boxes.into_iter().enumerate().map(|(i, b)| region(b, i)).collect(),
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &bx(1.0, 0.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &bx(0.5, 0.0, 1.0, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn union_geometry() {
        let c = bx(0.0, 0.0, 10.0, 10.0).union(&bx(20.0, 20.0, 5.0, 5.0));
        assert_eq!(c, bx(0.0, 0.0, 25.0, 25.0));
    }

    #[test]
    fn equal_disjoint_regions_pick_lowest_index() {
        let boxes = (0..10).map(|i| bx(10.0 * i as f64, 0.0, 5.0, 5.0)).collect();
        let t = build_triplet(&image(boxes), 0.5).unwrap().unwrap();
        assert_eq!((t.region_a, t.region_b), (0, 1));
        assert_eq!(t.caption_c, "thing 0 and thing 1");
    }

    #[test]
    fn too_few_regions_are_skipped() {
        let boxes = (0..9).map(|i| bx(10.0 * i as f64, 0.0, 5.0, 5.0)).collect();
        assert_eq!(build_triplet(&image(boxes), 0.5).unwrap(), None);
        let mut boxes: Vec<_> = (0..10).map(|i| bx(10.0 * i as f64, 0.0, 5.0, 5.0)).collect();
        boxes[3] = bx(0.0, 20.0, 80.0, 80.0);
        assert_eq!(build_triplet(&image(boxes), 0.5).unwrap(), None);
        assert!(matches!(
            build_triplet(&image(vec![bx(0.0, 0.0, 1.0, 1.0)]), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overlap_and_area_tie_breaks() {
        // Region 0 is largest; 1 and 2 overlap it equally little (zero) but
        // 2 is larger, so 2 wins; 3 overlaps 0.
        let mut boxes = vec![
            bx(0.0, 0.0, 20.0, 20.0),
            bx(30.0, 0.0, 5.0, 5.0),
            bx(30.0, 30.0, 6.0, 6.0),
            bx(10.0, 10.0, 15.0, 15.0),
        ];
        boxes.extend((0..8).map(|i| bx(10.0 * i as f64, 90.0, 4.0, 4.0)));
        let t = build_triplet(&image(boxes), 0.5).unwrap().unwrap();
        assert_eq!(t.region_a, 0);
        assert_eq!(t.region_b, 2);
        assert_eq!(t.crop_c, bx(0.0, 0.0, 36.0, 36.0));
    }

    /// Exhaustive restatement of the selection rule.
    fn oracle_selection(img: &RegionAnnotatedImage, threshold: f64) -> Option<(usize, usize)> {
        let limit = threshold * img.area();
        let n = img.regions.len();
        let small: Vec<usize> = (0..n).filter(|&i| img.regions[i].bbox.area() < limit).collect();
        if small.len() < 10 {
            return None;
        }
        // Rank of a region: how many small regions precede it in the order.
        let precedes = |p: usize, q: usize| {
            let (ap, aq) = (img.regions[p].bbox.area(), img.regions[q].bbox.area());
            ap > aq || (ap == aq && p < q)
        };
        let top: Vec<usize> = small
            .iter()
            .copied()
            .filter(|&i| small.iter().filter(|&&j| precedes(j, i)).count() < 10)
            .collect();
        let a = *top
            .iter()
            .find(|&&i| top.iter().all(|&j| j == i || precedes(i, j)))?;
        let rest: Vec<usize> = top.iter().copied().filter(|&i| i != a).collect();
        let ov = |i: usize| iou(&img.regions[a].bbox, &img.regions[i].bbox);
        let b = *rest.iter().find(|&&i| {
            rest.iter()
                .all(|&j| j == i || ov(i) < ov(j) || (ov(i) == ov(j) && precedes(i, j)))
        })?;
        Some((a, b))
    }

    #[test]
    fn selection_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(8..16);
            let boxes: Vec<_> = (0..n)
                .map(|_| {
                    let w = rng.random_range(1..40) as f64;
                    let h = rng.random_range(1..40) as f64;
                    bx(
                        rng.random_range(0..=(100 - w as usize)) as f64,
                        rng.random_range(0..=(100 - h as usize)) as f64,
                        w,
                        h,
                    )
                })
                .collect();
            let img = image(boxes);
            for t in SWEEP_THRESHOLDS {
                let got = build_triplet(&img, t).unwrap().map(|t| (t.region_a, t.region_b));
                assert_eq!(got, oracle_selection(&img, t));
            }
        }
    }

    struct Constant;

    impl CropFeatureSource for Constant {
        fn crop_feature(&self, _: &RegionAnnotatedImage, b: &BoundingBox) -> Result<Vec<f64>> {
            Ok(vec![b.w, b.h])
        }
        fn caption_feature(&self, _: &RegionAnnotatedImage, r: &[usize]) -> Result<Vec<f64>> {
            Ok(vec![r.len() as f64, 0.5])
        }
    }

    fn tiny_model(shape: CovarianceShape, seed: u64) -> ProbModel {
        init_model(
            &ModelConfig {
                image_dim: 2,
                caption_dim: 2,
                joint_dim: 3,
                shape,
                metric: SimilarityMetric::NegMinKl,
                frozen_unit_variance: false,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn constant_variance_model_gives_equal_curves() {
        let boxes = (0..12)
            .map(|i| bx(8.0 * i as f64, 0.0, 5.0, 1.0 + i as f64))
            .collect();
        let images = vec![image(boxes)];
        let mut model = tiny_model(CovarianceShape::SphericalOneValue, 1);
        model.shared_logvar = 0.7;
        let sweep = threshold_sweep(&model, &images, &Constant, &SWEEP_THRESHOLDS, 3, 0).unwrap();
        for r in &sweep.rows {
            assert_eq!(r.samples, 1);
            assert_eq!(r.crop_a_unc, r.crop_c_unc);
            assert_eq!(r.crop_c_unc, r.caption_a_unc);
            assert_eq!(r.caption_a_unc, r.caption_c_unc);
        }
        assert_eq!(sweep.warnings.len(), 5);
        let again = threshold_sweep(&model, &images, &Constant, &SWEEP_THRESHOLDS, 3, 0).unwrap();
        assert_eq!(sweep.to_csv(), again.to_csv());
        assert!(sweep.to_csv().starts_with(SWEEP_CSV_HEADER));
    }

    fn feature_triplet(f: TripletFeatures) -> CropTriplet {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        CropTriplet {
            image_id: 0,
            area_threshold: 0.5,
            region_a: 0,
            region_b: 1,
            crop_a: b,
            crop_b: b,
            crop_c: b,
            caption_a: "a".into(),
            caption_b: "b".into(),
            caption_c: "a and b".into(),
            features: Some(f),
        }
    }

    #[test]
    fn oracle_and_adversarial_selection() {
        let mut model = tiny_model(CovarianceShape::Ellipsoidal, 2);
        // Identity-like heads: both modalities embed x to (x0, x1, 0).
        for head in [&mut model.image_mean_head, &mut model.caption_mean_head] {
            head.weight = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
            head.bias = vec![0.0; 3];
        }
        for head in [&mut model.image_logvar_head, &mut model.caption_logvar_head] {
            head.weight = vec![0.0; 6];
            head.bias = vec![0.0; 3];
        }
        let good = feature_triplet(TripletFeatures {
            crop_a: vec![1.0, 0.0],
            crop_c: vec![0.0, 1.0],
            caption_a: vec![1.0, 0.0],
            caption_c: vec![0.0, 1.0],
        });
        let bad = feature_triplet(TripletFeatures {
            crop_a: vec![0.0, 1.0],
            crop_c: vec![1.0, 0.0],
            caption_a: vec![1.0, 0.0],
            caption_c: vec![0.0, 1.0],
        });
        let r = selection_experiment(&model, &[good.clone(), good]).unwrap();
        assert_eq!(
            (r.crop_a, r.crop_c, r.caption_a, r.caption_c),
            (100.0, 100.0, 100.0, 100.0)
        );
        let r = selection_experiment(&model, &[bad]).unwrap();
        assert_eq!(
            (r.crop_a, r.crop_c, r.caption_a, r.caption_c),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn selection_matches_per_item_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = tiny_model(CovarianceShape::Ellipsoidal, 3);
        let mut v = || vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let triplets: Vec<_> = (0..40)
            .map(|_| {
                feature_triplet(TripletFeatures {
                    crop_a: v(),
                    crop_c: v(),
                    caption_a: v(),
                    caption_c: v(),
                })
            })
            .collect();
        let r = selection_experiment(&model, &triplets).unwrap();
        let mut hits = [0.0; 4];
        for t in &triplets {
            let f = t.features.as_ref().unwrap();
            let e = |m, x: &Vec<f64>| model.embed(m, x).unwrap();
            let s = |i: &Vec<f64>, c: &Vec<f64>| {
                crate::metrics::similarity(model.metric, &e(Modality::Image, i), &e(Modality::Caption, c))
                    .unwrap()
            };
            let pick = |sa: f64, sc: f64, correct_c: bool| if correct_c { sc > sa } else { sa >= sc };
            hits[0] += f64::from(u8::from(pick(
                s(&f.crop_a, &f.caption_a),
                s(&f.crop_a, &f.caption_c),
                false,
            )));
            hits[1] += f64::from(u8::from(pick(
                s(&f.crop_c, &f.caption_a),
                s(&f.crop_c, &f.caption_c),
                true,
            )));
            hits[2] += f64::from(u8::from(pick(
                s(&f.crop_a, &f.caption_a),
                s(&f.crop_c, &f.caption_a),
                false,
            )));
            hits[3] += f64::from(u8::from(pick(
                s(&f.crop_a, &f.caption_c),
                s(&f.crop_c, &f.caption_c),
                true,
            )));
        }
        let pct: Vec<f64> = hits.iter().map(|h| 100.0 * h / 40.0).collect();
        assert_eq!(vec![r.crop_a, r.crop_c, r.caption_a, r.caption_c], pct);
    }

    #[test]
    fn manifest_round_trip_and_schema_errors() {
        let boxes = (0..10).map(|i| bx(10.0 * i as f64, 0.0, 5.0, 5.0)).collect();
        let img = image(boxes);
        let t = build_triplet(&img, 0.3).unwrap().unwrap();
        let t = attach_features(t, &img, &Constant).unwrap();
        let text = manifest_to_jsonl(std::slice::from_ref(&t));
        let p = Path::new("m.jsonl");
        assert_eq!(parse_manifest(&text, p).unwrap(), vec![t]);
        let broken = format!("{text}{{\"image_id\": 1}}\n");
        assert!(matches!(
            parse_manifest(&broken, p),
            Err(Error::Schema { line: 2, .. })
        ));
        let regions = regions_to_jsonl(std::slice::from_ref(&img));
        assert_eq!(parse_regions(&regions, p).unwrap(), vec![img]);
    }

    proptest! {
        #[test]
        fn iou_properties(
            a in (0u32..500, 0u32..500, 1u32..500, 1u32..500),
            b in (0u32..500, 0u32..500, 1u32..500, 1u32..500),
        ) {
            let pix = |v: u32| f64::from(v) / 4.0;
            let a = bx(pix(a.0), pix(a.1), pix(a.2), pix(a.3));
            let b = bx(pix(b.0), pix(b.1), pix(b.2), pix(b.3));
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            let c = a.union(&b);
            prop_assert!(c.area() >= a.area().max(b.area()));
            prop_assert!(c.contains(&a) && c.contains(&b));
        }

        #[test]
        fn selected_regions_are_below_threshold(seed in any::<u64>(), t in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<_> = (0..14)
                .map(|_| {
                    let w = rng.random_range(1.0..60.0f64);
                    let h = rng.random_range(1.0..60.0f64);
                    bx(rng.random_range(0.0..100.0 - w), rng.random_range(0.0..100.0 - h), w, h)
                })
                .collect();
            let img = image(boxes);
            if let Some(tr) = build_triplet(&img, t).unwrap() {
                prop_assert!(tr.crop_a.area() < t * img.area());
                prop_assert!(tr.crop_b.area() < t * img.area());
                prop_assert!(tr.crop_a.area() >= tr.crop_b.area());
                prop_assert!(tr.crop_c.area() >= tr.crop_a.area());
            }
        }
    }
}
