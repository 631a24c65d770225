//! Synthetic image/caption features with controllable cross-modal
//! ambiguity.
//!
//! Every latent object has a unit prototype vector shared by both
//! modalities. An image shows a few objects and its feature is the
//! normalised sum of their prototypes plus Gaussian noise; a caption
//! mentions a subset of its image's objects and is built the same way.
//! Images with more objects and captions that mention fewer of them are
//! the ambiguous ones.
//!
//! Region-annotated images place one object per disjoint box. The feature
//! of any crop is the composition of the objects whose boxes lie inside
//! it, so a union crop carries more content than either of its parts.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::MatchAnnotations;
use crate::io::write_atomic;
use crate::model::Modality;
use crate::triplet_lab::{regions_to_jsonl, BoundingBox, CropFeatureSource, Region, RegionAnnotatedImage};

/// How many of its image's objects a caption mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Uniform over `1..=objects`.
    Uniform,
    /// Every object.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub captions_per_image: usize,
    pub coverage: Coverage,
    /// Standard deviation of the per-coordinate feature noise.
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub region_images: usize,
    pub region_objects_min: usize,
    pub region_objects_max: usize,
    /// Side length of the square region images, in pixels.
    pub image_size: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            objects_min: 1,
            objects_max: 4,
            captions_per_image: 5,
            coverage: Coverage::Uniform,
            noise_sigma: 0.02,
            feature_dim: 64,
            train_images: 500,
            val_images: 100,
            test_images: 100,
            region_images: 2000,
            region_objects_min: 12,
            region_objects_max: 16,
            image_size: 1000.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return fail("objects per image must satisfy 1 <= min <= max");
        }
        if self.vocab_size < self.objects_max
            || (self.region_images > 0 && self.vocab_size < self.region_objects_max)
        {
            return fail("vocabulary must be at least as large as the most objects per image");
        }
        if self.region_images > 0
            && (self.region_objects_min == 0 || self.region_objects_min > self.region_objects_max)
        {
            return fail("objects per region image must satisfy 1 <= min <= max");
        }
        if self.captions_per_image == 0 {
            return fail("captions per image must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise sigma must be finite and non-negative");
        }
        if self.feature_dim == 0 {
            return fail("feature dimension must be positive");
        }
        if !(self.image_size >= 100.0 && self.image_size.is_finite()) {
            return fail("region image size must be at least 100 pixels");
        }
        Ok(())
    }
}

/// One generated split with its latent ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub dataset: FeatureDataset,
    pub image_objects: Vec<Vec<usize>>,
    pub caption_objects: Vec<Vec<usize>>,
    /// Object count of each image.
    pub image_ambiguity: Vec<f64>,
    /// Objects of the matching image left unmentioned by each caption.
    pub caption_ambiguity: Vec<f64>,
}

impl SyntheticSplit {
    pub fn ambiguity_csv(&self) -> String {
        let mut out = String::from("id,modality,ambiguity\n");
        for (id, a) in self.image_ambiguity.iter().enumerate() {
            out.push_str(&format!("{id},image,{a}\n"));
        }
        for (id, a) in self.caption_ambiguity.iter().enumerate() {
            out.push_str(&format!("{id},caption,{a}\n"));
        }
        out
    }
}

/// Rebuilds crop and caption features from latent objects. Noise is drawn
/// from a generator keyed by the item, so the same crop always gets the
/// same feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropComposer {
    pub noise_sigma: f64,
    pub seed: u64,
    pub prototypes: Vec<Vec<f64>>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CropComposer {
    fn item_seed(&self, modality: Modality, image_id: usize, objects: &[usize]) -> u64 {
        let tag = match modality {
            Modality::Image => 1,
            Modality::Caption => 2,
        };
        let mut h = splitmix(self.seed ^ splitmix(tag));
        h = splitmix(h ^ image_id as u64);
        for &o in objects {
            h = splitmix(h ^ (o as u64 + 1));
        }
        h
    }

    /// Feature of an item showing `objects` (sorted, duplicates removed).
    pub fn compose(&self, modality: Modality, image_id: usize, objects: &[usize]) -> Result<Vec<f64>> {
        let objects: Vec<usize> = objects
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if objects.is_empty() {
            return Err(Error::InvalidInput(
                "cannot compose a feature from no objects".into(),
            ));
        }
        if let Some(&o) = objects.iter().find(|&&o| o >= self.prototypes.len()) {
            return Err(Error::InvalidInput(format!("object {o} outside the vocabulary")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.item_seed(modality, image_id, &objects));
        Ok(compose_with(
            &self.prototypes,
            &objects,
            self.noise_sigma,
            &mut rng,
        ))
    }
}

impl CropFeatureSource for CropComposer {
    fn crop_feature(&self, img: &RegionAnnotatedImage, bbox: &BoundingBox) -> Result<Vec<f64>> {
        let objects: Vec<usize> = img
            .regions
            .iter()
            .filter(|r| bbox.contains(&r.bbox))
            .flat_map(|r| r.objects.iter().copied())
            .collect();
        self.compose(Modality::Image, img.id, &objects)
    }

    fn caption_feature(&self, img: &RegionAnnotatedImage, regions: &[usize]) -> Result<Vec<f64>> {
        let mut objects = Vec::new();
        for &r in regions {
            let region = img
                .regions
                .get(r)
                .ok_or_else(|| Error::InvalidInput(format!("image {} has no region {r}", img.id)))?;
            objects.extend_from_slice(&region.objects);
        }
        self.compose(Modality::Caption, img.id, &objects)
    }
}

/// Normalised prototype sum plus noise, rounded to storage precision.
fn compose_with(prototypes: &[Vec<f64>], objects: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = prototypes[0].len();
    let mut v = vec![0.0; dim];
    for &o in objects {
        for (x, p) in v.iter_mut().zip(&prototypes[o]) {
            *x += p;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter()
        .map(|x| {
            let n: f64 = StandardNormal.sample(rng);
            (x / norm + sigma * n) as f32 as f64
        })
        .collect()
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: SyntheticSplit,
    pub val: SyntheticSplit,
    pub test: SyntheticSplit,
    pub regions: Vec<RegionAnnotatedImage>,
    pub composer: CropComposer,
}

impl SyntheticData {
    pub fn split(&self, split: Split) -> &SyntheticSplit {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes `train/`, `val/`, `test/` dataset directories (each with an
    /// `ambiguity.csv`), `regions.jsonl` and `composer.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            let sub = dir.join(split.name());
            let s = self.split(split);
            s.dataset.save(&sub)?;
            write_atomic(&sub.join("ambiguity.csv"), s.ambiguity_csv().as_bytes())?;
        }
        write_atomic(
            &dir.join("regions.jsonl"),
            regions_to_jsonl(&self.regions).as_bytes(),
        )?;
        let composer = serde_json::to_string(&self.composer)?;
        write_atomic(&dir.join("composer.json"), composer.as_bytes())
    }
}

pub fn load_composer(path: &Path) -> Result<CropComposer> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c: CropComposer = serde_json::from_str(&text)?;
    let dim = c.prototypes.first().map_or(0, Vec::len);
    if dim == 0
        || c.prototypes
            .iter()
            .any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidInput(format!(
            "{}: malformed prototypes",
            path.display()
        )));
    }
    Ok(c)
}

fn sample_objects(rng: &mut ChaCha8Rng, vocab: usize, min: usize, max: usize) -> Vec<usize> {
    let n = rng.random_range(min..=max);
    let mut objs = index::sample(rng, vocab, n).into_vec();
    objs.sort_unstable();
    objs
}

fn generate_split(
    spec: &SyntheticSpec,
    prototypes: &[Vec<f64>],
    n_images: usize,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> SyntheticSplit {
    let mut image_objects = Vec::with_capacity(n_images);
    let mut image_features = Vec::with_capacity(n_images);
    let mut caption_objects = Vec::new();
    let mut caption_features = Vec::new();
    let mut image_ambiguity = Vec::with_capacity(n_images);
    let mut caption_ambiguity = Vec::new();
    let mut annotations = MatchAnnotations::default();
    for j in 0..n_images {
        let objs = sample_objects(rng, spec.vocab_size, spec.objects_min, spec.objects_max);
        image_features.push(compose_with(prototypes, &objs, spec.noise_sigma, rng));
        let mut labels = vec![0u8; spec.vocab_size];
        for &o in &objs {
            labels[o] = 1;
        }
        annotations.label_vectors.insert(j, labels);
        for _ in 0..spec.captions_per_image {
            let coverage = match spec.coverage {
                Coverage::Uniform => rng.random_range(1..=objs.len()),
                Coverage::Full => objs.len(),
            };
            let mut mentioned: Vec<usize> = objs.choose_multiple(rng, coverage).copied().collect();
            mentioned.sort_unstable();
            annotations.base_matches.insert(caption_features.len(), j);
            caption_features.push(compose_with(prototypes, &mentioned, spec.noise_sigma, rng));
            caption_ambiguity.push((objs.len() - coverage) as f64);
            caption_objects.push(mentioned);
        }
        image_ambiguity.push(objs.len() as f64);
        image_objects.push(objs);
    }
    // A caption also fits every other image showing all of its objects.
    for (k, mentioned) in caption_objects.iter().enumerate() {
        let own = annotations.base_matches[&k];
        for (j, objs) in image_objects.iter().enumerate() {
            if j != own && mentioned.iter().all(|o| objs.binary_search(o).is_ok()) {
                annotations.extended_positives.insert((j, k));
            }
        }
    }
    SyntheticSplit {
        dataset: FeatureDataset {
            image_features,
            caption_features,
            annotations,
            split,
        },
        image_objects,
        caption_objects,
        image_ambiguity,
        caption_ambiguity,
    }
}

const PLACEMENT_ATTEMPTS: usize = 500;
const LAYOUT_ATTEMPTS: usize = 200;

/// Box areas as fractions of the image: up to two large boxes, the rest
/// small enough to pass the lowest sweep threshold.
fn box_fractions(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let large = rng.random_range(0..=2usize.min(n));
    let mut fr: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 && large > 0 {
                rng.random_range(0.1..0.45)
            } else if i < large {
                rng.random_range(0.1..0.25)
            } else {
                (rng.random_range(0.004f64.ln()..0.04f64.ln())).exp()
            }
        })
        .collect();
    fr.sort_by(|a, b| b.total_cmp(a));
    fr
}

/// Disjoint integer-pixel boxes, placed largest first by rejection.
fn layout_boxes(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Result<Vec<BoundingBox>> {
    'layout: for _ in 0..LAYOUT_ATTEMPTS {
        let mut placed: Vec<BoundingBox> = Vec::with_capacity(n);
        for f in box_fractions(rng, n) {
            let area = f * size * size;
            let aspect: f64 = rng.random_range(0.5..2.0);
            let w = (area * aspect).sqrt().round().clamp(1.0, size);
            let h = (area / w).round().clamp(1.0, size);
            let mut ok = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let x = rng.random_range(0..=(size - w) as u64) as f64;
                let y = rng.random_range(0..=(size - h) as u64) as f64;
                let b = BoundingBox { x, y, w, h };
                if placed.iter().all(|p| p.intersection_area(&b) == 0.0) {
                    ok = Some(b);
                    break;
                }
            }
            match ok {
                Some(b) => placed.push(b),
                None => continue 'layout,
            }
        }
        placed.shuffle(rng);
        return Ok(placed);
    }
    Err(Error::Config(format!("could not place {n} disjoint boxes")))
}

fn generate_regions(
    spec: &SyntheticSpec,
    composer: &CropComposer,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RegionAnnotatedImage>> {
    let mut images = Vec::with_capacity(spec.region_images);
    for id in 0..spec.region_images {
        let n = rng.random_range(spec.region_objects_min..=spec.region_objects_max);
        let objects = index::sample(rng, spec.vocab_size, n).into_vec();
        let boxes = layout_boxes(rng, n, spec.image_size)?;
        let regions = boxes
            .into_iter()
            .zip(objects)
            .map(|(bbox, o)| {
                Ok(Region {
                    bbox,
                    caption: format!("object {o}"),
                    objects: vec![o],
                    feature: composer.compose(Modality::Image, id, &[o])?,
                    caption_feature: composer.compose(Modality::Caption, id, &[o])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        images.push(RegionAnnotatedImage {
            id,
            width: spec.image_size,
            height: spec.image_size,
            regions,
        });
    }
    Ok(images)
}

/// Generates all splits, the region-annotated images and their composer.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| unit_vector(spec.feature_dim, &mut rng))
        .collect();
    let train = generate_split(spec, &prototypes, spec.train_images, Split::Train, &mut rng);
    let val = generate_split(spec, &prototypes, spec.val_images, Split::Val, &mut rng);
    let test = generate_split(spec, &prototypes, spec.test_images, Split::Test, &mut rng);
    let composer = CropComposer {
        noise_sigma: spec.noise_sigma,
        seed: rng.random(),
        prototypes,
    };
    let regions = generate_regions(spec, &composer, &mut rng)?;
    Ok(SyntheticData {
        train,
        val,
        test,
        regions,
        composer,
    })
}

/// Images whose object set contains every given object.
pub fn images_containing(image_objects: &[Vec<usize>], objects: &[usize]) -> usize {
    image_objects
        .iter()
        .filter(|objs| objects.iter().all(|o| objs.contains(o)))
        .count()
}
