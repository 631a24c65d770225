//! Feature datasets and their on-disk layout.
//!
//! A dataset directory holds `images.pemb`, `captions.pemb` and
//! `annotations.jsonl`. Annotation lines take one of three shapes:
//!
//! ```text
//! {"caption": 3, "image": 0}            base match
//! {"ext_image": 1, "ext_caption": 3}    extended positive
//! {"image": 0, "labels": [0, 1, 1]}     object-label vector
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evaluation::MatchAnnotations;
use crate::io::{load_features, save_features, write_atomic, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Precomputed features of both modalities plus their annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub image_features: Vec<Vec<f64>>,
    pub caption_features: Vec<Vec<f64>>,
    pub annotations: MatchAnnotations,
    pub split: Split,
}

fn row_dim(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Shape(format!(
                "{what} row {i} has length {}, expected {d}",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{what} row {i} has non-finite values"
            )));
        }
    }
    Ok(d)
}

impl FeatureDataset {
    pub fn image_dim(&self) -> usize {
        self.image_features.first().map_or(0, Vec::len)
    }

    pub fn caption_dim(&self) -> usize {
        self.caption_features.first().map_or(0, Vec::len)
    }

    pub fn num_images(&self) -> usize {
        self.image_features.len()
    }

    pub fn num_captions(&self) -> usize {
        self.caption_features.len()
    }

    pub fn validate(&self) -> Result<()> {
        row_dim(&self.image_features, "image")?;
        row_dim(&self.caption_features, "caption")?;
        self.annotations.validate()?;
        let n_img = self.num_images();
        let n_cap = self.num_captions();
        if self.annotations.base_matches.len() != n_cap
            || self
                .annotations
                .base_matches
                .keys()
                .enumerate()
                .any(|(i, &k)| i != k)
        {
            return Err(Error::Annotation(format!(
                "every one of the {n_cap} captions needs exactly one base match"
            )));
        }
        if let Some((k, j)) = self.annotations.base_matches.iter().find(|(_, &j)| j >= n_img) {
            return Err(Error::Annotation(format!(
                "caption {k} matches image {j} of {n_img}"
            )));
        }
        if let Some((j, k)) = self
            .annotations
            .extended_positives
            .iter()
            .find(|(j, k)| *j >= n_img || *k >= n_cap)
        {
            return Err(Error::Annotation(format!(
                "extended positive ({j}, {k}) out of range"
            )));
        }
        if let Some(j) = self.annotations.label_vectors.keys().find(|&&j| j >= n_img) {
            return Err(Error::Annotation(format!("label vector for unknown image {j}")));
        }
        Ok(())
    }

    /// `(caption, image)` training pairs in caption order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.annotations
            .base_matches
            .iter()
            .map(|(&k, &j)| (k, j))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_features(
            &dir.join("images.pemb"),
            &Matrix::from_rows(&self.image_features)?,
        )?;
        save_features(
            &dir.join("captions.pemb"),
            &Matrix::from_rows(&self.caption_features)?,
        )?;
        save_annotations(&dir.join("annotations.jsonl"), &self.annotations)
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let ds = Self {
            image_features: load_features(&dir.join("images.pemb"))?.to_rows(),
            caption_features: load_features(&dir.join("captions.pemb"))?.to_rows(),
            annotations: load_annotations(&dir.join("annotations.jsonl"))?,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn index_field(obj: &Map<String, Value>, key: &str) -> std::result::Result<usize, String> {
    obj[key]
        .as_u64()
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| format!("`{key}` must be a non-negative integer"))
}

fn parse_annotation_line(line: &str, ann: &mut MatchAnnotations) -> std::result::Result<(), String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record must be a JSON object")?;
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    match keys.as_slice() {
        ["caption", "image"] => {
            let caption = index_field(obj, "caption")?;
            let image = index_field(obj, "image")?;
            if ann.base_matches.insert(caption, image).is_some() {
                return Err(format!("duplicate base match for caption {caption}"));
            }
        }
        ["ext_caption", "ext_image"] => {
            let caption = index_field(obj, "ext_caption")?;
            let image = index_field(obj, "ext_image")?;
            ann.extended_positives.insert((image, caption));
        }
        ["image", "labels"] => {
            let image = index_field(obj, "image")?;
            let labels = obj["labels"]
                .as_array()
                .ok_or("`labels` must be an array")?
                .iter()
                .map(|v| match v.as_u64() {
                    Some(b @ (0 | 1)) => Ok(b as u8),
                    _ => Err("labels must be 0 or 1".to_string()),
                })
                .collect::<std::result::Result<Vec<u8>, String>>()?;
            if ann.label_vectors.insert(image, labels).is_some() {
                return Err(format!("duplicate label vector for image {image}"));
            }
        }
        other => return Err(format!("unrecognized record with keys {other:?}")),
    }
    Ok(())
}

/// Parses a JSON-lines annotation document. Blank lines are skipped;
/// errors carry the 1-based line number.
pub fn parse_annotations(text: &str, path: &Path) -> Result<MatchAnnotations> {
    let mut ann = MatchAnnotations::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        parse_annotation_line(line, &mut ann).map_err(|message| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
    }
    ann.validate().map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    Ok(ann)
}

pub fn load_annotations(path: &Path) -> Result<MatchAnnotations> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// Serializes annotations: base matches by caption, extended positives,
/// then label vectors by image.
pub fn annotations_to_jsonl(ann: &MatchAnnotations) -> String {
    let mut out = String::new();
    for (k, j) in &ann.base_matches {
        out.push_str(&format!("{{\"caption\":{k},\"image\":{j}}}\n"));
    }
    for (j, k) in &ann.extended_positives {
        out.push_str(&format!("{{\"ext_image\":{j},\"ext_caption\":{k}}}\n"));
    }
    for (j, labels) in &ann.label_vectors {
        let labels: Vec<String> = labels.iter().map(u8::to_string).collect();
        out.push_str(&format!("{{\"image\":{j},\"labels\":[{}]}}\n", labels.join(",")));
    }
    out
}

pub fn save_annotations(path: &Path, ann: &MatchAnnotations) -> Result<()> {
    write_atomic(path, annotations_to_jsonl(ann).as_bytes())
}
