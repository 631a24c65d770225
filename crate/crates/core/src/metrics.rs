//! Closed-form similarities between diagonal Gaussian embeddings.
//!
//! Every similarity is non-positive and reaches 0 only for identical
//! distributions. Gradients are taken with respect to the means and the
//! log-variances of both arguments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianEmbedding;

/// Similarity measure used for training and retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// `-KL(image || caption)`.
    NegKlImageToCaption,
    /// `-KL(caption || image)`.
    NegKlCaptionToImage,
    /// `-min(KL(image || caption), KL(caption || image))`.
    NegMinKl,
    /// Negative 2-Wasserstein distance.
    NegWasserstein2,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 4] = [
        SimilarityMetric::NegKlImageToCaption,
        SimilarityMetric::NegKlCaptionToImage,
        SimilarityMetric::NegMinKl,
        SimilarityMetric::NegWasserstein2,
    ];

    pub fn tag(self) -> u32 {
        match self {
            SimilarityMetric::NegKlImageToCaption => 0,
            SimilarityMetric::NegKlCaptionToImage => 1,
            SimilarityMetric::NegMinKl => 2,
            SimilarityMetric::NegWasserstein2 => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityMetric::NegKlImageToCaption => "neg_kl_image_to_caption",
            SimilarityMetric::NegKlCaptionToImage => "neg_kl_caption_to_image",
            SimilarityMetric::NegMinKl => "neg_min_kl",
            SimilarityMetric::NegWasserstein2 => "neg_wasserstein2",
        }
    }
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown similarity metric `{s}`")))
    }
}

/// Partial derivatives of a similarity with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGradient {
    pub d_mean_a: Vec<f64>,
    pub d_logvar_a: Vec<f64>,
    pub d_mean_b: Vec<f64>,
    pub d_logvar_b: Vec<f64>,
}

impl SimilarityGradient {
    fn zeros(d: usize) -> Self {
        Self {
            d_mean_a: vec![0.0; d],
            d_logvar_a: vec![0.0; d],
            d_mean_b: vec![0.0; d],
            d_logvar_b: vec![0.0; d],
        }
    }

    fn negate(mut self) -> Self {
        for v in self
            .d_mean_a
            .iter_mut()
            .chain(self.d_logvar_a.iter_mut())
            .chain(self.d_mean_b.iter_mut())
            .chain(self.d_logvar_b.iter_mut())
        {
            *v = -*v;
        }
        self
    }

    fn swap(self) -> Self {
        Self {
            d_mean_a: self.d_mean_b,
            d_logvar_a: self.d_logvar_b,
            d_mean_b: self.d_mean_a,
            d_logvar_b: self.d_logvar_a,
        }
    }
}

fn check_dims(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<()> {
    if a.dim() != b.dim() || a.log_var.len() != a.dim() || b.log_var.len() != b.dim() {
        return Err(Error::Shape(format!(
            "embeddings of dimension {} and {} cannot be compared",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn kl_unchecked(p: &GaussianEmbedding, q: &GaussianEmbedding) -> f64 {
    let mut acc = 0.0;
    for d in 0..p.dim() {
        let ratio = (p.log_var[d] - q.log_var[d]).exp();
        let diff = p.mean[d] - q.mean[d];
        let inv_q = (-q.log_var[d]).exp();
        acc += ratio - (p.log_var[d] - q.log_var[d]) + diff * diff * inv_q - 1.0;
    }
    0.5 * acc
}

/// `KL(p || q)` for diagonal Gaussians.
pub fn kl_diag(p: &GaussianEmbedding, q: &GaussianEmbedding) -> Result<f64> {
    check_dims(p, q)?;
    Ok(kl_unchecked(p, q))
}

/// Gradient of `KL(p || q)` with `p` as argument `a`.
fn kl_gradient(p: &GaussianEmbedding, q: &GaussianEmbedding) -> SimilarityGradient {
    let dim = p.dim();
    let mut g = SimilarityGradient::zeros(dim);
    for d in 0..dim {
        let ratio = (p.log_var[d] - q.log_var[d]).exp();
        let inv_q = (-q.log_var[d]).exp();
        let diff = p.mean[d] - q.mean[d];
        g.d_mean_a[d] = diff * inv_q;
        g.d_mean_b[d] = -diff * inv_q;
        g.d_logvar_a[d] = 0.5 * (ratio - 1.0);
        g.d_logvar_b[d] = 0.5 * (1.0 - ratio - diff * diff * inv_q);
    }
    g
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
///
/// Written so that swapping the arguments yields bit-identical results.
fn wasserstein_sq(a: &GaussianEmbedding, b: &GaussianEmbedding) -> f64 {
    let mut mean_term = 0.0;
    let mut cov_term = 0.0;
    for d in 0..a.dim() {
        let dm = a.mean[d] - b.mean[d];
        let ds = (0.5 * a.log_var[d]).exp() - (0.5 * b.log_var[d]).exp();
        mean_term += dm * dm;
        cov_term += ds * ds;
    }
    mean_term + cov_term
}

/// 2-Wasserstein distance between diagonal Gaussians.
pub fn wasserstein2(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(wasserstein_sq(a, b).sqrt())
}

fn wasserstein_gradient(a: &GaussianEmbedding, b: &GaussianEmbedding) -> SimilarityGradient {
    let dim = a.dim();
    let mut g = SimilarityGradient::zeros(dim);
    let dist = wasserstein_sq(a, b).sqrt();
    // Coincident distributions: zero subgradient.
    if dist == 0.0 {
        return g;
    }
    for d in 0..dim {
        let sa = (0.5 * a.log_var[d]).exp();
        let sb = (0.5 * b.log_var[d]).exp();
        let dm = a.mean[d] - b.mean[d];
        let ds = sa - sb;
        g.d_mean_a[d] = dm / dist;
        g.d_mean_b[d] = -dm / dist;
        g.d_logvar_a[d] = 0.5 * ds * sa / dist;
        g.d_logvar_b[d] = -0.5 * ds * sb / dist;
    }
    g
}

fn similarity_unchecked(m: SimilarityMetric, i: &GaussianEmbedding, c: &GaussianEmbedding) -> f64 {
    match m {
        SimilarityMetric::NegKlImageToCaption => -kl_unchecked(i, c),
        SimilarityMetric::NegKlCaptionToImage => -kl_unchecked(c, i),
        SimilarityMetric::NegMinKl => -kl_unchecked(i, c).min(kl_unchecked(c, i)),
        SimilarityMetric::NegWasserstein2 => -wasserstein_sq(i, c).sqrt(),
    }
}

/// Similarity of image embedding `i` and caption embedding `c`.
pub fn similarity(m: SimilarityMetric, i: &GaussianEmbedding, c: &GaussianEmbedding) -> Result<f64> {
    check_dims(i, c)?;
    Ok(similarity_unchecked(m, i, c))
}

/// Analytic gradient of [`similarity`]; argument `a` is the image, `b` the caption.
pub fn similarity_gradient(
    m: SimilarityMetric,
    i: &GaussianEmbedding,
    c: &GaussianEmbedding,
) -> Result<SimilarityGradient> {
    check_dims(i, c)?;
    let g = match m {
        SimilarityMetric::NegKlImageToCaption => kl_gradient(i, c).negate(),
        SimilarityMetric::NegKlCaptionToImage => kl_gradient(c, i).swap().negate(),
        SimilarityMetric::NegMinKl => {
            // Ties take the image -> caption branch.
            if kl_unchecked(i, c) <= kl_unchecked(c, i) {
                kl_gradient(i, c).negate()
            } else {
                kl_gradient(c, i).swap().negate()
            }
        }
        SimilarityMetric::NegWasserstein2 => wasserstein_gradient(i, c).negate(),
    };
    Ok(g)
}

/// Row-major `images.len() x captions.len()` similarity matrix.
///
/// Rows are scored in parallel; each entry is computed independently so the
/// result does not depend on the worker count.
pub fn similarity_matrix(
    m: SimilarityMetric,
    images: &[GaussianEmbedding],
    captions: &[GaussianEmbedding],
) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = images.first().or(captions.first()) {
        let d = first.dim();
        if let Some(bad) = images.iter().chain(captions).find(|e| e.dim() != d) {
            return Err(Error::Shape(format!(
                "mixed embedding dimensions {d} and {}",
                bad.dim()
            )));
        }
    }
    Ok(images
        .par_iter()
        .map(|i| captions.iter().map(|c| similarity_unchecked(m, i, c)).collect())
        .collect())
}
