//! Affine embedding heads that map precomputed features to Gaussians.
//!
//! Each modality owns a mean head and a log-variance head with identical
//! shapes and independent parameters.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    clamp_log_var, log_mean_exp, log_var_max, log_var_min, CovarianceShape, GaussianEmbedding,
};
use crate::io::{write_atomic, ByteReader};
use crate::metrics::SimilarityMetric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Caption,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Caption => "caption",
        }
    }
}

/// `y = W x + b` with a row-major `outputs x inputs` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineHead {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineHead {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Dimensions and configuration tags of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_dim: usize,
    pub caption_dim: usize,
    pub joint_dim: usize,
    pub shape: CovarianceShape,
    pub metric: SimilarityMetric,
    /// Point-embedding ablation: every variance is fixed to 1.
    #[serde(default)]
    pub frozen_unit_variance: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_dim == 0 || self.caption_dim == 0 || self.joint_dim == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (image {}, caption {}, joint {})",
                self.image_dim, self.caption_dim, self.joint_dim
            )));
        }
        Ok(())
    }
}

/// Two modality heads producing Gaussian embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbModel {
    pub image_mean_head: AffineHead,
    pub image_logvar_head: AffineHead,
    pub caption_mean_head: AffineHead,
    pub caption_logvar_head: AffineHead,
    pub shape: CovarianceShape,
    /// Shared log-variance, read only by [`CovarianceShape::SphericalOneValue`].
    pub shared_logvar: f64,
    pub metric: SimilarityMetric,
    pub joint_dim: usize,
    pub frozen_unit_variance: bool,
}

/// Intermediate values of one forward pass, kept for back-propagation.
#[derive(Debug, Clone)]
pub(crate) struct EmbedTrace {
    pub raw_log_var: Vec<f64>,
    pub clamped_log_var: Vec<f64>,
}

impl ProbModel {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.joint_dim;
        Ok(Self {
            image_mean_head: AffineHead::zeros(config.image_dim, d),
            image_logvar_head: AffineHead::zeros(config.image_dim, d),
            caption_mean_head: AffineHead::zeros(config.caption_dim, d),
            caption_logvar_head: AffineHead::zeros(config.caption_dim, d),
            shape: config.shape,
            shared_logvar: 0.0,
            metric: config.metric,
            joint_dim: d,
            frozen_unit_variance: config.frozen_unit_variance,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            image_dim: self.image_mean_head.inputs,
            caption_dim: self.caption_mean_head.inputs,
            joint_dim: self.joint_dim,
            shape: self.shape,
            metric: self.metric,
            frozen_unit_variance: self.frozen_unit_variance,
        }
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        self.heads(modality).0.inputs
    }

    pub(crate) fn heads(&self, modality: Modality) -> (&AffineHead, &AffineHead) {
        match modality {
            Modality::Image => (&self.image_mean_head, &self.image_logvar_head),
            Modality::Caption => (&self.caption_mean_head, &self.caption_logvar_head),
        }
    }

    fn heads_in_order(&self) -> [&AffineHead; 4] {
        [
            &self.image_mean_head,
            &self.image_logvar_head,
            &self.caption_mean_head,
            &self.caption_logvar_head,
        ]
    }

    fn heads_in_order_mut(&mut self) -> [&mut AffineHead; 4] {
        [
            &mut self.image_mean_head,
            &mut self.image_logvar_head,
            &mut self.caption_mean_head,
            &mut self.caption_logvar_head,
        ]
    }

    fn has_shared_scalar(&self) -> bool {
        self.shape == CovarianceShape::SphericalOneValue
    }

    /// Offset of each head inside the flat parameter vector, in the order
    /// image mean, image log-variance, caption mean, caption log-variance.
    pub(crate) fn head_offsets(&self) -> [usize; 4] {
        let mut offsets = [0; 4];
        let mut at = 0;
        for (slot, head) in offsets.iter_mut().zip(self.heads_in_order()) {
            *slot = at;
            at += head.param_count();
        }
        offsets
    }

    /// Flat index of the shared log-variance, when the shape uses one.
    pub(crate) fn shared_offset(&self) -> Option<usize> {
        self.has_shared_scalar()
            .then(|| self.heads_in_order().iter().map(|h| h.param_count()).sum())
    }

    /// Flattens every trainable scalar: each head's weight then bias in head
    /// order, followed by the shared log-variance for the one-value shape.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for head in self.heads_in_order() {
            out.extend_from_slice(&head.weight);
            out.extend_from_slice(&head.bias);
        }
        if self.has_shared_scalar() {
            out.push(self.shared_logvar);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let shared = self.has_shared_scalar();
        let mut rest = flat;
        for head in self.heads_in_order_mut() {
            let (w, tail) = rest.split_at(head.weight.len());
            let (b, tail) = tail.split_at(head.bias.len());
            head.weight.copy_from_slice(w);
            head.bias.copy_from_slice(b);
            rest = tail;
        }
        if shared {
            self.shared_logvar = rest[0];
        }
        Ok(())
    }

    /// Exact number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.heads_in_order()
            .iter()
            .map(|h| h.param_count())
            .sum::<usize>()
            + usize::from(self.has_shared_scalar())
    }

    pub(crate) fn embed_traced(
        &self,
        modality: Modality,
        feature: &[f64],
    ) -> Result<(GaussianEmbedding, EmbedTrace)> {
        let (mean_head, logvar_head) = self.heads(modality);
        if feature.len() != mean_head.inputs {
            return Err(Error::Shape(format!(
                "{} feature has length {}, model expects {}",
                modality.name(),
                feature.len(),
                mean_head.inputs
            )));
        }
        if let Some(i) = feature.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{} feature component {i} is not finite",
                modality.name()
            )));
        }
        let mean = mean_head.apply(feature);
        let raw_log_var = if self.frozen_unit_variance {
            vec![0.0; self.joint_dim]
        } else {
            logvar_head.apply(feature)
        };
        let clamped_log_var: Vec<f64> = raw_log_var.iter().map(|&v| clamp_log_var(v)).collect();
        let log_var = if self.frozen_unit_variance {
            clamped_log_var.clone()
        } else {
            match self.shape {
                CovarianceShape::Ellipsoidal => clamped_log_var.clone(),
                CovarianceShape::SphericalAvgPool => {
                    vec![clamp_log_var(log_mean_exp(&clamped_log_var)); self.joint_dim]
                }
                CovarianceShape::SphericalOneValue => {
                    vec![clamp_log_var(self.shared_logvar); self.joint_dim]
                }
            }
        };
        let e = GaussianEmbedding { mean, log_var };
        if e.mean.iter().chain(&e.log_var).any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!(
                "{} head produced a non-finite output",
                modality.name()
            )));
        }
        Ok((
            e,
            EmbedTrace {
                raw_log_var,
                clamped_log_var,
            },
        ))
    }

    /// Maps one feature vector of the given modality to its Gaussian.
    pub fn embed(&self, modality: Modality, feature: &[f64]) -> Result<GaussianEmbedding> {
        self.embed_traced(modality, feature).map(|(e, _)| e)
    }

    /// Embeds every row of a feature matrix.
    pub fn embed_all(&self, modality: Modality, features: &[Vec<f64>]) -> Result<Vec<GaussianEmbedding>> {
        features.iter().map(|f| self.embed(modality, f)).collect()
    }

    /// Adds the gradient of the loss with respect to this modality's head
    /// parameters, given upstream gradients on the embedding's mean and
    /// log-variance, into `grad` (laid out like [`ProbModel::params`]).
    pub(crate) fn backward(
        &self,
        modality: Modality,
        feature: &[f64],
        trace: &EmbedTrace,
        d_mean: &[f64],
        d_log_var: &[f64],
        grad: &mut [f64],
    ) {
        let offsets = self.head_offsets();
        let (mean_at, logvar_at) = match modality {
            Modality::Image => (offsets[0], offsets[1]),
            Modality::Caption => (offsets[2], offsets[3]),
        };
        let inputs = feature.len();
        let d = self.joint_dim;
        accumulate_affine(&mut grad[mean_at..], inputs, d, feature, d_mean);

        if self.frozen_unit_variance {
            return;
        }
        let inside = |v: f64| v > log_var_min() && v < log_var_max();
        let d_clamped: Vec<f64> = match self.shape {
            CovarianceShape::Ellipsoidal => d_log_var.to_vec(),
            CovarianceShape::SphericalAvgPool => {
                let pooled = log_mean_exp(&trace.clamped_log_var);
                let total: f64 = d_log_var.iter().sum();
                let weights: Vec<f64> = trace.clamped_log_var.iter().map(|v| (v - pooled).exp()).collect();
                let weights_sum: f64 = weights.iter().sum();
                weights.iter().map(|w| total * w / weights_sum).collect()
            }
            CovarianceShape::SphericalOneValue => {
                if let Some(at) = self.shared_offset() {
                    if inside(self.shared_logvar) {
                        grad[at] += d_log_var.iter().sum::<f64>();
                    }
                }
                return;
            }
        };
        let d_raw: Vec<f64> = d_clamped
            .iter()
            .zip(&trace.raw_log_var)
            .map(|(&g, &raw)| if inside(raw) { g } else { 0.0 })
            .collect();
        accumulate_affine(&mut grad[logvar_at..], inputs, d, feature, &d_raw);
    }
}

fn accumulate_affine(grad: &mut [f64], inputs: usize, outputs: usize, x: &[f64], d_out: &[f64]) {
    let (w, rest) = grad.split_at_mut(inputs * outputs);
    for (row, &g) in w.chunks_exact_mut(inputs).zip(d_out) {
        if g != 0.0 {
            for (slot, &xv) in row.iter_mut().zip(x) {
                *slot += g * xv;
            }
        }
    }
    for (slot, &g) in rest[..outputs].iter_mut().zip(d_out) {
        *slot += g;
    }
}

/// Fresh model with fan-in uniform weights and zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ProbModel> {
    let mut model = ProbModel::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for head in model.heads_in_order_mut() {
        let bound = 1.0 / (head.inputs as f64).sqrt();
        for w in head.weight.iter_mut() {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(model)
}

/// Number of scalar parameters in `model`.
pub fn parameter_count(model: &ProbModel) -> usize {
    model.parameter_count()
}

const MAGIC: &[u8; 4] = b"PEMB";
const CHECKPOINT_VERSION: u32 = 1;
const FLAG_FROZEN_UNIT_VARIANCE: u32 = 1;
/// Magic, version, three u64 dimensions, shape, metric and flags.
pub const CHECKPOINT_HEADER_LEN: usize = 4 + 4 + 8 * 3 + 4 * 3;

/// Serializes a model checkpoint.
///
/// Layout (little-endian): `"PEMB"`, u32 version, u64 image feature
/// dimension, u64 caption feature dimension, u64 joint dimension, u32 shape
/// tag, u32 metric tag, u32 flags (bit 0: frozen unit variance), then every
/// parameter as f64 in [`ProbModel::params`] order.
pub fn checkpoint_to_bytes(model: &ProbModel) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.image_mean_head.inputs as u64).to_le_bytes());
    out.extend_from_slice(&(model.caption_mean_head.inputs as u64).to_le_bytes());
    out.extend_from_slice(&(model.joint_dim as u64).to_le_bytes());
    out.extend_from_slice(&model.shape.tag().to_le_bytes());
    out.extend_from_slice(&model.metric.tag().to_le_bytes());
    let flags = if model.frozen_unit_variance {
        FLAG_FROZEN_UNIT_VARIANCE
    } else {
        0
    };
    out.extend_from_slice(&flags.to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ProbModel> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let image_dim = r.dim()?;
    let caption_dim = r.dim()?;
    let joint_dim = r.dim()?;
    let shape_tag = r.u32()?;
    let shape = CovarianceShape::from_tag(shape_tag)
        .ok_or_else(|| Error::format(32, format!("unknown shape tag {shape_tag}")))?;
    let metric_tag = r.u32()?;
    let metric = SimilarityMetric::from_tag(metric_tag)
        .ok_or_else(|| Error::format(36, format!("unknown metric tag {metric_tag}")))?;
    let flags = r.u32()?;
    if flags & !FLAG_FROZEN_UNIT_VARIANCE != 0 {
        return Err(Error::format(40, format!("unknown flags {flags:#x}")));
    }
    let config = ModelConfig {
        image_dim,
        caption_dim,
        joint_dim,
        shape,
        metric,
        frozen_unit_variance: flags & FLAG_FROZEN_UNIT_VARIANCE != 0,
    };
    config.validate().map_err(|e| Error::format(8, e.to_string()))?;
    let mut model = ProbModel::zeros(&config)?;
    let count = model.parameter_count();
    let expected = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(CHECKPOINT_HEADER_LEN))
        .ok_or_else(|| Error::format(8, "parameter count overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("checkpoint is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let params: Vec<f64> = (0..count).map(|_| r.f64()).collect::<Result<_>>()?;
    if let Some(i) = params.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            (CHECKPOINT_HEADER_LEN + 8 * i) as u64,
            "non-finite parameter",
        ));
    }
    model.set_params(&params)?;
    debug_assert!(model.heads_in_order().iter().all(|h| h.is_finite()));
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &ProbModel) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ProbModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{uncertainty, VARIANCE_MAX, VARIANCE_MIN};
    use crate::oracles;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn config(image_dim: usize, caption_dim: usize, joint_dim: usize, shape: CovarianceShape) -> ModelConfig {
        ModelConfig {
            image_dim,
            caption_dim,
            joint_dim,
            shape,
            metric: SimilarityMetric::NegWasserstein2,
            frozen_unit_variance: false,
        }
    }

    fn random_feature(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_model_gives_unit_gaussians() {
        let m = ProbModel::zeros(&config(3, 3, 4, CovarianceShape::Ellipsoidal)).unwrap();
        let e = m.embed(Modality::Image, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.mean, vec![0.0; 4]);
        assert_eq!(e.variances(), vec![1.0; 4]);
    }

    #[test]
    fn identity_mean_head() {
        let mut m = ProbModel::zeros(&config(3, 3, 3, CovarianceShape::Ellipsoidal)).unwrap();
        for i in 0..3 {
            m.caption_mean_head.weight[i * 3 + i] = 1.0;
        }
        let f = [0.25, -1.5, 3.0];
        assert_eq!(m.embed(Modality::Caption, &f).unwrap().mean, f.to_vec());
    }

    #[test]
    fn embed_matches_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = init_model(&config(5, 7, 4, CovarianceShape::Ellipsoidal), 3).unwrap();
        for head in m.heads_in_order_mut() {
            for b in head.bias.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        for (modality, head, n) in [
            (Modality::Image, m.image_mean_head.clone(), 5),
            (Modality::Caption, m.caption_mean_head.clone(), 7),
        ] {
            let f = random_feature(&mut rng, n);
            let dense: Vec<Vec<f64>> = head.weight.chunks(n).map(|r| r.to_vec()).collect();
            let want = oracles::naive_affine(&dense, &head.bias, &f);
            let got = m.embed(modality, &f).unwrap().mean;
            for (a, b) in got.iter().zip(&want) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn embed_errors() {
        let m = ProbModel::zeros(&config(3, 2, 4, CovarianceShape::Ellipsoidal)).unwrap();
        assert!(matches!(
            m.embed(Modality::Image, &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.embed(Modality::Caption, &[1.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = config(4, 4, 6, CovarianceShape::Ellipsoidal);
        let a = init_model(&c, 7).unwrap();
        let b = init_model(&c, 7).unwrap();
        let other = init_model(&c, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), other.params());
        assert!(a.params().iter().all(|w| (-0.5..=0.5).contains(w)));
        assert!(a.image_mean_head.bias.iter().all(|&b| b == 0.0));
        assert!(init_model(&config(0, 4, 6, CovarianceShape::Ellipsoidal), 1).is_err());
    }

    #[test]
    fn parameter_counts() {
        let m = ProbModel::zeros(&config(2, 2, 3, CovarianceShape::Ellipsoidal)).unwrap();
        assert_eq!(parameter_count(&m), 36);
        let m = ProbModel::zeros(&config(2, 2, 3, CovarianceShape::SphericalOneValue)).unwrap();
        assert_eq!(parameter_count(&m), 37);
        let m = ProbModel::zeros(&config(2, 2, 6, CovarianceShape::Ellipsoidal)).unwrap();
        assert_eq!(parameter_count(&m), 4 * (2 * 6 + 6));
        assert_eq!(m.params().len(), parameter_count(&m));
    }

    #[test]
    fn mean_and_logvar_heads_do_not_alias() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = init_model(&config(4, 4, 5, CovarianceShape::Ellipsoidal), 1).unwrap();
        let f = random_feature(&mut rng, 4);
        let before = m.embed(Modality::Image, &f).unwrap();
        for i in 0..m.image_mean_head.weight.len() {
            let mut p = m.clone();
            p.image_mean_head.weight[i] += 0.37;
            let after = p.embed(Modality::Image, &f).unwrap();
            assert_eq!(after.log_var, before.log_var);
        }
    }

    #[test]
    fn spherical_shapes_in_embed() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_feature(&mut rng, 4);
        let avg = init_model(&config(4, 4, 5, CovarianceShape::SphericalAvgPool), 2).unwrap();
        let e = avg.embed(Modality::Image, &f).unwrap();
        assert!(e.log_var.windows(2).all(|w| w[0] == w[1]));

        let mut one = init_model(&config(4, 4, 5, CovarianceShape::SphericalOneValue), 2).unwrap();
        one.shared_logvar = 0.3;
        let e = one.embed(Modality::Caption, &f).unwrap();
        assert_eq!(e.log_var, vec![0.3; 5]);
    }

    #[test]
    fn frozen_unit_variance_ignores_logvar_head() {
        let mut c = config(4, 4, 5, CovarianceShape::Ellipsoidal);
        c.frozen_unit_variance = true;
        let m = init_model(&c, 2).unwrap();
        let e = m.embed(Modality::Image, &[1.0, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(uncertainty(&e), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for shape in CovarianceShape::ALL {
            let mut m = init_model(&config(3, 5, 4, shape), 9).unwrap();
            m.shared_logvar = -0.123456789;
            let bytes = checkpoint_to_bytes(&m);
            assert_eq!(&bytes[..4], b"PEMB");
            assert_eq!(bytes.len(), CHECKPOINT_HEADER_LEN + 8 * m.parameter_count());
            let back = checkpoint_from_bytes(&bytes).unwrap();
            assert_eq!(checkpoint_to_bytes(&back), bytes);
            assert_eq!(back.params(), m.params());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = init_model(&config(3, 5, 4, CovarianceShape::Ellipsoidal), 9).unwrap();
        let bytes = checkpoint_to_bytes(&m);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(checkpoint_from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[32] = 7;
        assert!(checkpoint_from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(checkpoint_from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn mean_is_linear_without_bias(alpha in -3.0f64..3.0, f in prop::collection::vec(-1.0f64..1.0, 6), seed in 0u64..1000) {
            let m = init_model(&config(6, 6, 4, CovarianceShape::Ellipsoidal), seed).unwrap();
            let scaled: Vec<f64> = f.iter().map(|v| alpha * v).collect();
            let a = m.embed(Modality::Image, &scaled).unwrap().mean;
            let b = m.embed(Modality::Image, &f).unwrap().mean;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - alpha * y).abs() <= 1e-12);
            }
        }

        #[test]
        fn embeddings_respect_variance_bounds(f in prop::collection::vec(-50.0f64..50.0, 6), seed in 0u64..1000, shape_idx in 0usize..3) {
            let m = init_model(&config(6, 6, 4, CovarianceShape::ALL[shape_idx]), seed).unwrap();
            for modality in [Modality::Image, Modality::Caption] {
                let e = m.embed(modality, &f).unwrap();
                prop_assert!(e.validate().is_ok());
                for v in e.variances() {
                    prop_assert!((VARIANCE_MIN * (1.0 - 1e-12)..=VARIANCE_MAX * (1.0 + 1e-12)).contains(&v));
                }
            }
        }
    }
}
