//! Hinge triplet ranking loss with hardest in-batch negatives, its exact
//! gradient through the embedding heads, and an Adam training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, PrecisionOptions, Protocol};
use crate::gaussian::CovarianceShape;
use crate::metrics::{similarity_gradient, similarity_matrix, SimilarityMetric};
use crate::model::{Modality, ProbModel};

/// Optimisation hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// First (zero-based) epoch trained at the decayed rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            epochs: 30,
            batch_size: 128,
            learning_rate: 2e-4,
            decay_epoch: 15,
            decay_factor: 10.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so that NaN fields are rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail(format!("margin must be positive, got {}", self.margin));
        }
        if self.batch_size < 2 {
            return fail(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.decay_epoch > self.epochs {
            return fail(format!(
                "decay epoch {} exceeds epoch count {}",
                self.decay_epoch, self.epochs
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0) {
            return fail("learning rate and decay factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return fail("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect during a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.learning_rate / self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

/// Training configuration document: the optimiser fields plus the metric
/// and covariance shape. Unknown keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub metric: SimilarityMetric,
    pub shape: CovarianceShape,
}

impl TrainConfigFile {
    pub fn new(train: TrainConfig, metric: SimilarityMetric, shape: CovarianceShape) -> Self {
        Self {
            margin: train.margin,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            decay_epoch: train.decay_epoch,
            decay_factor: train.decay_factor,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            seed: train.seed,
            metric,
            shape,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.train_config().validate()?;
        Ok(file)
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean loss per training pair.
    pub epoch_loss: Vec<f64>,
    pub val_rsum: Vec<f64>,
    /// Zero-based epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// Loss value and the hardest negative of each active hinge.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    /// For each image anchor `j`, the caption negative if its hinge is active.
    pub row_negative: Vec<Option<usize>>,
    /// For each caption anchor `k`, the image negative if its hinge is active.
    pub column_negative: Vec<Option<usize>>,
}

/// Index of the largest value excluding `skip`; ties go to the lowest index.
fn hardest(values: impl Iterator<Item = f64>, skip: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i != skip && (best.0 == usize::MAX || v > best.1) {
            best = (i, v);
        }
    }
    best
}

/// Hinge triplet ranking loss over a `B x B` image-by-caption similarity
/// matrix whose diagonal holds the matching pairs.
pub fn triplet_loss(sims: &[Vec<f64>], margin: f64) -> Result<TripletLoss> {
    let b = sims.len();
    if b < 2 {
        return Err(Error::Config(format!(
            "triplet loss needs a batch of at least 2, got {b}"
        )));
    }
    if sims.iter().any(|r| r.len() != b) {
        return Err(Error::Shape("similarity matrix must be square".into()));
    }
    if sims.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "similarity matrix has non-finite entries".into(),
        ));
    }
    let mut loss = 0.0;
    let mut row_negative = vec![None; b];
    let mut column_negative = vec![None; b];
    for p in 0..b {
        let pos = sims[p][p];
        let (neg_c, s_c) = hardest(sims[p].iter().copied(), p);
        let (neg_i, s_i) = hardest(sims.iter().map(|r| r[p]), p);
        let row_hinge = (margin + s_c - pos).max(0.0);
        let col_hinge = (margin + s_i - pos).max(0.0);
        if row_hinge > 0.0 {
            row_negative[p] = Some(neg_c);
        }
        if col_hinge > 0.0 {
            column_negative[p] = Some(neg_i);
        }
        loss += row_hinge + col_hinge;
    }
    Ok(TripletLoss {
        loss,
        row_negative,
        column_negative,
    })
}

/// Batch loss and its gradient with respect to [`ProbModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Exact gradient of the batch triplet loss. Row `p` of the two feature
/// lists forms the `p`-th matching pair.
pub fn batch_gradient(
    model: &ProbModel,
    image_feats: &[Vec<f64>],
    caption_feats: &[Vec<f64>],
    margin: f64,
) -> Result<BatchGradient> {
    let b = image_feats.len();
    if caption_feats.len() != b {
        return Err(Error::Shape(format!(
            "{b} images but {} captions in batch",
            caption_feats.len()
        )));
    }
    let images = image_feats
        .par_iter()
        .map(|f| model.embed_traced(Modality::Image, f))
        .collect::<Result<Vec<_>>>()?;
    let captions = caption_feats
        .par_iter()
        .map(|f| model.embed_traced(Modality::Caption, f))
        .collect::<Result<Vec<_>>>()?;
    let image_emb: Vec<_> = images.iter().map(|(e, _)| e.clone()).collect();
    let caption_emb: Vec<_> = captions.iter().map(|(e, _)| e.clone()).collect();
    let sims = similarity_matrix(model.metric, &image_emb, &caption_emb)?;
    let tl = triplet_loss(&sims, margin)?;

    // dL/dS as sparse (image, caption, weight) entries in a fixed order.
    let mut d_sims: Vec<(usize, usize, f64)> = Vec::new();
    for p in 0..b {
        if let Some(k) = tl.row_negative[p] {
            d_sims.push((p, k, 1.0));
            d_sims.push((p, p, -1.0));
        }
        if let Some(j) = tl.column_negative[p] {
            d_sims.push((j, p, 1.0));
            d_sims.push((p, p, -1.0));
        }
    }

    let d = model.joint_dim;
    let mut d_image_mean = vec![vec![0.0; d]; b];
    let mut d_image_lv = vec![vec![0.0; d]; b];
    let mut d_caption_mean = vec![vec![0.0; d]; b];
    let mut d_caption_lv = vec![vec![0.0; d]; b];
    for &(j, k, w) in &d_sims {
        let g = similarity_gradient(model.metric, &image_emb[j], &caption_emb[k])?;
        for t in 0..d {
            d_image_mean[j][t] += w * g.d_mean_a[t];
            d_image_lv[j][t] += w * g.d_logvar_a[t];
            d_caption_mean[k][t] += w * g.d_mean_b[t];
            d_caption_lv[k][t] += w * g.d_logvar_b[t];
        }
    }

    let mut grad = vec![0.0; model.parameter_count()];
    if !d_sims.is_empty() {
        for p in 0..b {
            model.backward(
                Modality::Image,
                &image_feats[p],
                &images[p].1,
                &d_image_mean[p],
                &d_image_lv[p],
                &mut grad,
            );
        }
        for p in 0..b {
            model.backward(
                Modality::Caption,
                &caption_feats[p],
                &captions[p].1,
                &d_caption_mean[p],
                &d_caption_lv[p],
                &mut grad,
            );
        }
    }
    Ok(BatchGradient { loss: tl.loss, grad })
}

/// Batch loss only.
pub fn batch_loss(
    model: &ProbModel,
    image_feats: &[Vec<f64>],
    caption_feats: &[Vec<f64>],
    margin: f64,
) -> Result<f64> {
    let images = model.embed_all(Modality::Image, image_feats)?;
    let captions = model.embed_all(Modality::Caption, caption_feats)?;
    let sims = similarity_matrix(model.metric, &images, &captions)?;
    Ok(triplet_loss(&sims, margin)?.loss)
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adam step over {} parameters with {} gradients and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

fn gather(rows: &[Vec<f64>], idx: impl Iterator<Item = usize>) -> Vec<Vec<f64>> {
    idx.map(|i| rows[i].clone()).collect()
}

/// Validation rsum under the full-set protocol.
pub fn validation_rsum(model: &ProbModel, val_set: &FeatureDataset) -> Result<f64> {
    Ok(evaluate_model(model, val_set, Protocol::Full, 0, PrecisionOptions::default())?.rsum)
}

/// Trains `model`, returning the parameters from the epoch with the highest
/// validation rsum (earlier epoch on ties) and the run history.
pub fn train(
    model: &ProbModel,
    train_set: &FeatureDataset,
    val_set: &FeatureDataset,
    config: &TrainConfig,
) -> Result<(ProbModel, TrainHistory)> {
    config.validate()?;
    let pairs = train_set.pairs();
    if pairs.is_empty() || val_set.num_captions() == 0 || val_set.num_images() == 0 {
        return Err(Error::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    for (ds, name) in [(train_set, "training"), (val_set, "validation")] {
        if ds.image_dim() != model.input_dim(Modality::Image)
            || ds.caption_dim() != model.input_dim(Modality::Caption)
        {
            return Err(Error::Shape(format!(
                "{name} features ({}, {}) do not match the model ({}, {})",
                ds.image_dim(),
                ds.caption_dim(),
                model.input_dim(Modality::Image),
                model.input_dim(Modality::Caption)
            )));
        }
    }

    let mut current = model.clone();
    let mut params = current.params();
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = (model.clone(), f64::NEG_INFINITY);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let mut total = 0.0;
        let mut used = 0usize;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let imgs = gather(&train_set.image_features, batch.iter().map(|&i| pairs[i].1));
            let caps = gather(&train_set.caption_features, batch.iter().map(|&i| pairs[i].0));
            let bg = batch_gradient(&current, &imgs, &caps, config.margin)?;
            adam_step(
                &mut params,
                &bg.grad,
                &mut state,
                lr,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            )?;
            current.set_params(&params)?;
            total += bg.loss;
            used += batch.len();
        }
        let rsum = validation_rsum(&current, val_set)?;
        history
            .epoch_loss
            .push(if used > 0 { total / used as f64 } else { 0.0 });
        history.val_rsum.push(rsum);
        if rsum > best.1 {
            best = (current.clone(), rsum);
            history.best_epoch = Some(epoch);
        }
    }
    Ok((best.0, history))
}
