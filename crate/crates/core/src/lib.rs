//! Probabilistic cross-modal embeddings.
//!
//! Images and captions are mapped from precomputed features to diagonal
//! Gaussians in a joint space, scored against each other with
//! distribution-level similarities, trained with a hinge triplet loss and
//! evaluated with recall and R-Precision metrics. The sum of an
//! embedding's log-variances serves as its uncertainty.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod io;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod training;
pub mod triplet_lab;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;

pub use data::{FeatureDataset, Split};
pub use error::{Error, Result};
pub use evaluation::{MatchAnnotations, PrecisionOptions, Protocol, RetrievalReport};
pub use gaussian::{uncertainty, CovarianceShape, GaussianEmbedding};
pub use io::Matrix;
pub use metrics::{similarity, similarity_matrix, SimilarityMetric};
pub use model::{init_model, load_checkpoint, save_checkpoint, Modality, ModelConfig, ProbModel};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};
pub use training::{train, TrainConfig, TrainHistory};
pub use triplet_lab::{BoundingBox, CropTriplet, RegionAnnotatedImage};
