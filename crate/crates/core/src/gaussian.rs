//! Diagonal Gaussian embeddings in the joint space.
//!
//! Covariances are stored as per-dimension natural log-variances. Every
//! consumer of a [`GaussianEmbedding`] exponentiates `log_var` on demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible variance.
pub const VARIANCE_MIN: f64 = 0.1;
/// Largest admissible variance.
pub const VARIANCE_MAX: f64 = 10.0;

/// `ln(VARIANCE_MIN)`.
pub fn log_var_min() -> f64 {
    VARIANCE_MIN.ln()
}

/// `ln(VARIANCE_MAX)`.
pub fn log_var_max() -> f64 {
    VARIANCE_MAX.ln()
}

/// Clamps a single log-variance into the admissible band.
#[inline]
pub fn clamp_log_var(v: f64) -> f64 {
    v.clamp(log_var_min(), log_var_max())
}

/// Mean and per-dimension log-variance of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianEmbedding {
    /// Builds an embedding, checking lengths and finiteness.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let e = Self { mean, log_var };
        e.validate()?;
        Ok(e)
    }

    /// Unit-variance embedding centred at `mean`.
    pub fn point(mean: Vec<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            log_var: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() {
            return Err(Error::InvalidEmbedding("dimension must be at least 1".into()));
        }
        if self.mean.len() != self.log_var.len() {
            return Err(Error::InvalidEmbedding(format!(
                "mean has {} components but log_var has {}",
                self.mean.len(),
                self.log_var.len()
            )));
        }
        if let Some(d) = self.mean.iter().chain(&self.log_var).position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!(
                "non-finite component at flat index {d}"
            )));
        }
        Ok(())
    }

    /// Per-dimension variances.
    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// Per-dimension standard deviations.
    pub fn std_devs(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| (0.5 * v).exp()).collect()
    }
}

/// Covariance structure of the learned distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceShape {
    /// Independent variance per dimension.
    Ellipsoidal,
    /// Ellipsoidal prediction collapsed to the arithmetic mean variance.
    SphericalAvgPool,
    /// A single learned log-variance shared by every dimension.
    SphericalOneValue,
}

impl CovarianceShape {
    pub const ALL: [CovarianceShape; 3] = [
        CovarianceShape::Ellipsoidal,
        CovarianceShape::SphericalAvgPool,
        CovarianceShape::SphericalOneValue,
    ];

    pub fn tag(self) -> u32 {
        match self {
            CovarianceShape::Ellipsoidal => 0,
            CovarianceShape::SphericalAvgPool => 1,
            CovarianceShape::SphericalOneValue => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            CovarianceShape::Ellipsoidal => "ellipsoidal",
            CovarianceShape::SphericalAvgPool => "spherical_avg_pool",
            CovarianceShape::SphericalOneValue => "spherical_one_value",
        }
    }
}

impl std::str::FromStr for CovarianceShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown covariance shape `{s}`")))
    }
}

/// Clamps every log-variance into `[ln 0.1, ln 10]`.
pub fn clamp_variance(e: &GaussianEmbedding) -> Result<GaussianEmbedding> {
    e.validate()?;
    Ok(GaussianEmbedding {
        mean: e.mean.clone(),
        log_var: e.log_var.iter().map(|&v| clamp_log_var(v)).collect(),
    })
}

/// Log of the arithmetic mean of `exp(log_var)`, computed stably.
pub(crate) fn log_mean_exp(log_var: &[f64]) -> f64 {
    let max = log_var.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_var.iter().map(|v| (v - max).exp()).sum();
    max + (sum / log_var.len() as f64).ln()
}

/// Applies a covariance shape to a clamped embedding.
///
/// `one_value` is the shared log-variance, read only for
/// [`CovarianceShape::SphericalOneValue`].
pub fn apply_shape(
    e: &GaussianEmbedding,
    shape: CovarianceShape,
    one_value: Option<f64>,
) -> Result<GaussianEmbedding> {
    e.validate()?;
    let d = e.dim();
    let log_var = match shape {
        CovarianceShape::Ellipsoidal => e.log_var.clone(),
        CovarianceShape::SphericalAvgPool => vec![log_mean_exp(&e.log_var); d],
        CovarianceShape::SphericalOneValue => {
            let v = one_value.ok_or_else(|| {
                Error::Config("spherical one-value shape needs a shared log-variance".into())
            })?;
            if !v.is_finite() {
                return Err(Error::InvalidEmbedding(
                    "shared log-variance is not finite".into(),
                ));
            }
            vec![clamp_log_var(v); d]
        }
    };
    Ok(GaussianEmbedding {
        mean: e.mean.clone(),
        log_var,
    })
}

/// Log-determinant of the diagonal covariance.
pub fn uncertainty(e: &GaussianEmbedding) -> f64 {
    e.log_var.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn emb(mean: Vec<f64>, log_var: Vec<f64>) -> GaussianEmbedding {
        GaussianEmbedding::new(mean, log_var).unwrap()
    }

    #[test]
    fn clamp_in_range_is_identity() {
        let e = emb(vec![1.0, 2.0], vec![0.0, 0.0]);
        assert_eq!(clamp_variance(&e).unwrap(), e);
    }

    #[test]
    fn clamp_out_of_range() {
        let e = emb(vec![0.0, 0.0], vec![-5.0, 5.0]);
        let c = clamp_variance(&e).unwrap();
        assert_abs_diff_eq!(c.log_var[0], -std::f64::consts::LN_10, epsilon = 1e-12);
        assert_abs_diff_eq!(c.log_var[1], std::f64::consts::LN_10, epsilon = 1e-12);
        assert_eq!(c.mean, e.mean);
    }

    #[test]
    fn clamp_boundaries_are_fixed_points() {
        let e = emb(vec![0.0, 0.0], vec![0.1f64.ln(), 10f64.ln()]);
        assert_eq!(clamp_variance(&e).unwrap(), e);
    }

    #[test]
    fn clamp_rejects_non_finite() {
        let e = GaussianEmbedding {
            mean: vec![f64::NAN],
            log_var: vec![0.0],
        };
        assert!(matches!(clamp_variance(&e), Err(Error::InvalidEmbedding(_))));
        assert!(GaussianEmbedding::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(GaussianEmbedding::new(vec![], vec![]).is_err());
        assert!(GaussianEmbedding::new(vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn shapes() {
        let e = emb(vec![0.5, -0.5], vec![1f64.ln(), 4f64.ln()]);
        assert_eq!(apply_shape(&e, CovarianceShape::Ellipsoidal, None).unwrap(), e);

        let avg = apply_shape(&e, CovarianceShape::SphericalAvgPool, None).unwrap();
        for v in avg.variances() {
            assert_abs_diff_eq!(v, 2.5, epsilon = 1e-12);
        }

        let one = apply_shape(&e, CovarianceShape::SphericalOneValue, Some(0.0)).unwrap();
        assert_eq!(one.log_var, vec![0.0, 0.0]);
        assert_eq!(one.mean, e.mean);

        let high = apply_shape(&e, CovarianceShape::SphericalOneValue, Some(9.0)).unwrap();
        assert_eq!(high.log_var, vec![log_var_max(); 2]);
        assert!(apply_shape(&e, CovarianceShape::SphericalOneValue, None).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty(&GaussianEmbedding::point(vec![0.0; 7])), 0.0);
        let e = emb(vec![0.0; 2], vec![10f64.ln(); 2]);
        assert_abs_diff_eq!(uncertainty(&e), 4.605170, epsilon = 1e-6);
        let e = emb(vec![0.0; 3], vec![0.1f64.ln(), 0.0, 10f64.ln()]);
        assert_abs_diff_eq!(uncertainty(&e), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_tags_round_trip() {
        for s in CovarianceShape::ALL {
            assert_eq!(CovarianceShape::from_tag(s.tag()), Some(s));
            assert_eq!(s.name().parse::<CovarianceShape>().unwrap(), s);
        }
        assert_eq!(CovarianceShape::from_tag(9), None);
    }

    fn clamped_embedding() -> impl Strategy<Value = GaussianEmbedding> {
        (1usize..16).prop_flat_map(|d| {
            (
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(log_var_min()..=log_var_max(), d),
            )
                .prop_map(|(mean, log_var)| GaussianEmbedding { mean, log_var })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn clamp_is_idempotent(d in 1usize..16, seed in prop::collection::vec(-8.0f64..8.0, 32)) {
            let e = GaussianEmbedding { mean: seed[..d].to_vec(), log_var: seed[16..16 + d].to_vec() };
            let once = clamp_variance(&e).unwrap();
            let twice = clamp_variance(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn avg_pool_preserves_total_variance(e in clamped_embedding()) {
            let s = apply_shape(&e, CovarianceShape::SphericalAvgPool, None).unwrap();
            let before: f64 = e.variances().iter().sum();
            let after: f64 = s.variances().iter().sum();
            prop_assert!(((after - before) / before).abs() <= 1e-9);
        }

        #[test]
        fn uncertainty_is_strictly_monotone(e in clamped_embedding(), idx in 0usize..16, bump in 1e-6f64..1.0) {
            let idx = idx % e.dim();
            let mut f = e.clone();
            f.log_var[idx] += bump;
            prop_assert!(uncertainty(&f) > uncertainty(&e));
        }

        #[test]
        fn avg_pool_never_lowers_uncertainty(e in clamped_embedding()) {
            let s = apply_shape(&e, CovarianceShape::SphericalAvgPool, None).unwrap();
            prop_assert!(uncertainty(&s) >= uncertainty(&e) - 1e-12);
        }
    }
}
