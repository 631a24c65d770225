//! Independent reference computations used by the test suites.
//!
//! Nothing here is used by the production code paths. Each function takes
//! the slow, obvious route (quadrature, sampling, dense linear algebra,
//! exhaustive enumeration) so it can check the closed forms elsewhere.

#![allow(clippy::needless_range_loop)]

use rand::Rng;
use rand_distr::StandardNormal;

use crate::gaussian::GaussianEmbedding;
use crate::metrics::{similarity, similarity_gradient, SimilarityMetric};

/// Central finite difference of `f` at `x`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Relative error with the convention used by every gradient check: pairs
/// where both magnitudes fall below `1e-8` are treated as agreeing.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let f: &dyn Fn(f64) -> f64 = &f;
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 50)
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// `KL(p || q)` for one-dimensional Gaussians by numerical integration of
/// `p(x) ln(p(x) / q(x))`.
pub fn kl_quadrature_1d(mean_p: f64, var_p: f64, mean_q: f64, var_q: f64) -> f64 {
    let spread = var_p.sqrt().max(var_q.sqrt());
    let lo = mean_p.min(mean_q) - 14.0 * spread;
    let hi = mean_p.max(mean_q) + 14.0 * spread;
    integrate(
        |x| {
            let lp = log_normal_pdf(x, mean_p, var_p);
            lp.exp() * (lp - log_normal_pdf(x, mean_q, var_q))
        },
        lo,
        hi,
        1e-13,
    )
}

/// Monte-Carlo estimate of `KL(p || q)`; returns `(estimate, standard error)`.
pub fn kl_monte_carlo(
    p: &GaussianEmbedding,
    q: &GaussianEmbedding,
    samples: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let var_p = p.variances();
    let var_q = q.variances();
    let std_p: Vec<f64> = var_p.iter().map(|v| v.sqrt()).collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for d in 0..p.dim() {
            let z: f64 = rng.sample(StandardNormal);
            let x = p.mean[d] + std_p[d] * z;
            log_ratio += log_normal_pdf(x, p.mean[d], var_p[d]) - log_normal_pdf(x, q.mean[d], var_q[d]);
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

type Dense = Vec<Vec<f64>>;

fn matmul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns)`.
pub fn symmetric_eigen(m: &Dense) -> (Vec<f64>, Dense) {
    let n = m.len();
    let mut a = m.clone();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_psd(m: &Dense) -> Dense {
    let n = m.len();
    let (vals, vecs) = symmetric_eigen(m);
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = (0..n)
                .map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k])
                .sum();
        }
    }
    out
}

/// 2-Wasserstein distance between Gaussians using the general closed form
/// with dense covariance matrices and explicit matrix square roots.
pub fn dense_wasserstein2(a: &GaussianEmbedding, b: &GaussianEmbedding) -> f64 {
    let n = a.dim();
    let diag = |e: &GaussianEmbedding| -> Dense {
        let mut m = vec![vec![0.0; n]; n];
        for (i, v) in e.variances().into_iter().enumerate() {
            m[i][i] = v;
        }
        m
    };
    let sa = diag(a);
    let sb = diag(b);
    let root_a = sqrtm_psd(&sa);
    let cross = sqrtm_psd(&matmul(&matmul(&root_a, &sb), &root_a));
    let trace: f64 = (0..n).map(|i| sa[i][i] + sb[i][i] - 2.0 * cross[i][i]).sum();
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    (mean + trace).max(0.0).sqrt()
}

/// Worst relative error between the analytic similarity gradient and
/// central differences (step `1e-5`) over every coordinate.
pub fn similarity_gradient_error(m: SimilarityMetric, i: &GaussianEmbedding, c: &GaussianEmbedding) -> f64 {
    let g = similarity_gradient(m, i, c).unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let d = i.dim();
    for which in 0..4 {
        for k in 0..d {
            let f = |x: f64| {
                let mut a = i.clone();
                let mut b = c.clone();
                match which {
                    0 => a.mean[k] = x,
                    1 => a.log_var[k] = x,
                    2 => b.mean[k] = x,
                    _ => b.log_var[k] = x,
                }
                similarity(m, &a, &b).unwrap()
            };
            let (x0, analytic) = match which {
                0 => (i.mean[k], g.d_mean_a[k]),
                1 => (i.log_var[k], g.d_logvar_a[k]),
                2 => (c.mean[k], g.d_mean_b[k]),
                _ => (c.log_var[k], g.d_logvar_b[k]),
            };
            let numeric = central_difference(f, x0, step);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

/// Matrix-vector product by explicit loops.
pub fn naive_affine(weight: &[Vec<f64>], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(bias.len());
    for r in 0..bias.len() {
        let mut acc = 0.0;
        for c in 0..x.len() {
            acc += weight[r][c] * x[c];
        }
        out.push(acc + bias[r]);
    }
    out
}

/// Hinge triplet loss over every positive pair by enumerating each negative
/// and keeping the worst hinge value.
pub fn brute_force_triplet_loss(sims: &[Vec<f64>], margin: f64) -> f64 {
    let b = sims.len();
    let mut total = 0.0;
    for p in 0..b {
        let pos = sims[p][p];
        let mut row_worst: f64 = 0.0;
        let mut col_worst: f64 = 0.0;
        for n in 0..b {
            if n == p {
                continue;
            }
            row_worst = row_worst.max((margin + sims[p][n] - pos).max(0.0));
            col_worst = col_worst.max((margin + sims[n][p] - pos).max(0.0));
        }
        total += row_worst + col_worst;
    }
    total
}

/// Gallery ordering by descending score, ties by ascending index, produced
/// by a full stable sort.
pub fn sorted_ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Recall@k as a percentage, by sorting every row.
pub fn brute_force_recall(sims: &[Vec<f64>], positives: &[Vec<usize>], k: usize) -> f64 {
    let hits = sims
        .iter()
        .zip(positives)
        .filter(|(row, pos)| sorted_ranking(row)[..k].iter().any(|g| pos.contains(g)))
        .count();
    100.0 * hits as f64 / sims.len() as f64
}

/// Mean R-Precision by sorting every row.
pub fn brute_force_r_precision(sims: &[Vec<f64>], positives: &[Vec<usize>]) -> f64 {
    let total: f64 = sims
        .iter()
        .zip(positives)
        .map(|(row, pos)| {
            let r = pos.len();
            let hits = sorted_ranking(row)[..r]
                .iter()
                .filter(|g| pos.contains(g))
                .count();
            hits as f64 / r as f64
        })
        .sum();
    total / sims.len() as f64
}

/// Gallery items inside the Hamming ball of radius `zeta` around `query`,
/// found by enumerating every gallery label vector.
pub fn hamming_ball(query: &[u8], gallery: &[Vec<u8>], zeta: usize) -> Vec<usize> {
    gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| query.iter().zip(g.iter()).filter(|(a, b)| a != b).count() <= zeta)
        .map(|(i, _)| i)
        .collect()
}

/// Scalar Adam applied coordinate by coordinate.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        Self { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, x: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let v_hat = self.v / (1.0 - b2.powi(self.t));
        x - lr * m_hat / (v_hat.sqrt() + eps)
    }
}

impl Default for ScalarAdam {
    fn default() -> Self {
        Self::new()
    }
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && values[idx[end + 1]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            ranks[i] = rank;
        }
        start = end + 1;
    }
    ranks
}
