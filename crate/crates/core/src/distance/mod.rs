//! Kernel two-sample statistics and point-to-set scoring.
//!
//! * [`mmd2`] is the biased (V-statistic) squared MMD with a Gaussian kernel,
//!   self-pairs included.
//! * [`median_bandwidth`] picks the kernel width from the pooled sample.
//! * [`fit_gaussian_stats`] / [`mahalanobis_score`] / [`ensemble_weights`]
//!   turn per-source encodings into mixture weights for a target point.
//! * [`source_pair_alpha`] measures how far apart the sources are in the
//!   shared encoder space.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{DaNet, ForwardMode};
use crate::netcore::{pairwise_sq_dist, Graph, Tensor2, Var};
use crate::rng;

/// Gaussian kernel bandwidth selection.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KernelConfig {
    /// Median pairwise distance of the pooled inputs, recomputed per call.
    #[default]
    MedianHeuristic,
    Fixed { sigma: f64 },
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelConfig::Fixed { sigma } if !(sigma > 0.0) => Err(Error::Config(format!(
                "fixed kernel bandwidth must be > 0, got {sigma}"
            ))),
            _ => Ok(()),
        }
    }
}

/// `exp(-|a - b|^2 / (2 sigma^2))`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("kernel bandwidth must be > 0, got {sigma}")));
    }
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "gaussian_kernel",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-d2 / (2.0 * sigma * sigma)).exp())
}

/// Median of a list of distances, falling back to `1.0` when the median is zero.
pub fn median_distance(distances: &[f64]) -> f64 {
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Which of the three pooled distance blocks an entry lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    XX,
    YY,
    XY,
}

/// The one or two pooled pairs whose distances define the median.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianPick {
    pub entries: Vec<(Block, usize, usize)>,
    pub sigma: f64,
}

/// Locates the median over all unordered pairs of the pooled set, given the
/// squared-distance blocks `X-X`, `Y-Y` and `X-Y`.
///
/// Returns `None` when the median distance is zero (the caller uses `1.0`).
pub fn median_pick(dxx: &Tensor2, dyy: &Tensor2, dxy: &Tensor2) -> Result<Option<MedianPick>> {
    let mut pairs: Vec<(f64, Block, usize, usize)> = Vec::new();
    for (block, d, upper) in [(Block::XX, dxx, true), (Block::YY, dyy, true), (Block::XY, dxy, false)] {
        for i in 0..d.rows() {
            let start = if upper { i + 1 } else { 0 };
            for j in start..d.cols() {
                pairs.push((d[(i, j)], block, i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Contract(
            "median bandwidth needs at least 2 pooled vectors".into(),
        ));
    }
    // stable sort keeps enumeration order among ties
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let chosen = if n % 2 == 1 {
        vec![pairs[n / 2]]
    } else {
        vec![pairs[n / 2 - 1], pairs[n / 2]]
    };
    let sigma = chosen.iter().map(|p| p.0.max(0.0).sqrt()).sum::<f64>() / chosen.len() as f64;
    if sigma > 0.0 {
        Ok(Some(MedianPick {
            entries: chosen.iter().map(|&(_, b, i, j)| (b, i, j)).collect(),
            sigma,
        }))
    } else {
        Ok(None)
    }
}

/// Median heuristic bandwidth over the pooled set `xs ∪ ys`.
pub fn median_bandwidth(xs: &Tensor2, ys: &Tensor2) -> Result<f64> {
    check_same_dim("median_bandwidth", xs, ys)?;
    let pick = median_pick(
        &pairwise_sq_dist(xs, xs),
        &pairwise_sq_dist(ys, ys),
        &pairwise_sq_dist(xs, ys),
    )?;
    Ok(pick.map_or(1.0, |p| p.sigma))
}

fn check_same_dim(context: &'static str, xs: &Tensor2, ys: &Tensor2) -> Result<()> {
    if xs.cols() != ys.cols() && !xs.is_empty() && !ys.is_empty() {
        return Err(Error::Dimension {
            context,
            left: xs.shape(),
            right: ys.shape(),
        });
    }
    Ok(())
}

fn resolve_sigma(xs: &Tensor2, ys: &Tensor2, kernel: &KernelConfig) -> Result<f64> {
    kernel.validate()?;
    match *kernel {
        KernelConfig::Fixed { sigma } => Ok(sigma),
        KernelConfig::MedianHeuristic => median_bandwidth(xs, ys),
    }
}

// Row sums run in parallel; the final reduction is sequential so the result
// does not depend on the thread count.
fn kernel_sum(a: &Tensor2, b: &Tensor2, sigma: f64) -> f64 {
    let coef = -1.0 / (2.0 * sigma * sigma);
    let row_sums: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let ra = a.row(i);
            b.iter_rows()
                .map(|rb| {
                    let d2: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
                    (coef * d2).exp()
                })
                .sum()
        })
        .collect();
    row_sums.iter().sum()
}

/// Biased squared MMD between the row sets `xs` and `ys`.
pub fn mmd2(xs: &Tensor2, ys: &Tensor2, kernel: &KernelConfig) -> Result<f64> {
    if xs.rows() == 0 || ys.rows() == 0 {
        return Err(Error::Contract("mmd2 needs two non-empty sets".into()));
    }
    check_same_dim("mmd2", xs, ys)?;
    let sigma = resolve_sigma(xs, ys, kernel)?;
    let (n, m) = (xs.rows() as f64, ys.rows() as f64);
    Ok(kernel_sum(xs, xs, sigma) / (n * n) + kernel_sum(ys, ys, sigma) / (m * m)
        - 2.0 * kernel_sum(xs, ys, sigma) / (n * m))
}

/// [`mmd2`] recorded on a graph. With the median heuristic the bandwidth is a
/// function of the selected median distance(s), so gradients flow through it.
pub fn mmd2_on(g: &mut Graph, x: Var, y: Var, kernel: &KernelConfig) -> Result<Var> {
    kernel.validate()?;
    let (n, m) = (g.shape(x).0, g.shape(y).0);
    if n == 0 || m == 0 {
        return Err(Error::Contract("mmd2 needs two non-empty sets".into()));
    }
    let dxx = g.pairwise_sq_dist(x, x)?;
    let dyy = g.pairwise_sq_dist(y, y)?;
    let dxy = g.pairwise_sq_dist(x, y)?;
    let sigma_const = |g: &mut Graph, sigma: f64| g.constant(Tensor2::scalar(sigma));
    let sigma = match *kernel {
        KernelConfig::Fixed { sigma } => sigma_const(g, sigma),
        KernelConfig::MedianHeuristic => {
            match median_pick(g.value(dxx), g.value(dyy), g.value(dxy))? {
                None => sigma_const(g, 1.0),
                Some(pick) => {
                    let block = |b: Block| match b {
                        Block::XX => dxx,
                        Block::YY => dyy,
                        Block::XY => dxy,
                    };
                    // sqrt is not differentiable at 0; such a pick is held constant
                    let degenerate = pick
                        .entries
                        .iter()
                        .any(|&(b, i, j)| g.value(block(b))[(i, j)] <= 0.0);
                    if degenerate {
                        sigma_const(g, pick.sigma)
                    } else {
                        let mut total: Option<Var> = None;
                        for &(b, i, j) in &pick.entries {
                            let d2 = g.gather(block(b), &[(i, j)])?;
                            let d = g.sqrt(d2);
                            total = Some(match total {
                                None => d,
                                Some(t) => g.add(t, d)?,
                            });
                        }
                        let total = total.expect("median pick is non-empty");
                        g.scale(total, 1.0 / pick.entries.len() as f64)
                    }
                }
            }
        }
    };
    // coefficient -1 / (2 sigma^2)
    let s2 = g.mul(sigma, sigma)?;
    let inv = g.recip(s2);
    let coef = g.scale(inv, -0.5);
    let term = |g: &mut Graph, d: Var, w: f64| -> Result<Var> {
        let scaled = g.scale_by(d, coef)?;
        let k = g.exp(scaled);
        let s = g.sum_all(k);
        Ok(g.scale(s, w))
    };
    let (nf, mf) = (n as f64, m as f64);
    let a = term(g, dxx, 1.0 / (nf * nf))?;
    let b = term(g, dyy, 1.0 / (mf * mf))?;
    let c = term(g, dxy, -2.0 / (nf * mf))?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Mean and regularized inverse covariance of one source's encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub inv_cov: Tensor2,
    pub shrinkage: f64,
    pub sample_count: usize,
}

/// Fits `mean` and `((1 - λ) S + λ tr(S)/d I)^-1` where `S` is the unbiased
/// sample covariance.
pub fn fit_gaussian_stats(encodings: &Tensor2, shrinkage: f64) -> Result<GaussianStats> {
    let (n, d) = encodings.shape();
    if n < 2 {
        return Err(Error::Contract(format!(
            "gaussian statistics need at least 2 samples, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::Config(format!("shrinkage must lie in [0, 1], got {shrinkage}")));
    }
    let mut mean = vec![0.0; d];
    for r in encodings.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in encodings.iter_rows() {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n as f64 - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let trace = cov.trace();
    let mut reg = cov * (1.0 - shrinkage);
    for a in 0..d {
        reg[(a, a)] += shrinkage * trace / d as f64;
    }

    let eig = SymmetricEigen::new(reg);
    let max_ev = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let min_ev = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max_ev > 0.0) || min_ev <= 1e-12 * max_ev {
        return Err(Error::Numerical(format!(
            "covariance is singular (eigenvalues in [{min_ev:e}, {max_ev:e}]) with shrinkage {shrinkage}; use shrinkage > 0"
        )));
    }
    let mut inv_diag = eig.eigenvalues.clone();
    inv_diag.iter_mut().for_each(|v| *v = 1.0 / *v);
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();

    let mut inv_cov = Tensor2::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            inv_cov[(a, b)] = 0.5 * (inv[(a, b)] + inv[(b, a)]);
        }
    }
    Ok(GaussianStats {
        mean,
        inv_cov,
        shrinkage,
        sample_count: n,
    })
}

/// Negative Mahalanobis distance `-sqrt((x - mu)^T Sigma^-1 (x - mu))`.
///
/// A slightly negative quadratic form from rounding is clamped to zero.
pub fn mahalanobis_score(x: &[f64], stats: &GaussianStats) -> Result<f64> {
    let d = stats.mean.len();
    if x.len() != d {
        return Err(Error::Dimension {
            context: "mahalanobis_score",
            left: (1, x.len()),
            right: (1, d),
        });
    }
    let diff: Vec<f64> = x.iter().zip(&stats.mean).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for a in 0..d {
        let row = stats.inv_cov.row(a);
        q += diff[a] * row.iter().zip(&diff).map(|(s, v)| s * v).sum::<f64>();
    }
    if q < 0.0 {
        if q < -1e-9 {
            return Err(Error::Numerical(format!(
                "mahalanobis quadratic form is negative ({q:e}); inverse covariance is not positive definite"
            )));
        }
        q = 0.0;
    }
    Ok(-q.sqrt())
}

/// Softmax over the per-source scores.
pub fn ensemble_weights(betas: &[f64]) -> Vec<f64> {
    let max = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = betas.iter().map(|b| (b - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Pairwise source distances in the shared encoder space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaMatrix {
    pub values: Tensor2,
    /// Indices of the encoded subsample drawn from each source.
    pub subsamples: Vec<Vec<usize>>,
}

impl AlphaMatrix {
    /// Uniform factors (all off-diagonal entries `value`).
    pub fn constant(m: usize, value: f64) -> Self {
        let mut values = Tensor2::filled(m, m, value);
        for i in 0..m {
            values[(i, i)] = 0.0;
        }
        Self {
            values,
            subsamples: vec![Vec::new(); m],
        }
    }

    pub fn num_sources(&self) -> usize {
        self.values.rows()
    }

    /// Factors `alpha[i][m]` for every `m != i`, in increasing `m`.
    pub fn row_without_diagonal(&self, i: usize) -> Vec<f64> {
        (0..self.num_sources())
            .filter(|&m| m != i)
            .map(|m| self.values[(i, m)])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaConfig {
    pub subsample: usize,
    pub seed: u64,
    pub kernel: KernelConfig,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            subsample: 256,
            seed: 0,
            kernel: KernelConfig::MedianHeuristic,
        }
    }
}

/// Draws a seeded subsample of each source, encodes it in eval mode and
/// fills `alpha[i][m] = mmd2(h_i, h_m)`. The matrix is symmetric with a zero
/// diagonal.
pub fn source_pair_alpha(net: &DaNet, sources: &[Vec<Sample>], cfg: &AlphaConfig) -> Result<AlphaMatrix> {
    let m = sources.len();
    let mut subsamples = Vec::with_capacity(m);
    let mut encoded = Vec::with_capacity(m);
    for (i, set) in sources.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Contract(format!("source {i} is empty")));
        }
        let mut r = rng::rng_for(cfg.seed, &[0xA1FA, i as u64]);
        let mut idx = sample_indices(&mut r, set.len(), cfg.subsample.min(set.len())).into_vec();
        idx.sort_unstable();
        let rows: Vec<&[f64]> = idx.iter().map(|&j| set[j].features.as_slice()).collect();
        let x = Tensor2::from_rows(&rows)?;
        encoded.push(net.encode(&x, ForwardMode::Eval)?);
        subsamples.push(idx);
    }
    let mut values = Tensor2::zeros(m, m);
    for i in 0..m {
        for k in (i + 1)..m {
            let v = mmd2(&encoded[i], &encoded[k], &cfg.kernel)?;
            values[(i, k)] = v;
            values[(k, i)] = v;
        }
    }
    Ok(AlphaMatrix { values, subsamples })
}
