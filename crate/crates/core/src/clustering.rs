//! k-means and full-covariance Gaussian mixture EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lloyd iteration cap for [`kmeans`].
pub const KMEANS_MAX_ITERATIONS: usize = 50;

/// Mixture weight under which a component counts as collapsed.
pub const COLLAPSED_WEIGHT: f64 = 1e-8;

pub type Point<T> = [T; 2];
pub type Cov<T> = [[T; 2]; 2];

/// Result of [`kmeans`] over `dim`-dimensional rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<T> {
    pub dim: usize,
    /// `k * dim` centroid coordinates, row-major.
    pub centroids: Vec<T>,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

impl<T: Scalar> KMeans<T> {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[T] {
        &self.centroids[c * self.dim..][..self.dim]
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<T: Scalar>(row: &[T], centroids: &[T], dim: usize) -> (usize, T) {
    centroids
        .chunks_exact(dim)
        .enumerate()
        .map(|(c, cent)| (c, sq_dist(row, cent)))
        .fold((0, T::infinity()), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding: first centre uniform, then D^2-weighted draws.
fn plus_plus_seed<T: Scalar>(rows: &[T], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let n = rows.len() / dim;
    let row = |i: usize| &rows[i * dim..][..dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim]).as_f64()).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` past the last partial sum.
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            // Every point coincides with a centre already.
            0
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centroids[start..]).as_f64());
        }
    }
    centroids
}

/// k-means++ seeded Lloyd iterations over `dim`-dimensional rows stored
/// contiguously in `rows`. Runs to an assignment fixed point or
/// [`KMEANS_MAX_ITERATIONS`]; an emptied cluster is re-seeded at the point
/// farthest from its current centroid.
pub fn kmeans<T: Scalar>(rows: &[T], dim: usize, k: usize, seed: u64) -> Result<KMeans<T>> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!("{} values do not form rows of {dim}", rows.len())));
    }
    let n = rows.len() / dim;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    let row = |i: usize| &rows[i * dim..][..dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(rows, dim, k, &mut rng);
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(row(i), &centroids, dim).0).collect();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![T::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l * dim..][..dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::one() / T::from_usize_lossy(counts[c]);
                for (dst, &s) in centroids[c * dim..][..dim].iter_mut().zip(&sums[c * dim..][..dim]) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .map(|i| (i, sq_dist(row(i), &centroids[labels[i] * dim..][..dim])))
                    .fold((usize::MAX, -T::one()), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                if far != usize::MAX {
                    taken[far] = true;
                    centroids[c * dim..][..dim].copy_from_slice(row(far));
                }
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(row(i), &centroids, dim).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(KMeans { dim, centroids, labels, iterations })
}

/// k-means centroids of 2-D points (seeding plus Lloyd refinement).
pub fn kmeans_init<T: Scalar>(points: &[Point<T>], k: usize, seed: u64) -> Result<Vec<Point<T>>> {
    let flat: Vec<T> = points.iter().flatten().copied().collect();
    let km = kmeans(&flat, 2, k, seed)?;
    Ok(km.centroids.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub k: usize,
    pub covariance_regularization: f64,
    pub max_iterations: usize,
    /// Stop once the mean per-point log-likelihood improves by less than this.
    pub convergence_threshold: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { k: 8, covariance_regularization: 1e-6, max_iterations: 100, convergence_threshold: 1e-3, seed: 0 }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || !(self.covariance_regularization > 0.0)
            || !(self.convergence_threshold > 0.0)
            || self.max_iterations == 0
        {
            return Err(Error::InvalidArgument(format!("invalid GMM config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel<T> {
    pub means: Vec<Point<T>>,
    pub covariances: Vec<Cov<T>>,
    pub weights: Vec<T>,
    /// Mean per-point log-likelihood after each E-step, in order.
    pub log_likelihood_trace: Vec<T>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment<T> {
    pub labels: Vec<usize>,
    pub responsibilities: Vec<Vec<T>>,
}

impl<T: Scalar> GmmModel<T> {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// Log of `w_c N(p | mu_c, Sigma_c)` for every component.
    fn component_log_densities(&self, p: &Point<T>) -> Vec<T> {
        let two_pi = T::lit(2.0 * std::f64::consts::PI);
        let half = T::lit(0.5);
        (0..self.k())
            .map(|c| {
                let [[a, b], [_, d]] = self.covariances[c];
                let det = a * d - b * b;
                let (dx, dy) = (p[0] - self.means[c][0], p[1] - self.means[c][1]);
                let maha = (d * dx * dx - (b + b) * dx * dy + a * dy * dy) / det;
                self.weights[c].ln() - two_pi.ln() - half * det.ln() - half * maha
            })
            .collect()
    }

    /// Responsibilities and per-point log-likelihoods via log-sum-exp.
    pub fn e_step(&self, points: &[Point<T>]) -> (Vec<Vec<T>>, Vec<T>) {
        points
            .iter()
            .map(|p| {
                let logs = self.component_log_densities(p);
                let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + logs.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
                (logs.iter().map(|&l| (l - lse).exp()).collect(), lse)
            })
            .unzip()
    }

    pub fn assign(&self, points: &[Point<T>]) -> ClusterAssignment<T> {
        let (responsibilities, _) = self.e_step(points);
        let labels = responsibilities.iter().map(|r| argmax(r)).collect();
        ClusterAssignment { labels, responsibilities }
    }

    /// Mean per-point log-likelihood of `points`.
    pub fn mean_log_likelihood(&self, points: &[Point<T>]) -> T {
        let (_, ll) = self.e_step(points);
        ll.iter().copied().sum::<T>() / T::from_usize_lossy(points.len())
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Weighted mean and biased covariance plus `reg * I`.
fn weighted_moments<T: Scalar>(points: &[Point<T>], weights: impl Fn(usize) -> T, reg: T) -> (T, Point<T>, Cov<T>) {
    let mut total = T::zero();
    let mut mean = [T::zero(); 2];
    for (i, p) in points.iter().enumerate() {
        let w = weights(i);
        total += w;
        mean[0] += w * p[0];
        mean[1] += w * p[1];
    }
    if total > T::zero() {
        mean = [mean[0] / total, mean[1] / total];
    }
    let mut cov = [[T::zero(); 2]; 2];
    for (i, p) in points.iter().enumerate() {
        let w = weights(i);
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        cov[0][0] += w * dx * dx;
        cov[0][1] += w * dx * dy;
        cov[1][1] += w * dy * dy;
    }
    if total > T::zero() {
        cov[0][0] /= total;
        cov[0][1] /= total;
        cov[1][1] /= total;
    }
    cov[1][0] = cov[0][1];
    cov[0][0] += reg;
    cov[1][1] += reg;
    (total, mean, cov)
}

fn m_step<T: Scalar>(points: &[Point<T>], resp: &[Vec<T>], point_ll: &[T], k: usize, reg: T) -> GmmModel<T> {
    let n = T::from_usize_lossy(points.len());
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for c in 0..k {
        let (nk, mean, cov) = weighted_moments(points, |i| resp[i][c], reg);
        means.push(mean);
        covariances.push(cov);
        weights.push(nk / n);
    }
    let collapsed: Vec<usize> = (0..k).filter(|&c| weights[c].as_f64() < COLLAPSED_WEIGHT).collect();
    if !collapsed.is_empty() {
        let (_, _, global) = weighted_moments(points, |_| T::one(), reg);
        // Re-seed at the least explained points, one per collapsed component.
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| point_ll[a].partial_cmp(&point_ll[b]).expect("finite").then(a.cmp(&b)));
        for (&c, &i) in collapsed.iter().zip(&order) {
            means[c] = points[i];
            covariances[c] = global;
            weights[c] = T::one() / n;
        }
        let total: T = weights.iter().copied().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    GmmModel { means, covariances, weights, log_likelihood_trace: Vec::new(), converged: false }
}

/// EM for a `cfg.k`-component full-covariance mixture, initialized from
/// k-means hard assignments.
pub fn fit_gmm<T: Scalar>(points: &[Point<T>], cfg: &GmmConfig) -> Result<(GmmModel<T>, ClusterAssignment<T>)> {
    cfg.validate()?;
    if points.len() < cfg.k {
        return Err(Error::TooFewPoints { needed: cfg.k, got: points.len() });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GMM input point".into()));
    }
    let k = cfg.k;
    let reg = T::lit(cfg.covariance_regularization);
    let flat: Vec<T> = points.iter().flatten().copied().collect();
    let km = kmeans(&flat, 2, k, cfg.seed)?;
    let hard: Vec<Vec<T>> =
        km.labels.iter().map(|&l| (0..k).map(|c| if c == l { T::one() } else { T::zero() }).collect()).collect();
    let zero_ll = vec![T::zero(); points.len()];
    let mut model = m_step(points, &hard, &zero_ll, k, reg);

    let threshold = T::lit(cfg.convergence_threshold);
    let n = T::from_usize_lossy(points.len());
    let mut trace: Vec<T> = Vec::with_capacity(cfg.max_iterations);
    let mut converged = false;
    let mut resp;
    loop {
        let (r, point_ll) = model.e_step(points);
        resp = r;
        let ll = point_ll.iter().copied().sum::<T>() / n;
        if !ll.is_finite() {
            return Err(Error::NonFinite("GMM log-likelihood".into()));
        }
        if let Some(&prev) = trace.last() {
            converged = ll - prev < threshold;
        }
        trace.push(ll);
        if converged || trace.len() >= cfg.max_iterations {
            break;
        }
        model = m_step(points, &resp, &point_ll, k, reg);
    }
    model.log_likelihood_trace = trace;
    model.converged = converged;
    let labels = resp.iter().map(|r| argmax(r)).collect();
    Ok((model, ClusterAssignment { labels, responsibilities: resp }))
}
