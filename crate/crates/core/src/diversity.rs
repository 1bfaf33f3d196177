//! Semantic diversity of caption corpora: LM embeddings, k-means, elbow
//! selection, top-k concentration and cluster entropy.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capgen::tokenizer::tokenize;
use crate::error::{ensure, Error, Result};
use crate::lm::FrozenLm;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 300;

/// One row per caption, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * dim,
            Dimension,
            "{} values for {rows}x{dim}",
            data.len()
        );
        ensure!(
            data.iter().all(|x| x.is_finite()),
            NonFinite,
            "embedding matrix has non-finite entries"
        );
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == dim), Dimension, "ragged embedding rows");
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Stacks matrices of equal width.
    pub fn concat(parts: &[&EmbeddingMatrix]) -> Result<Self> {
        ensure!(!parts.is_empty(), Data, "nothing to concatenate");
        let dim = parts[0].dim;
        ensure!(parts.iter().all(|p| p.dim == dim), Dimension, "embedding widths differ");
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Self::new(parts.iter().map(|p| p.rows).sum(), dim, data)
    }
}

/// Mean-pooled final LM hidden states of each caption.
pub fn embed_captions<S: AsRef<str>>(captions: &[S], lm: &FrozenLm) -> Result<EmbeddingMatrix> {
    ensure!(!captions.is_empty(), Data, "empty caption corpus");
    let mut data = Vec::with_capacity(captions.len() * lm.cfg().dim);
    for c in captions {
        data.extend(lm.pooled(&tokenize(c.as_ref()))?.into_iter().map(f64::from));
    }
    EmbeddingMatrix::new(captions.len(), lm.cfg().dim, data)
}

/// Relative ridge added to the covariance diagonal before factoring.
const WHITEN_RIDGE: f64 = 1e-6;

/// Affine map to zero mean and identity covariance, fitted on one matrix.
/// Pooled LM states are anisotropic: the few directions spanned by shared
/// template phrases carry most of the variance and would otherwise decide
/// every k-means split. Uses the Cholesky factor `L` of the covariance
/// (`x -> L^-1 (x - mean)`); any two whitening maps differ by a rotation,
/// which leaves k-means unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitening {
    mean: Vec<f64>,
    /// Lower-triangular, row-major.
    chol: Vec<f64>,
}

impl Whitening {
    pub fn fit(x: &EmbeddingMatrix) -> Result<Self> {
        let (n, d) = (x.rows(), x.dim());
        ensure!(n >= 2, Data, "whitening needs at least 2 rows, got {n}");
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64)
            .collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let c: Vec<f64> = x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
            for a in 0..d {
                for b in 0..=a {
                    cov[a * d + b] += c[a] * c[b];
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
        let ridge = (WHITEN_RIDGE * trace / d as f64).max(f64::MIN_POSITIVE);
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| chol[i * d + k] * chol[j * d + k]).sum();
                if i == j {
                    let v = cov[i * d + i] + ridge - s;
                    ensure!(v > 0.0, NonFinite, "covariance is not positive definite");
                    chol[i * d + i] = v.sqrt();
                } else {
                    chol[i * d + j] = (cov[i * d + j] - s) / chol[j * d + j];
                }
            }
        }
        Ok(Whitening { mean, chol })
    }

    pub fn apply(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let d = self.mean.len();
        ensure!(
            x.dim() == d,
            Dimension,
            "whitening fitted for width {d}, got {}",
            x.dim()
        );
        let mut out = Vec::with_capacity(x.rows() * d);
        for i in 0..x.rows() {
            let r = x.row(i);
            let start = out.len();
            for a in 0..d {
                let s: f64 = (0..a).map(|k| self.chol[a * d + k] * out[start + k]).sum();
                out.push((r[a] - self.mean[a] - s) / self.chol[a * d + a]);
            }
        }
        EmbeddingMatrix::new(x.rows(), d, out)
    }
}

/// Whitens every corpus with one map fitted on their concatenation.
pub fn whiten_jointly(corpora: &[(String, EmbeddingMatrix)]) -> Result<Vec<(String, EmbeddingMatrix)>> {
    let parts: Vec<&EmbeddingMatrix> = corpora.iter().map(|(_, m)| m).collect();
    let w = Whitening::fit(&EmbeddingMatrix::concat(&parts)?)?;
    corpora.iter().map(|(n, m)| Ok((n.clone(), w.apply(m)?))).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    pub wcss: f64,
    /// WCSS after every assignment step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `None` when there are fewer clusters than the cut-off.
    pub concentration_top3: Option<f64>,
    pub concentration_top5: Option<f64>,
    pub entropy_bits: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop when every centroid moves less than `tol` times the data RMS norm.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

fn distinct_rows(x: &EmbeddingMatrix) -> usize {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// k-means++ seeding: first centre uniform, then proportional to squared distance.
fn plus_plus_init(x: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = x.rows();
    let mut centres = vec![x.row(rng.random_range(0..m)).to_vec()];
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(x.row(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centres.push(c);
    }
    centres
}

/// Nearest centre per row (lowest index on ties) and the resulting WCSS.
fn assign(x: &EmbeddingMatrix, centres: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut wcss = 0.0;
    let a = (0..x.rows())
        .map(|i| {
            let (mut best, mut bd) = (0, f64::INFINITY);
            for (j, c) in centres.iter().enumerate() {
                let d = sq_dist(x.row(i), c);
                if d < bd {
                    best = j;
                    bd = d;
                }
            }
            wcss += bd;
            best
        })
        .collect();
    (a, wcss)
}

/// Lloyd iterations from a k-means++ start.
pub fn kmeans(x: &EmbeddingMatrix, cfg: &KMeansConfig) -> Result<ClusterReport> {
    let k = cfg.k;
    ensure!(k >= 1, Parameter, "k must be positive");
    ensure!(x.rows() >= k, Parameter, "{} points cannot form {k} clusters", x.rows());
    let distinct = distinct_rows(x);
    if distinct < k {
        return Err(Error::ReduceK { k, distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centres = plus_plus_init(x, k, &mut rng);
    let scale = (x.data.iter().map(|v| v * v).sum::<f64>() / x.rows() as f64)
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let (mut assignments, mut wcss) = assign(x, &centres);
    let mut history = vec![wcss];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; x.dim()]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            sums[a].iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            // An emptied cluster keeps its centre; WCSS still cannot rise.
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&c, &centres[j]).sqrt());
            centres[j] = c;
        }
        let (a, w) = assign(x, &centres);
        let unchanged = a == assignments;
        assignments = a;
        wcss = w;
        history.push(wcss);
        if shift < cfg.tol * scale || unchanged {
            converged = true;
            break;
        }
    }
    let mut sizes = vec![0usize; k];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    Ok(ClusterReport {
        k,
        concentration_top3: (k >= 3).then(|| concentration(&sizes, 3)).transpose()?,
        concentration_top5: (k >= 5).then(|| concentration(&sizes, 5)).transpose()?,
        entropy_bits: entropy_bits(&sizes),
        assignments,
        sizes,
        wcss,
        wcss_history: history,
        iterations,
        converged,
    })
}

/// WCSS for `k = 1..=k_max`.
pub fn wcss_curve(x: &EmbeddingMatrix, k_max: usize, seed: u64) -> Result<Vec<f64>> {
    (1..=k_max)
        .map(|k| Ok(kmeans(x, &KMeansConfig::new(k, seed))?.wcss))
        .collect()
}

/// `k` (1-based) of the point farthest from the chord joining the first and
/// last points of the curve. Both axes are scaled to `[0, 1]` first, so the
/// answer does not depend on the WCSS units. Ties go to the smallest `k`.
pub fn elbow_select(wcss_by_k: &[f64]) -> Result<usize> {
    let n = wcss_by_k.len();
    ensure!(n >= 3, Parameter, "elbow needs at least 3 points, got {n}");
    ensure!(wcss_by_k.iter().all(|w| w.is_finite()), NonFinite, "non-finite WCSS");
    let (first, last) = (wcss_by_k[0], wcss_by_k[n - 1]);
    let span = first - last;
    if span == 0.0 {
        return Ok(1);
    }
    // On normalized axes the chord runs from (0, 1) to (1, 0): distance ∝ |x + y - 1|.
    let dist = |i: usize| {
        let x = i as f64 / (n - 1) as f64;
        let y = (wcss_by_k[i] - last) / span;
        (x + y - 1.0).abs()
    };
    let mut best = 0;
    for i in 1..n {
        if dist(i) > dist(best) + 1e-12 {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Percentage of members in the `top` largest clusters.
pub fn concentration(sizes: &[usize], top: usize) -> Result<f64> {
    ensure!(!sizes.is_empty(), Parameter, "no clusters");
    ensure!(
        top <= sizes.len(),
        Parameter,
        "top {top} exceeds {} clusters",
        sizes.len()
    );
    let m: usize = sizes.iter().sum();
    ensure!(m > 0, Parameter, "all clusters are empty");
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    Ok(100.0 * sorted[..top].iter().sum::<usize>() as f64 / m as f64)
}

/// Shannon entropy of the cluster-size distribution in bits. Empty clusters contribute 0.
pub fn entropy_bits(sizes: &[usize]) -> f64 {
    let m: usize = sizes.iter().sum();
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let h = -sizes
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / m;
            p * p.log2()
        })
        .sum::<f64>();
    h.max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusClusters {
    pub name: String,
    pub members: usize,
    pub sizes: Vec<usize>,
    /// `sizes / members`, the per-corpus histogram.
    pub normalized: Vec<f64>,
    pub concentration_top5: Option<f64>,
    pub entropy_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoClusterReport {
    pub joint: ClusterReport,
    pub corpora: Vec<CorpusClusters>,
}

/// Clusters the concatenation of several corpora and splits the joint
/// assignment back out per corpus.
pub fn co_cluster(corpora: &[(String, EmbeddingMatrix)], cfg: &KMeansConfig) -> Result<CoClusterReport> {
    let parts: Vec<&EmbeddingMatrix> = corpora.iter().map(|(_, m)| m).collect();
    let joint = kmeans(&EmbeddingMatrix::concat(&parts)?, cfg)?;
    let mut start = 0;
    let mut out = Vec::with_capacity(corpora.len());
    for (name, m) in corpora {
        ensure!(m.rows() > 0, Data, "corpus {name} is empty");
        let mut sizes = vec![0usize; joint.k];
        joint.assignments[start..start + m.rows()]
            .iter()
            .for_each(|&a| sizes[a] += 1);
        start += m.rows();
        out.push(CorpusClusters {
            name: name.clone(),
            members: m.rows(),
            normalized: sizes.iter().map(|&s| s as f64 / m.rows() as f64).collect(),
            concentration_top5: (joint.k >= 5).then(|| concentration(&sizes, 5)).transpose()?,
            entropy_bits: entropy_bits(&sizes),
            sizes,
        });
    }
    Ok(CoClusterReport { joint, corpora: out })
}
