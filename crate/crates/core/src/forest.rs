//! PCA projection and Isolation Forest anomaly scores.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::gemm;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ForestError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("dimension mismatch: model expects {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
}

pub type Result<T, E = ForestError> = std::result::Result<T, E>;

fn check_rows(data: &[Vec<f64>]) -> Result<usize> {
    let d = data.first().map(Vec::len).ok_or_else(|| ForestError::Input("no samples".into()))?;
    if d == 0 {
        return Err(ForestError::Input("zero-length feature vectors".into()));
    }
    if let Some(r) = data.iter().position(|r| r.len() != d) {
        return Err(ForestError::Input(format!("row {r} has {} features, expected {d}", data[r].len())));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ForestError::Input("non-finite feature value".into()));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component (population normalization).
    pub explained: Vec<f64>,
}

/// Top-`k` principal components from the eigendecomposition of the covariance. `k` is
/// capped at the rank the data supports.
pub fn pca_fit(data: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    if k < 1 {
        return Err(ForestError::Input("k must be at least 1".into()));
    }
    let d = check_rows(data)?;
    let n = data.len();
    if n < 2 {
        return Err(ForestError::Input("PCA needs at least 2 samples".into()));
    }
    let mut mean = vec![0.0; d];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * d);
    for row in data {
        centered.extend(row.iter().zip(&mean).map(|(v, m)| v - m));
    }
    let mut cov = vec![0.0; d * d];
    gemm(true, false, d, d, n, 1.0 / n as f64, &centered, &centered, 0.0, &mut cov);

    let k = k.min(n).min(d);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let floor = trace.max(f64::MIN_POSITIVE) * 1e-12;
    let eig = nalgebra::DMatrix::from_row_slice(d, d, &cov).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let variance = eig.eigenvalues[j];
        if variance <= floor {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let pivot = v.iter().cloned().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(variance);
    }
    Ok(PcaModel { mean, components, explained })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(ForestError::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(c, (x, m))| c * (x - m)).sum())
            .collect())
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter().zip(coords) {
            out.iter_mut().zip(c).for_each(|(o, c)| *o += w * c);
        }
        out
    }

    /// Mean squared reconstruction error over `data`.
    pub fn reconstruction_error(&self, data: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for x in data {
            let r = self.reconstruct(&self.project(x)?);
            total += r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / data.len() as f64)
    }
}

/// Average unsuccessful-search path length in a binary search tree of `n` nodes.
pub fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Points with `x[feature] < split` go left.
    Internal { feature: usize, split: f64, left: usize, right: usize },
    External { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl IsolationTree {
    /// Edges from the root to the external node of `x`, plus `c(size)` there.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[i] {
                Node::Internal { feature, split, left, right } => {
                    i = if x[feature] < split { left } else { right };
                    depth += 1.0;
                }
                Node::External { size } => return depth + c_factor(size),
            }
        }
    }

    pub fn height(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Internal { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                Node::External { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Chooses the split of one node. `candidates` lists the features that are
/// not constant over `idx`.
pub trait SplitChooser {
    fn choose(&mut self, data: &[Vec<f64>], idx: &[usize], candidates: &[usize]) -> (usize, f64);
}

/// Uniform feature among the candidates, uniform value in its `[min, max]`.
pub struct RandomSplits(pub ChaCha8Rng);

impl SplitChooser for RandomSplits {
    fn choose(&mut self, data: &[Vec<f64>], idx: &[usize], candidates: &[usize]) -> (usize, f64) {
        let f = candidates[self.0.random_range(0..candidates.len())];
        let (lo, hi) = feature_range(data, idx, f);
        (f, self.0.random_range(lo..=hi))
    }
}

pub fn feature_range(data: &[Vec<f64>], idx: &[usize], f: usize) -> (f64, f64) {
    idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(data[i][f]), hi.max(data[i][f])))
}

/// Grows one tree over `idx` until isolation, constant slices or the height limit.
pub fn build_tree(data: &[Vec<f64>], idx: &[usize], height_limit: usize, chooser: &mut dyn SplitChooser) -> IsolationTree {
    let mut tree = IsolationTree { nodes: Vec::new() };
    grow(&mut tree, data, idx.to_vec(), 0, height_limit, chooser);
    tree
}

fn grow(
    tree: &mut IsolationTree,
    data: &[Vec<f64>],
    idx: Vec<usize>,
    depth: usize,
    limit: usize,
    chooser: &mut dyn SplitChooser,
) -> usize {
    let me = tree.nodes.len();
    tree.nodes.push(Node::External { size: idx.len() });
    if depth >= limit || idx.len() <= 1 {
        return me;
    }
    let dim = data[idx[0]].len();
    let candidates: Vec<usize> = (0..dim)
        .filter(|&f| {
            let (lo, hi) = feature_range(data, &idx, f);
            hi > lo
        })
        .collect();
    if candidates.is_empty() {
        return me;
    }
    let (feature, split) = chooser.choose(data, &idx, &candidates);
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| data[i][feature] < split);
    let left = grow(tree, data, l, depth + 1, limit, chooser);
    let right = grow(tree, data, r, depth + 1, limit, chooser);
    tree.nodes[me] = Node::Internal { feature, split, left, right };
    me
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub trees: Vec<IsolationTree>,
    /// Effective sub-sample size.
    pub psi: usize,
    pub height_limit: usize,
    pub dim: usize,
}

pub fn height_limit(psi: usize) -> usize {
    (psi.max(1) as f64).log2().ceil() as usize
}

fn fit_tree(data: &[Vec<f64>], psi: usize, limit: usize, seed: u64, t: usize) -> IsolationTree {
    let mut r = rng::stream(seed, "isolation_tree", t as u64);
    let mut idx = index::sample(&mut r, data.len(), psi).into_vec();
    idx.sort_unstable();
    build_tree(data, &idx, limit, &mut RandomSplits(r))
}

/// `t` trees on independent seeded sub-samples of size `psi` (clamped to the
/// sample count). Trees are split across `jobs` threads; the result does not
/// depend on `jobs`.
pub fn iforest_fit(data: &[Vec<f64>], t: usize, psi: usize, seed: u64, jobs: usize) -> Result<IsolationForestModel> {
    let dim = check_rows(data)?;
    if t < 1 || psi < 1 {
        return Err(ForestError::Input("t and psi must be at least 1".into()));
    }
    let psi_eff = psi.min(data.len());
    if psi_eff < psi {
        log::warn!("isolation forest: psi {psi} exceeds {} samples, clamped", data.len());
    }
    let limit = height_limit(psi_eff);
    let jobs = jobs.clamp(1, t);
    let trees = if jobs == 1 {
        (0..t).map(|i| fit_tree(data, psi_eff, limit, seed, i)).collect()
    } else {
        let mut slots: Vec<Option<IsolationTree>> = vec![None; t];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    s.spawn(move || {
                        (j..t).step_by(jobs).map(|i| (i, fit_tree(data, psi_eff, limit, seed, i))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, tree) in h.join().expect("tree thread panicked") {
                    slots[i] = Some(tree);
                }
            }
        });
        slots.into_iter().map(|t| t.expect("every tree fitted")).collect()
    };
    Ok(IsolationForestModel { trees, psi: psi_eff, height_limit: limit, dim })
}

impl IsolationForestModel {
    pub fn mean_path_length(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(ForestError::Dimension { expected: self.dim, got: x.len() });
        }
        Ok(self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64)
    }
}

/// Score from an average path length: `2^(-E[h] / c(psi))`. A sub-sample of
/// one point has `c = 0`; every point then scores 0.5.
pub fn anomaly_score(mean_path: f64, psi: usize) -> f64 {
    let c = c_factor(psi);
    if c == 0.0 {
        return 0.5;
    }
    2f64.powf(-mean_path / c)
}

/// Higher means more anomalous.
pub fn iforest_score(model: &IsolationForestModel, x: &[f64]) -> Result<f64> {
    Ok(anomaly_score(model.mean_path_length(x)?, model.psi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c_factor_values() {
        assert_eq!(c_factor(1), 0.0);
        assert_eq!(c_factor(2), 1.0);
        // 2 H(255) - 2 * 255 / 256 with H(m) = ln m + gamma.
        let expected = 2.0 * (255f64.ln() + 0.5772156649) - 2.0 * 255.0 / 256.0;
        assert!((c_factor(256) - expected).abs() < 1e-9);
    }

    #[test]
    fn score_is_half_at_average_depth() {
        assert_eq!(anomaly_score(c_factor(256), 256), 0.5);
        assert!(anomaly_score(2.0, 256) > anomaly_score(8.0, 256));
    }

    #[test]
    fn constant_slice_stays_external() {
        let data = vec![vec![1.0, 2.0]; 5];
        let idx: Vec<usize> = (0..5).collect();
        let tree = build_tree(&data, &idx, 8, &mut RandomSplits(rng::stream(0, "t", 0)));
        assert_eq!(tree.nodes, vec![Node::External { size: 5 }]);
    }
}
