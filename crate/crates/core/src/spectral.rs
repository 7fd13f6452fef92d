//! k-NN graph high-pass filtering and the time-variant latent sampler.
//!
//! The weighted adjacency is row-stochastic (`D^-1 A`), so the filter
//! `I - A_w` maps constant signals to zero and its response to an
//! eigenvector of `A_w` with eigenvalue `λ` is `1 - λ`.

use crate::autodiff::Tensor;
use crate::geometry::{farthest_point_sampling, fps_over, knn_with_distances, Point};
use crate::error::{Error, Result};

/// Sparse k-NN graph: row `i` lists its `k` neighbours and their
/// normalized Gaussian weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    pub k: usize,
    pub bandwidth: f64,
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl SpatialGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Dense 0/1 adjacency, row-major `N×N`.
    pub fn unweighted_dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut a = vec![0.0; n * n];
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                a[i * n + j] = 1.0;
            }
        }
        a
    }

    /// Dense row-normalized weighted adjacency, row-major `N×N`.
    pub fn weighted_dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut a = vec![0.0; n * n];
        for (i, (row, w)) in self.neighbors.iter().zip(&self.weights).enumerate() {
            for (&j, &wv) in row.iter().zip(w) {
                a[i * n + j] = wv;
            }
        }
        a
    }
}

/// Mean Euclidean distance from each point to its `k` nearest neighbours.
pub fn mean_knn_distance(coords: &[Point], k: usize) -> Result<f64> {
    let (_, d2) = knn_with_distances(coords, k)?;
    let total: f64 = d2.iter().flatten().map(|d| d.sqrt()).sum();
    Ok(total / (coords.len() * k) as f64)
}

/// Builds the k-NN graph with weights `exp(-d^2 / bandwidth^2)` normalized
/// per row. `bandwidth = None` uses the mean k-NN distance of the cloud.
pub fn build_graph(coords: &[Point], k: usize, bandwidth: Option<f64>) -> Result<SpatialGraph> {
    let (neighbors, d2) = knn_with_distances(coords, k)?;
    let bandwidth = match bandwidth {
        Some(b) if b > 0.0 && b.is_finite() => b,
        Some(b) => return Err(Error::invalid(format!("build_graph: bandwidth must be positive, got {b}"))),
        None => {
            let mean = d2.iter().flatten().map(|d| d.sqrt()).sum::<f64>() / (coords.len() * k) as f64;
            // all points coincide; any positive scale gives uniform weights
            if mean > 0.0 {
                mean
            } else {
                1.0
            }
        }
    };
    let inv_b2 = 1.0 / (bandwidth * bandwidth);
    let weights = d2
        .iter()
        .map(|row| {
            let raw: Vec<f64> = row.iter().map(|d| (-d * inv_b2).exp()).collect();
            let sum: f64 = raw.iter().sum();
            if sum > 0.0 {
                raw.iter().map(|w| w / sum).collect()
            } else {
                // every neighbour underflowed; fall back to uniform weights
                vec![1.0 / k as f64; k]
            }
        })
        .collect();
    Ok(SpatialGraph {
        k,
        bandwidth,
        neighbors,
        weights,
    })
}

/// Applies `I - A_w` to each column of `signal[N, d]`.
///
/// Evaluated as `Σ_j w_ij (s_i - s_j)`, which equals `s_i - Σ_j w_ij s_j`
/// for row-stochastic weights and is exactly zero on constant signals.
pub fn high_pass_filter(graph: &SpatialGraph, signal: &Tensor) -> Result<Tensor> {
    let n = graph.len();
    if signal.rank() != 2 || signal.rows() != n {
        return Err(Error::shape("high_pass_filter", &[n], signal.shape()));
    }
    let d = signal.cols();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let si = signal.row(i);
        let oi = &mut out[i * d..(i + 1) * d];
        for (&j, &w) in graph.neighbors[i].iter().zip(&graph.weights[i]) {
            let sj = signal.row(j);
            for c in 0..d {
                oi[c] += w * (si[c] - sj[c]);
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Per-point high-frequency magnitude and the descending order it induces.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyScore {
    pub scores: Vec<f64>,
    /// Point indices by descending score; equal scores keep index order.
    pub order: Vec<usize>,
}

impl FrequencyScore {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        FrequencyScore { scores, order }
    }

    pub fn top(&self, m: usize) -> &[usize] {
        &self.order[..m.min(self.order.len())]
    }
}

/// Scores each point by the l2 norm of its filtered coordinates.
pub fn frequency_order(coords: &[Point], graph: &SpatialGraph) -> Result<FrequencyScore> {
    let signal = Tensor::from_parts(vec![coords.len(), 3], coords.iter().flatten().copied().collect());
    let filtered = high_pass_filter(graph, &signal)?;
    let scores = (0..coords.len())
        .map(|i| filtered.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(FrequencyScore::from_scores(scores))
}

/// `round(ζM)` with exact halves rounded down.
pub fn frequency_budget(m: usize, zeta: f64) -> usize {
    let x = zeta * m as f64;
    let f = x.floor();
    let k = if x - f > 0.5 { f + 1.0 } else { f };
    (k as usize).min(m)
}

/// Which branch of the sampler a timestep uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerBranch {
    /// `t <= tau`: high-pass top points plus FPS over the rest.
    Mixed,
    /// `t > tau`: plain farthest-point sampling.
    Fps,
}

pub fn sampler_branch(t: usize, tau: usize) -> SamplerBranch {
    if t <= tau {
        SamplerBranch::Mixed
    } else {
        SamplerBranch::Fps
    }
}

/// Selected indices plus how many came from the frequency ranking (they
/// come first in `indices`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSelection {
    pub indices: Vec<usize>,
    pub frequency_count: usize,
}

/// Time-variant latent point selection.
///
/// For `t <= tau` the `round(ζM)` highest-scoring points are taken, then
/// FPS picks the remaining `M - round(ζM)` from the other points, seeded
/// from the best-scoring selected point. For `t > tau`, or when the budget
/// rounds to zero, this is FPS from index 0. `graph` is only consulted on
/// the mixed branch.
pub fn time_variant_sample(
    coords: &[Point],
    m: usize,
    t: usize,
    tau: usize,
    zeta: f64,
    graph: Option<&SpatialGraph>,
) -> Result<LatentSelection> {
    time_variant_sample_seeded(coords, m, t, tau, zeta, graph, 0)
}

/// As [`time_variant_sample`] with the plain-FPS branch starting at
/// `seed_index` instead of 0.
pub fn time_variant_sample_seeded(
    coords: &[Point],
    m: usize,
    t: usize,
    tau: usize,
    zeta: f64,
    graph: Option<&SpatialGraph>,
    seed_index: usize,
) -> Result<LatentSelection> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("time_variant_sample: need 1 <= M <= N, got M={m}, N={n}")));
    }
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::invalid(format!("time_variant_sample: zeta must lie in [0, 1], got {zeta}")));
    }
    let budget = frequency_budget(m, zeta);
    if sampler_branch(t, tau) == SamplerBranch::Fps || budget == 0 {
        return Ok(LatentSelection {
            indices: farthest_point_sampling(coords, m, seed_index)?,
            frequency_count: 0,
        });
    }
    let graph = graph.ok_or_else(|| Error::invalid("time_variant_sample: mixed branch needs a graph"))?;
    if graph.len() != n {
        return Err(Error::shape("time_variant_sample", &[n], &[graph.len()]));
    }
    let freq = frequency_order(coords, graph)?;
    let mut indices = freq.top(budget).to_vec();
    let mut selected = vec![false; n];
    for &i in &indices {
        selected[i] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
    indices.extend(fps_over(coords, &rest, m - budget, &[freq.order[0]]));
    Ok(LatentSelection {
        indices,
        frequency_count: budget,
    })
}
