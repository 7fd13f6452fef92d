//! Generative evaluation metrics over sets of point clouds.
//!
//! CD is the sum of both directed mean *squared* nearest-neighbour
//! distances. EMD is the mean *Euclidean* distance under the optimal
//! bijection. All percentages are in `[0, 100]`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{squared_distance, Point};

fn nearest_sq(p: &Point, ys: &[Point]) -> f64 {
    ys.iter().map(|q| squared_distance(p, q)).fold(f64::INFINITY, f64::min)
}

/// Chamfer distance; both clouds must be non-empty.
pub fn chamfer(x: &[Point], y: &[Point]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("chamfer distance of an empty cloud"));
    }
    let fwd: f64 = x.iter().map(|p| nearest_sq(p, y)).sum::<f64>() / x.len() as f64;
    let bwd: f64 = y.iter().map(|q| nearest_sq(q, x)).sum::<f64>() / y.len() as f64;
    Ok(fwd + bwd)
}

fn check_pair(x: &[Point], y: &[Point]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("EMD needs equal sizes, got {} and {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::invalid("EMD of empty clouds"));
    }
    Ok(())
}

fn cost_matrix(x: &[Point], y: &[Point]) -> Vec<f64> {
    x.iter().flat_map(|p| y.iter().map(move |q| squared_distance(p, q).sqrt())).collect()
}

/// Minimum-cost perfect matching of a square `n × n` matrix (Hungarian
/// method with potentials, `O(n^3)`). Returns `assign[row] = col`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; column 0 is a virtual start.
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let (mut delta, mut j1) = (f64::INFINITY, 0);
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    assign
}

fn matched_mean(cost: &[f64], n: usize, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64
}

/// Largest size accepted by [`emd_exact`].
pub const EXACT_EMD_MAX: usize = 512;

/// Exact EMD via optimal assignment.
pub fn emd_exact(x: &[Point], y: &[Point]) -> Result<f64> {
    check_pair(x, y)?;
    if x.len() > EXACT_EMD_MAX {
        return Err(Error::invalid(format!("exact EMD is limited to {EXACT_EMD_MAX} points, got {}", x.len())));
    }
    let n = x.len();
    let cost = cost_matrix(x, y);
    Ok(matched_mean(&cost, n, &hungarian(&cost, n)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuctionOptions {
    /// Final bidding increment relative to the largest cost.
    pub final_eps: f64,
    /// Cap on bids across all scales.
    pub max_iterations: usize,
}

impl Default for AuctionOptions {
    fn default() -> Self {
        AuctionOptions {
            final_eps: 1e-6,
            max_iterations: 50_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuctionResult {
    /// Mean matched distance.
    pub cost: f64,
    /// The exact EMD lies in `[cost - gap, cost]`.
    pub gap: f64,
}

/// Auction assignment with ε-scaling (`ε₀ = max cost / 8`, divided by 4
/// per scale). The final matching is within `n·ε` of optimal in total
/// cost, so within `ε` in mean.
pub fn emd_approx(x: &[Point], y: &[Point], opts: &AuctionOptions) -> Result<AuctionResult> {
    check_pair(x, y)?;
    let n = x.len();
    let cost = cost_matrix(x, y);
    let cmax = cost.iter().fold(0.0, |a: f64, &b| a.max(b));
    if cmax == 0.0 {
        return Ok(AuctionResult { cost: 0.0, gap: 0.0 });
    }
    let final_eps = (opts.final_eps * cmax).max(f64::MIN_POSITIVE);
    let mut eps = cmax / 8.0;
    let mut price = vec![0.0; n];
    let mut bids = 0usize;
    let mut owner: Vec<Option<usize>>;
    let mut assign: Vec<Option<usize>>;
    loop {
        eps = eps.max(final_eps);
        owner = vec![None; n];
        assign = vec![None; n];
        let mut free: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = free.pop() {
            bids += 1;
            if bids > opts.max_iterations {
                return Err(Error::NonConvergence {
                    iterations: opts.max_iterations,
                    gap: n as f64 * eps,
                });
            }
            let row = &cost[i * n..(i + 1) * n];
            // Best and second-best value `-cost - price`.
            let (mut best, mut second, mut bj) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for j in 0..n {
                let val = -row[j] - price[j];
                if val > best {
                    second = best;
                    best = val;
                    bj = j;
                } else if val > second {
                    second = val;
                }
            }
            let raise = if second.is_finite() { best - second + eps } else { eps };
            price[bj] += raise;
            if let Some(prev) = owner[bj].replace(i) {
                assign[prev] = None;
                free.push(prev);
            }
            assign[i] = Some(bj);
        }
        if eps <= final_eps {
            break;
        }
        eps /= 4.0;
    }
    let assign: Vec<usize> = assign.into_iter().map(|a| a.expect("auction ends with a full matching")).collect();
    Ok(AuctionResult {
        cost: matched_mean(&cost, n, &assign),
        gap: eps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    Chamfer,
    Emd,
}

/// `rows × cols` table of cloud-to-cloud distances.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseDistanceTable {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl PairwiseDistanceTable {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// EMD that switches to the auction solver above `exact_max` points.
pub fn emd(x: &[Point], y: &[Point], exact_max: usize) -> Result<f64> {
    if x.len() <= exact_max.min(EXACT_EMD_MAX) {
        emd_exact(x, y)
    } else {
        Ok(emd_approx(x, y, &AuctionOptions::default())?.cost)
    }
}

pub fn cloud_distance(x: &[Point], y: &[Point], kind: DistanceKind, exact_max: usize) -> Result<f64> {
    match kind {
        DistanceKind::Chamfer => chamfer(x, y),
        DistanceKind::Emd => emd(x, y, exact_max),
    }
}

pub fn distance_table(a: &[Vec<Point>], b: &[Vec<Point>], kind: DistanceKind, exact_max: usize) -> Result<PairwiseDistanceTable> {
    let values = (0..a.len() * b.len())
        .into_par_iter()
        .map(|k| cloud_distance(&a[k / b.len()], &b[k % b.len()], kind, exact_max))
        .collect::<Result<Vec<f64>>>()?;
    Ok(PairwiseDistanceTable {
        rows: a.len(),
        cols: b.len(),
        values,
    })
}

/// Leave-one-out 1-NN accuracy (percent) given the three blocks of the
/// pooled distance matrix. Pooled order is generated clouds first; ties go
/// to the lower pooled index.
pub fn one_nna_from_tables(gg: &PairwiseDistanceTable, gr: &PairwiseDistanceTable, rr: &PairwiseDistanceTable) -> Result<f64> {
    let (g, r) = (gr.rows, gr.cols);
    if g == 0 || r == 0 || gg.rows != g || gg.cols != g || rr.rows != r || rr.cols != r {
        return Err(Error::invalid("1-NNA needs non-empty sets and consistent tables"));
    }
    let dist = |i: usize, j: usize| match (i < g, j < g) {
        (true, true) => gg.get(i, j),
        (true, false) => gr.get(i, j - g),
        (false, true) => gr.get(j, i - g),
        (false, false) => rr.get(i - g, j - g),
    };
    let total = g + r;
    let mut correct = 0usize;
    for i in 0..total {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in (0..total).filter(|&j| j != i) {
            let d = dist(i, j);
            if d < best.0 {
                best = (d, j);
            }
        }
        if (best.1 < g) == (i < g) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / total as f64)
}

pub fn one_nna(gen: &[Vec<Point>], refs: &[Vec<Point>], kind: DistanceKind, exact_max: usize) -> Result<f64> {
    let gg = distance_table(gen, gen, kind, exact_max)?;
    let gr = distance_table(gen, refs, kind, exact_max)?;
    let rr = distance_table(refs, refs, kind, exact_max)?;
    one_nna_from_tables(&gg, &gr, &rr)
}

/// `|x - 50|`.
pub fn one_nna_abs50(x: f64) -> f64 {
    (x - 50.0).abs()
}

/// Percentage of reference clouds that are the nearest match (lowest
/// index on ties) of at least one generated cloud.
pub fn coverage_from_table(gr: &PairwiseDistanceTable) -> Result<f64> {
    if gr.rows == 0 || gr.cols == 0 {
        return Err(Error::invalid("coverage needs non-empty sets"));
    }
    let mut hit = vec![false; gr.cols];
    for i in 0..gr.rows {
        let mut best = (f64::INFINITY, 0);
        for j in 0..gr.cols {
            if gr.get(i, j) < best.0 {
                best = (gr.get(i, j), j);
            }
        }
        hit[best.1] = true;
    }
    Ok(100.0 * hit.iter().filter(|&&h| h).count() as f64 / gr.cols as f64)
}

pub fn coverage(gen: &[Vec<Point>], refs: &[Vec<Point>], kind: DistanceKind, exact_max: usize) -> Result<f64> {
    coverage_from_table(&distance_table(gen, refs, kind, exact_max)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub cd_1nna: f64,
    pub emd_1nna: f64,
    pub cd_1nna_abs50: f64,
    pub emd_1nna_abs50: f64,
    pub cov_cd: f64,
    pub cov_emd: f64,
}

impl MetricReport {
    pub fn evaluate(gen: &[Vec<Point>], refs: &[Vec<Point>], exact_max: usize) -> Result<Self> {
        let mut out = [[0.0; 2]; 2];
        for (slot, kind) in [DistanceKind::Chamfer, DistanceKind::Emd].into_iter().enumerate() {
            let gg = distance_table(gen, gen, kind, exact_max)?;
            let gr = distance_table(gen, refs, kind, exact_max)?;
            let rr = distance_table(refs, refs, kind, exact_max)?;
            out[slot] = [one_nna_from_tables(&gg, &gr, &rr)?, coverage_from_table(&gr)?];
        }
        Ok(MetricReport {
            cd_1nna: out[0][0],
            emd_1nna: out[1][0],
            cd_1nna_abs50: one_nna_abs50(out[0][0]),
            emd_1nna_abs50: one_nna_abs50(out[1][0]),
            cov_cd: out[0][1],
            cov_emd: out[1][1],
        })
    }

    fn rows(&self) -> [(&'static str, f64, f64); 3] {
        [
            ("1-NNA", self.cd_1nna, self.emd_1nna),
            ("1-NNA-Abs50", self.cd_1nna_abs50, self.emd_1nna_abs50),
            ("COV", self.cov_cd, self.cov_emd),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>8}\n", "metric (%)", "CD", "EMD");
        for (name, cd, emd) in self.rows() {
            writeln!(s, "{name:<12} {cd:>8.2} {emd:>8.2}").expect("string write");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,cd,emd\n");
        for (name, cd, emd) in self.rows() {
            writeln!(s, "{name},{cd:.6},{emd:.6}").expect("string write");
        }
        s
    }
}
