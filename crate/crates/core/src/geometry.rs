//! Point-cloud kernels: voxelization, trilinear queries, farthest-point
//! sampling and k-nearest neighbours.
//!
//! Voxel grids use a cell-centre convention: cell `i` of a resolution-`L`
//! axis covers `[i/L, (i+1)/L)` and has its centre at `(i + 0.5) / L`.
//! Coordinates equal to `1.0` fall into the last cell.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point>,
    /// Optional per-point feature rows `[N, d]`.
    pub features: Option<Tensor>,
    /// Optional per-point scalar channel (fourth XYZ column).
    pub scores: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("point cloud needs at least one point"));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: format!("coordinates of point {i}"),
            });
        }
        Ok(PointCloud {
            coords,
            features: None,
            scores: None,
        })
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.rows() != self.coords.len() {
            return Err(Error::shape("with_features", &[self.coords.len()], features.shape()));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.coords.iter().flatten().all(|v| (0.0..=1.0).contains(v))
    }

    /// Coordinates as an `[N, 3]` tensor.
    pub fn coords_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), 3], self.coords.iter().flatten().copied().collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.cols() != 3 {
            return Err(Error::invalid(format!("expected [N, 3] coordinates, got {:?}", t.shape())));
        }
        PointCloud::new(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// Affine map `x -> (x - center) * scale + 0.5` taking a cloud (or a whole
/// dataset) into the unit cube while preserving aspect ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitCubeTransform {
    pub center: Point,
    pub scale: f64,
}

impl UnitCubeTransform {
    /// Fits the tightest aspect-preserving box around all given points.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a Point>) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if !lo[0].is_finite() {
            return UnitCubeTransform {
                center: [0.5; 3],
                scale: 1.0,
            };
        }
        let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
        UnitCubeTransform { center, scale }
    }

    pub fn apply(&self, p: &Point) -> Point {
        [0, 1, 2].map(|a| ((p[a] - self.center[a]) * self.scale + 0.5).clamp(0.0, 1.0))
    }

    pub fn invert(&self, p: &Point) -> Point {
        [0, 1, 2].map(|a| (p[a] - 0.5) / self.scale + self.center[a])
    }
}

/// Per-cloud normalization into `[0,1]^3`.
pub fn normalize_to_unit_cube(coords: &[Point]) -> Vec<Point> {
    let tf = UnitCubeTransform::fit(coords);
    coords.iter().map(|p| tf.apply(p)).collect()
}

#[inline]
pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
fn cell_index(c: f64, resolution: usize) -> usize {
    ((c * resolution as f64).floor().max(0.0) as usize).min(resolution - 1)
}

/// Flat cell index `(m * L + p) * L + q` of a normalized point.
pub fn voxel_of(p: &Point, resolution: usize) -> usize {
    let [m, q, r] = p.map(|c| cell_index(c, resolution));
    (m * resolution + q) * resolution + r
}

/// Mean-pooled voxel features.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    /// Channel-first `[D, L, L, L]`.
    pub values: Tensor,
    /// Points per cell, `L^3` entries in the same cell order as `values`.
    pub counts: Vec<u32>,
}

impl VoxelGrid {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Feature vector stored in cell `(m, p, q)`.
    pub fn cell(&self, m: usize, p: usize, q: usize) -> Vec<f64> {
        let l = self.resolution;
        let cells = l * l * l;
        let idx = (m * l + p) * l + q;
        (0..self.channels()).map(|c| self.values.data()[c * cells + idx]).collect()
    }
}

fn check_normalized(coords: &[Point], what: &str) -> Result<()> {
    if let Some(i) = coords
        .iter()
        .position(|p| p.iter().any(|v| !(0.0..=1.0).contains(v)))
    {
        return Err(Error::invalid(format!(
            "{what}: point {i} at {:?} lies outside the unit cube",
            coords[i]
        )));
    }
    Ok(())
}

fn voxel_mean(coords: &[Point], features: &[f64], channels: usize, resolution: usize) -> (Vec<f64>, Vec<u32>, Vec<usize>) {
    let cells = resolution.pow(3);
    let mut sums = vec![0.0; channels * cells];
    let mut counts = vec![0u32; cells];
    let assignment: Vec<usize> = coords.iter().map(|p| voxel_of(p, resolution)).collect();
    for (i, &cell) in assignment.iter().enumerate() {
        counts[cell] += 1;
        for c in 0..channels {
            sums[c * cells + cell] += features[i * channels + c];
        }
    }
    for c in 0..channels {
        for cell in 0..cells {
            if counts[cell] > 0 {
                sums[c * cells + cell] /= counts[cell] as f64;
            }
        }
    }
    (sums, counts, assignment)
}

/// Averages point features into a resolution-`L` grid; empty cells are zero.
pub fn voxelize(pc: &PointCloud, resolution: usize) -> Result<VoxelGrid> {
    let features = pc
        .features
        .as_ref()
        .ok_or_else(|| Error::invalid("voxelize: point cloud has no features"))?;
    if resolution == 0 {
        return Err(Error::invalid("voxelize: resolution must be positive"));
    }
    check_normalized(&pc.coords, "voxelize")?;
    let channels = features.cols();
    let (values, counts, _) = voxel_mean(&pc.coords, features.data(), channels, resolution);
    let l = resolution;
    Ok(VoxelGrid {
        resolution,
        values: Tensor::from_parts(vec![channels, l, l, l], values),
        counts,
    })
}

/// Eight `(cell, weight)` pairs blending the cell-centre values around `q`.
fn trilinear_stencil(q: &Point, resolution: usize) -> [(usize, f64); 8] {
    let l = resolution;
    let mut lo = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        if l == 1 {
            continue;
        }
        let u = (q[a] * l as f64 - 0.5).clamp(0.0, (l - 1) as f64);
        let i0 = (u.floor() as usize).min(l - 2);
        lo[a] = i0;
        frac[a] = u - i0 as f64;
    }
    let mut out = [(0usize, 0.0f64); 8];
    for (corner, slot) in out.iter_mut().enumerate() {
        let mut idx = [0usize; 3];
        let mut w = 1.0;
        for a in 0..3 {
            let hi = (corner >> (2 - a)) & 1 == 1;
            idx[a] = if hi { (lo[a] + 1).min(l - 1) } else { lo[a] };
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        *slot = ((idx[0] * l + idx[1]) * l + idx[2], w);
    }
    out
}

/// Trilinear blend of cell-centre values at each query; returns `[M, D]`.
pub fn trilinear_query(grid: &VoxelGrid, queries: &[Point]) -> Result<Tensor> {
    check_normalized(queries, "trilinear_query")?;
    Ok(trilinear_values(grid.values.data(), grid.channels(), grid.resolution, queries))
}

fn trilinear_values(values: &[f64], channels: usize, resolution: usize, queries: &[Point]) -> Tensor {
    let cells = resolution.pow(3);
    let mut out = vec![0.0; queries.len() * channels];
    for (i, q) in queries.iter().enumerate() {
        let stencil = trilinear_stencil(q, resolution);
        for c in 0..channels {
            let plane = &values[c * cells..(c + 1) * cells];
            out[i * channels + c] = stencil.iter().map(|&(cell, w)| w * plane[cell]).sum();
        }
    }
    Tensor::from_parts(vec![queries.len(), channels], out)
}

impl Tape {
    /// Differentiable voxelization of `features[N, C]` placed at fixed
    /// normalized `coords`; returns `[C, L, L, L]`.
    pub fn voxelize(&mut self, features: Var, coords: &[Point], resolution: usize) -> Result<Var> {
        let f = self.value(features);
        if f.rank() != 2 || f.rows() != coords.len() {
            return Err(Error::shape("voxelize", f.shape(), &[coords.len(), 3]));
        }
        if resolution == 0 {
            return Err(Error::invalid("voxelize: resolution must be positive"));
        }
        check_normalized(coords, "voxelize")?;
        let channels = f.cols();
        let (values, counts, assignment) = voxel_mean(coords, f.data(), channels, resolution);
        let l = resolution;
        let cells = l * l * l;
        let value = Tensor::from_parts(vec![channels, l, l, l], values);
        let n = coords.len();
        Ok(self.record(
            &[features],
            value,
            Box::new(move |g, _, _, _| {
                let gs = g.data();
                let mut gf = vec![0.0; n * channels];
                for (i, &cell) in assignment.iter().enumerate() {
                    let inv = 1.0 / counts[cell] as f64;
                    for c in 0..channels {
                        gf[i * channels + c] = gs[c * cells + cell] * inv;
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, channels], gf))]
            }),
        ))
    }

    /// Differentiable trilinear query of a `[C, L, L, L]` volume; returns `[M, C]`.
    pub fn trilinear_query(&mut self, volume: Var, queries: &[Point]) -> Result<Var> {
        let shape = self.shape(volume).to_vec();
        if shape.len() != 4 || shape[1] != shape[2] || shape[2] != shape[3] {
            return Err(Error::invalid(format!("trilinear_query expects [C, L, L, L], got {shape:?}")));
        }
        check_normalized(queries, "trilinear_query")?;
        let (channels, l) = (shape[0], shape[1]);
        let value = trilinear_values(self.value(volume).data(), channels, l, queries);
        let stencils: Vec<[(usize, f64); 8]> = queries.iter().map(|q| trilinear_stencil(q, l)).collect();
        let cells = l * l * l;
        Ok(self.record(
            &[volume],
            value,
            Box::new(move |g, _, _, _| {
                let mut gv = vec![0.0; channels * cells];
                for (i, st) in stencils.iter().enumerate() {
                    for c in 0..channels {
                        let gi = g.data()[i * channels + c];
                        if gi == 0.0 {
                            continue;
                        }
                        for &(cell, w) in st {
                            gv[c * cells + cell] += w * gi;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gv))]
            }),
        ))
    }
}

/// Greedy max-min selection of `count` points from `candidates`.
///
/// Distances start as the minimum over `anchors` (already-chosen points that
/// are not themselves returned). Without anchors the first pick is
/// `candidates[0]`. Ties go to the lowest point index.
pub(crate) fn fps_over(coords: &[Point], candidates: &[usize], count: usize, anchors: &[usize]) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(count);
    if count == 0 || candidates.is_empty() {
        return chosen;
    }
    let mut dist: Vec<f64> = candidates
        .iter()
        .map(|&c| {
            anchors
                .iter()
                .map(|&a| squared_distance(&coords[c], &coords[a]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; candidates.len()];
    let mut next = if anchors.is_empty() { Some(0) } else { None };
    while chosen.len() < count.min(candidates.len()) {
        let pick = match next.take() {
            Some(p) => p,
            None => {
                let mut best: Option<usize> = None;
                for (j, &d) in dist.iter().enumerate() {
                    if taken[j] {
                        continue;
                    }
                    match best {
                        None => best = Some(j),
                        Some(b) => {
                            let (db, ib) = (dist[b], candidates[b]);
                            if d > db || (d == db && candidates[j] < ib) {
                                best = Some(j);
                            }
                        }
                    }
                }
                best.expect("fewer chosen than candidates")
            }
        };
        taken[pick] = true;
        let p = coords[candidates[pick]];
        chosen.push(candidates[pick]);
        for (j, d) in dist.iter_mut().enumerate() {
            if !taken[j] {
                *d = d.min(squared_distance(&coords[candidates[j]], &p));
            }
        }
    }
    chosen
}

/// Farthest-point sampling of `m` indices starting at `seed_index`.
pub fn farthest_point_sampling(coords: &[Point], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("farthest_point_sampling: need 1 <= M <= N, got M={m}, N={n}")));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!("farthest_point_sampling: seed {seed_index} out of {n} points")));
    }
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    candidates.push(seed_index);
    candidates.extend((0..n).filter(|&i| i != seed_index));
    Ok(fps_over(coords, &candidates, m, &[]))
}

/// Indices and squared distances of the `k` nearest other points, sorted by
/// (distance, index).
pub fn knn_with_distances(coords: &[Point], k: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    let n = coords.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("knn: need 1 <= k <= N-1, got k={k}, N={n}")));
    }
    let mut idx_rows = Vec::with_capacity(n);
    let mut dist_rows = Vec::with_capacity(n);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        scratch.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(&coords[i], &coords[j]), j)),
        );
        let by_dist_then_index = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, by_dist_then_index);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(by_dist_then_index);
        idx_rows.push(scratch.iter().map(|&(_, j)| j).collect());
        dist_rows.push(scratch.iter().map(|&(d, _)| d).collect());
    }
    Ok((idx_rows, dist_rows))
}

/// `k` nearest neighbours of every point (self excluded).
pub fn knn(coords: &[Point], k: usize) -> Result<Vec<Vec<usize>>> {
    knn_with_distances(coords, k).map(|(idx, _)| idx)
}
