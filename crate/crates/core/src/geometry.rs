//! Exact, deterministic geometric primitives on small point sets.
//!
//! Everything here is brute force. Ties are always broken by the lower point
//! index, which is what makes the encoder a set function of its input.

use std::cmp::Ordering;

use thiserror::Error;

use crate::tensor::Tensor;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("k = {k} is invalid for {n} points")]
    BadK { k: usize, n: usize },
    #[error("m = {m} is invalid for {n} points")]
    BadM { m: usize, n: usize },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("no source points to interpolate from")]
    EmptySource,
    #[error("feature rows ({rows}) do not match source points ({points})")]
    FeatureMismatch { rows: usize, points: usize },
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.map(|v| v / n)
}

/// Exact k-nearest neighbours of every point among the other points.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    pub k: usize,
    /// Row-major `N x k`.
    pub indices: Vec<usize>,
    /// Row-major `N x k`, ascending per row.
    pub distances: Vec<f64>,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

/// The `k` smallest `(squared distance, index)` pairs, ascending.
fn k_smallest(mut cand: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand
}

/// k nearest neighbours of each point, excluding the point itself.
pub fn knn(points: &[Point3], k: usize) -> Result<NeighborIndex, GeometryError> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(GeometryError::BadK { k, n });
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (i, p) in points.iter().enumerate() {
        let cand = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| (dist2(p, q), j))
            .collect();
        for (d2, j) in k_smallest(cand, k) {
            indices.push(j);
            distances.push(d2.sqrt());
        }
    }
    Ok(NeighborIndex { k, indices, distances })
}

/// k nearest sources of each query. A query that coincides with a source
/// finds it at distance zero.
pub fn knn_query(sources: &[Point3], queries: &[Point3], k: usize) -> Result<NeighborIndex, GeometryError> {
    let n = sources.len();
    if k == 0 || k > n {
        return Err(GeometryError::BadK { k, n });
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut distances = Vec::with_capacity(queries.len() * k);
    for q in queries {
        let cand = sources.iter().enumerate().map(|(j, s)| (dist2(q, s), j)).collect();
        for (d2, j) in k_smallest(cand, k) {
            indices.push(j);
            distances.push(d2.sqrt());
        }
    }
    Ok(NeighborIndex { k, indices, distances })
}

/// For every point of `from`, its nearest point in `to` and the distance.
/// Ties go to the lower index.
pub fn nearest_neighbors(from: &[Point3], to: &[Point3]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (j, q) in to.iter().enumerate() {
                let d = dist2(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

fn lexicographic(a: &Point3, b: &Point3) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Farthest point sampling.
///
/// Starts from the point nearest the centroid (ties: lexicographically
/// smallest coordinates, then lowest index), then repeatedly adds the point
/// farthest from the selected set (ties: lowest index). Indices are returned
/// in selection order.
pub fn fps(points: &[Point3], m: usize) -> Result<Vec<usize>, GeometryError> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(GeometryError::BadM { m, n });
    }
    let c = centroid(points);
    let mut start = 0;
    let mut best = dist2(&points[0], &c);
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = dist2(p, &c);
        let better = match d.total_cmp(&best) {
            Ordering::Less => true,
            Ordering::Equal => lexicographic(p, &points[start]) == Ordering::Less,
            Ordering::Greater => false,
        };
        if better {
            start = i;
            best = d;
        }
    }
    let mut selected = Vec::with_capacity(m);
    selected.push(start);
    let mut min_d: Vec<f64> = points.iter().map(|p| dist2(p, &points[start])).collect();
    min_d[start] = f64::NEG_INFINITY;
    while selected.len() < m {
        let mut pick = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > far {
                far = d;
                pick = i;
            }
        }
        selected.push(pick);
        min_d[pick] = f64::NEG_INFINITY;
        let p = points[pick];
        for (i, q) in points.iter().enumerate() {
            if min_d[i] != f64::NEG_INFINITY {
                min_d[i] = min_d[i].min(dist2(q, &p));
            }
        }
    }
    Ok(selected)
}

/// Per-point graph-frequency response.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyScores {
    pub scores: Vec<f64>,
    pub k_graph: usize,
}

/// Scores each point by the magnitude of the normalized graph Laplacian
/// applied to the coordinates: `score_i = |(L X)_i|`.
///
/// The graph is the symmetrized binary kNN graph and
/// `L = I - D^{-1/2} A D^{-1/2}`. Coordinates are centred on the centroid
/// before the product, which makes the score invariant to rigid motions even
/// where vertex degrees differ (`L 1 != 0` on irregular graphs).
pub fn laplacian_scores(points: &[Point3], k_graph: usize) -> Result<FrequencyScores, GeometryError> {
    let nbrs = knn(points, k_graph)?;
    let n = points.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::with_capacity(k_graph * 2); n];
    for i in 0..n {
        for &j in nbrs.row(i) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for row in &mut adj {
        row.sort_unstable();
        row.dedup();
    }
    let c = centroid(points);
    let x: Vec<Point3> = points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let deg: Vec<f64> = adj.iter().map(|r| r.len() as f64).collect();
    let scores = (0..n)
        .map(|i| {
            if deg[i] == 0.0 {
                return 0.0;
            }
            let mut r = x[i];
            for &j in &adj[i] {
                let w = 1.0 / (deg[i] * deg[j]).sqrt();
                for a in 0..3 {
                    r[a] -= w * x[j][a];
                }
            }
            (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
        })
        .collect();
    Ok(FrequencyScores { scores, k_graph })
}

/// Two-directional Chamfer distance with non-squared Euclidean norms.
pub fn chamfer(p: &[Point3], q: &[Point3]) -> Result<f64, GeometryError> {
    if p.is_empty() || q.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let a: f64 = nearest_neighbors(p, q).iter().map(|x| x.1).sum();
    let b: f64 = nearest_neighbors(q, p).iter().map(|x| x.1).sum();
    Ok(a + b)
}

pub const IDW_EPS: f64 = 1e-8;
const COINCIDENT: f64 = 1e-12;

/// Normalized inverse-distance weights from a source set to query points.
///
/// `w_i = 1 / (d_i + 1e-8)` over the `k` nearest sources; a query within
/// `1e-12` of a source copies that source exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct IdwWeights {
    sources: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl IdwWeights {
    pub fn new(sources: &[Point3], queries: &[Point3], k: usize) -> Result<Self, GeometryError> {
        if sources.is_empty() {
            return Err(GeometryError::EmptySource);
        }
        let nbrs = knn_query(sources, queries, k)?;
        let rows = (0..queries.len())
            .map(|q| {
                let idx = nbrs.row(q);
                let d = nbrs.row_distances(q);
                if d[0] < COINCIDENT {
                    return vec![(idx[0], 1.0)];
                }
                let w: Vec<f64> = d.iter().map(|d| 1.0 / (d + IDW_EPS)).collect();
                let total: f64 = w.iter().sum();
                idx.iter().zip(w).map(|(&i, w)| (i, w / total)).collect()
            })
            .collect();
        Ok(IdwWeights {
            sources: sources.len(),
            rows,
        })
    }

    pub fn source_count(&self) -> usize {
        self.sources
    }

    pub fn query_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, q: usize) -> &[(usize, f64)] {
        &self.rows[q]
    }

    /// Interpolates row-major source features with `c` channels.
    pub fn apply(&self, feats: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * c];
        for (q, row) in self.rows.iter().enumerate() {
            let dst = &mut out[q * c..(q + 1) * c];
            for &(s, w) in row {
                for (o, f) in dst.iter_mut().zip(&feats[s * c..(s + 1) * c]) {
                    *o += w * f;
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): scatters query gradients back to
    /// the sources.
    pub fn apply_transpose(&self, grad: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.sources * c];
        for (q, row) in self.rows.iter().enumerate() {
            let g = &grad[q * c..(q + 1) * c];
            for &(s, w) in row {
                for (o, gv) in out[s * c..(s + 1) * c].iter_mut().zip(g) {
                    *o += w * gv;
                }
            }
        }
        out
    }
}

/// Inverse-distance weighted interpolation of `src_features` (one row per
/// source point) at the query points.
pub fn interpolate_idw(
    src_points: &[Point3],
    src_features: &Tensor,
    query_points: &[Point3],
    k: usize,
) -> Result<Tensor, GeometryError> {
    if src_points.is_empty() {
        return Err(GeometryError::EmptySource);
    }
    if src_features.rows() != src_points.len() {
        return Err(GeometryError::FeatureMismatch {
            rows: src_features.rows(),
            points: src_points.len(),
        });
    }
    let w = IdwWeights::new(src_points, query_points, k)?;
    let c = src_features.cols();
    Ok(Tensor::matrix(query_points.len(), c, w.apply(src_features.data(), c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    fn line(n: usize) -> Vec<Point3> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    /// Brute force: sort all other points by (distance, index).
    fn knn_oracle(points: &[Point3], k: usize) -> Vec<Vec<usize>> {
        (0..points.len())
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| (dist(&points[i], &points[j]), j))
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                all.into_iter().take(k).map(|x| x.1).collect()
            })
            .collect()
    }

    #[test]
    fn knn_on_a_line_breaks_ties_low() {
        let nb = knn(&line(4), 1).unwrap();
        assert_eq!(nb.indices, vec![1, 0, 1, 2]);
        assert_eq!(knn_oracle(&line(4), 1).concat(), nb.indices);
    }

    #[test]
    fn knn_exhaustive_rows_are_permutations() {
        let pts = random_cloud(9, 3);
        let nb = knn(&pts, 8).unwrap();
        for i in 0..9 {
            let mut row = nb.row(i).to_vec();
            row.sort_unstable();
            let expected: Vec<usize> = (0..9).filter(|&j| j != i).collect();
            assert_eq!(row, expected);
        }
    }

    #[test]
    fn knn_rejects_bad_k() {
        assert_eq!(knn(&line(4), 0), Err(GeometryError::BadK { k: 0, n: 4 }));
        assert_eq!(knn(&line(4), 4), Err(GeometryError::BadK { k: 4, n: 4 }));
    }

    #[test]
    fn knn_matches_oracle() {
        for seed in 0..10 {
            let pts = random_cloud(40, seed);
            let nb = knn(&pts, 6).unwrap();
            assert_eq!(nb.indices, knn_oracle(&pts, 6).concat());
            for i in 0..40 {
                assert!(nb.row_distances(i).windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn fps_on_a_line() {
        // centroid 3.5: x=3 and x=4 tie, lexicographic order picks x=3; the
        // farthest point from it is x=7
        assert_eq!(fps(&line(8), 2).unwrap(), vec![3, 7]);
        let all = fps(&line(8), 8).unwrap();
        assert_eq!(all[0], 3);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn fps_square_corner_tie() {
        let sq = [[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(fps(&sq, 1).unwrap(), vec![3]);
    }

    #[test]
    fn fps_rejects_bad_m() {
        assert_eq!(fps(&line(3), 0), Err(GeometryError::BadM { m: 0, n: 3 }));
        assert_eq!(fps(&line(3), 4), Err(GeometryError::BadM { m: 4, n: 3 }));
    }

    /// Greedy max-min by explicit enumeration of all candidate distances.
    fn fps_oracle(points: &[Point3], m: usize) -> Vec<usize> {
        let c = centroid(points);
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            dist2(&points[a], &c)
                .partial_cmp(&dist2(&points[b], &c))
                .unwrap()
                .then(lexicographic(&points[a], &points[b]))
                .then(a.cmp(&b))
        });
        let mut sel = vec![order[0]];
        while sel.len() < m {
            let next = (0..points.len())
                .filter(|i| !sel.contains(i))
                .map(|i| {
                    let d = sel.iter().map(|&s| dist(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
                    (d, i)
                })
                .fold((f64::NEG_INFINITY, usize::MAX), |best, x| if x.0 > best.0 { x } else { best });
            sel.push(next.1);
        }
        sel
    }

    #[test]
    fn fps_matches_enumeration() {
        for seed in 0..10 {
            let pts = random_cloud(30, seed + 100);
            assert_eq!(fps(&pts, 12).unwrap(), fps_oracle(&pts, 12));
        }
    }

    /// Dense Laplacian multiply on centred coordinates.
    fn laplacian_oracle(points: &[Point3], k: usize) -> Vec<f64> {
        let n = points.len();
        let nb = knn_oracle(points, k);
        let mut a = vec![vec![0.0; n]; n];
        for (i, row) in nb.iter().enumerate() {
            for &j in row {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
        let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let c = centroid(points);
        (0..n)
            .map(|i| {
                let mut r = [0.0; 3];
                for j in 0..n {
                    let l = if i == j { 1.0 } else { 0.0 } - a[i][j] / (d[i] * d[j]).sqrt();
                    for ax in 0..3 {
                        r[ax] += l * (points[j][ax] - c[ax]);
                    }
                }
                (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
            })
            .collect()
    }

    fn grid(nx: usize, ny: usize) -> Vec<Point3> {
        let mut pts = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                pts.push([x as f64, y as f64, 0.0]);
            }
        }
        pts
    }

    #[test]
    fn grid_interior_scores_vanish() {
        let pts = grid(13, 13);
        let s = laplacian_scores(&pts, 8).unwrap();
        let oracle = laplacian_oracle(&pts, 8);
        for (a, b) in s.scores.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // border points reach two cells inwards when picking their 8
        // neighbours, so degrees are uniform only from the fourth ring on
        for y in 4..9 {
            for x in 4..9 {
                assert!(s.scores[y * 13 + x] < 1e-12, "({x},{y}) = {}", s.scores[y * 13 + x]);
            }
        }
    }

    #[test]
    fn spike_has_the_largest_score() {
        let (pts, spike) = crate::fixtures::plane_with_spike();
        let s = laplacian_scores(&pts, 8).unwrap();
        let oracle = laplacian_oracle(&pts, 8);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&oracle), spike);
        assert_eq!(argmax(&s.scores), spike);
    }

    #[test]
    fn tetrahedron_scores_are_equal() {
        let tet = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        let s = laplacian_scores(&tet, 3).unwrap();
        for v in &s.scores {
            assert!((v - s.scores[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn chamfer_cases() {
        let p = random_cloud(10, 1);
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert_eq!(chamfer(&[], &p), Err(GeometryError::EmptyCloud));
    }

    #[test]
    fn chamfer_matches_double_loop() {
        for seed in 0..50 {
            let p = random_cloud(32, 2 * seed);
            let q = random_cloud(32, 2 * seed + 1);
            let mut oracle = 0.0;
            for a in &p {
                oracle += q.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min);
            }
            for b in &q {
                oracle += p.iter().map(|a| dist(a, b)).fold(f64::INFINITY, f64::min);
            }
            let got = chamfer(&p, &q).unwrap();
            assert!((got - oracle).abs() <= 1e-12 * oracle, "{got} vs {oracle}");
        }
    }

    #[test]
    fn idw_cases() {
        let src = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let f = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let exact = interpolate_idw(&src, &f, &[[1.0, 0.0, 0.0]], 3).unwrap();
        assert_eq!(exact.data(), &[3.0, 4.0]);

        let same = Tensor::matrix(2, 1, vec![0.7, 0.7]);
        let mid = interpolate_idw(&src[..2], &same, &[[0.5, 0.0, 0.0]], 2).unwrap();
        assert!((mid.data()[0] - 0.7).abs() < 1e-12);

        // weights 1/0.25 = 4 and 1/0.75 = 4/3
        let ramp = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let q = interpolate_idw(&src[..2], &ramp, &[[0.25, 0.0, 0.0]], 2).unwrap();
        let hand = (4.0 * 0.0 + (4.0 / 3.0) * 1.0) / (4.0 + 4.0 / 3.0);
        assert!((q.data()[0] - hand).abs() < 1e-6);
        assert!((q.data()[0] - 0.25).abs() < 1e-6);

        assert_eq!(
            interpolate_idw(&[], &Tensor::zeros(&[0, 1]), &[[0.0; 3]], 1),
            Err(GeometryError::EmptySource)
        );
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(seed in 0u64..1000, n in 1usize..20, m in 1usize..20) {
            let p = random_cloud(n, seed);
            let q = random_cloud(m, seed + 7);
            prop_assert_eq!(chamfer(&p, &q).unwrap(), chamfer(&q, &p).unwrap());
        }

        #[test]
        fn fps_output_is_distinct(seed in 0u64..1000, n in 2usize..40) {
            let p = random_cloud(n, seed);
            let mut s = fps(&p, n / 2 + 1).unwrap();
            s.sort_unstable();
            s.dedup();
            prop_assert_eq!(s.len(), n / 2 + 1);
        }

        #[test]
        fn idw_stays_in_feature_hull(seed in 0u64..1000) {
            let src = random_cloud(12, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::matrix(12, 1, (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let q = random_cloud(20, seed + 1);
            let w = IdwWeights::new(&src, &q, 3).unwrap();
            let out = w.apply(f.data(), 1);
            for (qi, v) in out.iter().enumerate() {
                let vals: Vec<f64> = w.row(qi).iter().map(|&(s, _)| f.data()[s]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
            }
        }

        #[test]
        fn scores_survive_rigid_motion(seed in 0u64..200, angle in 0.0f64..std::f64::consts::TAU, t in -3.0f64..3.0) {
            let p = random_cloud(40, seed);
            let (s, c) = angle.sin_cos();
            let moved: Vec<Point3> = p.iter().map(|q| [c * q[0] - s * q[1] + t, s * q[0] + c * q[1] - t, q[2] + 0.5 * t]).collect();
            let a = laplacian_scores(&p, 8).unwrap();
            let b = laplacian_scores(&moved, 8).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
