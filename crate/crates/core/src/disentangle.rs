//! Contour/content split by graph-frequency score, and the perturbations
//! applied to build the assistant-branch input.
//!
//! Every perturbation lays its output out in score order: contour points
//! (highest score first), then content points (highest first), then the
//! median point that an odd-sized cloud leaves out of the split. Noise is
//! drawn in that row order, three coordinates at a time, so jittering the
//! top `M` rows is bit-for-bit the default manner and jittering every row is
//! bit-for-bit "jitter all".

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{dist2, laplacian_scores, FrequencyScores, GeometryError, Point3};

#[derive(Debug, Error, PartialEq)]
pub enum DisentangleError {
    #[error("need at least 4 points to split, got {0}")]
    TooFewPoints(usize),
    #[error("perturbation removed every point")]
    EmptyResult,
    #[error("jitter count {count} exceeds the {n} points of the cloud")]
    BadCount { count: usize, n: usize },
    #[error("noise standard deviation must be finite and non-negative, got {0}")]
    BadStd(f64),
    #[error("scorer returned {got} scores (some possibly non-finite) for {n} points")]
    BadScores { got: usize, n: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = DisentangleError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledCloud {
    pub source: PointCloud,
    /// The `M` highest-scoring points, highest first.
    pub contour_idx: Vec<usize>,
    /// The `M` lowest-scoring points, highest first.
    pub content_idx: Vec<usize>,
    /// Median-score point left out when `N` is odd.
    pub dropped: Option<usize>,
    pub scores: FrequencyScores,
}

impl DisentangledCloud {
    /// Half size `M`.
    pub fn half(&self) -> usize {
        self.contour_idx.len()
    }

    /// Source indices in output row order: contour, content, dropped.
    pub fn ranked(&self) -> Vec<usize> {
        let mut r = Vec::with_capacity(self.source.len());
        r.extend_from_slice(&self.contour_idx);
        r.extend_from_slice(&self.content_idx);
        r.extend(self.dropped);
        r
    }

    pub fn contour_points(&self) -> Vec<Point3> {
        self.contour_idx.iter().map(|&i| self.source.points()[i]).collect()
    }

    pub fn content_points(&self) -> Vec<Point3> {
        self.content_idx.iter().map(|&i| self.source.points()[i]).collect()
    }
}

/// Assigns every point a graph-frequency score; higher means more contour.
pub trait FrequencyScorer {
    fn score(&self, points: &[Point3]) -> Result<FrequencyScores, GeometryError>;
}

/// The default scorer: `|(L X)_i|` on the normalized kNN Laplacian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LaplacianResidual {
    pub k_graph: usize,
}

impl FrequencyScorer for LaplacianResidual {
    fn score(&self, points: &[Point3]) -> Result<FrequencyScores, GeometryError> {
        laplacian_scores(points, self.k_graph)
    }
}

impl<F> FrequencyScorer for F
where
    F: Fn(&[Point3]) -> Result<FrequencyScores, GeometryError>,
{
    fn score(&self, points: &[Point3]) -> Result<FrequencyScores, GeometryError> {
        self(points)
    }
}

/// Splits the cloud into its high-frequency (contour) and low-frequency
/// (content) halves. Ties in score go to the lower index.
pub fn disentangle(cloud: &PointCloud, k_graph: usize) -> Result<DisentangledCloud> {
    disentangle_with(cloud, &LaplacianResidual { k_graph })
}

/// [`disentangle`] with a caller-supplied scorer.
pub fn disentangle_with(cloud: &PointCloud, scorer: &dyn FrequencyScorer) -> Result<DisentangledCloud> {
    let n = cloud.len();
    if n < 4 {
        return Err(DisentangleError::TooFewPoints(n));
    }
    let scores = scorer.score(cloud.points())?;
    if scores.scores.len() != n || scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(DisentangleError::BadScores { got: scores.scores.len(), n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    let m = n / 2;
    let (contour_idx, dropped, content_idx) = if n.is_multiple_of(2) {
        (order[..m].to_vec(), None, order[m..].to_vec())
    } else {
        (order[..m].to_vec(), Some(order[m]), order[m + 1..].to_vec())
    };
    Ok(DisentangledCloud {
        source: cloud.clone(),
        contour_idx,
        content_idx,
        dropped,
        scores,
    })
}

/// The nine perturbation manners, named by their ablation letter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Manner {
    /// Delete one of four spatial clusters, picked at random.
    A,
    /// Delete content points.
    B,
    /// Delete contour points.
    C,
    /// Delete contour or content points, picked at random.
    D,
    /// Jitter every point.
    E,
    /// Jitter one of four spatial clusters, picked at random.
    F,
    /// Jitter content points.
    G,
    /// Jitter contour points (the default augmentation).
    H,
    /// Jitter contour or content points, picked at random.
    I,
}

impl Manner {
    pub const ALL: [Manner; 9] = [
        Manner::A,
        Manner::B,
        Manner::C,
        Manner::D,
        Manner::E,
        Manner::F,
        Manner::G,
        Manner::H,
        Manner::I,
    ];

    pub fn is_delete(self) -> bool {
        matches!(self, Manner::A | Manner::B | Manner::C | Manner::D)
    }

    pub fn description(self) -> &'static str {
        match self {
            Manner::A => "randomly delete a cluster part",
            Manner::B => "delete content points",
            Manner::C => "delete contour points",
            Manner::D => "randomly delete contour or content points",
            Manner::E => "jitter all points",
            Manner::F => "randomly jitter a cluster part",
            Manner::G => "jitter content points",
            Manner::H => "jitter contour points",
            Manner::I => "randomly jitter contour or content points",
        }
    }
}

impl fmt::Display for Manner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Manner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Manner::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown perturbation manner `{s}` (expected A to I)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseOptions {
    pub std: f64,
    /// Clamp each noise coordinate to `[-clip, clip]`.
    pub clip: Option<f64>,
}

impl NoiseOptions {
    pub fn gaussian(std: f64) -> Self {
        NoiseOptions { std, clip: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedCloud {
    pub points: Vec<Point3>,
    /// Source index of every output row.
    pub origin: Vec<usize>,
    /// Output rows that received noise, ascending.
    pub jittered: Vec<usize>,
    /// Noise added to each jittered row, aligned with `jittered`.
    pub noise: Vec<Point3>,
    pub manner: Manner,
    pub std: f64,
    pub seed: u64,
}

impl PerturbedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when every source point appears exactly once, so the output is a
    /// reordering (plus noise) of the source.
    pub fn is_permutation_of(&self, n: usize) -> bool {
        if self.origin.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        self.origin.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
    }
}

const CLUSTERS: usize = 4;
const KMEANS_ITERS: usize = 25;

/// Seeded Lloyd iterations; returns a cluster id per point.
fn kmeans(points: &[Point3], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = k.min(points.len());
    let mut centers: Vec<Point3> = rand::seq::index::sample(rng, points.len(), k)
        .into_iter()
        .map(|i| points[i])
        .collect();
    let mut assign = vec![0; points.len()];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                .unwrap();
            changed |= assign[i] != best;
            assign[i] = best;
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            for a in 0..3 {
                sums[c][a] += p[a];
            }
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].map(|s| s / counts[c] as f64);
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Picks one non-empty cluster and returns the output rows that belong to it.
fn cluster_rows(d: &DisentangledCloud, ranked: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let assign = kmeans(d.source.points(), CLUSTERS, rng);
    let mut present: Vec<usize> = assign.clone();
    present.sort_unstable();
    present.dedup();
    let chosen = *present.choose(rng).expect("cloud is non-empty");
    (0..ranked.len()).filter(|&r| assign[ranked[r]] == chosen).collect()
}

fn jitter(
    d: &DisentangledCloud,
    ranked: Vec<usize>,
    rows: Vec<usize>,
    manner: Manner,
    noise: &NoiseOptions,
    seed: u64,
    mut rng: ChaCha8Rng,
) -> PerturbedCloud {
    let mut points: Vec<Point3> = ranked.iter().map(|&i| d.source.points()[i]).collect();
    let mut deltas = Vec::with_capacity(rows.len());
    // Normal::new only fails for negative or non-finite std, checked earlier
    let dist = Normal::new(0.0, noise.std).unwrap();
    for &r in &rows {
        let mut delta = [0.0; 3];
        for v in delta.iter_mut() {
            *v = dist.sample(&mut rng);
            if let Some(c) = noise.clip {
                *v = v.clamp(-c, c);
            }
        }
        for a in 0..3 {
            points[r][a] += delta[a];
        }
        deltas.push(delta);
    }
    PerturbedCloud {
        points,
        origin: ranked,
        jittered: rows,
        noise: deltas,
        manner,
        std: noise.std,
        seed,
    }
}

fn delete(
    d: &DisentangledCloud,
    ranked: Vec<usize>,
    removed: &[usize],
    manner: Manner,
    noise: &NoiseOptions,
    seed: u64,
) -> Result<PerturbedCloud> {
    let mut drop = vec![false; ranked.len()];
    for &r in removed {
        drop[r] = true;
    }
    let origin: Vec<usize> = ranked
        .into_iter()
        .zip(drop)
        .filter_map(|(i, gone)| (!gone).then_some(i))
        .collect();
    if origin.is_empty() {
        return Err(DisentangleError::EmptyResult);
    }
    Ok(PerturbedCloud {
        points: origin.iter().map(|&i| d.source.points()[i]).collect(),
        origin,
        jittered: Vec::new(),
        noise: Vec::new(),
        manner,
        std: noise.std,
        seed,
    })
}

fn check_std(noise: &NoiseOptions) -> Result<()> {
    if !(noise.std >= 0.0 && noise.std.is_finite()) {
        return Err(DisentangleError::BadStd(noise.std));
    }
    Ok(())
}

pub fn perturb(d: &DisentangledCloud, manner: Manner, std: f64, seed: u64) -> Result<PerturbedCloud> {
    perturb_with(d, manner, &NoiseOptions::gaussian(std), seed)
}

pub fn perturb_with(d: &DisentangledCloud, manner: Manner, noise: &NoiseOptions, seed: u64) -> Result<PerturbedCloud> {
    check_std(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranked = d.ranked();
    let m = d.half();
    let contour: Vec<usize> = (0..m).collect();
    let content: Vec<usize> = (m..2 * m).collect();
    match manner {
        Manner::A => {
            let rows = cluster_rows(d, &ranked, &mut rng);
            delete(d, ranked, &rows, manner, noise, seed)
        }
        Manner::B => delete(d, ranked[..2 * m].to_vec(), &content, manner, noise, seed),
        Manner::C => delete(d, ranked[..2 * m].to_vec(), &contour, manner, noise, seed),
        Manner::D => {
            let target = if rng.gen::<bool>() { &contour } else { &content };
            delete(d, ranked[..2 * m].to_vec(), target, manner, noise, seed)
        }
        Manner::E => {
            let rows = (0..ranked.len()).collect();
            Ok(jitter(d, ranked, rows, manner, noise, seed, rng))
        }
        Manner::F => {
            let rows = cluster_rows(d, &ranked, &mut rng);
            Ok(jitter(d, ranked, rows, manner, noise, seed, rng))
        }
        Manner::G => Ok(jitter(d, ranked, content, manner, noise, seed, rng)),
        Manner::H => Ok(jitter(d, ranked, contour, manner, noise, seed, rng)),
        Manner::I => {
            let rows = if rng.gen::<bool>() { contour } else { content };
            Ok(jitter(d, ranked, rows, manner, noise, seed, rng))
        }
    }
}

/// Jitters the `count` highest-ranked rows. `count = M` is the default
/// manner and `count = N` jitters everything.
pub fn jitter_count_variant(d: &DisentangledCloud, count: usize, std: f64, seed: u64) -> Result<PerturbedCloud> {
    let noise = NoiseOptions::gaussian(std);
    check_std(&noise)?;
    let n = d.source.len();
    if count > n {
        return Err(DisentangleError::BadCount { count, n });
    }
    let manner = match count {
        c if c == n => Manner::E,
        _ => Manner::H,
    };
    let rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(jitter(d, d.ranked(), (0..count).collect(), manner, &noise, seed, rng))
}
