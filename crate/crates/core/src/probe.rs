//! Frozen-feature evaluation: feature extraction, linear probes and their
//! reports.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::model::{CpNet, ModelError, Pass, TaskVariant};
use crate::tensor::{ParamStore, Tape};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("invalid probe input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Classify,
    Segment,
}

impl std::str::FromStr for ProbeTask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classify" | "classification" => Ok(ProbeTask::Classify),
            "segment" | "segmentation" => Ok(ProbeTask::Segment),
            _ => Err(format!("unknown probe task `{s}` (expected classify or segment)")),
        }
    }
}

/// Frozen features: one global row per cloud, or one row per point.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Global(Vec<Vec<f64>>),
    PointWise(Vec<Vec<Vec<f64>>>),
}

/// Basic branch only, evaluation-mode batch norm, no augmentation.
/// Point-wise features need the segmentation variant.
pub fn extract_features(net: &CpNet, store: &ParamStore, clouds: &[PointCloud], task: ProbeTask) -> Result<Features> {
    if task == ProbeTask::Segment && net.config().variant != TaskVariant::Segmentation {
        return Err(ModelError::VariantMismatch(TaskVariant::Segmentation).into());
    }
    let mut global = Vec::new();
    let mut pointwise = Vec::new();
    for c in clouds {
        let tape = Tape::new();
        let pass = Pass::eval(&tape, store);
        let enc = net.encode(&pass, c.points())?;
        match task {
            ProbeTask::Classify => global.push(tape.value(enc.g).data().to_vec()),
            ProbeTask::Segment => {
                let y = tape.value(enc.y);
                pointwise.push((0..y.rows()).map(|i| y.row(i).to_vec()).collect());
            }
        }
    }
    Ok(match task {
        ProbeTask::Classify => Features::Global(global),
        ProbeTask::Segment => Features::PointWise(pointwise),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub instance_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub category_miou: Option<f64>,
    /// Held-out accuracy per class, or mean IoU per part.
    pub per_class: BTreeMap<String, f64>,
    pub train_fraction: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl ProbeReport {
    /// The headline number: accuracy or instance mIoU.
    pub fn metric(&self) -> f64 {
        self.accuracy.or(self.instance_miou).unwrap_or(f64::NAN)
    }
}

/// Stratified split: within every class a seeded shuffle, then
/// `round(fraction · count)` samples (at least one, leaving at least one)
/// go to training. Both index lists are ascending.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ProbeError::Invalid(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if let Some((c, _)) = by_class.iter().find(|(_, v)| v.len() < 2) {
        return Err(ProbeError::DegenerateLabels(format!("class {c} has fewer than two samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let k = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent with a step of `1 / L` for the smoothness
/// constant `L` of the regularized loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `d x k`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub iterations: usize,
    pub l2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            iterations: 500,
            l2: 1e-4,
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

impl LogisticRegression {
    pub fn fit(x: &[&[f64]], y: &[usize], classes: usize, opts: &FitOptions) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(ProbeError::Invalid(format!("{} rows for {} labels", x.len(), y.len())));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(ProbeError::Invalid("ragged feature rows".into()));
        }
        if y.iter().any(|&c| c >= classes) {
            return Err(ProbeError::Invalid("label out of range".into()));
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for r in x {
            for j in 0..d {
                scale[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        // standardized design with a constant column for the bias
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| (0..d).map(|j| (r[j] - mean[j]) / scale[j]).chain([1.0]).collect())
            .collect();
        let lipschitz = 0.5 * top_eigenvalue(&z) / n + opts.l2;
        let step = 1.0 / lipschitz;

        let (dk, k) = (d + 1, classes);
        let mut w = vec![0.0; dk * k];
        let mut grad = vec![0.0; dk * k];
        let mut p = vec![0.0; k];
        for _ in 0..opts.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &label) in z.iter().zip(y) {
                p.iter_mut().for_each(|v| *v = 0.0);
                for (j, &v) in row.iter().enumerate() {
                    for c in 0..k {
                        p[c] += v * w[j * k + c];
                    }
                }
                softmax_in_place(&mut p);
                p[label] -= 1.0;
                for (j, &v) in row.iter().enumerate() {
                    for c in 0..k {
                        grad[j * k + c] += v * p[c] / n;
                    }
                }
            }
            for j in 0..d {
                for c in 0..k {
                    grad[j * k + c] += opts.l2 * w[j * k + c];
                }
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= step * gi;
            }
        }
        Ok(LogisticRegression {
            mean,
            scale,
            bias: w[d * k..].to_vec(),
            weights: w[..d * k].to_vec(),
            classes: k,
        })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let k = self.classes;
        let mut s = self.bias.clone();
        for (j, &v) in x.iter().enumerate() {
            let v = (v - self.mean[j]) / self.scale[j];
            for c in 0..k {
                s[c] += v * self.weights[j * k + c];
            }
        }
        // first maximum wins ties
        let mut best = 0;
        for c in 1..k {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    }
}

/// Largest eigenvalue of `ZᵀZ` by power iteration.
fn top_eigenvalue(z: &[Vec<f64>]) -> f64 {
    let d = z[0].len();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for r in z {
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (nj, rj) in next.iter_mut().zip(r) {
                *nj += dot * rj;
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let done = (norm - lambda).abs() <= 1e-9 * norm;
        lambda = norm;
        v = next.into_iter().map(|x| x / norm).collect();
        if done {
            break;
        }
    }
    lambda
}

fn class_count(labels: impl Iterator<Item = usize>) -> usize {
    labels.max().map_or(0, |m| m + 1)
}

/// Held-out accuracy of a logistic-regression probe on one feature row
/// per sample.
pub fn linear_probe_classify(features: &[Vec<f64>], labels: &[usize], train_fraction: f64, seed: u64) -> Result<ProbeReport> {
    if features.len() != labels.len() {
        return Err(ProbeError::Invalid(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(ProbeError::DegenerateLabels("at least two classes are required".into()));
    }
    let (train, test) = stratified_split(labels, train_fraction, seed)?;
    let k = class_count(labels.iter().copied());
    let x: Vec<&[f64]> = train.iter().map(|&i| features[i].as_slice()).collect();
    let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let model = LogisticRegression::fit(&x, &y, k, &FitOptions::default())?;

    let mut hits = vec![(0usize, 0usize); k];
    for &i in &test {
        let e = &mut hits[labels[i]];
        e.1 += 1;
        if model.predict(&features[i]) == labels[i] {
            e.0 += 1;
        }
    }
    let correct: usize = hits.iter().map(|h| h.0).sum();
    let per_class = hits
        .iter()
        .enumerate()
        .filter(|(_, h)| h.1 > 0)
        .map(|(c, h)| (c.to_string(), h.0 as f64 / h.1 as f64))
        .collect();
    Ok(ProbeReport {
        task: ProbeTask::Classify,
        accuracy: Some(correct as f64 / test.len() as f64),
        instance_miou: None,
        category_miou: None,
        per_class,
        train_fraction,
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Mean IoU over the parts present in the ground truth or the prediction.
pub fn instance_iou(pred: &[u32], truth: &[u32]) -> f64 {
    let ious = part_ious(pred, truth);
    ious.values().sum::<f64>() / ious.len().max(1) as f64
}

fn part_ious(pred: &[u32], truth: &[u32]) -> BTreeMap<u32, f64> {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            counts.entry(p).or_default().0 += 1;
            counts.entry(p).or_default().1 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(t).or_default().1 += 1;
        }
    }
    counts.into_iter().map(|(part, (inter, union))| (part, inter as f64 / union as f64)).collect()
}

/// Per-point logistic-regression probe. Clouds are split (stratified by
/// `categories`); the probe sees every point of the training clouds and is
/// scored by instance mIoU (mean over test clouds) and category mIoU (mean
/// over categories of their instance mIoU).
pub fn linear_probe_segment(
    features: &[Vec<Vec<f64>>],
    part_labels: &[Vec<u32>],
    categories: &[usize],
    train_fraction: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if features.len() != part_labels.len() || features.len() != categories.len() {
        return Err(ProbeError::Invalid("features, labels and categories disagree in length".into()));
    }
    if let Some(i) = (0..features.len()).find(|&i| features[i].len() != part_labels[i].len()) {
        return Err(ProbeError::Invalid(format!("cloud {i}: labels are not aligned with points")));
    }
    let parts: std::collections::BTreeSet<u32> = part_labels.iter().flatten().copied().collect();
    if parts.len() < 2 {
        return Err(ProbeError::DegenerateLabels("at least two parts are required".into()));
    }
    let (train, test) = stratified_split(categories, train_fraction, seed)?;
    let k = class_count(parts.iter().map(|&p| p as usize));
    let mut x: Vec<&[f64]> = Vec::new();
    let mut y = Vec::new();
    for &i in &train {
        for (row, &l) in features[i].iter().zip(&part_labels[i]) {
            x.push(row);
            y.push(l as usize);
        }
    }
    let model = LogisticRegression::fit(&x, &y, k, &FitOptions::default())?;

    let mut per_cat: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut per_part: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut instance = Vec::with_capacity(test.len());
    for &i in &test {
        let pred: Vec<u32> = features[i].iter().map(|r| model.predict(r) as u32).collect();
        let ious = part_ious(&pred, &part_labels[i]);
        let miou = ious.values().sum::<f64>() / ious.len() as f64;
        for (p, v) in ious {
            per_part.entry(p).or_default().push(v);
        }
        instance.push(miou);
        per_cat.entry(categories[i]).or_default().push(miou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cat: Vec<f64> = per_cat.values().map(|v| mean(v)).collect();
    Ok(ProbeReport {
        task: ProbeTask::Segment,
        accuracy: None,
        instance_miou: Some(mean(&instance)),
        category_miou: Some(mean(&cat)),
        per_class: per_part.into_iter().map(|(p, v)| (p.to_string(), mean(&v))).collect(),
        train_fraction,
        train_size: train.len(),
        test_size: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_two_class_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..80 {
            let c = i % 2;
            let shift = if c == 0 { -2.0 } else { 2.0 };
            f.push(vec![shift + rng.gen_range(-1.0..1.0), rng.gen_range(-5.0..5.0)]);
            l.push(c);
        }
        let r = linear_probe_classify(&f, &l, 0.5, 1).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.train_size + r.test_size, 80);
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<Vec<f64>> = (0..300).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut l: Vec<usize> = (0..300).map(|i| i % 3).collect();
            l.shuffle(&mut rng);
            accs.push(linear_probe_classify(&f, &l, 0.5, seed).unwrap().accuracy.unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.10, "{accs:?}");
    }

    #[test]
    fn degenerate_inputs() {
        let f = vec![vec![0.0]; 4];
        assert!(matches!(linear_probe_classify(&f, &[1, 1, 1, 1], 0.5, 0), Err(ProbeError::DegenerateLabels(_))));
        assert!(matches!(linear_probe_classify(&f, &[0, 1, 1, 1], 0.5, 0), Err(ProbeError::DegenerateLabels(_))));
        assert!(linear_probe_classify(&f, &[0, 0, 1, 1], 1.0, 0).is_err());
        let one_part = vec![vec![vec![0.0]; 3]; 2];
        let labels = vec![vec![0; 3]; 2];
        assert!(matches!(
            linear_probe_segment(&one_part, &labels, &[0, 0], 0.5, 0),
            Err(ProbeError::DegenerateLabels(_))
        ));
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (tr, te) = stratified_split(&labels, 0.2, 5).unwrap();
        assert_eq!(tr.len(), 6);
        assert_eq!(te.len(), 24);
        for c in 0..3 {
            assert_eq!(tr.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
        assert_eq!((tr.clone(), te.clone()), stratified_split(&labels, 0.2, 5).unwrap());
        assert_ne!(tr, stratified_split(&labels, 0.2, 6).unwrap().0);
    }

    #[test]
    fn iou_hand_cases() {
        let truth = [0, 0, 1, 1];
        assert_eq!(instance_iou(&truth, &truth), 1.0);
        assert_eq!(instance_iou(&[0, 0, 0, 0], &truth), 0.25);
        assert_eq!(instance_iou(&[1, 1, 0, 0], &truth), 0.0);
    }

    #[test]
    fn segment_probe_on_separable_parts() {
        // the part is the sign of the first coordinate
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            l.push(rows.iter().map(|r| u32::from(r[0] > 0.0)).collect());
            f.push(rows);
        }
        let r = linear_probe_segment(&f, &l, &[0; 10], 0.5, 3).unwrap();
        assert!(r.instance_miou.unwrap() > 0.9);
        assert_eq!(r.instance_miou, r.category_miou);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<ProbeReport>(&json).unwrap(), r);
        assert!(!json.contains("accuracy"));
    }

    #[test]
    fn extracted_features_are_frozen_and_permutation_invariant() {
        use crate::data::{build_dataset, DatasetSpec};
        use crate::model::CpNetConfig;

        let cfg = CpNetConfig {
            channels_per_level: vec![8, 12, 16, 16],
            head_widths: vec![6; 4],
            k_neighbors: 8,
            ..CpNetConfig::segmentation(48)
        };
        let net = CpNet::new(cfg).unwrap();
        let store = net.init_params(1).unwrap();
        let clouds = build_dataset(&DatasetSpec::shape_mix(2, 48, 3)).unwrap().clouds;
        let Features::Global(g) = extract_features(&net, &store, &clouds, ProbeTask::Classify).unwrap() else {
            panic!("expected global features")
        };
        assert!(g.iter().all(|r| r.len() == 24));
        assert_eq!(Features::Global(g.clone()), extract_features(&net, &store, &clouds, ProbeTask::Classify).unwrap());

        let mut perm: Vec<usize> = (0..48).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let shuffled = clouds[0].select(&perm).unwrap();
        let Features::Global(gp) = extract_features(&net, &store, &[shuffled], ProbeTask::Classify).unwrap() else {
            panic!("expected global features")
        };
        for (a, b) in g[0].iter().zip(&gp[0]) {
            assert!((a - b).abs() < 1e-9);
        }

        let Features::PointWise(y) = extract_features(&net, &store, &clouds[..2], ProbeTask::Segment).unwrap() else {
            panic!("expected point-wise features")
        };
        assert!(y.iter().all(|c| c.len() == 48 && c.iter().all(|r| r.len() == 24)));

        let cls = CpNet::new(CpNetConfig {
            k_neighbors: 8,
            ..CpNetConfig::classification(48)
        })
        .unwrap();
        let cls_store = cls.init_params(0).unwrap();
        assert!(matches!(
            extract_features(&cls, &cls_store, &clouds, ProbeTask::Segment),
            Err(ProbeError::Model(ModelError::VariantMismatch(_)))
        ));
    }
}
