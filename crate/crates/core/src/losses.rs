//! Self-supervision losses and their task presets.
//!
//! Consistency terms compare the two branches at three scales (global,
//! point, point-to-global); reconstruction asks both branches to rebuild the
//! original cloud; the normal term supervises the basic branch's normals.

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::Point3;
use crate::model::BranchOutputs;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("{0} is enabled but its inputs are missing: {1}")]
    MissingInput(LossTerm, &'static str),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    Cg,
    Cl,
    Cl2g,
    Recon,
    Normal,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Cg, LossTerm::Cl, LossTerm::Cl2g, LossTerm::Recon, LossTerm::Normal];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Cg => "cg",
            LossTerm::Cl => "cl",
            LossTerm::Cl2g => "cl2g",
            LossTerm::Recon => "recon",
            LossTerm::Normal => "normal",
        }
    }

    /// Whether the term compares the two branches.
    pub fn is_consistency(self) -> bool {
        matches!(self, LossTerm::Cg | LossTerm::Cl | LossTerm::Cl2g)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown loss term `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub enabled: BTreeSet<LossTerm>,
    /// l2-normalize features before every dot product of the contrastive
    /// terms.
    pub normalize_logits: bool,
    /// Average the point-wise contrastive term over both anchor directions.
    pub symmetric_cl: bool,
}

impl LossConfig {
    pub fn with_terms(terms: &[LossTerm]) -> Self {
        LossConfig {
            tau: 0.1,
            enabled: terms.iter().copied().collect(),
            normalize_logits: true,
            symmetric_cl: false,
        }
    }

    /// Point-wise consistency, reconstruction and normals.
    pub fn segmentation() -> Self {
        Self::with_terms(&[LossTerm::Cl, LossTerm::Recon, LossTerm::Normal])
    }

    /// All three consistency terms plus reconstruction.
    pub fn classification() -> Self {
        Self::with_terms(&[LossTerm::Cg, LossTerm::Cl, LossTerm::Cl2g, LossTerm::Recon])
    }

    /// Global and point-to-global consistency plus reconstruction, without
    /// the point-wise term.
    pub fn classification_global() -> Self {
        Self::with_terms(&[LossTerm::Cg, LossTerm::Cl2g, LossTerm::Recon])
    }

    /// Single-branch training: reconstruction and normals only.
    pub fn basic_only() -> Self {
        Self::with_terms(&[LossTerm::Recon, LossTerm::Normal])
    }

    pub fn all() -> Self {
        Self::with_terms(&LossTerm::ALL)
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        self.enabled.contains(&term)
    }

    /// Whether any enabled term needs the assistant branch.
    pub fn needs_assistant(&self) -> bool {
        self.enabled.iter().any(|t| t.is_consistency())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.enabled.is_empty() {
            return Err(LossError::Config("no loss term enabled".into()));
        }
        Ok(())
    }
}

/// Per-term values of one batch; disabled terms read zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cg: f64,
    pub cl: f64,
    pub cl2g: f64,
    pub recon: f64,
    pub normal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Cg => self.cg,
            LossTerm::Cl => self.cl,
            LossTerm::Cl2g => self.cl2g,
            LossTerm::Recon => self.recon,
            LossTerm::Normal => self.normal,
        }
    }

    fn slot(&mut self, term: LossTerm) -> &mut f64 {
        match term {
            LossTerm::Cg => &mut self.cg,
            LossTerm::Cl => &mut self.cl,
            LossTerm::Cl2g => &mut self.cl2g,
            LossTerm::Recon => &mut self.recon,
            LossTerm::Normal => &mut self.normal,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cg, self.cl, self.cl2g, self.recon, self.normal, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn same_shape(t: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (t.shape(a), t.shape(b));
    if sa != sb {
        return Err(LossError::ShapeMismatch { op, left: sa, right: sb });
    }
    Ok(())
}

fn rows_normalized(t: &Tape, a: Var, on: bool) -> Result<Var> {
    Ok(if on { t.l2_normalize(a, 1, 1e-12)? } else { a })
}

/// `1 - cos(G, G')` for two `1 x c` rows.
pub fn loss_cg(t: &Tape, g: Var, g_prime: Var) -> Result<Var> {
    same_shape(t, "loss_cg", g, g_prime)?;
    for v in [g, g_prime] {
        if t.value(v).data().iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-12 {
            return Err(LossError::ZeroVector);
        }
    }
    let cos = t.cosine_similarity(g, g_prime)?;
    let neg = t.scale(cos, -1.0)?;
    let out = t.add_scalar(neg, 1.0)?;
    Ok(t.reshape(out, &[])?)
}

/// Sum over rows of `-log softmax(logits)[i, own[i]]`.
fn info_nce(t: &Tape, logits: Var, own: &[usize]) -> Result<Var> {
    let lse = t.logsumexp(logits, 1)?;
    let pos = t.pick(logits, own)?;
    let diff = t.sub(lse, pos)?;
    Ok(t.sum(diff, None)?)
}

/// Point-wise contrastive term: each basic-branch row is pulled toward the
/// assistant-branch row of the same point and away from the others.
pub fn loss_cl(t: &Tape, y: Var, y_prime: Var, tau: f64, normalize: bool) -> Result<Var> {
    same_shape(t, "loss_cl", y, y_prime)?;
    let n = t.shape(y)[0];
    let a = rows_normalized(t, y, normalize)?;
    let b = rows_normalized(t, y_prime, normalize)?;
    let bt = t.transpose(b)?;
    let logits = t.scale(t.matmul(a, bt)?, 1.0 / tau)?;
    let own: Vec<usize> = (0..n).collect();
    info_nce(t, logits, &own)
}

/// Point-to-global contrastive term over a batch. Points of each branch
/// are scored against the other branch's global features of the whole
/// batch; the positive is the sample's own global feature at `own`.
///
/// With a single sample every softmax has one candidate and the term is
/// exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn loss_cl2g(
    t: &Tape,
    y: Var,
    y_prime: Var,
    g_batch: Var,
    g_prime_batch: Var,
    own: usize,
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    same_shape(t, "loss_cl2g", y, y_prime)?;
    same_shape(t, "loss_cl2g", g_batch, g_prime_batch)?;
    let (n, c) = (t.shape(y)[0], t.shape(y)[1]);
    let gb = t.shape(g_batch);
    if gb[1] != c || own >= gb[0] {
        return Err(LossError::ShapeMismatch {
            op: "loss_cl2g",
            left: vec![n, c],
            right: gb,
        });
    }
    let pos = vec![own; n];
    let mut terms = Vec::with_capacity(2);
    for (points, globals) in [(y, g_prime_batch), (y_prime, g_batch)] {
        let a = rows_normalized(t, points, normalize)?;
        let g = rows_normalized(t, globals, normalize)?;
        let gt = t.transpose(g)?;
        let logits = t.scale(t.matmul(a, gt)?, 1.0 / tau)?;
        terms.push(info_nce(t, logits, &pos)?);
    }
    Ok(t.add(terms[0], terms[1])?)
}

/// `chamfer(P̂, P) + chamfer(P̂', P)`: both branches rebuild the original.
pub fn loss_recon(t: &Tape, p: &Rc<Vec<Point3>>, p_hat: Var, p_hat_prime: Option<Var>) -> Result<Var> {
    if p.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    let mut total = t.chamfer(p_hat, p.clone())?;
    if let Some(q) = p_hat_prime {
        let other = t.chamfer(q, p.clone())?;
        total = t.add(total, other)?;
    }
    Ok(total)
}

/// `1 - mean_i cos(n̂_i, n_i)`.
pub fn loss_normal(t: &Tape, predicted: Var, target: &[Point3]) -> Result<Var> {
    let shape = t.shape(predicted);
    if shape != [target.len(), 3] {
        return Err(LossError::ShapeMismatch {
            op: "loss_normal",
            left: shape,
            right: vec![target.len(), 3],
        });
    }
    let a = t.l2_normalize(predicted, 1, 1e-12)?;
    let b = t.l2_normalize(t.leaf(Tensor::from_points(target)), 1, 1e-12)?;
    let cos = t.sum(t.mul(a, b)?, None)?;
    let mean = t.scale(cos, -1.0 / target.len() as f64)?;
    Ok(t.add_scalar(mean, 1.0)?)
}

/// Loss of a batch: every enabled term averaged over the samples, and their
/// unweighted sum. `batch` pairs each sample's forward outputs with its
/// original cloud.
pub fn total_loss(t: &Tape, batch: &[(BranchOutputs, &PointCloud)], cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(LossError::Config("empty batch".into()));
    }
    let b = batch.len();
    let assistant = |term: LossTerm| -> Result<()> {
        if batch.iter().any(|(o, _)| o.assistant.is_none()) {
            return Err(LossError::MissingInput(term, "assistant branch"));
        }
        Ok(())
    };
    let mut per_term: Vec<(LossTerm, Var)> = Vec::new();
    let mut add = |term: LossTerm, vars: Vec<Var>| -> Result<()> {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = t.add(acc, v)?;
        }
        per_term.push((term, t.scale(acc, 1.0 / b as f64)?));
        Ok(())
    };
    for term in LossTerm::ALL {
        if !cfg.is_enabled(term) {
            continue;
        }
        let mut vars = Vec::with_capacity(b);
        match term {
            LossTerm::Cg => {
                assistant(term)?;
                for (o, _) in batch {
                    let a = o.assistant.as_ref().unwrap();
                    vars.push(loss_cg(t, o.g, a.g_prime)?);
                }
            }
            LossTerm::Cl => {
                assistant(term)?;
                for (o, _) in batch {
                    let a = o.assistant.as_ref().unwrap();
                    let forward = loss_cl(t, a.y_anchor, a.y_prime, cfg.tau, cfg.normalize_logits)?;
                    vars.push(if cfg.symmetric_cl {
                        let reverse = loss_cl(t, a.y_prime, a.y_anchor, cfg.tau, cfg.normalize_logits)?;
                        t.scale(t.add(forward, reverse)?, 0.5)?
                    } else {
                        forward
                    });
                }
            }
            LossTerm::Cl2g => {
                assistant(term)?;
                let gs: Vec<Var> = batch.iter().map(|(o, _)| o.g).collect();
                let gps: Vec<Var> = batch.iter().map(|(o, _)| o.assistant.as_ref().unwrap().g_prime).collect();
                let g_batch = t.concat(&gs, 0)?;
                let gp_batch = t.concat(&gps, 0)?;
                for (k, (o, _)) in batch.iter().enumerate() {
                    let a = o.assistant.as_ref().unwrap();
                    vars.push(loss_cl2g(
                        t,
                        a.y_anchor,
                        a.y_prime,
                        g_batch,
                        gp_batch,
                        k,
                        cfg.tau,
                        cfg.normalize_logits,
                    )?);
                }
            }
            LossTerm::Recon => {
                for (o, cloud) in batch {
                    let p = Rc::new(cloud.points().to_vec());
                    vars.push(loss_recon(t, &p, o.recon, o.assistant.as_ref().map(|a| a.recon_prime))?);
                }
            }
            LossTerm::Normal => {
                for (o, cloud) in batch {
                    let n = o.normals.ok_or(LossError::MissingInput(term, "normal head output"))?;
                    let target = cloud
                        .normals()
                        .ok_or(LossError::MissingInput(term, "ground-truth normals"))?;
                    vars.push(loss_normal(t, n, target)?);
                }
            }
        }
        add(term, vars)?;
    }
    let mut breakdown = LossBreakdown::default();
    let mut total = per_term[0].1;
    for (i, &(term, v)) in per_term.iter().enumerate() {
        *breakdown.slot(term) = t.item(v);
        if i > 0 {
            total = t.add(total, v)?;
        }
    }
    breakdown.total = t.item(total);
    Ok((total, breakdown))
}
