//! The dual-branch network: a hierarchical relation-shape encoder,
//! transition-up decoder with per-level heads, max-pooled global feature,
//! normal head and folding decoder.
//!
//! Both branches run through the same [`ParamStore`]; there are no
//! branch-private parameters.

mod config;
mod layers;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::disentangle::PerturbedCloud;
use crate::geometry::{dist, fps, knn_query, nearest_neighbors, GeometryError, IdwWeights, Point3};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

pub use config::{CpNetConfig, TaskVariant};
pub use layers::Mode;
use layers::{Ctx, Init};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("operation needs the {0:?} variant")]
    VariantMismatch(TaskVariant),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Relation vector width: distance, offset, centre, neighbour.
pub const RELATION_WIDTH: usize = 10;

/// Fixed 2-D lattice on the unit square centred at the origin, row-major,
/// truncated to `n` points.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldingGrid {
    pub side: usize,
    pub grid: Tensor,
}

impl FoldingGrid {
    pub fn new(n: usize, side: Option<usize>) -> FoldingGrid {
        let min_side = (n as f64).sqrt().ceil() as usize;
        let side = side.unwrap_or(min_side).max(min_side).max(1);
        // a single lattice point sits at the centre
        let (step, offset) = if side > 1 { (1.0 / (side - 1) as f64, 0.5) } else { (0.0, 0.0) };
        let mut data = Vec::with_capacity(n * 2);
        for r in 0..n {
            let (row, col) = (r / side, r % side);
            data.push(col as f64 * step - offset);
            data.push(row as f64 * step - offset);
        }
        FoldingGrid {
            side,
            grid: Tensor::matrix(n, 2, data),
        }
    }

    pub fn len(&self) -> usize {
        self.grid.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.rows() == 0
    }
}

/// A tape, the parameters it reads, and the batch-norm mode.
#[derive(Clone, Copy)]
pub struct Pass<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
}

impl<'a> Pass<'a> {
    pub fn train(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Pass {
            tape,
            store,
            mode: Mode::Train,
        }
    }

    pub fn eval(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Pass {
            tape,
            store,
            mode: Mode::Eval,
        }
    }
}

/// One level of the encoder.
#[derive(Clone, Debug)]
pub struct Level {
    /// Row of the branch input that each centre came from.
    pub rows: Vec<usize>,
    pub points: Vec<Point3>,
    /// `F^l`, one row per centre.
    pub features: Var,
}

/// Everything one branch computes.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub levels: Vec<Level>,
    /// `Q^l` per level (segmentation); empty for classification.
    pub decoded: Vec<Var>,
    /// Point-wise feature: one row per input point (segmentation) or per
    /// last-level centre (classification).
    pub y: Var,
    /// Input rows that the rows of `y` belong to.
    pub y_rows: Vec<usize>,
    pub g: Var,
}

/// Outputs of the dual-branch forward pass.
///
/// `y_anchor` and `y_prime` hold corresponding rows of the two branches: the
/// basic branch's point-wise features and the assistant branch's features of
/// the same source points.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub y: Var,
    pub g: Var,
    pub recon: Var,
    pub normals: Option<Var>,
    pub assistant: Option<AssistantOutputs>,
}

#[derive(Clone, Debug)]
pub struct AssistantOutputs {
    pub y_anchor: Var,
    pub y_prime: Var,
    pub g_prime: Var,
    pub recon_prime: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpNet {
    cfg: CpNetConfig,
}

fn split_weights(init: &mut Init, prefix: &str, parts: &[(&str, usize)], fan_out: usize) -> Result<()> {
    let fan_in: usize = parts.iter().map(|p| p.1).sum();
    for (suffix, rows) in parts {
        init.xavier(&format!("{prefix}.{suffix}"), *rows, fan_out, fan_in)?;
    }
    init.zeros(&format!("{prefix}.b"), fan_out)
}

impl CpNet {
    pub fn new(cfg: CpNetConfig) -> Result<CpNet> {
        cfg.validate()?;
        Ok(CpNet { cfg })
    }

    pub fn config(&self) -> &CpNetConfig {
        &self.cfg
    }

    fn ctx<'a>(&self, pass: &Pass<'a>) -> Ctx<'a> {
        Ctx {
            tape: pass.tape,
            store: pass.store,
            mode: pass.mode,
            bn: self.cfg.use_batch_norm,
            bn_eps: self.cfg.bn_eps,
        }
    }

    /// Registers every parameter with seeded Xavier-uniform weights and zero
    /// biases.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let cfg = &self.cfg;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn: cfg.use_batch_norm,
        };
        let c = &cfg.channels_per_level;
        for l in 0..cfg.levels() {
            let c_in = if l == 0 { 3 } else { c[l - 1] };
            let p = format!("encoder.level{l}");
            init.dense(&format!("{p}.weightnet.l0"), RELATION_WIDTH, cfg.weight_net_hidden, false)?;
            init.linear(&format!("{p}.weightnet.l1"), cfg.weight_net_hidden, c_in)?;
            init.dense(&format!("{p}.raise"), c_in, c[l], true)?;
        }
        if cfg.variant == TaskVariant::Segmentation {
            for l in (1..cfg.levels()).rev() {
                let p = format!("decoder.up{l}");
                init.dense(&format!("{p}.inner"), c[l], c[l - 1], true)?;
                init.dense(&format!("{p}.skip"), c[l - 1], c[l - 1], true)?;
                init.dense(&format!("{p}.outer"), c[l - 1], c[l - 1], true)?;
            }
            for l in 0..cfg.levels() {
                init.linear(&format!("head{l}"), c[l], cfg.head_widths[l])?;
            }
        }
        let width = cfg.feature_width();
        if cfg.normal_head {
            split_weights(&mut init, "normal.l0", &[("w_p", 3), ("w_y", width), ("w_g", width)], cfg.normal_hidden)?;
            init.linear("normal.l1", cfg.normal_hidden, 3)?;
        }
        for (fold, extra) in [("fold1", 2), ("fold2", 3)] {
            split_weights(&mut init, &format!("{fold}.l0"), &[("w_g", width), ("w_x", extra)], cfg.fold_hidden)?;
            init.dense(&format!("{fold}.l1"), cfg.fold_hidden, cfg.fold_hidden, false)?;
            init.linear(&format!("{fold}.l2"), cfg.fold_hidden, 3)?;
        }
        Ok(store)
    }

    /// One relation-shape convolution: sample `m` centres by FPS, group
    /// each centre's `k` nearest inputs, weight the neighbour features by an
    /// MLP of the relation vector, max-pool, then raise channels.
    ///
    /// Returns the centres' indices into `points_in`, their coordinates and
    /// features.
    pub fn rsconv_level(
        &self,
        pass: &Pass,
        level: usize,
        points_in: &[Point3],
        feats_in: Var,
        m: usize,
    ) -> Result<(Vec<usize>, Vec<Point3>, Var)> {
        let cfg = &self.cfg;
        let ctx = self.ctx(pass);
        let t = pass.tape;
        let shape = t.shape(feats_in);
        if shape.len() != 2 || shape[0] != points_in.len() {
            return Err(TensorError::ShapeMismatch {
                op: "rsconv_level",
                left: shape,
                right: vec![points_in.len()],
            }
            .into());
        }
        let centres = fps(points_in, m)?;
        let centre_pts: Vec<Point3> = centres.iter().map(|&i| points_in[i]).collect();
        let k = cfg.k_neighbors.min(points_in.len());
        let nbrs = knn_query(points_in, &centre_pts, k)?;
        let mut rel = Vec::with_capacity(m * k * RELATION_WIDTH);
        for (c, pi) in centre_pts.iter().enumerate() {
            for &j in nbrs.row(c) {
                let pj = &points_in[j];
                rel.push(dist(pi, pj));
                rel.extend((0..3).map(|a| pi[a] - pj[a]));
                if cfg.absolute_relation {
                    rel.extend_from_slice(pi);
                    rel.extend_from_slice(pj);
                } else {
                    rel.extend_from_slice(&[0.0; 6]);
                }
            }
        }
        let p = format!("encoder.level{level}");
        let rel = t.leaf(Tensor::matrix(m * k, RELATION_WIDTH, rel));
        let hidden = ctx.dense(rel, &format!("{p}.weightnet.l0"), false)?;
        let weights = ctx.linear(hidden, &format!("{p}.weightnet.l1"))?;
        let gathered = t.gather_rows(feats_in, Rc::new(nbrs.indices))?;
        let weighted = t.mul(weights, gathered)?;
        let pooled = t.group_max(weighted, k)?;
        let out = ctx.dense(pooled, &format!("{p}.raise"), true)?;
        Ok((centres, centre_pts, out))
    }

    /// `Q^{l-1} = MLP(MLP(interp(Q^l)) + MLP(F^{l-1}))`, interpolating from
    /// the level-`l` centres to the level-`l-1` centres.
    pub fn transition_up(
        &self,
        pass: &Pass,
        level: usize,
        q: Var,
        f_prev: Var,
        points_l: &[Point3],
        points_prev: &[Point3],
    ) -> Result<Var> {
        let ctx = self.ctx(pass);
        let t = pass.tape;
        let weights = IdwWeights::new(points_l, points_prev, self.cfg.interp_k.min(points_l.len()))?;
        let up = t.interpolate(q, Rc::new(weights))?;
        let p = format!("decoder.up{level}");
        let inner = ctx.dense(up, &format!("{p}.inner"), true)?;
        let skip = ctx.dense(f_prev, &format!("{p}.skip"), true)?;
        let sum = t.add(inner, skip)?;
        ctx.dense(sum, &format!("{p}.outer"), true)
    }

    /// Propagates every level's `Q^l` to the original points through a
    /// linear head and concatenates the results along channels.
    pub fn pointwise_head(&self, pass: &Pass, decoded: &[Var], level_points: &[Vec<Point3>], original: &[Point3]) -> Result<Var> {
        if self.cfg.variant != TaskVariant::Segmentation {
            return Err(ModelError::VariantMismatch(TaskVariant::Segmentation));
        }
        if decoded.len() != self.cfg.levels() || level_points.len() != decoded.len() {
            return Err(ModelError::SizeMismatch(format!(
                "{} decoded levels and {} point sets for {} levels",
                decoded.len(),
                level_points.len(),
                self.cfg.levels()
            )));
        }
        let ctx = self.ctx(pass);
        let t = pass.tape;
        let heads = decoded
            .iter()
            .zip(level_points)
            .enumerate()
            .map(|(l, (&q, pts))| {
                let w = IdwWeights::new(pts, original, self.cfg.interp_k.min(pts.len()))?;
                let up = t.interpolate(q, Rc::new(w))?;
                ctx.linear(up, &format!("head{l}"))
            })
            .collect::<Result<Vec<_>>>()?;
        if heads.len() == 1 {
            return Ok(heads[0]);
        }
        Ok(t.concat(&heads, 1)?)
    }

    /// Shared per-point MLP on `p ⊕ y ⊕ G`, l2-normalized.
    pub fn predict_normals(&self, pass: &Pass, points: &[Point3], y: Var, g: Var) -> Result<Var> {
        let t = pass.tape;
        let ctx = self.ctx(pass);
        let n = points.len();
        if t.shape(y)[0] != n {
            return Err(ModelError::SizeMismatch(format!("{} feature rows for {n} points", t.shape(y)[0])));
        }
        let p = t.leaf(Tensor::from_points(points));
        let wp = ctx.p("normal.l0.w_p")?;
        let wy = ctx.p("normal.l0.w_y")?;
        let wg = ctx.p("normal.l0.w_g")?;
        let b = ctx.p("normal.l0.b")?;
        let local = t.add(t.matmul(p, wp)?, t.matmul(y, wy)?)?;
        let global = t.add(t.matmul(g, wg)?, b)?;
        let h = t.relu(t.add(local, t.broadcast_rows(global, n)?)?)?;
        let out = ctx.linear(h, "normal.l1")?;
        Ok(t.l2_normalize(out, 1, 1e-12)?)
    }

    /// `P̂ = MLP(Ĝ ⊕ MLP(Ĝ ⊕ I))` with `Ĝ` the global feature repeated per
    /// lattice point.
    pub fn fold_reconstruct(&self, pass: &Pass, g: Var, grid: &FoldingGrid) -> Result<Var> {
        let t = pass.tape;
        let ctx = self.ctx(pass);
        let n = grid.len();
        let fold = |name: &str, x: Var| -> Result<Var> {
            let wg = ctx.p(&format!("{name}.l0.w_g"))?;
            let wx = ctx.p(&format!("{name}.l0.w_x"))?;
            let b = ctx.p(&format!("{name}.l0.b"))?;
            let global = t.add(t.matmul(g, wg)?, b)?;
            let h = t.add(t.matmul(x, wx)?, t.broadcast_rows(global, n)?)?;
            let h = t.relu(h)?;
            let h = ctx.dense(h, &format!("{name}.l1"), false)?;
            ctx.linear(h, &format!("{name}.l2"))
        };
        let first = fold("fold1", t.leaf(grid.grid.clone()))?;
        fold("fold2", first)
    }

    /// Runs the encoder (and decoder for segmentation) on one point set.
    pub fn encode(&self, pass: &Pass, points: &[Point3]) -> Result<Encoded> {
        let cfg = &self.cfg;
        let t = pass.tape;
        let sizes = cfg.level_sizes(points.len());
        let mut levels: Vec<Level> = Vec::with_capacity(cfg.levels());
        for (l, &m) in sizes.iter().enumerate() {
            let (prev_pts, prev_feats, prev_rows) = match levels.last() {
                Some(lv) => (lv.points.clone(), lv.features, lv.rows.clone()),
                None => (
                    points.to_vec(),
                    t.leaf(Tensor::from_points(points)),
                    (0..points.len()).collect(),
                ),
            };
            let (idx, pts, feats) = self.rsconv_level(pass, l, &prev_pts, prev_feats, m)?;
            levels.push(Level {
                rows: idx.iter().map(|&i| prev_rows[i]).collect(),
                points: pts,
                features: feats,
            });
        }
        match cfg.variant {
            TaskVariant::Classification => {
                let last = levels.last().expect("at least one level");
                let y = last.features;
                let y_rows = last.rows.clone();
                let g = global_feature(t, y)?;
                Ok(Encoded {
                    levels,
                    decoded: Vec::new(),
                    y,
                    y_rows,
                    g,
                })
            }
            TaskVariant::Segmentation => {
                let l = levels.len();
                let mut decoded = vec![levels[l - 1].features; l];
                for i in (1..l).rev() {
                    decoded[i - 1] = self.transition_up(
                        pass,
                        i,
                        decoded[i],
                        levels[i - 1].features,
                        &levels[i].points,
                        &levels[i - 1].points,
                    )?;
                }
                let pts: Vec<Vec<Point3>> = levels.iter().map(|lv| lv.points.clone()).collect();
                let y = self.pointwise_head(pass, &decoded, &pts, points)?;
                let g = global_feature(t, y)?;
                Ok(Encoded {
                    levels,
                    decoded,
                    y,
                    y_rows: (0..points.len()).collect(),
                    g,
                })
            }
        }
    }

    /// Basic branch on `original`, assistant branch on `perturbed` (when
    /// given), both with the same parameters. Normals are predicted on the
    /// basic branch only.
    pub fn dual_forward(&self, pass: &Pass, original: &PointCloud, perturbed: Option<&PerturbedCloud>) -> Result<BranchOutputs> {
        let t = pass.tape;
        let p = original.points();
        let n = p.len();
        let grid = FoldingGrid::new(n, self.cfg.fold_grid_side);
        let basic = self.encode(pass, p)?;
        let recon = self.fold_reconstruct(pass, basic.g, &grid)?;
        let normals = if self.cfg.normal_head {
            let y = match self.cfg.variant {
                TaskVariant::Segmentation => basic.y,
                TaskVariant::Classification => {
                    let last = basic.levels.last().expect("at least one level");
                    let w = IdwWeights::new(&last.points, p, self.cfg.interp_k.min(last.points.len()))?;
                    t.interpolate(basic.y, Rc::new(w))?
                }
            };
            Some(self.predict_normals(pass, p, y, basic.g)?)
        } else {
            None
        };
        let assistant = match perturbed {
            None => None,
            Some(pc) => {
                if pc.origin.len() != pc.points.len() || pc.origin.iter().any(|&i| i >= n) {
                    return Err(ModelError::SizeMismatch(format!(
                        "perturbed cloud of {} rows does not index a {n}-point source",
                        pc.points.len()
                    )));
                }
                let enc = self.encode(pass, &pc.points)?;
                let recon_prime = self.fold_reconstruct(pass, enc.g, &grid)?;
                let (y_anchor, y_prime) = self.pair_rows(pass, p, &basic, &enc, pc)?;
                Some(AssistantOutputs {
                    y_anchor,
                    y_prime,
                    g_prime: enc.g,
                    recon_prime,
                })
            }
        };
        Ok(BranchOutputs {
            y: basic.y,
            g: basic.g,
            recon,
            normals,
            assistant,
        })
    }

    /// Lines up rows of the two branches that describe the same source
    /// point. Point-wise features of a reordered cloud are gathered back to
    /// source order; after a deletion the basic branch is gathered to the
    /// survivors. Classification features live on separately sampled
    /// centres, so each basic centre is paired with the assistant centre
    /// whose unperturbed source point is nearest.
    fn pair_rows(&self, pass: &Pass, p: &[Point3], basic: &Encoded, assistant: &Encoded, pc: &PerturbedCloud) -> Result<(Var, Var)> {
        let t = pass.tape;
        let n = p.len();
        match self.cfg.variant {
            TaskVariant::Segmentation => {
                if pc.is_permutation_of(n) {
                    let mut pos = vec![0; n];
                    for (r, &i) in pc.origin.iter().enumerate() {
                        pos[i] = r;
                    }
                    Ok((basic.y, t.gather_rows(assistant.y, Rc::new(pos))?))
                } else {
                    Ok((t.gather_rows(basic.y, Rc::new(pc.origin.clone()))?, assistant.y))
                }
            }
            TaskVariant::Classification => {
                let anchors: Vec<Point3> = basic.y_rows.iter().map(|&r| p[r]).collect();
                let sources: Vec<Point3> = assistant.y_rows.iter().map(|&r| p[pc.origin[r]]).collect();
                let pick: Vec<usize> = nearest_neighbors(&anchors, &sources).into_iter().map(|x| x.0).collect();
                Ok((basic.y, t.gather_rows(assistant.y, Rc::new(pick))?))
            }
        }
    }
}

/// Column-wise max over the rows of `Y`.
pub fn global_feature(tape: &Tape, y: Var) -> Result<Var> {
    Ok(tape.max_pool(y, 0)?.0)
}
