use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::{matmul_raw, Result, Tensor, TensorError};
use crate::geometry::{nearest_neighbors, IdwWeights, Point3};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { src: Var, start: usize },
    Gather { src: Var, idx: Rc<Vec<usize>> },
    Reshape(Var),
    Transpose(Var),
    Sum { src: Var, axis: Option<usize> },
    MaxPool { src: Var, axis: usize, argmax: Vec<usize> },
    GroupMax { src: Var, argmax: Vec<usize> },
    BroadcastRows(Var),
    L2Normalize { src: Var, axis: usize, norms: Vec<f64> },
    BatchNorm { src: Var, inv_std: Vec<f64> },
    LogSumExp { src: Var, axis: usize },
    Pick { src: Var, idx: Vec<usize> },
    Interpolate { src: Var, weights: Rc<IdwWeights> },
    Chamfer { src: Var, target: Rc<Vec<Point3>>, forward: Vec<(usize, f64)>, backward: Vec<(usize, f64)> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Record of operations for reverse-mode differentiation.
///
/// A tape is single-threaded; build a fresh one per forward pass. Parameters
/// are registered once per tape, so every read of the same parameter shares
/// one gradient slot.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

/// Result of [`Tape::backward`]: gradients of the loss with respect to every
/// leaf and parameter that was recorded.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// One gradient per parameter in store order; unreachable parameters get
    /// zeros.
    pub fn aligned(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
            })
            .collect()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| TensorError::ShapeMismatch {
        op,
        left: t.shape().to_vec(),
        right: vec![0, 0],
    })
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(TensorError::InvalidArgument(format!(
            "{op}: axis {axis} out of range for a matrix"
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn bn_updates(&self) -> Ref<'_, Vec<BnUpdate>> {
        self.bn_updates.borrow()
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    /// Reads a parameter into the tape, reusing the existing node if the
    /// parameter was already read.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.param_by_id(store, id))
    }

    pub fn param_by_id(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value: Rc::new(store.value(id).clone()),
                op: Op::Param(id),
            });
            Var(nodes.len() - 1)
        };
        self.params.borrow_mut().insert(id, v);
        v
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        self.push(name, Tensor::new(av.shape().to_vec(), data)?, op)
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, &av, &bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, Tensor::new(av.shape().to_vec(), data)?, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = require_rank2("matmul", &av)?;
        let (k2, m) = require_rank2("matmul", &bv)?;
        if k != k2 {
            return Err(mismatch("matmul", &av, &bv));
        }
        let out = matmul_raw(av.data(), bv.data(), n, k, m);
        self.push("matmul", Tensor::matrix(n, m, out), Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&self, name: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (n, c) = require_rank2(name, &av)?;
        if rv.len() != c || rv.rows() != 1 {
            return Err(mismatch(name, &av, &rv));
        }
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            data.extend(av.row(i).iter().zip(rv.data()).map(|(&x, &y)| f(x, y)));
        }
        self.push(name, Tensor::matrix(n, c, data), op)
    }

    /// `a + row`, broadcasting a `1 x c` row over the rows of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// `a * row` elementwise, broadcasting a `1 x c` row over the rows of `a`.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        check_axis("concat", axis)?;
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument("concat of zero tensors".into()));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let dims: Vec<(usize, usize)> = vals
            .iter()
            .map(|v| require_rank2("concat", v))
            .collect::<Result<_>>()?;
        let (n0, c0) = dims[0];
        let out = if axis == 0 {
            if let Some(i) = dims.iter().position(|d| d.1 != c0) {
                return Err(mismatch("concat", &vals[0], &vals[i]));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for v in &vals {
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, c0, data)
        } else {
            if let Some(i) = dims.iter().position(|d| d.0 != n0) {
                return Err(mismatch("concat", &vals[0], &vals[i]));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(n0 * cols);
            for r in 0..n0 {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(n0, cols, data)
        };
        self.push("concat", out, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = require_rank2("slice_rows", &av)?;
        if start > end || end > n {
            return Err(TensorError::InvalidArgument(format!(
                "slice_rows {start}..{end} of {n} rows"
            )));
        }
        let data = av.data()[start * c..end * c].to_vec();
        self.push("slice_rows", Tensor::matrix(end - start, c, data), Op::SliceRows { src: a, start })
    }

    /// Row gather: output row `r` is input row `idx[r]`.
    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = require_rank2("gather_rows", &av)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::InvalidArgument(format!(
                "gather index {bad} out of {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(av.row(i));
        }
        self.push("gather_rows", Tensor::matrix(idx.len(), c, data), Op::Gather { src: a, idx })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(shape.to_vec(), av.data().to_vec())?;
        self.push("reshape", t, Op::Reshape(a))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = require_rank2("transpose", &av)?;
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                data[j * n + i] = av.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::matrix(c, n, data), Op::Transpose(a))
    }

    /// Sum over an axis of a matrix (`Some(0)` gives `1 x c`, `Some(1)` gives
    /// `n x 1`) or over everything (`None` gives a scalar).
    pub fn sum(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        let av = self.value(a);
        let out = match axis {
            None => Tensor::scalar(av.data().iter().sum()),
            Some(ax) => {
                check_axis("sum", ax)?;
                let (n, c) = require_rank2("sum", &av)?;
                if ax == 0 {
                    let mut s = vec![0.0; c];
                    for i in 0..n {
                        for (acc, v) in s.iter_mut().zip(av.row(i)) {
                            *acc += v;
                        }
                    }
                    Tensor::matrix(1, c, s)
                } else {
                    Tensor::matrix(n, 1, (0..n).map(|i| av.row(i).iter().sum()).collect())
                }
            }
        };
        self.push("sum", out, Op::Sum { src: a, axis })
    }

    pub fn mean(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a);
        let count = match axis {
            None => shape.iter().product::<usize>(),
            Some(ax) => shape.get(ax).copied().unwrap_or(1),
        };
        let s = self.sum(a, axis)?;
        self.scale(s, 1.0 / count.max(1) as f64)
    }

    /// Max over an axis of a matrix. Returns the pooled values and, per output
    /// entry, the index along `axis` that won; ties go to the lowest index.
    pub fn max_pool(&self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        check_axis("max_pool", axis)?;
        let av = self.value(a);
        let (n, c) = require_rank2("max_pool", &av)?;
        if n == 0 || c == 0 {
            return Err(TensorError::InvalidArgument("max_pool of an empty matrix".into()));
        }
        let (vals, argmax) = if axis == 0 {
            let mut best = av.row(0).to_vec();
            let mut arg = vec![0usize; c];
            for i in 1..n {
                for (j, &v) in av.row(i).iter().enumerate() {
                    if v > best[j] {
                        best[j] = v;
                        arg[j] = i;
                    }
                }
            }
            (Tensor::matrix(1, c, best), arg)
        } else {
            let mut best = Vec::with_capacity(n);
            let mut arg = Vec::with_capacity(n);
            for i in 0..n {
                let row = av.row(i);
                let mut b = 0;
                for j in 1..c {
                    if row[j] > row[b] {
                        b = j;
                    }
                }
                best.push(row[b]);
                arg.push(b);
            }
            (Tensor::matrix(n, 1, best), arg)
        };
        let v = self.push(
            "max_pool",
            vals,
            Op::MaxPool {
                src: a,
                axis,
                argmax: argmax.clone(),
            },
        )?;
        Ok((v, argmax))
    }

    /// Column-wise max over consecutive blocks of `group` rows:
    /// `(n * group) x c` to `n x c`.
    pub fn group_max(&self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = require_rank2("group_max", &av)?;
        if group == 0 || rows % group != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "group_max: {rows} rows not divisible into groups of {group}"
            )));
        }
        let n = rows / group;
        let mut vals = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for g in 0..n {
            let base = g * group;
            let mut best = av.row(base).to_vec();
            let mut arg = vec![base; c];
            for r in base + 1..base + group {
                for (j, &v) in av.row(r).iter().enumerate() {
                    if v > best[j] {
                        best[j] = v;
                        arg[j] = r;
                    }
                }
            }
            vals.extend(best);
            argmax.extend(arg);
        }
        self.push("group_max", Tensor::matrix(n, c, vals), Op::GroupMax { src: a, argmax })
    }

    /// Replicates a `1 x c` row `n` times.
    pub fn broadcast_rows(&self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = require_rank2("broadcast_rows", &av)?;
        if r != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "broadcast_rows expects one row, got {r}"
            )));
        }
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        self.push("broadcast_rows", Tensor::matrix(n, c, data), Op::BroadcastRows(a))
    }

    /// Divides each row (`axis = 1`) or column (`axis = 0`) by
    /// `max(norm, eps)`.
    pub fn l2_normalize(&self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        check_axis("l2_normalize", axis)?;
        let av = self.value(a);
        let (n, c) = require_rank2("l2_normalize", &av)?;
        let mut data = av.data().to_vec();
        let norms: Vec<f64> = if axis == 1 {
            (0..n)
                .map(|i| {
                    let nrm = av.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
                    for v in &mut data[i * c..(i + 1) * c] {
                        *v /= nrm;
                    }
                    nrm
                })
                .collect()
        } else {
            (0..c)
                .map(|j| {
                    let nrm = (0..n).map(|i| av.data()[i * c + j].powi(2)).sum::<f64>().sqrt().max(eps);
                    for i in 0..n {
                        data[i * c + j] /= nrm;
                    }
                    nrm
                })
                .collect()
        };
        self.push(
            "l2_normalize",
            Tensor::matrix(n, c, data),
            Op::L2Normalize { src: a, axis, norms },
        )
    }

    /// Training-mode batch normalization over rows, without the affine part.
    /// The observed mean and unbiased variance are recorded under `name` for
    /// the running-statistics update.
    pub fn batch_norm(&self, a: Var, eps: f64, name: &str) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = require_rank2("batch_norm", &av)?;
        if n == 0 {
            return Err(TensorError::InvalidArgument("batch_norm of zero rows".into()));
        }
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(av.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(av.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            data.extend(
                av.row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((v, m), s)| (v - m) * s),
            );
        }
        let unbiased = if n > 1 {
            var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
        } else {
            var.clone()
        };
        self.bn_updates.borrow_mut().push(BnUpdate {
            name: name.to_string(),
            mean,
            var: unbiased,
        });
        self.push("batch_norm", Tensor::matrix(n, c, data), Op::BatchNorm { src: a, inv_std })
    }

    /// Numerically stable `log(sum(exp(x)))` over an axis.
    pub fn logsumexp(&self, a: Var, axis: usize) -> Result<Var> {
        check_axis("logsumexp", axis)?;
        let av = self.value(a);
        let (n, c) = require_rank2("logsumexp", &av)?;
        let lse = |vals: &mut dyn Iterator<Item = f64>, count: usize| -> f64 {
            let v: Vec<f64> = vals.take(count).collect();
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let out = if axis == 1 {
            Tensor::matrix(n, 1, (0..n).map(|i| lse(&mut av.row(i).iter().copied(), c)).collect())
        } else {
            Tensor::matrix(
                1,
                c,
                (0..c)
                    .map(|j| lse(&mut (0..n).map(|i| av.data()[i * c + j]), n))
                    .collect(),
            )
        };
        self.push("logsumexp", out, Op::LogSumExp { src: a, axis })
    }

    /// `x - logsumexp(x)` along an axis.
    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let lse = self.logsumexp(a, axis)?;
        let n = self.shape(a);
        let spread = if axis == 1 {
            let t = self.transpose(lse)?;
            let b = self.broadcast_rows(t, n[1])?;
            self.transpose(b)?
        } else {
            self.broadcast_rows(lse, n[0])?
        };
        self.sub(a, spread)
    }

    /// Selects `a[i, idx[i]]` per row, giving an `n x 1` column.
    pub fn pick(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = require_rank2("pick", &av)?;
        if idx.len() != n || idx.iter().any(|&j| j >= c) {
            return Err(TensorError::InvalidArgument(format!(
                "pick: {} indices for {n} x {c}",
                idx.len()
            )));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| av.data()[i * c + j]).collect();
        self.push("pick", Tensor::matrix(n, 1, data), Op::Pick { src: a, idx: idx.to_vec() })
    }

    /// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize(a, 1, 1e-12)?;
        let bn = self.l2_normalize(b, 1, 1e-12)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Applies precomputed inverse-distance weights to source features.
    pub fn interpolate(&self, a: Var, weights: Rc<IdwWeights>) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = require_rank2("interpolate", &av)?;
        if n != weights.source_count() {
            return Err(TensorError::InvalidArgument(format!(
                "interpolate: weights built for {} sources, features have {n} rows",
                weights.source_count()
            )));
        }
        let out = weights.apply(av.data(), c);
        self.push(
            "interpolate",
            Tensor::matrix(weights.query_count(), c, out),
            Op::Interpolate { src: a, weights },
        )
    }

    /// Two-directional, non-squared Chamfer distance between the `n x 3`
    /// prediction `a` and a fixed target cloud.
    pub fn chamfer(&self, a: Var, target: Rc<Vec<Point3>>) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = require_rank2("chamfer", &av)?;
        if c != 3 || n == 0 || target.is_empty() {
            return Err(TensorError::InvalidArgument(format!(
                "chamfer expects non-empty n x 3 clouds, got {n} x {c} and {} targets",
                target.len()
            )));
        }
        let pred: Vec<Point3> = (0..n).map(|i| [av.get(i, 0), av.get(i, 1), av.get(i, 2)]).collect();
        let forward = nearest_neighbors(&pred, &target);
        let backward = nearest_neighbors(&target, &pred);
        let total = forward.iter().map(|x| x.1).sum::<f64>() + backward.iter().map(|x| x.1).sum::<f64>();
        self.push(
            "chamfer",
            Tensor::scalar(total),
            Op::Chamfer {
                src: a,
                target,
                forward,
                backward,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. The tape is left untouched, so
    /// calling this twice gives identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0].value;
        if root.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(root.shape(), 1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let shaped = |v: Var, data: Vec<f64>| Tensor {
                shape: nodes[v.0].value.shape().to_vec(),
                data,
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = val(*a).dims2()?;
                    let m = val(*b).cols();
                    let (ad, bd, gd) = (val(*a).data(), val(*b).data(), g.data());
                    // dA = G B^T
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &gd[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB = A^T G
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &gd[r * m..(r + 1) * m];
                        for p in 0..k {
                            let s = ad[r * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += s * gv;
                            }
                        }
                    }
                    acc(&mut grads, *a, shaped(*a, da));
                    acc(&mut grads, *b, shaped(*b, db));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.data().iter().map(|x| -x).collect();
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, shaped(*b, neg));
                }
                Op::Mul(a, b) => {
                    let ga = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    let gb = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, shaped(*a, ga));
                    acc(&mut grads, *b, shaped(*b, gb));
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (s, v) in gr.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *row, shaped(*row, gr));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (val(*a), val(*row));
                    let c = g.cols();
                    let mut ga = Vec::with_capacity(g.len());
                    let mut gr = vec![0.0; c];
                    for r in 0..g.rows() {
                        for j in 0..c {
                            let gv = g.data()[r * c + j];
                            ga.push(gv * rv.data()[j]);
                            gr[j] += gv * av.data()[r * c + j];
                        }
                    }
                    acc(&mut grads, *a, shaped(*a, ga));
                    acc(&mut grads, *row, shaped(*row, gr));
                }
                Op::Scale(a, s) => {
                    let d = g.data().iter().map(|x| x * s).collect();
                    acc(&mut grads, *a, shaped(*a, d));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, shaped(*a, d));
                }
                Op::Tanh(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    acc(&mut grads, *a, shaped(*a, d));
                }
                Op::Exp(a) => {
                    let d = g.data().iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect();
                    acc(&mut grads, *a, shaped(*a, d));
                }
                Op::Log(a) => {
                    let d = g.data().iter().zip(val(*a).data()).map(|(gv, x)| gv / x).collect();
                    acc(&mut grads, *a, shaped(*a, d));
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut offset = 0;
                        for p in parts {
                            let len = val(*p).len();
                            acc(&mut grads, *p, shaped(*p, g.data()[offset..offset + len].to_vec()));
                            offset += len;
                        }
                    } else {
                        let total = g.cols();
                        let mut col = 0;
                        for p in parts {
                            let (n, c) = val(*p).dims2()?;
                            let mut d = Vec::with_capacity(n * c);
                            for r in 0..n {
                                d.extend_from_slice(&g.data()[r * total + col..r * total + col + c]);
                            }
                            acc(&mut grads, *p, shaped(*p, d));
                            col += c;
                        }
                    }
                }
                Op::SliceRows { src, start } => {
                    let c = g.cols();
                    let mut d = vec![0.0; val(*src).len()];
                    d[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::Gather { src, idx } => {
                    let c = g.cols();
                    let mut d = vec![0.0; val(*src).len()];
                    for (r, &s) in idx.iter().enumerate() {
                        for (dv, gv) in d[s * c..(s + 1) * c].iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::Reshape(a) => {
                    let d = g.into_data();
                    acc(&mut grads, *a, shaped(*a, d));
                }
                Op::Transpose(a) => {
                    let (n, c) = val(*a).dims2()?;
                    let mut d = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            d[i * c + j] = g.data()[j * n + i];
                        }
                    }
                    acc(&mut grads, *a, shaped(*a, d));
                }
                Op::Sum { src, axis } => {
                    let sv = val(*src);
                    let d = match axis {
                        None => vec![g.item(); sv.len()],
                        Some(0) => {
                            let c = sv.cols();
                            (0..sv.len()).map(|e| g.data()[e % c]).collect()
                        }
                        Some(_) => {
                            let c = sv.cols();
                            (0..sv.len()).map(|e| g.data()[e / c]).collect()
                        }
                    };
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::MaxPool { src, axis, argmax } => {
                    let (_, c) = val(*src).dims2()?;
                    let mut d = vec![0.0; val(*src).len()];
                    if *axis == 0 {
                        for (j, &r) in argmax.iter().enumerate() {
                            d[r * c + j] += g.data()[j];
                        }
                    } else {
                        for (r, &j) in argmax.iter().enumerate() {
                            d[r * c + j] += g.data()[r];
                        }
                    }
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::GroupMax { src, argmax } => {
                    let c = g.cols();
                    let mut d = vec![0.0; val(*src).len()];
                    for (e, &r) in argmax.iter().enumerate() {
                        d[r * c + e % c] += g.data()[e];
                    }
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::BroadcastRows(a) => {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (s, v) in d.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *a, shaped(*a, d));
                }
                Op::L2Normalize { src, axis, norms } => {
                    // y = x / |x|  =>  dx = (g - y (y . g)) / |x|
                    let y = &node.value;
                    let (n, c) = y.dims2()?;
                    let mut d = vec![0.0; n * c];
                    if *axis == 1 {
                        for i in 0..n {
                            let yr = y.row(i);
                            let gr = g.row(i);
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                            }
                        }
                    } else {
                        for j in 0..c {
                            let dot: f64 = (0..n).map(|i| y.data()[i * c + j] * g.data()[i * c + j]).sum();
                            for i in 0..n {
                                d[i * c + j] = (g.data()[i * c + j] - y.data()[i * c + j] * dot) / norms[j];
                            }
                        }
                    }
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::BatchNorm { src, inv_std } => {
                    let xhat = &node.value;
                    let (n, c) = xhat.dims2()?;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            sum_g[j] += gv;
                            sum_gx[j] += gv * xhat.data()[i * c + j];
                        }
                    }
                    let nf = n as f64;
                    let mut d = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            let e = i * c + j;
                            d[e] = inv_std[j] / nf * (nf * g.data()[e] - sum_g[j] - xhat.data()[e] * sum_gx[j]);
                        }
                    }
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::LogSumExp { src, axis } => {
                    let sv = val(*src);
                    let (n, c) = sv.dims2()?;
                    let lse = node.value.data();
                    let mut d = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            let k = if *axis == 1 { i } else { j };
                            d[i * c + j] = g.data()[k] * (sv.data()[i * c + j] - lse[k]).exp();
                        }
                    }
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::Pick { src, idx } => {
                    let c = val(*src).cols();
                    let mut d = vec![0.0; val(*src).len()];
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * c + j] = g.data()[i];
                    }
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::Interpolate { src, weights } => {
                    let c = g.cols();
                    let d = weights.apply_transpose(g.data(), c);
                    acc(&mut grads, *src, shaped(*src, d));
                }
                Op::Chamfer {
                    src,
                    target,
                    forward,
                    backward,
                } => {
                    let pv = val(*src);
                    let gs = g.item();
                    let mut d = vec![0.0; pv.len()];
                    let mut push = |pi: usize, t: &Point3, dist: f64| {
                        if dist > 0.0 {
                            for a in 0..3 {
                                d[pi * 3 + a] += gs * (pv.data()[pi * 3 + a] - t[a]) / dist;
                            }
                        }
                    };
                    for (pi, &(tj, dist)) in forward.iter().enumerate() {
                        push(pi, &target[tj], dist);
                    }
                    for (tj, &(pi, dist)) in backward.iter().enumerate() {
                        push(pi, &target[tj], dist);
                    }
                    acc(&mut grads, *src, shaped(*src, d));
                }
            }
        }
        Ok(out)
    }
}
