//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar (`1 x 1`) node propagates adjoints back to
//! all leaves, and [`Gradients::params`] collects the adjoints of parameter
//! leaves keyed by parameter id.
//!
//! Parameters are registered once per graph: asking for the same id twice
//! returns the same leaf, so shared weights accumulate their adjoints.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::netcore::{ParamTensor, Tensor2};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor2),
    ScaleBy(Var, Var),
    Recip(Var),
    Sqrt(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    SumRows(Var),
    Transpose(Var),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<(usize, usize)>),
    PairwiseSqDist(Var, Var),
    NormalizeRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_ids: Vec<(Var, String)>,
}

fn same_shape(context: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            context,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn is_scalar(context: &'static str, t: &Tensor2) -> Result<()> {
    if t.shape() != (1, 1) {
        return Err(Error::Dimension {
            context,
            left: t.shape(),
            right: (1, 1),
        });
    }
    Ok(())
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax with max-shift.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_row(out.row_mut(i));
    }
    out
}

/// Row-wise log-softmax, `x - logsumexp(x)`.
pub fn log_softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Squared Euclidean distances between every row of `a` and every row of `b`.
pub fn pairwise_sq_dist(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = ra
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient bookkeeping beyond its own adjoint.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter as a leaf (once per id).
    pub fn param(&mut self, p: &ParamTensor) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf);
        self.params.insert(p.id.clone(), v);
        self.param_ids.push((v, p.id.clone()));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Dimension {
                context: "add_bias",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddConst(a))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor2) -> Result<Var> {
        same_shape("mul_const", self.value(a), &c)?;
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.push(value, Op::MulConst(a, c)))
    }

    /// Multiplies every entry of `a` by the `1 x 1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        is_scalar("scale_by", self.value(s))?;
        let c = self.value(s).item();
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, Op::ScaleBy(a, s)))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Per-row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Tensor2::from_vec(av.rows(), 1, data).expect("row count");
        self.push(value, Op::SumRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::Dimension {
                context: "select_rows",
                left: av.shape(),
                right: (bad, 0),
            });
        }
        let value = av.select_rows(indices);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec())))
    }

    /// Gathers individual entries into a `k x 1` column.
    pub fn gather(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = entries
            .iter()
            .find(|&&(i, j)| i >= av.rows() || j >= av.cols())
        {
            return Err(Error::Dimension {
                context: "gather",
                left: av.shape(),
                right: bad,
            });
        }
        let data = entries.iter().map(|&ij| av[ij]).collect();
        let value = Tensor2::from_vec(entries.len(), 1, data)?;
        Ok(self.push(value, Op::Gather(a, entries.to_vec())))
    }

    /// `D[i][j] = |a_i - b_j|^2`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Dimension {
                context: "pairwise_sq_dist",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let value = pairwise_sq_dist(av, bv);
        Ok(self.push(value, Op::PairwiseSqDist(a, b)))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numerical(format!(
                    "normalize_rows: row {i} has zero norm"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(self.push(value, Op::NormalizeRows(a)))
    }

    /// Propagates adjoints from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        is_scalar("backward", self.value(root))?;
        let mut adj: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddBias(a, bias) => {
                    let mut db = Tensor2::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *bias, db);
                    accumulate(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.map(|x| x * c)),
                Op::AddConst(a) => accumulate(&mut adj, *a, g),
                Op::MulConst(a, c) => accumulate(&mut adj, *a, g.zip_map(c, |x, y| x * y)),
                Op::ScaleBy(a, s) => {
                    let c = self.value(*s).item();
                    let ds = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum::<f64>();
                    accumulate(&mut adj, *s, Tensor2::scalar(ds));
                    accumulate(&mut adj, *a, g.map(|x| x * c));
                }
                Op::Recip(a) => {
                    let da = g.zip_map(out, |x, y| -x * y * y);
                    accumulate(&mut adj, *a, da);
                }
                Op::Sqrt(a) => {
                    let da = g.zip_map(out, |x, y| x / (2.0 * y));
                    accumulate(&mut adj, *a, da);
                }
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut adj, *a, da);
                }
                Op::Tanh(a) => {
                    let da = g.zip_map(out, |x, y| x * (1.0 - y * y));
                    accumulate(&mut adj, *a, da);
                }
                Op::Exp(a) => accumulate(&mut adj, *a, g.zip_map(out, |x, y| x * y)),
                Op::Log(a) => {
                    let da = g.zip_map(self.value(*a), |x, y| x / y);
                    accumulate(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let p = out.row(i);
                        let dot: f64 = g.row(i).iter().zip(p).map(|(x, y)| x * y).sum();
                        for (d, &pj) in da.row_mut(i).iter_mut().zip(p) {
                            *d = pj * (*d - dot);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let total: f64 = g.row(i).iter().sum();
                        for (d, &lp) in da.row_mut(i).iter_mut().zip(out.row(i)) {
                            *d -= lp.exp() * total;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, Tensor2::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Tensor2::zeros(r, c);
                    for i in 0..r {
                        let gi = g[(i, 0)];
                        da.row_mut(i).iter_mut().for_each(|v| *v = gi);
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::SelectRows(a, indices) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Tensor2::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        for (d, v) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Gather(a, entries) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Tensor2::zeros(r, c);
                    for (k, &ij) in entries.iter().enumerate() {
                        da[ij] += g[(k, 0)];
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor2::zeros(av.rows(), av.cols());
                    let mut db = Tensor2::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let w = 2.0 * g[(i, j)];
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..av.cols() {
                                let diff = av[(i, k)] - bv[(j, k)];
                                da[(i, k)] += w * diff;
                                db[(j, k)] -= w * diff;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::NormalizeRows(a) => {
                    let av = self.value(*a);
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let norm = av.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let y = out.row(i);
                        let dot: f64 = g.row(i).iter().zip(y).map(|(x, y)| x * y).sum();
                        for (d, &yj) in da.row_mut(i).iter_mut().zip(y) {
                            *d = (*d - yj * dot) / norm;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
            }
        }

        Ok(Gradients {
            adjoints: adj,
            param_ids: self.param_ids.clone(),
        })
    }
}

fn accumulate(adj: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor2>>,
    param_ids: Vec<(Var, String)>,
}

impl Gradients {
    /// Adjoint of `v`, if any path from the root reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoints of every registered parameter that the root depends on.
    pub fn params(&self) -> BTreeMap<String, Tensor2> {
        self.param_ids
            .iter()
            .filter_map(|(v, id)| self.wrt(*v).map(|g| (id.clone(), g.clone())))
            .collect()
    }
}
