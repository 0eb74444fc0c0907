//! Reverse-mode differentiation over a fixed vocabulary of matrix ops.
//!
//! A [`Graph`] records every value as it is computed; [`Graph::backward`]
//! walks the record in reverse and accumulates adjoints. Only parameters
//! bound through [`Graph::param`] receive gradients.

use std::collections::BTreeMap;

use super::params::{Gradients, ParamStore};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};
use crate::survival::efron_nll_log;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Scale(Var, f64),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// Row-wise select between two same-shaped inputs.
    Blend { new: Var, old: Var, mask: Vec<bool> },
    /// Picks single elements (var, flat index) into a column.
    Gather(Vec<(Var, usize)>),
    Sum(Var),
    /// Efron negative log partial likelihood of a column of log scores;
    /// the gradient is computed with the value.
    Efron { input: Var, grad: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Scale(..) => "scale",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Blend { .. } => "blend_rows",
            Op::Gather(..) => "gather",
            Op::Sum(..) => "sum",
            Op::Efron { .. } => "efron_nll",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            let trail: Vec<&str> = self.nodes.iter().rev().take(4).map(|n| n.op.name()).collect();
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value at node {} (preceded by {:?})",
                op.name(),
                self.nodes.len(),
                trail
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.push(t, Op::Leaf)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul(ta, tb);
        self.push(out, Op::MatMul(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let values = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let values = ta
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.values()[i % n])
            .collect();
        let out = Tensor::matrix(ta.rows(), n, values)?;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scaled(c);
        self.push(out, Op::Scale(a, c))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("columns {start}..{} of {:?}", start + len, ta.shape()),
            });
        }
        let mut values = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            values.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(ta.rows(), len, values)?;
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols", self.value(parts[0]), self.value(*bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                values.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, values)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `i` of the result is row `i` of `new` where `mask[i]`, else of `old`.
    pub fn blend_rows(&mut self, new: Var, old: Var, mask: &[bool]) -> Result<Var> {
        let (tn, to) = (self.value(new), self.value(old));
        if !tn.same_shape(to) || mask.len() != tn.rows() {
            return Err(shape_err("blend_rows", tn, to));
        }
        let mut values = Vec::with_capacity(tn.len());
        for (r, &m) in mask.iter().enumerate() {
            values.extend_from_slice(if m { tn.row(r) } else { to.row(r) });
        }
        let out = Tensor::new(tn.shape().to_vec(), values)?;
        self.push(
            out,
            Op::Blend {
                new,
                old,
                mask: mask.to_vec(),
            },
        )
    }

    /// Collects single elements into an `n x 1` column.
    pub fn gather(&mut self, picks: &[(Var, usize)]) -> Result<Var> {
        let mut values = Vec::with_capacity(picks.len());
        for &(v, idx) in picks {
            let t = self.value(v);
            let x = *t.values().get(idx).ok_or_else(|| Error::ShapeMismatch {
                op: "gather",
                detail: format!("index {idx} into {:?}", t.shape()),
            })?;
            values.push(x);
        }
        self.push(Tensor::column(values), Op::Gather(picks.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Efron negative log partial likelihood of a column of log hazard
    /// ratios.
    pub fn efron_nll(&mut self, log_scores: Var, durations: &[f64], events: &[bool]) -> Result<Var> {
        let t = self.value(log_scores);
        if t.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "efron_nll",
                detail: format!("expected a column, got {:?}", t.shape()),
            });
        }
        let (nll, grad) = efron_nll_log(t.values(), durations, events)?;
        self.push(
            Tensor::scalar(nll),
            Op::Efron {
                input: log_scores,
                grad,
            },
        )
    }

    /// Adjoints of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, matmul_nt(&g, tb));
                    acc(&mut adj, *b, matmul_tn(ta, &g));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::AddRow(a, row) => {
                    let n = g.cols();
                    let mut rg = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (s, x) in rg.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    acc(&mut adj, *row, Tensor::matrix(1, n, rg)?);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = zip(&g, tb, |x, y| x * y);
                    let gb = zip(&g, ta, |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let d = zip(&g, &node.value, |x, s| x * s * (1.0 - s));
                    acc(&mut adj, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip(&g, &node.value, |x, t| x * (1.0 - t * t));
                    acc(&mut adj, *a, d);
                }
                Op::Exp(a) => {
                    let d = zip(&g, &node.value, |x, e| x * e);
                    acc(&mut adj, *a, d);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, g.scaled(*c)),
                Op::SliceCols(a, start) => {
                    let ta = self.value(*a);
                    let mut full = Tensor::zeros(ta.rows(), ta.cols());
                    let (w, len) = (ta.cols(), g.cols());
                    for r in 0..g.rows() {
                        full.values_mut()[r * w + start..r * w + start + len].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let len = tp.cols();
                        let mut values = Vec::with_capacity(tp.len());
                        for r in 0..g.rows() {
                            values.extend_from_slice(&g.row(r)[offset..offset + len]);
                        }
                        acc(&mut adj, p, Tensor::new(tp.shape().to_vec(), values)?);
                        offset += len;
                    }
                }
                Op::Blend { new, old, mask } => {
                    let c = g.cols();
                    let mut gn = Tensor::new(g.shape().to_vec(), vec![0.0; g.len()])?;
                    let mut go = gn.clone();
                    for (r, &m) in mask.iter().enumerate() {
                        let dst = if m { &mut gn } else { &mut go };
                        dst.values_mut()[r * c..(r + 1) * c].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *new, gn);
                    acc(&mut adj, *old, go);
                }
                Op::Gather(picks) => {
                    for (i, &(v, flat)) in picks.iter().enumerate() {
                        let tv = self.value(v);
                        let mut sparse = Tensor::new(tv.shape().to_vec(), vec![0.0; tv.len()])?;
                        sparse.values_mut()[flat] = g.values()[i];
                        acc(&mut adj, v, sparse);
                    }
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    let s = g.values()[0];
                    acc(&mut adj, *a, Tensor::new(ta.shape().to_vec(), vec![s; ta.len()])?);
                }
                Op::Efron { input, grad } => {
                    let s = g.values()[0];
                    acc(&mut adj, *input, Tensor::column(grad.iter().map(|x| x * s).collect()));
                }
            }
        }

        let mut grads = Gradients::default();
        for (name, v) in &self.bound {
            let g = adj[v.0]
                .take()
                .unwrap_or_else(|| Tensor::new(self.value(*v).shape().to_vec(), vec![0.0; self.value(*v).len()]).unwrap());
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), values).expect("same shape")
}

/// Builds a graph with `build`, returning the scalar loss and the gradient
/// of every parameter it bound.
pub fn forward_backward<F>(params: &ParamStore, build: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    let value = g.value(loss).values()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(n, t.clone());
        }
        s
    }

    #[test]
    fn sum_of_params_has_unit_gradients() {
        let p = store(&[("w", Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap())]);
        let (loss, grads) = forward_backward(&p, |g| {
            let w = g.param("w")?;
            g.sum(w)
        })
        .unwrap();
        assert_eq!(loss, 5.5);
        assert!(grads.get("w").unwrap().values().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let p = store(&[("x", Tensor::scalar(0.0))]);
        let (_, grads) = forward_backward(&p, |g| {
            let x = g.param("x")?;
            let s = g.sigmoid(x)?;
            g.sum(s)
        })
        .unwrap();
        assert_eq!(grads.get("x").unwrap().values()[0], 0.25);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let p = store(&[("a", Tensor::zeros(2, 3)), ("b", Tensor::zeros(2, 3))]);
        let err = forward_backward(&p, |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            g.matmul(a, b)
        })
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn overflow_is_reported_with_op() {
        let p = store(&[("x", Tensor::scalar(1000.0))]);
        let err = forward_backward(&p, |g| {
            let x = g.param("x")?;
            g.exp(x)
        })
        .unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("exp")),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Exercises every op in one scalar loss.
    fn kitchen_sink(g: &mut Graph<'_>) -> Result<Var> {
        let x = g.input(Tensor::matrix(3, 2, vec![0.3, -1.2, 0.0, 0.8, 1.5, 0.1])?)?;
        let w = g.param("w")?;
        let b = g.param("b")?;
        let h = g.matmul(x, w)?;
        let h = g.add_row(h, b)?;
        let left = g.slice_cols(h, 0, 2)?;
        let right = g.slice_cols(h, 2, 2)?;
        let s = g.sigmoid(left)?;
        let t = g.tanh(right)?;
        let m = g.mul(s, t)?;
        let a = g.add(m, s)?;
        let old = g.scale(t, 0.5)?;
        let bl = g.blend_rows(a, old, &[true, false, true])?;
        let cat = g.concat_cols(&[bl, t])?;
        let e = g.exp(cat)?;
        let picks = g.gather(&[(e, 0), (e, 5), (e, 7), (cat, 10), (h, 3)])?;
        let nll = g.efron_nll(picks, &[1.0, 2.0, 2.0, 3.0, 1.5], &[true, true, true, false, true])?;
        let extra = g.sum(e)?;
        let extra = g.scale(extra, 0.1)?;
        g.add(nll, extra)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let p = store(&[
            ("w", Tensor::matrix(2, 4, vec![0.2, -0.4, 0.9, 0.1, -0.7, 0.3, 0.05, -0.6]).unwrap()),
            ("b", Tensor::matrix(1, 4, vec![0.1, 0.0, -0.2, 0.3]).unwrap()),
        ]);
        let (_, grads) = forward_backward(&p, kitchen_sink).unwrap();
        let report = finite_diff_check(
            &p,
            &grads,
            |q| forward_backward(q, kitchen_sink).map(|(v, _)| v),
            1e-5,
            1e-6,
            usize::MAX,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let p = store(&[
            ("w", Tensor::matrix(2, 4, vec![0.2, -0.4, 0.9, 0.1, -0.7, 0.3, 0.05, -0.6]).unwrap()),
            ("b", Tensor::matrix(1, 4, vec![0.1, 0.0, -0.2, 0.3]).unwrap()),
        ]);
        let second = |g: &mut Graph<'_>| -> Result<Var> {
            let w = g.param("w")?;
            let t = g.tanh(w)?;
            g.sum(t)
        };
        let (_, g1) = forward_backward(&p, kitchen_sink).unwrap();
        let (_, g2) = forward_backward(&p, second).unwrap();
        let (_, gc) = forward_backward(&p, |g| {
            let l1 = kitchen_sink(g)?;
            let l2 = second(g)?;
            let a = g.scale(l1, 2.0)?;
            let b = g.scale(l2, -3.0)?;
            g.add(a, b)
        })
        .unwrap();
        for (i, v) in gc.get("w").unwrap().values().iter().enumerate() {
            let expected = 2.0 * g1.get("w").unwrap().values()[i] - 3.0 * g2.get("w").unwrap().values()[i];
            assert!((v - expected).abs() < 1e-12);
        }
        // `b` is untouched by the second loss
        for (v, w) in gc.get("b").unwrap().values().iter().zip(g1.get("b").unwrap().values()) {
            assert!((v - 2.0 * w).abs() < 1e-12);
        }
    }
}
