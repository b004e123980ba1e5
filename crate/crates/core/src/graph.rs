//! Eager reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are
//! insertion order, which is already a topological order, so the backward pass
//! is a single reverse sweep that visits each node once. A graph is built for
//! one forward pass and dropped after `backward`.

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    /// Softmax restricted to a fixed per-row support; `support[r]` holds the
    /// selected column indices of row `r`.
    TopkSoftmax {
        input: Var,
        support: Vec<Vec<usize>>,
    },
    MixBlocks {
        input: Var,
        mix: Tensor<T>,
        blocks: usize,
        block_len: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Mse {
        input: Var,
        target: Tensor<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    counter: Option<CostModel>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            counter: None,
        }
    }

    /// A graph that counts matmul multiplies and softmax entries as it runs.
    pub fn instrumented() -> Self {
        Graph {
            counter: Some(CostModel::default()),
            ..Self::new()
        }
    }

    pub fn is_instrumented(&self) -> bool {
        self.counter.is_some()
    }

    /// Counts accumulated so far.
    pub fn counts(&self) -> Result<CostModel> {
        self.counter
            .ok_or_else(|| Error::contract("cost instrumentation is disabled on this graph"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// requires a gradient and was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Selected column indices per row, for a node produced by `topk_softmax`.
    pub fn topk_support(&self, v: Var) -> Option<&[Vec<usize>]> {
        match &self.nodes[v.0].op {
            Op::TopkSoftmax { support, .. } => Some(support),
            _ => None,
        }
    }

    /// Learnable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn count(&mut self, f: impl FnOnce(&mut CostModel)) {
        if let Some(c) = self.counter.as_mut() {
            f(c);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (p, q) = (self.value(a).rows(), self.value(a).cols());
        let r = self.value(b).cols();
        self.count(|c| c.matmul_multiplies += (p * q * r) as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Row-major reshape to `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if rows * cols != x.numel() {
            return Err(Error::dim("reshape", x.shape(), &[rows, cols]));
        }
        let out = Tensor::new(vec![rows, cols], x.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × c` row to every row of a `r × c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        if !x.is_matrix() || b.shape() != [1, x.cols()] {
            return Err(Error::dim("add_row", x.shape(), b.shape()));
        }
        let c = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.expect_matrix("softmax_rows")?;
        let out = softmax_rows(x);
        let n = x.numel() as u64;
        self.count(|c| c.softmax_entries += n);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise softmax over the `k` largest entries of each row; every other
    /// entry is exactly zero. Ties go to the lowest column index. The selection
    /// is held fixed in the backward pass.
    pub fn topk_softmax(&mut self, a: Var, k: usize) -> Result<Var> {
        if k < 1 {
            return Err(Error::contract("topk_softmax requires k >= 1"));
        }
        let x = self.value(a);
        x.expect_matrix("topk_softmax")?;
        let (r, c) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[r, c]);
        let mut support = Vec::with_capacity(r);
        for i in 0..r {
            let sel = topk_indices(x.row(i), k);
            let m = sel.iter().map(|&j| x.get(i, j)).fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = sel.iter().map(|&j| (x.get(i, j) - m).exp()).collect();
            let z: T = exps.iter().copied().sum();
            for (&j, e) in sel.iter().zip(exps) {
                out.set(i, j, e / z);
            }
            support.push(sel);
        }
        let n = (r * c) as u64;
        self.count(|cm| cm.softmax_entries += n);
        let rg = self.rg(a);
        Ok(self.push(out, Op::TopkSoftmax { input: a, support }, rg))
    }

    /// Mixes column blocks of `a` with a square matrix:
    /// `out[l, t·len + j] = Σ_s mix[t, s] · a[l, s·len + j]`.
    pub fn mix_blocks(&mut self, a: Var, mix: &Tensor<T>, block_len: usize) -> Result<Var> {
        let x = self.value(a);
        x.expect_matrix("mix_blocks")?;
        let blocks = mix.rows();
        if mix.shape() != [blocks, blocks] || blocks * block_len != x.cols() {
            return Err(Error::dim("mix_blocks", x.shape(), mix.shape()));
        }
        let out = mix_blocks_value(x, mix, blocks, block_len, false);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::MixBlocks {
                input: a,
                mix: mix.clone(),
                blocks,
                block_len,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / T::from_usize_lossy(x.numel()));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Column means of a matrix, as a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.expect_matrix("mean_rows")?;
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let n = T::from_usize_lossy(r);
        let out = Tensor::new(vec![1, c], out.into_iter().map(|v| v / n).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { input: a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let c = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            if !x.is_matrix() || x.cols() != c {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), x.shape()));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != target.shape() {
            return Err(Error::dim("mse", x.shape(), target.shape()));
        }
        let s = x
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        let out = Tensor::scalar(s / T::from_usize_lossy(x.numel()));
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::Mse {
                input: a,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        x.expect_matrix("cross_entropy")?;
        if labels.len() != x.rows() {
            return Err(Error::dim("cross_entropy", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                x.cols()
            )));
        }
        let probs = softmax_rows(x);
        let mut nll = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = x.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            nll += lse - row[l];
        }
        let out = Tensor::scalar(nll / T::from_usize_lossy(labels.len()));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[T]) -> Result<Var> {
        if inputs.len() != weights.len() {
            return Err(Error::contract(format!(
                "{} terms but {} weights",
                inputs.len(),
                weights.len()
            )));
        }
        let mut s = T::zero();
        for (&v, &w) in inputs.iter().zip(weights) {
            let x = self.value(v);
            if x.numel() != 1 {
                return Err(Error::dim("weighted_sum", x.shape(), &[1, 1]));
            }
            s += w * x.item();
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += *x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(&self.value(*b).transpose()?)?)?;
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).transpose()?.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?)?,
            Op::Reshape(a) => acc(*a, Tensor::new(self.value(*a).shape().to_vec(), g.data().to_vec())?)?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                let c = g.cols();
                let mut d = vec![T::zero(); c];
                for (i, &v) in g.data().iter().enumerate() {
                    d[i % c] += v;
                }
                acc(*row, Tensor::new(vec![1, c], d)?)?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_with(y, "mul", |u, v| u * v)?)?;
                acc(*b, g.zip_with(x, "mul", |u, v| u * v)?)?;
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_with(x, "relu", |u, v| if v > T::zero() { u } else { T::zero() })?,
                )?;
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g.zip_with(y, "tanh", |u, v| u * (T::one() - v * v))?)?;
            }
            // Unselected entries have y = 0, so the same formula covers top-k.
            Op::Softmax(a) | Op::TopkSoftmax { input: a, .. } => {
                let y = &node.value;
                let c = y.cols();
                let mut d = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        d.set(i, j, yr[j] * (gr[j] - dot));
                    }
                }
                acc(*a, d)?;
            }
            Op::MixBlocks {
                input,
                mix,
                blocks,
                block_len,
            } => {
                acc(*input, mix_blocks_value(g, mix, *blocks, *block_len, true))?;
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), s))?;
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let s = g.item() / T::from_usize_lossy(x.numel());
                acc(*a, Tensor::full(x.shape(), s))?;
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = T::from_usize_lossy(x.rows());
                let c = x.cols();
                acc(*a, Tensor::from_fn(x.rows(), c, |_, j| g.data()[j] / n))?;
            }
            Op::SliceRows { input, start } => {
                let x = self.value(*input);
                let c = x.cols();
                let mut d = Tensor::zeros(x.shape());
                d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(*input, d)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let piece = Tensor::new(self.value(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    acc(p, piece)?;
                    offset += n;
                }
            }
            Op::Mse { input, target } => {
                let x = self.value(*input);
                let k = T::lit(2.0) * g.item() / T::from_usize_lossy(x.numel());
                acc(*input, x.zip_with(target, "mse", |p, t| k * (p - t))?)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = g.item() / T::from_usize_lossy(labels.len());
                let mut d = probs.scale(k);
                for (i, &l) in labels.iter().enumerate() {
                    let v = d.get(i, l);
                    d.set(i, l, v - k);
                }
                acc(*logits, d)?;
            }
            Op::WeightedSum { inputs, weights } => {
                for (&v, &w) in inputs.iter().zip(weights) {
                    acc(v, Tensor::scalar(w * g.item()))?;
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable row softmax of a matrix.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / z);
        }
    }
    out
}

/// Indices of the `k` largest entries (all of them when `k >= row.len()`),
/// ties broken toward the lowest index, returned in ascending index order.
pub fn topk_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < row.len() {
        // Stable sort keeps lower indices first among equal values.
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

fn mix_blocks_value<T: Scalar>(
    x: &Tensor<T>,
    mix: &Tensor<T>,
    blocks: usize,
    block_len: usize,
    transposed: bool,
) -> Tensor<T> {
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape());
    for l in 0..rows {
        let xr = x.row(l);
        for t in 0..blocks {
            for j in 0..block_len {
                let mut s = T::zero();
                for b in 0..blocks {
                    let w = if transposed { mix.get(b, t) } else { mix.get(t, b) };
                    s += w * xr[b * block_len + j];
                }
                out.set(l, t * block_len + j, s);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(row(&[0.0, 0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);

        let x = g.constant(row(&[1000.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert!(g.value(y).is_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-15);
        assert!(g.value(y).data()[1] < 1e-300);

        // Reference: exp(i) / (e + e^2 + e^3) evaluated independently.
        let x = g.constant(row(&[1.0, 2.0, 3.0]));
        let y = g.softmax_rows(x).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn topk_examples() {
        let mut g = Graph::new();
        let x = g.constant(row(&[5.0, 5.0, 5.0, 5.0]));
        let y = g.topk_softmax(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(g.topk_support(y).unwrap(), &[vec![0, 1]]);

        // Reference: softmax over [3, 4] only.
        let x = g.constant(row(&[1.0, 2.0, 3.0, 4.0]));
        let y = g.topk_softmax(x, 2).unwrap();
        let expect = [0.0, 0.0, 0.2689414213699951, 0.7310585786300049];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(g.topk_softmax(x, 0).is_err());
    }

    #[test]
    fn backward_linear_and_square() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(x) + sum(3x)  →  df/dx = 4
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::ones(&[2, 3]));
        let a = g.sum(x);
        let x3 = g.scale(x, 3.0);
        let b = g.sum(x3);
        let f = g.add(a, b).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0; 6]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::ones(&[1, 2]));
        let c = g.constant(Tensor::<f64>::ones(&[1, 2]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn counts_require_instrumentation() {
        let g = Graph::<f64>::new();
        assert!(g.counts().is_err());
        let mut g = Graph::<f64>::instrumented();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        g.matmul(a, b).unwrap();
        g.softmax_rows(a).unwrap();
        let c = g.counts().unwrap();
        assert_eq!((c.matmul_multiplies, c.softmax_entries), (24, 6));
    }
}
