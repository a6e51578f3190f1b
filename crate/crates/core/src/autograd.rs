//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one node per operation whose inputs include at least one
//! tracked [`Var`]. Operations on constants only compute a value and record
//! nothing, so a forward pass over constant parameters leaves the tape
//! untouched.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{config_err, ComaError, Result};
use crate::kernels::{self, Conv2dGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,
    MatMulNt,
    Transpose,
    Reshape,
    Gather,
    GatherRows,
    ScatterRows,
    BroadcastRows,
    SliceCols,
    ConcatCols,
    Softmax,
    LayerNorm,
    Gelu,
    Conv2d,
    MaxPool2d,
    Sum,
    Mean,
}

type InputGrads<T> = Vec<Option<Tensor<T>>>;
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<InputGrads<T>>>;

struct Node<T> {
    kind: OpKind,
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
}

/// A value, optionally linked to the graph node that produced it.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    /// An untracked value; gradients never flow into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Self { value: Rc::new(value), node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf, if the loss depends on it.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros for leaves the loss does not reach.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

/// The differentiation tape. Records are appended in execution order, so every
/// input of record `j` has an index below `j`.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same<T: Scalar>(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(config_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of records on the tape.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes.borrow().iter().map(|n| n.kind).collect()
    }

    /// A tracked input, typically a trainable parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { kind: OpKind::Leaf, inputs: Vec::new(), backward: None });
        Var { value: Rc::new(value), node: Some(nodes.len() - 1) }
    }

    fn record(
        &self,
        kind: OpKind,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<InputGrads<T>> + 'static,
    ) -> Var<T> {
        if inputs.iter().all(|v| v.node.is_none()) {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            kind,
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var { value: Rc::new(value), node: Some(nodes.len() - 1) }
    }

    /// Propagates `d loss / d loss = 1` back through the tape.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(ComaError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| ComaError::Usage("loss does not depend on any tracked value".into()))?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.shape().to_vec()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(src), Some(ig)) = (input, ig) else { continue };
                match &mut grads[*src] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_same(a, b, "add")?;
        let value = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.record(OpKind::Add, &[a, b], value, |g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_same(a, b, "sub")?;
        let value = a.value.zip_map(&b.value, |x, y| x - y)?;
        Ok(self.record(OpKind::Sub, &[a, b], value, |g, _| {
            Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])
        }))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_same(a, b, "mul")?;
        let value = a.value.zip_map(&b.value, |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(OpKind::Mul, &[a, b], value, move |g, needs| {
            Ok(vec![
                needs[0].then(|| g.zip_map(&bv, |x, y| x * y)).transpose()?,
                needs[1].then(|| g.zip_map(&av, |x, y| x * y)).transpose()?,
            ])
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Result<Var<T>> {
        let value = a.value.map(|x| x * c);
        Ok(self.record(OpKind::Scale, &[a], value, move |g, _| Ok(vec![Some(g.map(|x| x * c))])))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_bias(&self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let cols = *x.shape().last().ok_or_else(|| config_err!("bias on a scalar"))?;
        if b.shape() != [cols] {
            return Err(config_err!("bias {:?} for rows of {cols}", b.shape()));
        }
        let mut data = x.value.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b.value.data()) {
                *v += bv;
            }
        }
        let value = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.record(OpKind::AddBias, &[x, b], value, move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); cols];
                for row in g.data().chunks_exact(cols) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_vec([cols], acc)
            });
            Ok(vec![Some(g.clone()), gb.transpose()?])
        }))
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = kernels::matmul(&a.value, &b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(OpKind::MatMul, &[a, b], value, move |g, needs| {
            Ok(vec![
                needs[0].then(|| kernels::matmul_nt(g, &bv)).transpose()?,
                needs[1].then(|| kernels::matmul_tn(&av, g)).transpose()?,
            ])
        }))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = kernels::matmul_nt(&a.value, &b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(OpKind::MatMulNt, &[a, b], value, move |g, needs| {
            Ok(vec![
                needs[0].then(|| kernels::matmul(g, &bv)).transpose()?,
                needs[1].then(|| kernels::matmul_tn(g, &av)).transpose()?,
            ])
        }))
    }

    pub fn transpose(&self, a: &Var<T>) -> Result<Var<T>> {
        let value = kernels::transpose2d(&a.value)?;
        Ok(self.record(OpKind::Transpose, &[a], value, |g, _| {
            Ok(vec![Some(kernels::transpose2d(g)?)])
        }))
    }

    pub fn reshape(&self, a: &Var<T>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let value = a.value.reshape(shape)?;
        let original = a.shape().to_vec();
        Ok(self.record(OpKind::Reshape, &[a], value, move |g, _| {
            Ok(vec![Some(g.reshape(original.clone())?)])
        }))
    }

    /// Element gather: `out.flat[i] = x.flat[index[i]]`, laid out as `shape`.
    /// Repeated indices accumulate in the backward pass.
    pub fn gather(&self, x: &Var<T>, index: Rc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let n = x.value.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(config_err!("gather index {bad} out of range for {n} elements"));
        }
        let src = x.value.data();
        let value = Tensor::from_vec(shape, index.iter().map(|&i| src[i]).collect())?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(OpKind::Gather, &[x], value, move |g, _| {
            let mut acc = Tensor::zeros(in_shape.clone());
            let d = acc.data_mut();
            for (&i, &v) in index.iter().zip(g.data()) {
                d[i] += v;
            }
            Ok(vec![Some(acc)])
        }))
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&self, x: &Var<T>, rows: &[usize]) -> Result<Var<T>> {
        let (n, c) = x.value.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(config_err!("row index {bad} out of range for {n} rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(x.value.row(r));
        }
        let value = Tensor::from_vec([rows.len(), c], data)?;
        let rows = rows.to_vec();
        Ok(self.record(OpKind::GatherRows, &[x], value, move |g, _| {
            let mut acc = vec![T::zero(); n * c];
            for (k, &r) in rows.iter().enumerate() {
                for (a, &v) in acc[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                    *a += v;
                }
            }
            Ok(vec![Some(Tensor::from_vec([n, c], acc)?)])
        }))
    }

    /// Copy of `template` with row `rows[k]` replaced by row `k` of `src`.
    /// Row indices must be distinct.
    pub fn scatter_rows(&self, src: &Var<T>, rows: &[usize], template: &Var<T>) -> Result<Var<T>> {
        let (m, c) = src.value.dims2()?;
        let (n, c2) = template.value.dims2()?;
        if c != c2 || m != rows.len() {
            return Err(config_err!(
                "scatter {:?} into {:?} at {} rows",
                src.shape(),
                template.shape(),
                rows.len()
            ));
        }
        let mut seen = vec![false; n];
        for &r in rows {
            if r >= n {
                return Err(config_err!("row index {r} out of range for {n} rows"));
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(ComaError::Invariant(format!("duplicate scatter row {r}")));
            }
        }
        let mut data = template.value.data().to_vec();
        for (k, &r) in rows.iter().enumerate() {
            data[r * c..(r + 1) * c].copy_from_slice(src.value.row(k));
        }
        let value = Tensor::from_vec([n, c], data)?;
        let rows = rows.to_vec();
        Ok(self.record(OpKind::ScatterRows, &[src, template], value, move |g, needs| {
            let gs = needs[0].then(|| {
                let mut d = Vec::with_capacity(m * c);
                for &r in &rows {
                    d.extend_from_slice(g.row(r));
                }
                Tensor::from_vec([m, c], d)
            });
            let gt = needs[1].then(|| {
                let mut d = g.data().to_vec();
                for &r in &rows {
                    d[r * c..(r + 1) * c].fill(T::zero());
                }
                Tensor::from_vec([n, c], d)
            });
            Ok(vec![gs.transpose()?, gt.transpose()?])
        }))
    }

    /// Stacks a vector `n` times into an `n × len` matrix.
    pub fn broadcast_rows(&self, v: &Var<T>, n: usize) -> Result<Var<T>> {
        let [c] = v.shape()[..] else {
            return Err(config_err!("broadcast_rows needs a vector, got {:?}", v.shape()));
        };
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(v.value.data());
        }
        let value = Tensor::from_vec([n, c], data)?;
        Ok(self.record(OpKind::BroadcastRows, &[v], value, move |g, _| {
            let mut acc = vec![T::zero(); c];
            for row in g.data().chunks_exact(c) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            Ok(vec![Some(Tensor::from_vec([c], acc)?)])
        }))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let (r, c) = x.value.dims2()?;
        if start + len > c {
            return Err(config_err!("column slice {start}..{} of {c}", start + len));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.value.row(i)[start..start + len]);
        }
        let value = Tensor::from_vec([r, len], data)?;
        Ok(self.record(OpKind::SliceCols, &[x], value, move |g, _| {
            let mut acc = vec![T::zero(); r * c];
            for i in 0..r {
                acc[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
            }
            Ok(vec![Some(Tensor::from_vec([r, c], acc)?)])
        }))
    }

    pub fn concat_cols(&self, parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| config_err!("concat of nothing"))?;
        let (r, _) = first.value.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.value.dims2()?;
            if pr != r {
                return Err(config_err!("concat rows {pr} vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.value.row(i));
            }
        }
        let value = Tensor::from_vec([r, total], data)?;
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Ok(self.record(OpKind::ConcatCols, &refs, value, move |g, needs| {
            let mut out = Vec::with_capacity(widths.len());
            let mut start = 0;
            for (k, &w) in widths.iter().enumerate() {
                if needs[k] {
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&g.row(i)[start..start + w]);
                    }
                    out.push(Some(Tensor::from_vec([r, w], d)?));
                } else {
                    out.push(None);
                }
                start += w;
            }
            Ok(out)
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = kernels::softmax_rows(&x.value)?;
        let y = Rc::new(value.clone());
        Ok(self.record(OpKind::Softmax, &[x], value, move |g, _| {
            Ok(vec![Some(kernels::softmax_rows_backward(&y, g)?)])
        }))
    }

    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let (value, cache) = kernels::layer_norm_rows(&x.value, &gamma.value, &beta.value, eps)?;
        let gv = gamma.value.clone();
        Ok(self.record(OpKind::LayerNorm, &[x, gamma, beta], value, move |g, _| {
            let (dx, dg, db) = kernels::layer_norm_rows_backward(&cache, &gv, g)?;
            Ok(vec![Some(dx), Some(dg), Some(db)])
        }))
    }

    pub fn gelu(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = x.value.map(kernels::gelu);
        let xv = x.value.clone();
        Ok(self.record(OpKind::Gelu, &[x], value, move |g, _| {
            Ok(vec![Some(g.zip_map(&xv, |gv, v| gv * kernels::gelu_grad(v))?)])
        }))
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        geom: Conv2dGeometry,
    ) -> Result<Var<T>> {
        if x.value.dtype() != weight.value.dtype() {
            return Err(config_err!("conv weight dtype differs from input"));
        }
        let value = kernels::conv2d(&x.value, &weight.value, bias.map(|b| b.value()), geom)?;
        let (xv, wv) = (x.value.clone(), weight.value.clone());
        let backward = move |g: &Tensor<T>, _: &[bool]| {
            let grads = kernels::conv2d_backward(&xv, &wv, g, geom)?;
            Ok(vec![Some(grads.input), Some(grads.weight), Some(grads.bias)])
        };
        Ok(match bias {
            Some(b) => self.record(OpKind::Conv2d, &[x, weight, b], value, backward),
            None => self.record(OpKind::Conv2d, &[x, weight], value, move |g, needs| {
                let mut v = backward(g, needs)?;
                v.truncate(2);
                Ok(v)
            }),
        })
    }

    /// Non-overlapping max pooling; the gradient goes to the first maximum.
    pub fn maxpool2d(&self, x: &Var<T>, window: usize) -> Result<Var<T>> {
        let (value, arg) = kernels::maxpool2d(&x.value, window)?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(OpKind::MaxPool2d, &[x], value, move |g, _| {
            let mut acc = Tensor::zeros(in_shape.clone());
            let d = acc.data_mut();
            for (&i, &v) in arg.iter().zip(g.data()) {
                d[i] += v;
            }
            Ok(vec![Some(acc)])
        }))
    }

    pub fn sum(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = Tensor::scalar(x.value.sum());
        let shape = x.shape().to_vec();
        Ok(self.record(OpKind::Sum, &[x], value, move |g, _| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.item()?))])
        }))
    }

    pub fn mean(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = x.value.numel();
        if n == 0 {
            return Err(config_err!("mean of an empty tensor"));
        }
        let inv = T::one() / T::of_usize(n);
        let value = Tensor::scalar(x.value.sum() * inv);
        let shape = x.shape().to_vec();
        Ok(self.record(OpKind::Mean, &[x], value, move |g, _| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.item()? * inv))])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(&x, &x).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::iota([2, 3]));
        let s = g.sum(&x).unwrap();
        let grads = g.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::iota([2]));
        let y = g.scale(&x, 2.0).unwrap();
        assert!(matches!(g.backward(&y), Err(ComaError::Usage(_))));
    }

    #[test]
    fn constants_record_nothing() {
        let g = Graph::<f64>::new();
        let a = Var::constant(Tensor::iota([2, 2]));
        let b = g.matmul(&a, &a).unwrap();
        let _ = g.softmax_rows(&b).unwrap();
        assert!(g.is_empty());
        assert!(!b.is_tracked());
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::iota([2, 2]));
        let y = g.matmul(&x, &x).unwrap();
        let z = g.add(&y, &x).unwrap();
        assert!(x.node().unwrap() < y.node().unwrap());
        assert!(y.node().unwrap() < z.node().unwrap());
        assert_eq!(g.kinds(), vec![OpKind::Leaf, OpKind::MatMul, OpKind::Add]);
    }

    #[test]
    fn gather_scatter_roundtrip_is_exact() {
        let g = Graph::<f64>::new();
        let x = Var::constant(Tensor::from_fn([5, 3], |i| (i as f64).sqrt()));
        let template = Var::constant(Tensor::full([5, 3], -7.0));
        let rows = [4, 0, 2];
        let picked = g.gather_rows(&x, &rows).unwrap();
        let back = g.scatter_rows(&picked, &rows, &template).unwrap();
        for r in 0..5 {
            let want = if rows.contains(&r) { x.value().row(r) } else { template.value().row(r) };
            assert_eq!(back.value().row(r), want);
        }
    }

    #[test]
    fn scatter_rejects_duplicates_and_out_of_range() {
        let g = Graph::<f64>::new();
        let src = Var::constant(Tensor::zeros([2, 1]));
        let t = Var::constant(Tensor::zeros([3, 1]));
        assert!(matches!(g.scatter_rows(&src, &[1, 1], &t), Err(ComaError::Invariant(_))));
        assert!(matches!(g.scatter_rows(&src, &[0, 3], &t), Err(ComaError::Config(_))));
        assert!(g.gather_rows(&t, &[3]).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x·x + 2x) at x = [1, -2] = 2x + 2
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([2], vec![1.0, -2.0]).unwrap());
        let sq = g.mul(&x, &x).unwrap();
        let tw = g.scale(&x, 2.0).unwrap();
        let s = g.sum(&g.add(&sq, &tw).unwrap()).unwrap();
        let grads = g.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[4.0, -2.0]);
    }
}
