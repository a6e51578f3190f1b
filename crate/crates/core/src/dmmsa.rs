//! Dynamic multi-window self-attention and the pre-norm transformer block.
//!
//! Tokens are laid out patch-major: the `p × p` token grid of visible patch 0,
//! then patch 1, and so on. Queries come from every visible token; keys and
//! values are first summarized by a per-patch strided convolution of kernel
//! size `k`, giving `(p/k)²` descriptors per patch. Descriptors of all visible
//! patches form one attention context.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::config::{KvConv, WindowFlags};
use crate::error::{config_err, Result};
use crate::kernels::Conv2dGeometry;
use crate::params::{Bound, SpecList};
use crate::scalar::Scalar;

/// Kernel sizes for a stage whose per-patch grid side is `p`:
/// `p, p/2, …, 2` by default, with `k = 1` optional. `p = 1` degenerates to `[1]`.
pub fn window_set(p: usize, flags: WindowFlags) -> Result<Vec<usize>> {
    if p == 0 || !p.is_power_of_two() {
        return Err(config_err!("patch grid side {p} is not a power of two"));
    }
    if p == 1 {
        return Ok(vec![1]);
    }
    let mut ks: Vec<usize> = std::iter::successors(Some(p), |&k| (k > 2).then_some(k / 2)).collect();
    if !flags.include_patch {
        ks.remove(0);
    }
    if flags.include_unit {
        ks.push(1);
    }
    if ks.is_empty() {
        return Err(config_err!("window set for p = {p} is empty"));
    }
    Ok(ks)
}

/// Element index mapping patch-major tokens `(v·p²) × C` to per-patch grids
/// `v × C × p × p`.
pub fn tokens_to_grids_index(v: usize, p: usize, c: usize) -> Vec<usize> {
    let block = p * p;
    let mut idx = Vec::with_capacity(v * c * block);
    for patch in 0..v {
        for ch in 0..c {
            for cell in 0..block {
                idx.push((patch * block + cell) * c + ch);
            }
        }
    }
    idx
}

/// Inverse of [`tokens_to_grids_index`].
pub fn grids_to_tokens_index(v: usize, p: usize, c: usize) -> Vec<usize> {
    let block = p * p;
    let mut idx = Vec::with_capacity(v * c * block);
    for patch in 0..v {
        for cell in 0..block {
            for ch in 0..c {
                idx.push((patch * c + ch) * block + cell);
            }
        }
    }
    idx
}

pub fn tokens_to_grids<T: Scalar>(g: &Graph<T>, x: &Var<T>, v: usize, p: usize) -> Result<Var<T>> {
    let (rows, c) = x.value().dims2()?;
    if rows != v * p * p {
        return Err(config_err!("{rows} token rows for {v} patches of {p}×{p}"));
    }
    g.gather(x, Rc::new(tokens_to_grids_index(v, p, c)), [v, c, p, p])
}

pub fn grids_to_tokens<T: Scalar>(g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
    let [v, c, p, p2] = x.shape()[..] else {
        return Err(config_err!("expected v×C×p×p grids, got {:?}", x.shape()));
    };
    if p != p2 {
        return Err(config_err!("non-square patch grid {p}×{p2}"));
    }
    g.gather(x, Rc::new(grids_to_tokens_index(v, p, c)), [v * p * p, c])
}

/// `x·W + b`.
pub fn linear<T: Scalar>(g: &Graph<T>, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    g.add_bias(&g.matmul(x, w)?, b)
}

/// Weights of one strided window convolution.
pub struct ConvWeights<T> {
    pub weight: Var<T>,
    pub bias: Var<T>,
}

/// Key and value convolutions of one branch.
pub struct BranchWeights<T> {
    pub kernel: usize,
    pub key: ConvWeights<T>,
    /// `None` when the value path reuses the key convolution.
    pub value: Option<ConvWeights<T>>,
}

impl<T> BranchWeights<T> {
    pub fn value_conv(&self) -> &ConvWeights<T> {
        self.value.as_ref().unwrap_or(&self.key)
    }
}

/// Attention weights of one block. `branches` is empty for global attention.
pub struct AttentionParams<T> {
    pub w_q: Var<T>,
    pub w_k: Var<T>,
    pub w_v: Var<T>,
    pub branches: Vec<BranchWeights<T>>,
    pub w_out: Var<T>,
    pub b_out: Var<T>,
    pub heads: usize,
}

/// Spatial structure of the attention context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Plain multi-head self-attention over all tokens.
    Global,
    /// Multi-window attention over `p × p` patch grids with the given kernels.
    MultiWindow { p: usize, windows: Vec<usize> },
}

pub(crate) fn attention_specs(l: &mut SpecList, prefix: &str, c: usize, kind: &AttentionKind, kv: KvConv) {
    for w in ["q", "k", "v"] {
        l.matrix(format!("{prefix}.{w}"), c, c);
    }
    if let AttentionKind::MultiWindow { windows, .. } = kind {
        for &k in windows {
            match kv {
                KvConv::Shared => l.conv(&format!("{prefix}.branch{k}.kv"), c, c, k),
                KvConv::Separate => {
                    l.conv(&format!("{prefix}.branch{k}.k"), c, c, k);
                    l.conv(&format!("{prefix}.branch{k}.v"), c, c, k);
                }
            }
        }
    }
    l.linear(&format!("{prefix}.out"), c, c);
}

impl<T: Scalar> AttentionParams<T> {
    pub fn bind(b: &Bound<'_, T>, prefix: &str, kind: &AttentionKind, kv: KvConv, heads: usize) -> Result<Self> {
        let conv = |name: String| -> Result<ConvWeights<T>> {
            Ok(ConvWeights {
                weight: b.get(&format!("{name}.weight"))?.clone(),
                bias: b.get(&format!("{name}.bias"))?.clone(),
            })
        };
        let branches = match kind {
            AttentionKind::Global => Vec::new(),
            AttentionKind::MultiWindow { windows, .. } => windows
                .iter()
                .map(|&k| {
                    Ok(match kv {
                        KvConv::Shared => BranchWeights {
                            kernel: k,
                            key: conv(format!("{prefix}.branch{k}.kv"))?,
                            value: None,
                        },
                        KvConv::Separate => BranchWeights {
                            kernel: k,
                            key: conv(format!("{prefix}.branch{k}.k"))?,
                            value: Some(conv(format!("{prefix}.branch{k}.v"))?),
                        },
                    })
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            w_q: b.get(&format!("{prefix}.q"))?.clone(),
            w_k: b.get(&format!("{prefix}.k"))?.clone(),
            w_v: b.get(&format!("{prefix}.v"))?.clone(),
            branches,
            w_out: b.get(&format!("{prefix}.out.weight"))?.clone(),
            b_out: b.get(&format!("{prefix}.out.bias"))?.clone(),
            heads,
        })
    }
}

/// `(X·W_q, X·W_k, X·W_v)`.
pub fn qkv_project<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    w_q: &Var<T>,
    w_k: &Var<T>,
    w_v: &Var<T>,
) -> Result<(Var<T>, Var<T>, Var<T>)> {
    Ok((g.matmul(x, w_q)?, g.matmul(x, w_k)?, g.matmul(x, w_v)?))
}

/// Attention output plus each head's probability matrix.
pub struct AttentionOutput<T> {
    pub output: Var<T>,
    pub probs: Vec<Var<T>>,
}

/// Scaled dot-product attention with `heads` heads of width `C/heads`,
/// scaled by `1/√(C/heads)`, heads concatenated back to `C` columns.
pub fn multi_head_attention<T: Scalar>(
    g: &Graph<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
) -> Result<AttentionOutput<T>> {
    let (_, c) = q.value().dims2()?;
    let (nk, ck) = k.value().dims2()?;
    if ck != c || v.shape() != [nk, c] {
        return Err(config_err!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if heads == 0 || c % heads != 0 {
        return Err(config_err!("{c} channels not divisible into {heads} heads"));
    }
    let d = c / heads;
    let scale = T::one() / T::of_usize(d).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (g.slice_cols(q, h * d, d)?, g.slice_cols(k, h * d, d)?, g.slice_cols(v, h * d, d)?)
        };
        let scores = g.scale(&g.matmul_nt(&qh, &kh)?, scale)?;
        let p = g.softmax_rows(&scores)?;
        outs.push(g.matmul(&p, &vh)?);
        probs.push(p);
    }
    let output = if heads == 1 { outs.pop().expect("one head") } else { g.concat_cols(&outs)? };
    Ok(AttentionOutput { output, probs })
}

/// Per-patch strided convolution `Conv_k` on patch-major tokens:
/// `(v·p²) × C` → `(v·(p/k)²) × C`.
pub fn window_conv<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    v: usize,
    p: usize,
    kernel: usize,
    conv: &ConvWeights<T>,
) -> Result<Var<T>> {
    if kernel == 0 || !p.is_multiple_of(kernel) {
        return Err(config_err!("window {kernel} does not divide patch grid {p}"));
    }
    let grids = tokens_to_grids(g, x, v, p)?;
    let y = g.conv2d(&grids, &conv.weight, Some(&conv.bias), Conv2dGeometry::new(kernel, 0))?;
    grids_to_tokens(g, &y)
}

/// One branch: `Softmax(Q·Conv_k(K)ᵀ/√d)·Conv_k(V)` per head.
pub fn branch_attention<T: Scalar>(
    g: &Graph<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    patches: usize,
    p: usize,
    branch: &BranchWeights<T>,
    heads: usize,
) -> Result<AttentionOutput<T>> {
    let keys = window_conv(g, k, patches, p, branch.kernel, &branch.key)?;
    let values = window_conv(g, v, patches, p, branch.kernel, branch.value_conv())?;
    multi_head_attention(g, q, &keys, &values, heads)
}

/// `(Σ_k branch_k)·W_out + b_out`, branches summed in kernel-list order.
pub fn dmmsa_forward<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    params: &AttentionParams<T>,
    patches: usize,
    p: usize,
) -> Result<Var<T>> {
    Ok(dmmsa_forward_traced(g, x, params, patches, p)?.output)
}

/// [`dmmsa_forward`] that also returns every branch's attention probabilities.
pub fn dmmsa_forward_traced<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    params: &AttentionParams<T>,
    patches: usize,
    p: usize,
) -> Result<AttentionOutput<T>> {
    if params.branches.is_empty() {
        return Err(config_err!("multi-window attention with an empty window set"));
    }
    let (rows, _) = x.value().dims2()?;
    if rows != patches * p * p {
        return Err(config_err!("{rows} tokens for {patches} patches of {p}×{p}"));
    }
    let (q, k, v) = qkv_project(g, x, &params.w_q, &params.w_k, &params.w_v)?;
    let mut total: Option<Var<T>> = None;
    let mut probs = Vec::new();
    for branch in &params.branches {
        let out = branch_attention(g, &q, &k, &v, patches, p, branch, params.heads)?;
        probs.extend(out.probs);
        total = Some(match total {
            None => out.output,
            Some(acc) => g.add(&acc, &out.output)?,
        });
    }
    let summed = total.expect("non-empty branch list");
    Ok(AttentionOutput { output: linear(g, &summed, &params.w_out, &params.b_out)?, probs })
}

/// Standard global multi-head self-attention followed by the output projection.
pub fn global_attention_forward<T: Scalar>(g: &Graph<T>, x: &Var<T>, params: &AttentionParams<T>) -> Result<Var<T>> {
    let (q, k, v) = qkv_project(g, x, &params.w_q, &params.w_k, &params.w_v)?;
    let out = multi_head_attention(g, &q, &k, &v, params.heads)?;
    linear(g, &out.output, &params.w_out, &params.b_out)
}

pub struct NormParams<T> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
}

impl<T: Scalar> NormParams<T> {
    pub fn bind(b: &Bound<'_, T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: b.get(&format!("{prefix}.gamma"))?.clone(),
            beta: b.get(&format!("{prefix}.beta"))?.clone(),
        })
    }
}

pub struct BlockParams<T> {
    pub norm1: NormParams<T>,
    pub attn: AttentionParams<T>,
    pub norm2: NormParams<T>,
    pub fc1: (Var<T>, Var<T>),
    pub fc2: (Var<T>, Var<T>),
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub(crate) fn block_specs(l: &mut SpecList, prefix: &str, c: usize, kind: &AttentionKind, kv: KvConv, mlp_ratio: usize) {
    l.norm(&format!("{prefix}.norm1"), c);
    attention_specs(l, &format!("{prefix}.attn"), c, kind, kv);
    l.norm(&format!("{prefix}.norm2"), c);
    l.linear(&format!("{prefix}.mlp.fc1"), c, c * mlp_ratio);
    l.linear(&format!("{prefix}.mlp.fc2"), c * mlp_ratio, c);
}

impl<T: Scalar> BlockParams<T> {
    pub fn bind(b: &Bound<'_, T>, prefix: &str, kind: &AttentionKind, kv: KvConv, heads: usize) -> Result<Self> {
        let lin = |name: &str| -> Result<(Var<T>, Var<T>)> {
            Ok((
                b.get(&format!("{prefix}.{name}.weight"))?.clone(),
                b.get(&format!("{prefix}.{name}.bias"))?.clone(),
            ))
        };
        Ok(Self {
            norm1: NormParams::bind(b, &format!("{prefix}.norm1"))?,
            attn: AttentionParams::bind(b, &format!("{prefix}.attn"), kind, kv, heads)?,
            norm2: NormParams::bind(b, &format!("{prefix}.norm2"))?,
            fc1: lin("mlp.fc1")?,
            fc2: lin("mlp.fc2")?,
        })
    }
}

/// Pre-norm block: `t = x + Attn(LN₁(x))`, `x' = t + MLP(LN₂(t))`.
pub fn block_forward<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    params: &BlockParams<T>,
    kind: &AttentionKind,
    patches: usize,
) -> Result<Var<T>> {
    let eps = T::of(LAYER_NORM_EPS);
    let h = g.layer_norm(x, &params.norm1.gamma, &params.norm1.beta, eps)?;
    let a = match kind {
        AttentionKind::Global => global_attention_forward(g, &h, &params.attn)?,
        AttentionKind::MultiWindow { p, .. } => dmmsa_forward(g, &h, &params.attn, patches, *p)?,
    };
    let t = g.add(x, &a)?;
    let h = g.layer_norm(&t, &params.norm2.gamma, &params.norm2.beta, eps)?;
    let h = g.gelu(&linear(g, &h, &params.fc1.0, &params.fc1.1)?)?;
    let h = linear(g, &h, &params.fc2.0, &params.fc2.1)?;
    g.add(&t, &h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn window_sets() {
        let d = WindowFlags::default();
        assert_eq!(window_set(8, d).unwrap(), vec![8, 4, 2]);
        assert_eq!(window_set(4, d).unwrap(), vec![4, 2]);
        assert_eq!(window_set(2, d).unwrap(), vec![2]);
        assert_eq!(window_set(1, d).unwrap(), vec![1]);
        assert!(window_set(6, d).is_err());
        assert!(window_set(0, d).is_err());
        let unit = WindowFlags { include_patch: true, include_unit: true };
        assert_eq!(window_set(8, unit).unwrap(), vec![8, 4, 2, 1]);
        let no_patch = WindowFlags { include_patch: false, include_unit: false };
        assert_eq!(window_set(8, no_patch).unwrap(), vec![4, 2]);
        assert!(window_set(2, no_patch).is_err());
    }

    #[test]
    fn larger_windows_are_unions_of_smaller_ones() {
        // window (i, j) of size k covers cells [i·k, (i+1)·k) × [j·k, (j+1)·k)
        let p = 8;
        let ks = window_set(p, WindowFlags { include_patch: true, include_unit: true }).unwrap();
        let cells = |k: usize, i: usize, j: usize| -> Vec<(usize, usize)> {
            (i * k..(i + 1) * k).flat_map(|y| (j * k..(j + 1) * k).map(move |x| (y, x))).collect()
        };
        for (a, &big) in ks.iter().enumerate() {
            for &small in &ks[a..] {
                for i in 0..p / big {
                    for j in 0..p / big {
                        let mut union: Vec<(usize, usize)> = Vec::new();
                        let r = big / small;
                        for si in i * r..(i + 1) * r {
                            for sj in j * r..(j + 1) * r {
                                union.extend(cells(small, si, sj));
                            }
                        }
                        union.sort();
                        let mut whole = cells(big, i, j);
                        whole.sort();
                        assert_eq!(union, whole);
                        assert_eq!(r * r, (big / small).pow(2));
                    }
                }
            }
        }
    }

    #[test]
    fn layout_roundtrip() {
        let (v, p, c) = (3, 4, 5);
        let fwd = tokens_to_grids_index(v, p, c);
        let back = grids_to_tokens_index(v, p, c);
        for (i, &b) in back.iter().enumerate() {
            assert_eq!(fwd[b], i);
        }
    }

    #[test]
    fn qkv_identity_and_zero() {
        let g = Graph::<f64>::new();
        let x = Var::constant(Tensor::from_fn([4, 3], |i| i as f64 - 5.0));
        let eye = Var::constant(Tensor::eye(3));
        let (q, k, v) = qkv_project(&g, &x, &eye, &eye, &eye).unwrap();
        assert_eq!(q.value(), x.value());
        assert_eq!(k.value(), x.value());
        assert_eq!(v.value(), x.value());
        let zero = Var::constant(Tensor::zeros([4, 3]));
        let (q, _, _) = qkv_project(&g, &zero, &eye, &eye, &eye).unwrap();
        assert!(q.value().data().iter().all(|&z| z == 0.0));
    }
}
