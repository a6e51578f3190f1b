//! Random weights built in both the library's and the oracle's representation.

use coma_core::dmmsa::{AttentionParams, BranchWeights, ConvWeights};
use coma_core::{Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Mat, OracleAttention, OracleBranch, OracleConv};

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

pub fn var(shape: &[usize], data: &[f64]) -> Var<f64> {
    Var::constant(Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap())
}

pub fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
    Mat { rows, cols, data }
}

/// Random weights in both representations.
pub fn random_attention(
    rng: &mut ChaCha8Rng,
    c: usize,
    heads: usize,
    windows: &[usize],
    separate_values: bool,
) -> (AttentionParams<f64>, OracleAttention) {
    let s = 1.0 / (c as f64).sqrt();
    let (wq, wk, wv, wo) = (rand_vec(rng, c * c, s), rand_vec(rng, c * c, s), rand_vec(rng, c * c, s), rand_vec(rng, c * c, s));
    let bo = rand_vec(rng, c, 0.1);
    let mut conv = |k: usize| {
        let w = rand_vec(rng, c * c * k * k, 1.0 / (c * k * k) as f64);
        let b = rand_vec(rng, c, 0.1);
        (
            ConvWeights { weight: var(&[c, c, k, k], &w), bias: var(&[c], &b) },
            OracleConv { k, weight: w, bias: b },
        )
    };
    let mut branches = Vec::new();
    let mut oracle_branches = Vec::new();
    for &k in windows {
        let (key, okey) = conv(k);
        let (value, ovalue) = if separate_values {
            let (v, o) = conv(k);
            (Some(v), Some(o))
        } else {
            (None, None)
        };
        branches.push(BranchWeights { kernel: k, key, value });
        oracle_branches.push(OracleBranch { key: okey, value: ovalue });
    }
    (
        AttentionParams {
            w_q: var(&[c, c], &wq),
            w_k: var(&[c, c], &wk),
            w_v: var(&[c, c], &wv),
            branches,
            w_out: var(&[c, c], &wo),
            b_out: var(&[c], &bo),
            heads,
        },
        OracleAttention {
            w_q: mat(c, c, wq),
            w_k: mat(c, c, wk),
            w_v: mat(c, c, wv),
            branches: oracle_branches,
            w_out: mat(c, c, wo),
            b_out: bo,
            heads,
        },
    )
}
