//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code.

#![allow(dead_code)]

pub mod fixtures;

/// Row-major `rows × cols` matrix.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `x · w` by triple loop, `w` stored input-major.
pub fn matmul(x: &Mat, w: &Mat) -> Mat {
    assert_eq!(x.cols, w.rows);
    let mut data = vec![0.0; x.rows * w.cols];
    for i in 0..x.rows {
        for j in 0..w.cols {
            let mut s = 0.0;
            for k in 0..x.cols {
                s += x.at(i, k) * w.at(k, j);
            }
            data[i * w.cols + j] = s;
        }
    }
    Mat { rows: x.rows, cols: w.cols, data }
}

/// One strided window convolution: weight `c × c × k × k` flat, bias `c`.
pub struct OracleConv {
    pub k: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Applies `conv` separately inside each patch of patch-major tokens
/// (`v` patches of `p × p` tokens, raster inside a patch).
pub fn window_conv(x: &Mat, v: usize, p: usize, conv: &OracleConv) -> Mat {
    let c = x.cols;
    let k = conv.k;
    let q = p / k;
    let mut data = Vec::new();
    for patch in 0..v {
        for oy in 0..q {
            for ox in 0..q {
                for co in 0..c {
                    let mut s = conv.bias[co];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let row = patch * p * p + (oy * k + ky) * p + ox * k + kx;
                                s += conv.weight[((co * c + ci) * k + ky) * k + kx] * x.at(row, ci);
                            }
                        }
                    }
                    data.push(s);
                }
            }
        }
    }
    Mat { rows: v * q * q, cols: c, data }
}

/// Multi-head softmax attention by direct summation.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let c = q.cols;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; q.rows * c];
    for h in 0..heads {
        for i in 0..q.rows {
            let scores: Vec<f64> = (0..k.rows)
                .map(|j| (0..d).map(|t| q.at(i, h * d + t) * k.at(j, h * d + t)).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                out[i * c + h * d + t] = (0..k.rows).map(|j| e[j] / z * v.at(j, h * d + t)).sum();
            }
        }
    }
    Mat { rows: q.rows, cols: c, data: out }
}

pub struct OracleBranch {
    pub key: OracleConv,
    /// `None` reuses `key` for the values.
    pub value: Option<OracleConv>,
}

pub struct OracleAttention {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub branches: Vec<OracleBranch>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
    pub heads: usize,
}

/// `(Σ_k Attn(Q, Conv_k(K), Conv_k(V)))·W_out + b_out`, keys pooled over all patches.
pub fn dmmsa(x: &Mat, v: usize, p: usize, a: &OracleAttention) -> Mat {
    let q = matmul(x, &a.w_q);
    let k = matmul(x, &a.w_k);
    let val = matmul(x, &a.w_v);
    let mut sum = vec![0.0; x.rows * x.cols];
    for b in &a.branches {
        let keys = window_conv(&k, v, p, &b.key);
        let values = window_conv(&val, v, p, b.value.as_ref().unwrap_or(&b.key));
        let o = attention(&q, &keys, &values, a.heads);
        for (s, y) in sum.iter_mut().zip(&o.data) {
            *s += y;
        }
    }
    let mut out = matmul(&Mat { rows: x.rows, cols: x.cols, data: sum }, &a.w_out);
    for r in 0..out.rows {
        for c in 0..out.cols {
            out.data[r * out.cols + c] += a.b_out[c];
        }
    }
    out
}

/// Straight-line AdamW on one scalar.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    #[allow(clippy::too_many_arguments)]
    pub fn step(&mut self, theta: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64, t: i32) -> f64 {
        let decayed = theta - lr * wd * theta;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(t));
        let vh = self.v / (1.0 - b2.powi(t));
        decayed - lr * mh / (vh.sqrt() + eps)
    }
}

/// Encoder size of the Nano preset, layer by layer.
///
/// A transformer block of width `c` holds two norms (`4c`), bias-free
/// `q, k, v` (`3c²`), the output projection (`c² + c`) and an MLP of ratio 4
/// (`8c² + 5c`): `12c² + 10c`. Each window branch of kernel `k` adds one
/// shared key/value convolution of `c²k² + c`.
pub fn nano_encoder_params() -> usize {
    let block = |c: usize, windows: &[usize]| -> usize {
        12 * c * c + 10 * c + windows.iter().map(|k| c * c * k * k + c).sum::<usize>()
    };
    let scale = 16 * 3 * 7 * 7 + 16; // 2368
    let stage1 = block(16, &[8, 4, 2]); // 24784
    let down1 = 16 * 32 + 32; // 544
    let stage2 = block(32, &[4, 2]); // 33152
    let down2 = 32 * 64 + 64; // 2112
    let stage3 = 2 * block(64, &[]); // 99584
    let down3 = 64 * 128 + 128; // 8320
    let stage4 = block(128, &[]); // 197888
    let fuse = (32 * 16 * 4 + 32) + (64 * 32 * 4 + 64) + (128 * 64 * 4 + 128); // 43232
    scale + stage1 + down1 + stage2 + down2 + stage3 + down3 + stage4 + fuse
}
