//! Fixed 2-D sinusoidal positional embeddings.

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `rows·cols × dim` table in raster order. The first half of each row encodes
/// the row coordinate, the second half the column; each half is
/// `[sin(pos·ω_i)…, cos(pos·ω_i)…]` with `ω_i = 10000^(−i/(dim/4))`.
pub fn sincos_2d<T: Scalar>(rows: usize, cols: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(config_err!("sinusoidal embedding width {dim} must be a positive multiple of 4"));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| T::of((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::of((pos * w).cos())));
            }
        }
    }
    Tensor::from_vec([rows * cols, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_zeros_and_ones() {
        let t = sincos_2d::<f64>(3, 3, 8).unwrap();
        assert_eq!(t.row(0), &[0., 0., 1., 1., 0., 0., 1., 1.]);
        assert!(sincos_2d::<f64>(2, 2, 6).is_err());
    }

    #[test]
    fn positions_are_distinct() {
        let t = sincos_2d::<f64>(4, 4, 16).unwrap();
        for a in 0..16 {
            for b in a + 1..16 {
                let d: f64 = t.row(a).iter().zip(t.row(b)).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-3);
            }
        }
    }
}
