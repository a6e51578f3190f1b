//! Dense row-major tensors and the `CMT1` binary record format.

use std::io::{Read, Write};

use crate::error::{config_err, ComaError, Result};
use crate::scalar::{DType, Scalar};

pub const TENSOR_MAGIC: &[u8; 4] = b"CMT1";

/// Dense N-dimensional array, row-major and contiguous.
///
/// The element count always equals the product of the extents; every
/// constructor checks it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(config_err!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// `0, 1, 2, ...` laid out over `shape`.
    pub fn iota(shape: impl Into<Vec<usize>>) -> Self {
        Self::from_fn(shape, T::of_usize)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(ComaError::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(config_err!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(config_err!("shape mismatch: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.to_bytes() == other.to_bytes()
    }

    /// Row `r` of a matrix.
    pub fn row(&self, r: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Serialized `CMT1` record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.rank() + self.numel() * T::DTYPE.size());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&T::DTYPE.tag().to_le_bytes());
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads one record whose stored dtype must match `T`.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (dtype, shape) = read_header(r)?;
        if dtype != T::DTYPE {
            return Err(ComaError::Format(format!(
                "tensor stored as {}, expected {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let data = read_values::<T>(r, shape.iter().product())?;
        Self::from_vec(shape, data)
    }

    /// Reads one record of either dtype, converting values to `T`.
    pub fn read_converting(r: &mut impl Read) -> Result<Self> {
        let (dtype, shape) = read_header(r)?;
        let numel = shape.iter().product();
        let data = match dtype {
            DType::F32 => read_values::<f32>(r, numel)?.into_iter().map(|x| T::of(x as f64)).collect(),
            DType::F64 => read_values::<f64>(r, numel)?.into_iter().map(T::of).collect(),
        };
        Self::from_vec(shape, data)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_converting(&mut f)
    }
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ComaError::Format("truncated tensor record".into()),
        _ => ComaError::Io(e),
    })
}

fn read_header(r: &mut impl Read) -> Result<(DType, Vec<usize>)> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(ComaError::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact_or_truncated(r, &mut word)?;
    let tag = u32::from_le_bytes(word);
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| ComaError::Format(format!("unknown dtype tag {tag}")))?;
    read_exact_or_truncated(r, &mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(ComaError::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut ext = [0u8; 8];
    for _ in 0..rank {
        read_exact_or_truncated(r, &mut ext)?;
        let d = usize::try_from(u64::from_le_bytes(ext))
            .map_err(|_| ComaError::Format("extent does not fit in usize".into()))?;
        shape.push(d);
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ComaError::Format("tensor element count overflows".into()))?;
    Ok((dtype, shape))
}

fn read_values<U: Scalar>(r: &mut impl Read, numel: usize) -> Result<Vec<U>> {
    let size = U::DTYPE.size();
    let mut buf = vec![0u8; numel * size];
    read_exact_or_truncated(r, &mut buf)?;
    Ok(buf.chunks_exact(size).map(U::read_le).collect())
}
