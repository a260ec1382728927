//! Dense rank-4 tensors in `(N, C, H, W)` row-major layout.
//!
//! Buffers are shared through [`std::sync::Arc`], so cloning a tensor is
//! cheap; mutation goes through copy-on-write.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Scalar element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Dtype> {
        match b {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element usable in tensors. Implemented for `f32`
/// (training) and `f64` (gradient checking).
pub trait Element:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`,
    /// with optional logical transposes applied to `a`/`b`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self]);

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;
    fn from_le_bytes_vec(bytes: &[u8]) -> Vec<Self>;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32]) {
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(),
                n as isize, 1,
            );
        }
    }

    fn to_le_bytes_vec(data: &[f32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(data.len() * 4);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_le_bytes_vec(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(),
                n as isize, 1,
            );
        }
    }

    fn to_le_bytes_vec(data: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(data.len() * 8);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_le_bytes_vec(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }
}

/// `(N, C, H, W)` dimensions of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major offset of `(n, c, y, x)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor. The buffer is reference-counted; `clone` is O(1).
#[derive(Debug, Clone)]
pub struct Tensor<T: Element> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    /// Wraps a buffer. Panics if the buffer length does not match the shape;
    /// callers construct shapes and buffers together, so a mismatch is a bug.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Tensor<T> {
        assert_eq!(
            data.len(),
            shape.numel(),
            "tensor data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor::from_vec(shape, vec![T::zero(); shape.numel()])
    }

    pub fn full(shape: Shape, value: T) -> Tensor<T> {
        Tensor::from_vec(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![value])
    }

    pub fn rand_uniform<R: Rng>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Tensor<T> {
        let data = (0..shape.numel())
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the buffer; clones it first if shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// True when both tensors share one buffer allocation.
    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Tensor<T> {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.shape,
            self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        )
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Maximum absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"DUOT";
const TENSOR_VERSION: u16 = 1;

/// Writes a tensor in the raw fixture format: magic `DUOT`, version `u16`,
/// dtype `u8` (0 = f32, 1 = f64), rank `u8` = 4, four `u32` dims, then the
/// little-endian payload.
pub fn write_tensor<T: Element>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[T::DTYPE.byte(), 4u8])?;
    for d in tensor.shape().dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::format(path, format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&T::to_le_bytes_vec(tensor.data()))?;
    w.flush()?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor`]. The stored dtype must match `T`.
pub fn read_tensor<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(path, "bad magic, expected DUOT"));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != TENSOR_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut buf2)?;
    let dtype = Dtype::from_byte(buf2[0])
        .ok_or_else(|| Error::format(path, format!("unknown dtype byte {}", buf2[0])))?;
    if dtype != T::DTYPE {
        return Err(Error::format(path, format!("dtype mismatch: file has {dtype:?}")));
    }
    if buf2[1] != 4 {
        return Err(Error::format(path, format!("expected rank 4, found {}", buf2[1])));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        *d = u32::from_le_bytes(buf4) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let elem_size = match T::DTYPE {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut payload = vec![0u8; shape.numel() * elem_size];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format(path, "truncated payload"))?;
    Ok(Tensor::from_vec(shape, T::from_le_bytes_vec(&payload)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_index_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.numel(), 120);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn length_mismatch_panics() {
        let _ = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]);
    }

    #[test]
    fn clone_is_shared_until_written() {
        let a = Tensor::<f32>::full(Shape::new(1, 1, 2, 2), 1.0);
        let mut b = a.clone();
        assert!(a.ptr_eq(&b));
        b.data_mut()[0] = 5.0;
        assert!(!a.ptr_eq(&b));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 5.0);
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0.0f64; m * n];
        f64::gemm(m, k, n, &a, false, &b, false, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - s).abs() < 1e-12);
            }
        }
        // transposed A: a stored as k x m
        let at: Vec<f64> = {
            let mut t = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    t[p * m + i] = a[i * k + p];
                }
            }
            t
        };
        let mut c2 = vec![0.0f64; m * n];
        f64::gemm(m, k, n, &at, true, &b, false, &mut c2);
        for (x, y) in c.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.duot");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f32>::rand_uniform(Shape::new(2, 3, 4, 5), -2.0, 2.0, &mut rng);
        write_tensor(&t, &path).unwrap();
        let back = read_tensor::<f32>(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn tensor_file_rejects_bad_magic_and_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.duot");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_tensor::<f32>(&path), Err(Error::Format { .. })));

        let t = Tensor::<f64>::scalar(1.5);
        write_tensor(&t, &path).unwrap();
        assert!(matches!(read_tensor::<f32>(&path), Err(Error::Format { .. })));
        assert!(read_tensor::<f64>(&path).is_ok());
    }
}
