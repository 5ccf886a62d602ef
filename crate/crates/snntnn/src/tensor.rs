//! Dense row-major tensor value type.
//!
//! 32-bit floats for training, 64-bit for gradient-check tests; everything
//! numeric is generic over [`Scalar`].

use crate::error::{Error, Result};

/// Element type bound for all numeric kernels.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Contiguous row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { shape: vec![r, c], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Same data, different shape; element count must match.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast element type; used when sampling in f64 and training in f32.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("scalar cast"))
                .collect(),
        }
    }

    /// Expect a 2-D tensor, returning (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected 2-D tensor, got {:?}", s))),
        }
    }

    /// Expect a 3-D tensor, returning (channels, height, width).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::Dimension(format!("expected 3-D tensor, got {:?}", s))),
        }
    }

    /// Expect a 4-D tensor (conv kernel layout C_out x C_in x kh x kw).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c, d] => Ok((*a, *b, *c, *d)),
            s => Err(Error::Dimension(format!("expected 4-D tensor, got {:?}", s))),
        }
    }
}

/// C[r x c] = A[r x k] * B[k x c], accumulating over rows of B so the inner
/// loop runs over contiguous memory.
pub fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * c);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn transpose_kernel<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// out += src, elementwise.
pub fn axpy_add<T: Scalar>(out: &mut [T], src: &[T]) {
    debug_assert_eq!(out.len(), src.len());
    for (o, &s) in out.iter_mut().zip(src) {
        *o += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    /// Naive i-j-k reference used to pin down `matmul_kernel`.
    fn matmul_reference(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * c + j];
                }
                out[i * c + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut rng = seeded_rng(7);
        for _ in 0..100 {
            let r = rng.gen_range(1..8);
            let k = rng.gen_range(1..8);
            let c = rng.gen_range(1..8);
            let a: Vec<f64> = (0..r * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = matmul_kernel(&a, &b, r, k, c);
            let want = matmul_reference(&a, &b, r, k, c);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "got {} want {}", g, w);
            }
        }
    }

    #[test]
    fn matmul_identity_is_noop() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        assert_eq!(matmul_kernel(&a, &eye, 3, 4, 4), a);
    }

    #[test]
    fn transpose_round_trip() {
        let a: Vec<f32> = (0..15).map(|i| i as f32).collect();
        let t = transpose_kernel(&a, 3, 5);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 5.0); // (row 1, col 0) of the original
        assert_eq!(transpose_kernel(&t, 5, 3), a);
    }

    #[test]
    fn new_rejects_mismatched_lengths() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
    }

    #[test]
    fn zero_sized_tensors_are_allowed() {
        let t = Tensor::<f32>::new(vec![0, 784], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn reshape_preserves_data_and_checks_count() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.clone().reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn cast_round_trips_exactly_for_f32_values() {
        let t = Tensor::new(vec![3], vec![1.5f32, -0.25, 1e-7]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(back.data(), t.data());
    }
}
