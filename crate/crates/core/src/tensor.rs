//! Dense 4D tensors in row-major order (last dimension fastest).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{shape_err, Error, Result};

/// Dense 4D array `d0 × d1 × d2 × d3`.
///
/// Used for feature maps (`N×Ch×H×H`), kernels (`M×Ch×R×R`), outputs
/// (`N×M×E×E`) and checksum blocks (leading dimensions of 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Wraps `data`, checking its length and that every element is finite.
    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return shape_err(format!("dims {dims:?} need {expected} elements, got {}", data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Uniform `[-1, 1]` values from a seeded ChaCha8 stream.
    pub fn random(dims: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(dims, &mut rng)
    }

    pub fn random_with(dims: [usize; 4], rng: &mut impl Rng) -> Self {
        let n = dims.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-1.0..=1.0))).collect();
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((idx[0] * d1 + idx[1]) * d2 + idx[2]) * d3 + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Number of elements in one sub-block along dimension 0.
    #[inline]
    pub fn block_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    /// The 3D sub-block `self[i]` (e.g. `D_n` or `W_m`).
    pub fn block(&self, i: usize) -> &[T] {
        let len = self.block_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.block_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Length of one trailing plane (`d2 × d3`), e.g. an `E×E` output block.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// The 2D plane `self[a][b]` (an output block `O_ab` when self is `O`).
    pub fn plane(&self, a: usize, b: usize) -> &[T] {
        let len = self.plane_len();
        let start = (a * self.dims[1] + b) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, a: usize, b: usize) -> &mut [T] {
        let len = self.plane_len();
        let start = (a * self.dims[1] + b) * len;
        &mut self.data[start..start + len]
    }

    /// Copy of block `i` as a tensor with a leading dimension of 1.
    pub fn block_tensor(&self, i: usize) -> Self {
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.block(i).to_vec(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return shape_err(format!("dims {:?} vs {:?}", self.dims, other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { dims: self.dims, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zero-pads dimensions 2 and 3 by `pad` on every side.
    pub fn padded(&self, pad: usize) -> Self {
        if pad == 0 {
            return self.clone();
        }
        let [a, b, h, w] = self.dims;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = Self::zeros([a, b, hp, wp]);
        for ab in 0..a * b {
            for y in 0..h {
                let src = &self.data[(ab * h + y) * w..(ab * h + y + 1) * w];
                let dst_start = (ab * hp + y + pad) * wp + pad;
                out.data[dst_start..dst_start + w].copy_from_slice(src);
            }
        }
        out
    }

    /// Inverse of [`padded`](Self::padded): drops `pad` rows/columns per side.
    pub fn cropped(&self, pad: usize) -> Self {
        if pad == 0 {
            return self.clone();
        }
        let [a, b, hp, wp] = self.dims;
        let (h, w) = (hp - 2 * pad, wp - 2 * pad);
        let mut out = Self::zeros([a, b, h, w]);
        for ab in 0..a * b {
            for y in 0..h {
                let src_start = (ab * hp + y + pad) * wp + pad;
                out.data[(ab * h + y) * w..(ab * h + y + 1) * w].copy_from_slice(&self.data[src_start..src_start + w]);
            }
        }
        out
    }

    /// Converts between element types (used to widen f32 models to f64).
    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T: Element> std::ops::Index<[usize; 4]> for Tensor4<T> {
    type Output = T;

    fn index(&self, idx: [usize; 4]) -> &T {
        &self.data[self.offset(idx)]
    }
}

impl<T: Element> std::ops::IndexMut<[usize; 4]> for Tensor4<T> {
    fn index_mut(&mut self, idx: [usize; 4]) -> &mut T {
        let o = self.offset(idx);
        &mut self.data[o]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(Tensor4::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let err = Tensor4::<f32>::from_vec([1, 1, 1, 2], vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
        assert!(Tensor4::<f64>::from_vec([2, 1, 1, 1], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let t = Tensor4::<f64>::random([2, 3, 4, 4], 7);
        let p = t.padded(2);
        assert_eq!(p.dims(), [2, 3, 8, 8]);
        assert_eq!(p.get([1, 2, 0, 0]), 0.0);
        assert_eq!(p.get([1, 2, 2, 2]), t.get([1, 2, 0, 0]));
        assert_eq!(p.cropped(2), t);
    }

    #[test]
    fn random_is_seeded() {
        let a = Tensor4::<f32>::random([2, 2, 3, 3], 11);
        let b = Tensor4::<f32>::random([2, 2, 3, 3], 11);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn planes_and_blocks_index_row_major() {
        let t = Tensor4::<f64>::from_fn([2, 3, 2, 2], |[a, b, c, d]| (a * 1000 + b * 100 + c * 10 + d) as f64);
        assert_eq!(t.plane(1, 2), &[1200.0, 1201.0, 1210.0, 1211.0]);
        assert_eq!(t.block(1)[0], 1000.0);
        assert_eq!(t[[1, 1, 1, 0]], 1110.0);
    }
}
