//! Dense row-major tensors, validity masks and the masked-tensor pair.
//!
//! A [`MaskedTensor`] stores values with a leading channel axis (`C × S…`)
//! and a mask over the remaining spatial or token axes (`S…`). The channel
//! axis is never masked. Every library operation leaves exact zeros at
//! invalid positions of its mask-aware outputs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Type code used by the PVMT file format.
    const DTYPE_CODE: u8;

    /// `c ← alpha·a·b + beta·c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $code:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE_CODE: u8 = $code;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= extent(m, k, rsa, csa));
                assert!(b.len() >= extent(k, n, rsb, csb));
                assert!(c.len() >= extent(m, n, rsc, csc));
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel lies within the
                // extents asserted above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, 0, matrixmultiply::sgemm);
impl_scalar!(f64, 1, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(Error::invalid("Tensor::new", format!("zero-sized dims {dims:?}")));
        }
        if numel != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("dims {dims:?} need {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let numel = dims.iter().product();
        Self {
            dims,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        Self {
            dims,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.dims, &dims));
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(Error::shape("max_abs_diff", &self.dims, &other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Boolean validity mask over spatial (`H × W`) or token (`L`) positions.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ValidityMask {
    dims: Vec<usize>,
    bits: Vec<bool>,
}

impl Debug for ValidityMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: String = self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        write!(f, "ValidityMask({:?}, {s})", self.dims)
    }
}

impl ValidityMask {
    pub fn new(dims: impl Into<Vec<usize>>, bits: Vec<bool>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != bits.len() || dims.contains(&0) {
            return Err(Error::invalid(
                "ValidityMask::new",
                format!("dims {dims:?} do not match {} bits", bits.len()),
            ));
        }
        Ok(Self { dims, bits })
    }

    /// Builds a mask from 0/1 integers; any other value is rejected.
    pub fn from_u8(dims: impl Into<Vec<usize>>, bits: &[u8]) -> Result<Self> {
        let bits = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::invalid("ValidityMask::from_u8", format!("bit value {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims, bits)
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::filled(dims, true)
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::filled(dims, false)
    }

    pub fn filled(dims: impl Into<Vec<usize>>, value: bool) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self {
            dims,
            bits: vec![value; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_invalid(&self) -> usize {
        self.len() - self.count_valid()
    }

    pub fn invalid_fraction(&self) -> f64 {
        self.count_invalid() as f64 / self.len() as f64
    }

    pub fn all_valid(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn any_valid(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape("mask and", &self.dims, &other.dims));
        }
        Ok(Self {
            dims: self.dims.clone(),
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn complement(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.bits.len() {
            return Err(Error::shape("mask reshape", &self.dims, &dims));
        }
        Ok(Self {
            dims,
            bits: self.bits,
        })
    }

    /// Height and width of a rank-2 mask.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::invalid("ValidityMask::hw", format!("expected rank 2, got {:?}", self.dims))),
        }
    }
}

/// Values with a leading channel axis plus a mask over the remaining axes.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTensor<T = f32> {
    values: Tensor<T>,
    mask: ValidityMask,
}

impl<T: Scalar> MaskedTensor<T> {
    /// Pairs values with a mask and zeroes every invalid position.
    pub fn new(values: Tensor<T>, mask: ValidityMask) -> Result<Self> {
        let mut out = Self::new_raw(values, mask)?;
        out.zero_invalid();
        Ok(out)
    }

    /// Pairs values with a mask, keeping whatever placeholders the values hold.
    pub fn new_raw(values: Tensor<T>, mask: ValidityMask) -> Result<Self> {
        if values.rank() < 2 || values.dims()[1..] != *mask.dims() {
            return Err(Error::shape("MaskedTensor", values.dims(), mask.dims()));
        }
        Ok(Self { values, mask })
    }

    pub fn fully_valid(values: Tensor<T>) -> Result<Self> {
        if values.rank() < 2 {
            return Err(Error::invalid("MaskedTensor", "values need a channel axis"));
        }
        let mask = ValidityMask::ones(values.dims()[1..].to_vec());
        Ok(Self { values, mask })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn into_parts(self) -> (Tensor<T>, ValidityMask) {
        (self.values, self.mask)
    }

    pub fn zero_invalid(&mut self) {
        let plane = self.mask.len();
        for (i, v) in self.values.data_mut().iter_mut().enumerate() {
            if !self.mask.bits[i % plane] {
                *v = T::zero();
            }
        }
    }

    /// Overwrites every invalid position with values from `fill`, leaving
    /// valid positions untouched. Used by placeholder-sensitivity harnesses.
    pub fn with_placeholders(&self, mut fill: impl FnMut() -> T) -> Self {
        let plane = self.mask.len();
        let mut values = self.values.clone();
        for (i, v) in values.data_mut().iter_mut().enumerate() {
            if !self.mask.bits[i % plane] {
                *v = fill();
            }
        }
        Self {
            values,
            mask: self.mask.clone(),
        }
    }

    /// True when every invalid position holds exactly zero.
    pub fn placeholders_are_zero(&self) -> bool {
        let plane = self.mask.len();
        self.values
            .data()
            .iter()
            .enumerate()
            .all(|(i, v)| self.mask.bits[i % plane] || *v == T::zero())
    }
}

/// `L` tokens of width `D` with a token-level validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T = f32> {
    pub tokens: Tensor<T>,
    pub token_mask: ValidityMask,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, token_mask: ValidityMask) -> Result<Self> {
        if tokens.rank() != 2 || token_mask.dims() != [tokens.dims()[0]] {
            return Err(Error::shape("TokenSequence", tokens.dims(), token_mask.dims()));
        }
        Ok(Self { tokens, token_mask })
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Multiply,
}

/// Element-wise combination; the output is valid only where both inputs are.
pub fn elementwise_combine<T: Scalar>(
    a: &MaskedTensor<T>,
    b: &MaskedTensor<T>,
    op: ElementwiseOp,
) -> Result<MaskedTensor<T>> {
    if a.values.dims() != b.values.dims() {
        return Err(Error::shape("elementwise_combine", a.values.dims(), b.values.dims()));
    }
    let mask = a.mask.and(&b.mask)?;
    let plane = mask.len();
    let data = a
        .values
        .data()
        .iter()
        .zip(b.values.data())
        .enumerate()
        .map(|(i, (&x, &y))| {
            if !mask.bits[i % plane] {
                T::zero()
            } else {
                match op {
                    ElementwiseOp::Add => x + y,
                    ElementwiseOp::Multiply => x * y,
                }
            }
        })
        .collect();
    Ok(MaskedTensor {
        values: Tensor::new(a.values.dims().to_vec(), data)?,
        mask,
    })
}

/// Concatenates along the channel axis; the mask is the AND of all parts.
pub fn concat_channels<T: Scalar>(parts: &[MaskedTensor<T>]) -> Result<MaskedTensor<T>> {
    let first = parts.first().ok_or(Error::Empty { op: "concat_channels" })?;
    let mut mask = first.mask.clone();
    let mut channels = 0;
    for p in parts {
        if p.values.dims()[1..] != first.values.dims()[1..] {
            return Err(Error::shape("concat_channels", first.values.dims(), p.values.dims()));
        }
        mask = mask.and(&p.mask)?;
        channels += p.channels();
    }
    let mut data = Vec::with_capacity(channels * mask.len());
    for p in parts {
        data.extend_from_slice(p.values.data());
    }
    let mut dims = first.values.dims().to_vec();
    dims[0] = channels;
    MaskedTensor::new(Tensor::new(dims, data)?, mask)
}

/// Row-major reshape. `new_dims` are full value dims; the channel count must
/// be kept, and the mask takes `new_dims[1..]`.
pub fn reshape_masked<T: Scalar>(x: &MaskedTensor<T>, new_dims: &[usize]) -> Result<MaskedTensor<T>> {
    if new_dims.len() < 2 || new_dims[0] != x.channels() {
        return Err(Error::shape("reshape_masked", x.values.dims(), new_dims));
    }
    let values = x.values.clone().reshape(new_dims.to_vec())?;
    let mask = x.mask.clone().reshape(new_dims[1..].to_vec())?;
    Ok(MaskedTensor { values, mask })
}
