//! Dense row-major tensors and the reverse-mode tape built on them.

mod autograd;
mod kernels;

pub use autograd::{Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};

/// Element types an archive can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    U8,
    I64,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
            DType::I64 => 2,
            DType::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F32,
            1 => DType::U8,
            2 => DType::I64,
            3 => DType::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }
}

/// A scalar that can live in a [`Tensor`].
pub trait Element: Copy + Debug + Default + PartialEq + Send + Sync + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: DType = $d;
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);
impl_element!(u8, DType::U8);
impl_element!(i64, DType::I64);

/// Floating element types usable on the tape.
pub trait Float:
    Element + num_like::FloatOps + PartialOrd + Display + Sum + Send + Sync
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Float for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub(crate) mod num_like {
    use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait FloatOps:
        Sized
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
    {
        const ZERO: Self;
        const ONE: Self;
        fn sqrt(self) -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
    }

    macro_rules! impl_ops {
        ($t:ty) => {
            impl FloatOps for $t {
                const ZERO: Self = 0.0;
                const ONE: Self = 1.0;
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
            }
        };
    }
    impl_ops!(f32);
    impl_ops!(f64);
}

pub use num_like::FloatOps;

/// Immutable row-major tensor. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::default())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![value]) }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data: Arc::new(data) }
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(dim_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index0(&self, index: usize) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| dim_err!("cannot index a rank-0 tensor"))?;
        if index >= lead {
            return Err(dim_err!("index {index} out of range for leading extent {lead}"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Ok(Tensor { shape: self.shape[1..].to_vec(), data: Arc::new(data) })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(dim_err!("stack: {:?} vs {:?}", first.shape, t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn same_buffer(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }
}

impl<T: Float> Tensor<T> {
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect()),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::ZERO; n * n];
        for i in 0..n {
            data[i * n + i] = T::ONE;
        }
        Tensor { shape: vec![n, n], data: Arc::new(data) }
    }

    /// Plain matrix product without gradient tracking.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, data) = kernels::matmul_forward(self, other)?;
        Tensor::new(shape, data)
    }

    /// Per-slice Euclidean norms along `axis`.
    pub fn l2_norm(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = kernels::axis_split(&self.shape, axis)?;
        let mut out = vec![T::ZERO; outer * inner];
        kernels::l2_norm_forward(&self.data, outer, len, inner, &mut out);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(shape, out)
    }
}

/// A tensor of any archive dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
    I64(Tensor<i64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
            AnyTensor::I64(_) => DType::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
            AnyTensor::I64(t) => t.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Floating contents converted to `T`; integer dtypes are rejected.
    pub fn to_float<T: Float>(&self) -> Result<Tensor<T>> {
        match self {
            AnyTensor::F32(t) => Ok(t.cast()),
            AnyTensor::F64(t) => Ok(t.cast()),
            other => Err(Error::DType(format!("expected a floating tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn from_float<T: Float>(t: &Tensor<T>) -> AnyTensor {
        match T::DTYPE {
            DType::F64 => AnyTensor::F64(t.cast()),
            _ => AnyTensor::F32(t.cast()),
        }
    }

    pub fn as_u8(&self) -> Result<&Tensor<u8>> {
        match self {
            AnyTensor::U8(t) => Ok(t),
            other => Err(Error::DType(format!("expected uint8, found {:?}", other.dtype()))),
        }
    }

    pub fn as_i64(&self) -> Result<&Tensor<i64>> {
        match self {
            AnyTensor::I64(t) => Ok(t),
            other => Err(Error::DType(format!("expected int64, found {:?}", other.dtype()))),
        }
    }
}
