use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

use crate::error::{Result, TensorError};

/// Floating-point element types a tensor can hold. Models run in `f32`; the
/// `f64` instantiation backs the reference forward pass of the gradient checker.
pub trait Element:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Dense row-major array with a non-empty shape of positive dimensions.
#[derive(Clone, PartialEq)]
pub struct TensorOf<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type Tensor = TensorOf<f32>;

impl<T: Element> TensorOf<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || shape_len(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; for literals in code whose shape is known.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        Self::new(shape, data).expect("valid tensor shape")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape_len(&shape);
        Self::from_vec(shape, vec![value; len])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec([1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn ones_like(other: &Self) -> Self {
        Self::ones(other.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Sum accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .sum()
    }

    pub fn sum(&self) -> T {
        T::from(self.sum_f64()).unwrap_or_else(T::nan)
    }

    pub fn mean(&self) -> T {
        T::from(self.sum_f64() / self.data.len() as f64).unwrap_or_else(T::nan)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Element-type conversion.
    pub fn cast<U: Element>(&self) -> TensorOf<U> {
        TensorOf {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from(x).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Rows `[start, start+count)` along the leading axis, as a new tensor.
    pub fn narrow_leading(&self, start: usize, count: usize) -> Result<Self> {
        let lead = self.shape[0];
        if count == 0 || start + count > lead {
            return Err(TensorError::Dimension {
                op: "narrow_leading",
                msg: format!(
                    "range {start}..{} outside leading axis {lead}",
                    start + count
                ),
            });
        }
        let inner = self.data.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self::new(
            shape,
            self.data[start * inner..(start + count) * inner].to_vec(),
        )
    }

    /// Gathers entries of the leading axis in the given order.
    pub fn gather_leading(&self, indices: &[usize]) -> Result<Self> {
        let lead = self.shape[0];
        let inner = self.data.len() / lead;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= lead {
                return Err(TensorError::Dimension {
                    op: "gather_leading",
                    msg: format!("index {i} outside leading axis {lead}"),
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape_len(&shape), data.len());
        Self { shape, data }
    }
}

impl Tensor {
    /// Uniform draws in `[low, high]`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        low: f32,
        high: f32,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let len = shape_len(&shape);
        let data = if high > low {
            (0..len).map(|_| rng.gen_range(low..=high)).collect()
        } else {
            vec![low; len]
        };
        Self::from_vec(shape, data)
    }
}

impl<T: Element> fmt::Debug for TensorOf<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}
