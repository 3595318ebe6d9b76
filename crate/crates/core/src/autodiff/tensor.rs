use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is used for training and storage;
/// `f64` exists for gradient checking.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the working precision.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("finite literal")
}

/// Stable identity of a trainable tensor. Clones and precision casts keep it,
/// so gradients can be matched back to the tensor they were computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    id: ParamId,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            id: ParamId::fresh(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![S::zero(); n]).expect("consistent")
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("consistent")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("consistent")
    }

    pub fn scalar(value: S) -> Self {
        Self::new(&[1], vec![value]).expect("consistent")
    }

    /// Marks this tensor trainable and returns it.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also discards any buffer already held.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<S>> {
        self.grad.as_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for frozen tensors.
    pub fn accumulate_grad(&mut self, delta: &[S]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let g = self.grad.get_or_insert_with(|| vec![S::zero(); delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn at(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, d) in index.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Converts precision, keeping identity, shape, and trainability.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| lit::<T>(v.to_f64().unwrap())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| lit::<T>(v.to_f64().unwrap())).collect()),
            requires_grad: self.requires_grad,
            id: self.id,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), S::max)
    }
}
