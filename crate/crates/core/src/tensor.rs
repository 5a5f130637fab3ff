//! Dense row-major tensors and the surrogate-derivative description used by
//! the spike nonlinearity.

use crate::error::{config, contract, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(contract(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(contract(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_binary(&self) -> bool {
        is_binary(&self.data)
    }

    /// Stores a gradient, validating that it matches the tensor's shape.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(contract("gradient length differs from tensor length"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

pub(crate) fn is_binary<T: Scalar>(values: &[T]) -> bool {
    values.iter().all(|&v| v == T::zero() || v == T::one())
}

/// Shape of the surrogate derivative used in place of the Heaviside step's
/// zero-almost-everywhere derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Rectangular,
    Triangular,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// Half-width of the support around the threshold.
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { kind: SurrogateKind::Rectangular, width: 0.5 }
    }
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind, width: f64) -> Result<Self> {
        let spec = Self { kind, width };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(config(format!("surrogate width must be positive, got {}", self.width)));
        }
        Ok(())
    }

    /// Surrogate derivative evaluated at `x - threshold`.
    pub fn derivative<T: Scalar>(&self, centered: T) -> T {
        let w = T::from_f64_lossy(self.width);
        let a = centered.abs();
        if a > w {
            return T::zero();
        }
        match self.kind {
            SurrogateKind::Rectangular => T::one() / (w + w),
            SurrogateKind::Triangular => (w - a) / (w * w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn surrogate_windows() {
        let rect = SurrogateSpec::default();
        assert_eq!(rect.derivative(0.0f64), 1.0);
        assert_eq!(rect.derivative(0.5f64), 1.0);
        assert_eq!(rect.derivative(0.51f64), 0.0);
        let tri = SurrogateSpec::new(SurrogateKind::Triangular, 0.5).unwrap();
        assert_eq!(tri.derivative(0.0f64), 2.0);
        assert_eq!(tri.derivative(0.25f64), 1.0);
        assert_eq!(tri.derivative(-0.6f64), 0.0);
    }

    #[test]
    fn nonpositive_width_is_config_error() {
        assert!(SurrogateSpec::new(SurrogateKind::Rectangular, 0.0).is_err());
        assert!(SurrogateSpec::new(SurrogateKind::Triangular, -1.0).is_err());
    }
}
