use crate::scalar::{convert_slice, Real};

use super::TensorError;

/// Dense row-major N-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    pub requires_grad: bool,
    pub grad: Option<Vec<R>>,
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be non-empty and >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&x| R::lit(x)).collect())
    }

    pub fn full(shape: &[usize], value: R) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        Self::full(shape, R::zero())
    }

    pub fn scalar(value: R) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: convert_slice(&self.data),
            requires_grad: self.requires_grad,
            grad: self.grad.as_deref().map(convert_slice),
        }
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.rank(), 2);
    }

    #[test]
    fn cast_round_trips_representable_values() {
        let t = Tensor::<f64>::from_f64(&[3], &[1.0, -0.5, 4.25]).unwrap();
        let back: Tensor<f64> = t.cast::<f32>().cast();
        assert_eq!(t, back);
    }
}
