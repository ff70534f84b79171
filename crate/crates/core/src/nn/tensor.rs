use std::fmt;
use std::ops::{Deref, DerefMut};

use super::{NnError, Scalar};

/// Dimensions of a dense row-major tensor. Every dimension is at least one.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, NnError> {
        let dims = dims.into();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Prepends a batch dimension.
    pub fn batched(&self, batch: usize) -> Result<Shape, NnError> {
        let mut dims = Vec::with_capacity(self.0.len() + 1);
        dims.push(batch);
        dims.extend_from_slice(&self.0);
        Shape::new(dims)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dense tensor with finite values stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != shape.numel() {
            return Err(NnError::LengthMismatch {
                what: "tensor data",
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { what: "tensor data", index: i });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self, NnError> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    /// Internal constructor for kernel outputs whose length is known to match.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
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

    /// Leading dimension, i.e. the number of rows for batched tensors.
    pub fn batch(&self) -> usize {
        self.shape.dims()[0]
    }

    /// Elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.numel() / self.batch()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, NnError> {
        if shape.numel() != self.data.len() {
            return Err(NnError::LengthMismatch {
                what: "reshape",
                expected: self.data.len(),
                actual: shape.numel(),
            });
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

macro_rules! flat_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Default)]
        pub struct $name<T>(pub Vec<T>);

        impl<T: Scalar> $name<T> {
            pub fn zeros(len: usize) -> Self {
                $name(vec![T::zero(); len])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[T] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<T> {
                self.0
            }

            /// Squared Euclidean norm accumulated in double precision.
            pub fn norm_sq(&self) -> f64 {
                self.0.iter().map(|v| { let x = v.as_f64(); x * x }).sum()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn cast<U: Scalar>(&self) -> $name<U> {
                $name(self.0.iter().map(|v| U::of(v.as_f64())).collect())
            }
        }

        impl<T> Deref for $name<T> {
            type Target = [T];
            fn deref(&self) -> &[T] {
                &self.0
            }
        }

        impl<T> DerefMut for $name<T> {
            fn deref_mut(&mut self) -> &mut [T] {
                &mut self.0
            }
        }

        impl<T> From<Vec<T>> for $name<T> {
            fn from(v: Vec<T>) -> Self {
                $name(v)
            }
        }
    };
}

flat_vector!(
    /// Flat network parameters in canonical layout: layers in order, each
    /// layer's weights (row-major) followed by its biases.
    ParamVector
);

flat_vector!(
    /// Flat gradient or update aligned with a [`ParamVector`] layout.
    GradVector
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_dims() {
        assert!(Shape::new(vec![3, 0]).is_err());
        assert!(Shape::new(Vec::<usize>::new()).is_err());
        assert_eq!(Shape::new(vec![3, 32, 32]).unwrap().numel(), 3072);
    }

    #[test]
    fn tensor_rejects_non_finite_and_bad_length() {
        assert!(Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0]).is_err());
        let t = Tensor::<f64>::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }
}
