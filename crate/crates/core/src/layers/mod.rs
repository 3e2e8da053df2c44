//! Forward/backward primitives. Every layer caches exactly what its backward
//! pass needs from the most recent training-mode forward call.

mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod pool;

pub use batchnorm::{BatchNormGrads, BatchNormLayer};
pub use conv::{conv_output_size, ConvAlgo, ConvGrads, ConvLayer};
pub use dense::{DenseGrads, DenseLayer};
pub use dropout::DropoutLayer;
pub use pool::MaxPoolLayer;

use crate::tensor::{Scalar, Tensor};

/// Which weights carry error from a layer's pre-activation to its input.
#[derive(Clone, Copy, Debug)]
pub enum InputError<'a, T> {
    /// Input error is not needed (bottom layer).
    Skip,
    /// The layer's own forward weights (exact backprop).
    Exact,
    /// A fixed tensor laid out like the forward weights (feedback alignment).
    Replace(&'a Tensor<T>),
}

pub fn relu<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Heaviside step with `H(0) = 0`.
pub fn relu_deriv<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| if v > T::zero() { T::one() } else { T::zero() })
}

/// `e * H(z)` in place.
pub(crate) fn relu_mask_in_place<T: Scalar>(e: &mut Tensor<T>, z: &Tensor<T>) {
    for (ev, &zv) in e.data_mut().iter_mut().zip(z.data()) {
        if zv <= T::zero() {
            *ev = T::zero();
        }
    }
}
