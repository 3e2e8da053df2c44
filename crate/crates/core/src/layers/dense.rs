use crate::error::{Error, Result};
use crate::randgen::glorot_uniform;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

use super::{relu, InputError};

/// Fully connected layer `z = x W^T + b` with `W: N x M`.
#[derive(Clone, Debug)]
pub struct DenseLayer<T = f32> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    cache: Option<DenseCache<T>>,
}

#[derive(Clone, Debug)]
struct DenseCache<T> {
    x: Tensor<T>,
    z: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if w.rank() != 2 || b.shape() != [w.shape()[0]] {
            return Err(Error::dim(format!(
                "dense weights {:?} with bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(DenseLayer { w, b, cache: None })
    }

    /// Glorot-initialised weights, zero bias.
    pub fn glorot(seed: u64, inputs: usize, outputs: usize) -> Result<Self> {
        let w = glorot_uniform(seed, inputs, outputs, outputs, inputs)?;
        Self::new(w, Tensor::zeros(&[outputs]))
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Pre-activation `x W^T + b` per batch row; caches `x` and `z`.
    /// Any trailing shape of `x` is flattened to width `M`.
    pub fn linear_forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.affine(x)?;
        self.cache = Some(DenseCache {
            x: x.clone(),
            z: z.clone(),
        });
        Ok(z)
    }

    /// Pre-activation without touching the cache (inference).
    pub fn affine(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, width) = (x.rows(), x.row_len());
        if x.rank() < 2 || width != self.inputs() {
            return Err(Error::dim(format!(
                "dense layer expects width {}, got input {:?}",
                self.inputs(),
                x.shape()
            )));
        }
        let n = self.outputs();
        let mut z = vec![T::zero(); batch * n];
        gemm(
            MatRef::new(x.data(), batch, width),
            MatRef::transposed(self.w.data(), n, width),
            &mut z,
            false,
        );
        for row in z.chunks_exact_mut(n) {
            for (v, &bias) in row.iter_mut().zip(self.b.data()) {
                *v += bias;
            }
        }
        Tensor::new(vec![batch, n], z)
    }

    /// `relu(x W^T + b)`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(&self.linear_forward(x)?))
    }

    pub fn preact(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.z)
    }

    pub fn cached_input(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.x)
    }

    /// Gradients from the error at the pre-activation, summed over the batch.
    pub fn backward(&self, e_z: &Tensor<T>, input_error: InputError<'_, T>) -> Result<DenseGrads<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("dense backward called before forward"))?;
        let (batch, n, m) = (cache.x.rows(), self.outputs(), self.inputs());
        if e_z.shape() != [batch, n] {
            return Err(Error::dim(format!(
                "dense error {:?} does not match pre-activation [{batch}, {n}]",
                e_z.shape()
            )));
        }
        let mut gw = vec![T::zero(); n * m];
        gemm(
            MatRef::transposed(e_z.data(), batch, n),
            MatRef::new(cache.x.data(), batch, m),
            &mut gw,
            false,
        );
        let mut gb = vec![T::zero(); n];
        for row in e_z.data().chunks_exact(n) {
            for (g, &e) in gb.iter_mut().zip(row) {
                *g += e;
            }
        }
        let weights = match input_error {
            InputError::Skip => None,
            InputError::Exact => Some(&self.w),
            InputError::Replace(t) => {
                if t.shape() != self.w.shape() {
                    return Err(Error::dim(format!(
                        "feedback {:?} does not match weights {:?}",
                        t.shape(),
                        self.w.shape()
                    )));
                }
                Some(t)
            }
        };
        let input = match weights {
            Some(w) => {
                let mut ex = vec![T::zero(); batch * m];
                gemm(
                    MatRef::new(e_z.data(), batch, n),
                    MatRef::new(w.data(), n, m),
                    &mut ex,
                    false,
                );
                Some(Tensor::new(cache.x.shape().to_vec(), ex)?)
            }
            None => None,
        };
        Ok(DenseGrads {
            w: Tensor::new(vec![n, m], gw)?,
            b: Tensor::new(vec![n], gb)?,
            input,
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
