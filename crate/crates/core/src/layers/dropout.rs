use crate::error::{Error, Result};
use crate::randgen::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Inverted dropout: kept units are scaled by `1/(1-p)` during training.
#[derive(Clone, Debug)]
pub struct DropoutLayer<T = f32> {
    p: f64,
    rng: SplitMix64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> DropoutLayer<T> {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(DropoutLayer {
            p,
            rng: SplitMix64::new(seed),
            mask: None,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn rng_state(&self) -> u64 {
        self.rng.state()
    }

    pub fn set_rng_state(&mut self, state: u64) {
        self.rng = SplitMix64::new(state);
    }

    /// Cached training mask; `None` means identity.
    pub fn mask(&self) -> Option<&[T]> {
        self.mask.as_deref()
    }

    /// Training draws a fresh mask; inference is the identity.
    pub fn apply(&mut self, x: &Tensor<T>, training: bool) -> Tensor<T> {
        if !training || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::of(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if self.rng.next_unit() < self.p { T::zero() } else { keep })
            .collect();
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        y
    }

    /// Multiplies the error by the cached mask.
    pub fn backward(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mask {
            None => Ok(e.clone()),
            Some(m) if m.len() == e.len() => {
                let mut out = e.clone();
                for (v, &k) in out.data_mut().iter_mut().zip(m) {
                    *v *= k;
                }
                Ok(out)
            }
            Some(m) => Err(Error::dim(format!(
                "dropout error has {} elements, mask has {}",
                e.len(),
                m.len()
            ))),
        }
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}
