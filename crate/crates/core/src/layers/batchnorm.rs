use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch normalization with one scale (and optional shift) per unit or feature map.
///
/// Inputs are `[batch, C]` or `[batch, C, H, W]`; statistics are taken over
/// everything except the channel axis.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    /// Whether `beta` is used and trained.
    pub shift: bool,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    /// `None` when the shift is disabled.
    pub beta: Option<Tensor<T>>,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize, shift: bool) -> Result<Self> {
        if channels == 0 {
            return Err(Error::arg("batch norm needs at least one channel"));
        }
        Ok(BatchNormLayer {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
            shift,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + if self.shift { self.beta.len() } else { 0 }
    }

    /// `(batch, spatial)` for a valid input.
    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if (s.len() != 2 && s.len() != 4) || s[1] != self.channels() {
            return Err(Error::dim(format!(
                "batch norm over {} channels got input {s:?}",
                self.channels()
            )));
        }
        Ok((s[0], s[2..].iter().product()))
    }

    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let (batch, spatial) = self.layout(x)?;
        let c = self.channels();
        if !training {
            self.cache = None;
            return self.infer(x);
        }
        if batch < 2 {
            return Err(Error::arg("batch norm training needs a batch of at least 2"));
        }
        let n = T::of((batch * spatial) as f64);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                for &v in &xd[(b * c + ch) * spatial..][..spatial] {
                    mean[ch] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for b in 0..batch {
            for ch in 0..c {
                for &v in &xd[(b * c + ch) * spatial..][..spatial] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(self.eps)).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (i, (h, o)) in xhat.data_mut().iter_mut().zip(y.data_mut()).enumerate() {
            let ch = (i / spatial) % c;
            *h = (*h - mean[ch]) * inv_std[ch];
            *o = self.gamma.data()[ch] * *h + self.beta_at(ch);
        }
        let mo = T::of(self.momentum);
        for ch in 0..c {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = mo * *rm + (T::one() - mo) * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = mo * *rv + (T::one() - mo) * var[ch];
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(y)
    }

    /// Inference transform with running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, spatial) = self.layout(x)?;
        let c = self.channels();
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            let inv = T::one() / (self.running_var.data()[ch] + T::of(self.eps)).sqrt();
            *v = self.gamma.data()[ch] * (*v - self.running_mean.data()[ch]) * inv + self.beta_at(ch);
        }
        Ok(y)
    }

    fn beta_at(&self, ch: usize) -> T {
        if self.shift {
            self.beta.data()[ch]
        } else {
            T::zero()
        }
    }

    pub fn backward(&self, e_out: &Tensor<T>) -> Result<BatchNormGrads<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("batch norm backward called before a training forward"))?;
        if e_out.shape() != cache.xhat.shape() {
            return Err(Error::dim(format!(
                "batch norm error {:?} does not match input {:?}",
                e_out.shape(),
                cache.xhat.shape()
            )));
        }
        let (batch, spatial) = self.layout(e_out)?;
        let c = self.channels();
        let n = T::of((batch * spatial) as f64);
        let (ed, hd) = (e_out.data(), cache.xhat.data());
        let mut sum_e = vec![T::zero(); c];
        let mut sum_eh = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let o = (b * c + ch) * spatial;
                for i in o..o + spatial {
                    sum_e[ch] += ed[i];
                    sum_eh[ch] += ed[i] * hd[i];
                }
            }
        }
        let mut input = e_out.clone();
        for (i, v) in input.data_mut().iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            let k = self.gamma.data()[ch] * cache.inv_std[ch] / n;
            *v = k * (n * ed[i] - sum_e[ch] - hd[i] * sum_eh[ch]);
        }
        Ok(BatchNormGrads {
            input,
            gamma: Tensor::new(vec![c], sum_eh)?,
            beta: if self.shift {
                Some(Tensor::new(vec![c], sum_e)?)
            } else {
                None
            },
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
