use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::conv_output_size;

/// Max pooling over `[batch, channels, height, width]`.
#[derive(Clone, Debug)]
pub struct MaxPoolLayer {
    pub window: (usize, usize),
    pub stride: usize,
    cache: Option<PoolCache>,
}

#[derive(Clone, Debug)]
struct PoolCache {
    in_shape: Vec<usize>,
    /// Flat input index of each output cell's winner.
    argmax: Vec<usize>,
}

impl MaxPoolLayer {
    pub fn new(window: (usize, usize), stride: usize) -> Result<Self> {
        if window.0 == 0 || window.1 == 0 || stride == 0 {
            return Err(Error::arg(format!("pool window {window:?} stride {stride}")));
        }
        Ok(MaxPoolLayer {
            window,
            stride,
            cache: None,
        })
    }

    pub fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        Ok((
            conv_output_size(height, self.window.0, 0, self.stride)?,
            conv_output_size(width, self.window.1, 0, self.stride)?,
        ))
    }

    /// Pooled output and the winning flat input index per output cell.
    /// Ties go to the lowest index.
    pub fn pool<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Rank(format!("pool input must be rank 4, got {s:?}")));
        }
        let (planes, ih, iw) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = self.output_shape(ih, iw)?;
        let (wh, ww) = self.window;
        let mut y = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        let xd = x.data();
        for p in 0..planes {
            let base = p * ih * iw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * self.stride * iw + ox * self.stride;
                    for dy in 0..wh {
                        let row = base + (oy * self.stride + dy) * iw + ox * self.stride;
                        for i in row..row + ww {
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    y.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor::new(vec![s[0], s[1], oh, ow], y)?, arg))
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, argmax) = self.pool(x)?;
        self.cache = Some(PoolCache {
            in_shape: x.shape().to_vec(),
            argmax,
        });
        Ok(y)
    }

    pub fn argmax(&self) -> Option<&[usize]> {
        self.cache.as_ref().map(|c| c.argmax.as_slice())
    }

    /// Routes each output error to its cached winner, accumulating on overlap.
    pub fn backward<T: Scalar>(&self, e_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("max-pool backward called before forward"))?;
        if e_out.len() != cache.argmax.len() {
            return Err(Error::dim(format!(
                "pool error has {} cells, forward produced {}",
                e_out.len(),
                cache.argmax.len()
            )));
        }
        let mut e_in = Tensor::zeros(&cache.in_shape);
        let d = e_in.data_mut();
        for (&i, &e) in cache.argmax.iter().zip(e_out.data()) {
            d[i] += e;
        }
        Ok(e_in)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_case() {
        let mut l = MaxPoolLayer::new((2, 2), 2).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(l.forward(&x).unwrap().data(), &[4.0]);
        assert_eq!(l.argmax().unwrap(), &[3]);
        let e = l
            .backward(&Tensor::new(vec![1, 1, 1, 1], vec![5.0f32]).unwrap())
            .unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn ties_pick_first_index() {
        let mut l = MaxPoolLayer::new((2, 2), 2).unwrap();
        l.forward(&Tensor::<f32>::ones(&[1, 2, 4, 4])).unwrap();
        assert_eq!(l.argmax().unwrap(), &[0, 2, 8, 10, 16, 18, 24, 26]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let l = MaxPoolLayer::new((2, 2), 2).unwrap();
        assert!(matches!(l.backward(&Tensor::<f32>::zeros(&[1])), Err(Error::State(_))));
    }

    #[test]
    fn window_larger_than_input_is_error() {
        let l = MaxPoolLayer::new((3, 3), 1).unwrap();
        assert!(l.pool(&Tensor::<f32>::zeros(&[1, 1, 2, 2])).is_err());
    }
}
