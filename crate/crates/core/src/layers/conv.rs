use crate::error::{Error, Result};
use crate::randgen::glorot_uniform_shaped;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

use super::{relu, InputError};

/// Output extent `floor((input + 2 pad - kernel) / stride) + 1`.
pub fn conv_output_size(input: usize, kernel: usize, pad: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::arg("stride must be positive"));
    }
    if kernel == 0 || kernel > input + 2 * pad {
        return Err(Error::dim(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Both algorithms produce bit-identical results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    /// Nested loops over output cells.
    Direct,
    /// Patch matrix plus packed GEMM.
    #[default]
    Im2col,
}

/// 2-D cross-correlation over `[batch, channels, height, width]` inputs.
#[derive(Clone, Debug)]
pub struct ConvLayer<T = f32> {
    /// `[out_channels, in_channels, kh, kw]`.
    pub kernels: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
    pub algo: ConvAlgo,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    x: Tensor<T>,
    z: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub kernels: Tensor<T>,
    pub b: Tensor<T>,
    pub input: Option<Tensor<T>>,
}

/// Spatial bookkeeping for one forward shape.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    ic: usize,
    ih: usize,
    iw: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn patch(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    fn cells(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate of kernel tap `k` at output cell `o`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(self.pad)?;
        (p < extent).then_some(p)
    }
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(kernels: Tensor<T>, b: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        if kernels.rank() != 4 {
            return Err(Error::Rank(format!(
                "conv kernels must be rank 4, got {:?}",
                kernels.shape()
            )));
        }
        if b.shape() != [kernels.shape()[0]] {
            return Err(Error::dim(format!(
                "conv bias {:?} for kernels {:?}",
                b.shape(),
                kernels.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        Ok(ConvLayer {
            kernels,
            b,
            stride,
            pad,
            algo: ConvAlgo::default(),
            cache: None,
        })
    }

    pub fn glorot(
        seed: u64,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let k = glorot_uniform_shaped(
            seed,
            in_channels * kh * kw,
            out_channels * kh * kw,
            &[out_channels, in_channels, kh, kw],
        )?;
        Self::new(k, Tensor::zeros(&[out_channels]), stride, pad)
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.b.len()
    }

    /// Output `(channels, height, width)` for an input of the given spatial size.
    pub fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let (kh, kw) = self.kernel_size();
        Ok((
            self.out_channels(),
            conv_output_size(height, kh, self.pad, self.stride)?,
            conv_output_size(width, kw, self.pad, self.stride)?,
        ))
    }

    fn geom(&self, shape: &[usize]) -> Result<Geom> {
        if shape.len() != 4 {
            return Err(Error::Rank(format!("conv input must be rank 4, got {shape:?}")));
        }
        if shape[1] != self.in_channels() {
            return Err(Error::dim(format!(
                "conv expects {} input channels, got {shape:?}",
                self.in_channels()
            )));
        }
        let (kh, kw) = self.kernel_size();
        let (oc, oh, ow) = self.output_shape(shape[2], shape[3])?;
        Ok(Geom {
            batch: shape[0],
            ic: shape[1],
            ih: shape[2],
            iw: shape[3],
            oc,
            kh,
            kw,
            oh,
            ow,
            stride: self.stride,
            pad: self.pad,
        })
    }

    /// Pre-activation without touching the cache.
    pub fn affine(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x.shape())?;
        let mut z = vec![T::zero(); g.batch * g.oc * g.cells()];
        match self.algo {
            ConvAlgo::Direct => self.forward_direct(&g, x.data(), &mut z),
            ConvAlgo::Im2col => self.forward_im2col(&g, x.data(), &mut z),
        }
        for img in z.chunks_exact_mut(g.oc * g.cells()) {
            for (plane, &bias) in img.chunks_exact_mut(g.cells()).zip(self.b.data()) {
                for v in plane {
                    *v += bias;
                }
            }
        }
        Tensor::new(vec![g.batch, g.oc, g.oh, g.ow], z)
    }

    pub fn linear_forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.affine(x)?;
        self.cache = Some(ConvCache {
            x: x.clone(),
            z: z.clone(),
        });
        Ok(z)
    }

    /// `relu(conv(x) + b)`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(&self.linear_forward(x)?))
    }

    pub fn preact(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.z)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn forward_direct(&self, g: &Geom, x: &[T], z: &mut [T]) {
        let k = self.kernels.data();
        for b in 0..g.batch {
            let xb = &x[b * g.ic * g.ih * g.iw..];
            for oc in 0..g.oc {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = T::zero();
                        for ic in 0..g.ic {
                            for ky in 0..g.kh {
                                let Some(iy) = g.src(oy, ky, g.ih) else { continue };
                                for kx in 0..g.kw {
                                    let Some(ix) = g.src(ox, kx, g.iw) else { continue };
                                    s += k[((oc * g.ic + ic) * g.kh + ky) * g.kw + kx]
                                        * xb[(ic * g.ih + iy) * g.iw + ix];
                                }
                            }
                        }
                        z[((b * g.oc + oc) * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
    }

    fn im2col(g: &Geom, xb: &[T], col: &mut [T]) {
        let cells = g.cells();
        for ic in 0..g.ic {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = &mut col[((ic * g.kh + ky) * g.kw + kx) * cells..][..cells];
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            row[oy * g.ow + ox] = match (g.src(oy, ky, g.ih), g.src(ox, kx, g.iw)) {
                                (Some(iy), Some(ix)) => xb[(ic * g.ih + iy) * g.iw + ix],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(g: &Geom, col: &[T], eb: &mut [T]) {
        let cells = g.cells();
        for ic in 0..g.ic {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = &col[((ic * g.kh + ky) * g.kw + kx) * cells..][..cells];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ky, g.ih) else { continue };
                        for ox in 0..g.ow {
                            let Some(ix) = g.src(ox, kx, g.iw) else { continue };
                            eb[(ic * g.ih + iy) * g.iw + ix] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }

    fn forward_im2col(&self, g: &Geom, x: &[T], z: &mut [T]) {
        let (patch, cells) = (g.patch(), g.cells());
        let mut col = vec![T::zero(); patch * cells];
        for b in 0..g.batch {
            Self::im2col(g, &x[b * g.ic * g.ih * g.iw..], &mut col);
            gemm(
                MatRef::new(self.kernels.data(), g.oc, patch),
                MatRef::new(&col, patch, cells),
                &mut z[b * g.oc * cells..][..g.oc * cells],
                false,
            );
        }
    }

    /// Gradients from the error at the pre-activation, summed over the batch.
    pub fn backward(&self, e_z: &Tensor<T>, input_error: InputError<'_, T>) -> Result<ConvGrads<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("conv backward called before forward"))?;
        let g = self.geom(cache.x.shape())?;
        if e_z.shape() != cache.z.shape() {
            return Err(Error::dim(format!(
                "conv error {:?} does not match pre-activation {:?}",
                e_z.shape(),
                cache.z.shape()
            )));
        }
        let weights = match input_error {
            InputError::Skip => None,
            InputError::Exact => Some(&self.kernels),
            InputError::Replace(t) => {
                if t.shape() != self.kernels.shape() {
                    return Err(Error::dim(format!(
                        "feedback {:?} does not match kernels {:?}",
                        t.shape(),
                        self.kernels.shape()
                    )));
                }
                Some(t)
            }
        };
        let cells = g.cells();
        let mut gb = vec![T::zero(); g.oc];
        for img in e_z.data().chunks_exact(g.oc * cells) {
            for (acc, plane) in gb.iter_mut().zip(img.chunks_exact(cells)) {
                for &v in plane {
                    *acc += v;
                }
            }
        }
        let mut gk = vec![T::zero(); self.kernels.len()];
        let mut ex = weights.map(|_| vec![T::zero(); cache.x.len()]);
        let w = weights.map(|t| t.data());
        match self.algo {
            ConvAlgo::Direct => Self::backward_direct(&g, cache.x.data(), e_z.data(), w, &mut gk, ex.as_deref_mut()),
            ConvAlgo::Im2col => Self::backward_im2col(&g, cache.x.data(), e_z.data(), w, &mut gk, ex.as_deref_mut()),
        }
        Ok(ConvGrads {
            kernels: Tensor::new(self.kernels.shape().to_vec(), gk)?,
            b: Tensor::new(vec![g.oc], gb)?,
            input: ex.map(|d| Tensor::new(cache.x.shape().to_vec(), d)).transpose()?,
        })
    }

    fn backward_direct(g: &Geom, x: &[T], e: &[T], w: Option<&[T]>, gk: &mut [T], ex: Option<&mut [T]>) {
        let (cells, in_img) = (g.cells(), g.ic * g.ih * g.iw);
        for b in 0..g.batch {
            let xb = &x[b * in_img..][..in_img];
            let eb = &e[b * g.oc * cells..][..g.oc * cells];
            for oc in 0..g.oc {
                for ic in 0..g.ic {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let mut s = gk[((oc * g.ic + ic) * g.kh + ky) * g.kw + kx];
                            for oy in 0..g.oh {
                                for ox in 0..g.ow {
                                    let v = match (g.src(oy, ky, g.ih), g.src(ox, kx, g.iw)) {
                                        (Some(iy), Some(ix)) => xb[(ic * g.ih + iy) * g.iw + ix],
                                        _ => T::zero(),
                                    };
                                    s += eb[oc * cells + oy * g.ow + ox] * v;
                                }
                            }
                            gk[((oc * g.ic + ic) * g.kh + ky) * g.kw + kx] = s;
                        }
                    }
                }
            }
        }
        let (Some(w), Some(ex)) = (w, ex) else { return };
        for b in 0..g.batch {
            let eb = &e[b * g.oc * cells..][..g.oc * cells];
            let xb = &mut ex[b * in_img..][..in_img];
            for ic in 0..g.ic {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        for oy in 0..g.oh {
                            for ox in 0..g.ow {
                                let mut s = T::zero();
                                for oc in 0..g.oc {
                                    s +=
                                        w[((oc * g.ic + ic) * g.kh + ky) * g.kw + kx] * eb[oc * cells + oy * g.ow + ox];
                                }
                                if let (Some(iy), Some(ix)) = (g.src(oy, ky, g.ih), g.src(ox, kx, g.iw)) {
                                    xb[(ic * g.ih + iy) * g.iw + ix] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_im2col(g: &Geom, x: &[T], e: &[T], w: Option<&[T]>, gk: &mut [T], mut ex: Option<&mut [T]>) {
        let (patch, cells, in_img) = (g.patch(), g.cells(), g.ic * g.ih * g.iw);
        let mut col = vec![T::zero(); patch * cells];
        for b in 0..g.batch {
            let eb = &e[b * g.oc * cells..][..g.oc * cells];
            Self::im2col(g, &x[b * in_img..], &mut col);
            gemm(
                MatRef::new(eb, g.oc, cells),
                MatRef::transposed(&col, patch, cells),
                gk,
                true,
            );
            if let (Some(w), Some(ex)) = (w, ex.as_deref_mut()) {
                gemm(
                    MatRef::transposed(w, g.oc, patch),
                    MatRef::new(eb, g.oc, cells),
                    &mut col,
                    false,
                );
                Self::col2im(g, &col, &mut ex[b * in_img..][..in_img]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::relu_mask_in_place;
    use crate::randgen::SplitMix64;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.next_unit() * 2.0 - 1.0)
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(32, 5, 0, 1).unwrap(), 28);
        assert_eq!(conv_output_size(32, 5, 2, 1).unwrap(), 32);
        assert_eq!(conv_output_size(7, 3, 0, 2).unwrap(), 3);
        assert!(matches!(conv_output_size(2, 3, 0, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn unit_kernel_is_relu() {
        let mut l = ConvLayer::new(Tensor::<f32>::ones(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -1.0, 0.5, -3.0]).unwrap();
        assert_eq!(l.forward(&x).unwrap().data(), relu(&x).data());
    }

    #[test]
    fn all_ones_valid_gives_nine() {
        let l = ConvLayer::new(Tensor::<f32>::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let z = l.affine(&Tensor::ones(&[1, 1, 3, 3])).unwrap();
        assert_eq!(z.shape(), &[1, 1, 1, 1]);
        assert_eq!(z.data(), &[9.0]);
    }

    #[test]
    fn oversized_kernel_is_dimension_error() {
        let l = ConvLayer::<f32>::glorot(1, 1, 1, (5, 5), 1, 0).unwrap();
        assert!(matches!(
            l.affine(&Tensor::ones(&[1, 1, 3, 3])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_error_gives_zero_grads() {
        let mut l = ConvLayer::<f64>::glorot(1, 2, 3, (3, 3), 1, 1).unwrap();
        l.linear_forward(&rand(&[2, 2, 5, 5], 3)).unwrap();
        let g = l.backward(&Tensor::zeros(&[2, 3, 5, 5]), InputError::Exact).unwrap();
        assert_eq!(g.kernels.max_abs() + g.b.max_abs() + g.input.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn unit_kernel_backward_reduces_to_dense() {
        let mut l = ConvLayer::new(Tensor::<f64>::ones(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let x = rand(&[2, 1, 3, 3], 4);
        let e = rand(&[2, 1, 3, 3], 5);
        l.linear_forward(&x).unwrap();
        let g = l.backward(&e, InputError::Exact).unwrap();
        assert_eq!(g.input.unwrap().data(), e.data());
        let want: f64 = x.data().iter().zip(e.data()).map(|(a, b)| a * b).sum();
        assert!((g.kernels.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn direct_and_im2col_agree_bitwise() {
        for &(stride, pad) in &[(1, 0), (1, 2), (2, 1), (3, 0)] {
            let mut a =
                ConvLayer::new(rand(&[3, 2, 3, 2], 7).cast::<f32>(), rand(&[3], 8).cast(), stride, pad).unwrap();
            a.algo = ConvAlgo::Direct;
            let mut b = a.clone();
            b.algo = ConvAlgo::Im2col;
            let x = rand(&[2, 2, 7, 6], 9).cast::<f32>();
            let za = a.linear_forward(&x).unwrap();
            let zb = b.linear_forward(&x).unwrap();
            assert_eq!(za, zb);
            let e = Tensor::from_fn(za.shape(), |i| ((i * 37 % 11) as f32 - 5.0) * 0.1);
            let ga = a.backward(&e, InputError::Exact).unwrap();
            let gb = b.backward(&e, InputError::Exact).unwrap();
            assert_eq!(ga.kernels, gb.kernels);
            assert_eq!(ga.b, gb.b);
            assert_eq!(ga.input, gb.input);
        }
    }

    /// Downstream loss `sum(c * relu(conv(x)))` on a 1x4x5x5 input with 2 filters.
    #[test]
    fn grads_match_finite_differences() {
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let mut l = ConvLayer::new(rand(&[2, 4, 3, 3], 20), rand(&[2], 21), 1, 1).unwrap();
            l.algo = algo;
            let x = rand(&[1, 4, 5, 5], 22);
            let c = rand(&[1, 2, 5, 5], 23);
            let loss = |l: &ConvLayer<f64>, x: &Tensor<f64>| -> f64 {
                relu(&l.affine(x).unwrap())
                    .data()
                    .iter()
                    .zip(c.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let z = l.linear_forward(&x).unwrap();
            let mut e = c.clone();
            relu_mask_in_place(&mut e, &z);
            let g = l.backward(&e, InputError::Exact).unwrap();
            let h = 1e-6;
            let check = |a: f64, num: f64| {
                assert!(
                    (a - num).abs() <= 1e-4 * a.abs().max(num.abs()).max(1e-6),
                    "{a} vs {num}"
                );
            };
            for i in 0..l.kernels.len() {
                let (mut p, mut q) = (l.clone(), l.clone());
                p.kernels.data_mut()[i] += h;
                q.kernels.data_mut()[i] -= h;
                check(g.kernels.data()[i], (loss(&p, &x) - loss(&q, &x)) / (2.0 * h));
            }
            for i in 0..2 {
                let (mut p, mut q) = (l.clone(), l.clone());
                p.b.data_mut()[i] += h;
                q.b.data_mut()[i] -= h;
                check(g.b.data()[i], (loss(&p, &x) - loss(&q, &x)) / (2.0 * h));
            }
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                check(
                    g.input.as_ref().unwrap().data()[i],
                    (loss(&l, &xp) - loss(&l, &xm)) / (2.0 * h),
                );
            }
        }
    }
}
