//! Layer stacks built from a declarative spec.
//!
//! A network is an input dropout site followed by blocks. A block is one
//! trainable linear map (dense or conv) followed by optional batch norm, ReLU,
//! optional max-pool and dropout. The block's output is its tap, read by a
//! local classifier under local-error learning. Backprop and feedback-alignment
//! networks add a dense output layer on top.

use serde::{Deserialize, Serialize};

use crate::cost::{CostCounter, LayerCostSpec};
use crate::error::{Error, Result};
use crate::layers::{
    relu_mask_in_place, BatchNormLayer, ConvAlgo, ConvLayer, DenseLayer, DropoutLayer, InputError, MaxPoolLayer,
};
use crate::optim::{Optimizer, ParamKey, ParamSlot};
use crate::randgen::{derive_seed, Boundary};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinearSpec {
    Dense {
        units: usize,
    },
    Conv {
        channels: usize,
        kernel: (usize, usize),
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    #[serde(flatten)]
    pub linear: LinearSpec,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default = "yes")]
    pub bn_shift: bool,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
    #[serde(default)]
    pub dropout: f64,
}

fn yes() -> bool {
    true
}

impl BlockSpec {
    pub fn dense(units: usize) -> Self {
        BlockSpec {
            linear: LinearSpec::Dense { units },
            batch_norm: false,
            bn_shift: true,
            pool: None,
            dropout: 0.0,
        }
    }

    pub fn conv(channels: usize, kernel: usize, pad: usize) -> Self {
        BlockSpec {
            linear: LinearSpec::Conv {
                channels,
                kernel: (kernel, kernel),
                stride: 1,
                pad,
            },
            ..BlockSpec::dense(1)
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn with_batch_norm(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn with_pool(mut self, window: usize, stride: usize) -> Self {
        self.pool = Some(PoolSpec {
            window: (window, window),
            stride,
        });
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-example input shape: `[features]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    #[serde(default)]
    pub input_dropout: f64,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// Dense stack `input -> widths... ` with the same dropout after every block.
    pub fn mlp(input: usize, widths: &[usize], classes: usize, dropout: f64) -> Self {
        NetworkSpec {
            input: vec![input],
            input_dropout: 0.0,
            blocks: widths
                .iter()
                .map(|&w| BlockSpec::dense(w).with_dropout(dropout))
                .collect(),
            classes,
        }
    }

    /// Per-example shapes: input, then each block's tap.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::config(
                "input.shape",
                format!("invalid input shape {:?}", self.input),
            ));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("layers", "network needs at least one layer"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        let mut shapes = vec![self.input.clone()];
        for (i, b) in self.blocks.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let path = |k: &str| format!("layers[{i}].{k}");
            if !(0.0..1.0).contains(&b.dropout) {
                return Err(Error::config(path("dropout"), "must lie in [0, 1)"));
            }
            let mut next = match b.linear {
                LinearSpec::Dense { units } => {
                    if units == 0 {
                        return Err(Error::config(path("units"), "must be positive"));
                    }
                    vec![units]
                }
                LinearSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if cur.len() != 3 {
                        return Err(Error::config(path("type"), "conv layer needs a [c, h, w] input"));
                    }
                    if channels == 0 || stride == 0 {
                        return Err(Error::config(path("channels"), "channels and stride must be positive"));
                    }
                    let oh = crate::layers::conv_output_size(cur[1], kernel.0, pad, stride)
                        .map_err(|e| Error::config(path("kernel"), e.to_string()))?;
                    let ow = crate::layers::conv_output_size(cur[2], kernel.1, pad, stride)
                        .map_err(|e| Error::config(path("kernel"), e.to_string()))?;
                    vec![channels, oh, ow]
                }
            };
            if let Some(p) = b.pool {
                if next.len() != 3 {
                    return Err(Error::config(path("pool"), "pooling needs a conv layer"));
                }
                let pool =
                    MaxPoolLayer::new(p.window, p.stride).map_err(|e| Error::config(path("pool"), e.to_string()))?;
                let (ph, pw) = pool
                    .output_shape(next[1], next[2])
                    .map_err(|e| Error::config(path("pool"), e.to_string()))?;
                next = vec![next[0], ph, pw];
            }
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Flattened tap width of every block.
    pub fn tap_widths(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?[1..].iter().map(|s| s.iter().product()).collect())
    }

    /// Analytic cost spec of the blocks for a given batch size.
    pub fn cost_specs(&self, batch: usize) -> Result<Vec<LayerCostSpec>> {
        let shapes = self.shapes()?;
        Ok(self
            .blocks
            .iter()
            .zip(&shapes)
            .map(|(b, inp)| {
                let (params, per_ex, fan_in) = match b.linear {
                    LinearSpec::Dense { units } => {
                        let m: usize = inp.iter().product();
                        (units * m + units, units, m)
                    }
                    LinearSpec::Conv {
                        channels,
                        kernel,
                        stride,
                        pad,
                    } => {
                        let r = inp[0] * kernel.0 * kernel.1;
                        let oh = (inp[1] + 2 * pad - kernel.0) / stride + 1;
                        let ow = (inp[2] + 2 * pad - kernel.1) / stride + 1;
                        (channels * r + channels, channels * oh * ow, r)
                    }
                };
                let channels = match b.linear {
                    LinearSpec::Dense { units } => units,
                    LinearSpec::Conv { channels, .. } => channels,
                };
                let bn = if b.batch_norm {
                    channels * if b.bn_shift { 2 } else { 1 }
                } else {
                    0
                };
                LayerCostSpec {
                    p: (params + bn) as u64,
                    a: (batch * per_ex) as u64,
                    r: fan_in as u64,
                }
            })
            .collect())
    }
}

/// Named seed streams for every source of randomness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub classifier: u64,
    pub dropout: u64,
    pub shuffle: u64,
    pub feedback: u64,
}

#[derive(Clone, Debug)]
pub enum Linear<T> {
    Dense(DenseLayer<T>),
    Conv(ConvLayer<T>),
}

/// Weight, bias and optional input error.
type LinearGrads<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

impl<T: Scalar> Linear<T> {
    pub fn weights(&self) -> &Tensor<T> {
        match self {
            Linear::Dense(l) => &l.w,
            Linear::Conv(l) => &l.kernels,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        match self {
            Linear::Dense(l) => &mut l.w,
            Linear::Conv(l) => &mut l.kernels,
        }
    }

    pub fn bias(&self) -> &Tensor<T> {
        match self {
            Linear::Dense(l) => &l.b,
            Linear::Conv(l) => &l.b,
        }
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        match self {
            Linear::Dense(l) => &mut l.b,
            Linear::Conv(l) => &mut l.b,
        }
    }

    /// Connections feeding one output unit.
    pub fn fan_in(&self) -> usize {
        match self {
            Linear::Dense(l) => l.inputs(),
            Linear::Conv(l) => {
                let (kh, kw) = l.kernel_size();
                l.in_channels() * kh * kw
            }
        }
    }

    fn linear_forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Linear::Dense(l) => l.linear_forward(x),
            Linear::Conv(l) => l.linear_forward(x),
        }
    }

    fn affine(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Linear::Dense(l) => l.affine(x),
            Linear::Conv(l) => l.affine(x),
        }
    }

    fn backward(&self, e: &Tensor<T>, ie: InputError<'_, T>) -> Result<LinearGrads<T>> {
        match self {
            Linear::Dense(l) => l.backward(e, ie).map(|g| (g.w, g.b, g.input)),
            Linear::Conv(l) => l.backward(e, ie).map(|g| (g.kernels, g.b, g.input)),
        }
    }

    fn boundary(&self) -> Boundary {
        match self {
            Linear::Dense(l) => Boundary::Dense {
                inputs: l.inputs(),
                outputs: l.outputs(),
            },
            Linear::Conv(l) => {
                let (kh, kw) = l.kernel_size();
                Boundary::Conv {
                    in_channels: l.in_channels(),
                    out_channels: l.out_channels(),
                    kh,
                    kw,
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
    /// Error at the block input.
    pub input: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub linear: Linear<T>,
    pub bn: Option<BatchNormLayer<T>>,
    pub pool: Option<MaxPoolLayer>,
    pub dropout: DropoutLayer<T>,
    /// Batch-norm output (ReLU input) from the last training forward.
    relu_in: Option<Tensor<T>>,
}

impl<T: Scalar> Block<T> {
    fn new(spec: &BlockSpec, in_shape: &[usize], init_seed: u64, dropout_seed: u64) -> Result<Self> {
        let (linear, channels) = match spec.linear {
            LinearSpec::Dense { units } => {
                let m = in_shape.iter().product();
                (Linear::Dense(DenseLayer::glorot(init_seed, m, units)?), units)
            }
            LinearSpec::Conv {
                channels,
                kernel,
                stride,
                pad,
            } => (
                Linear::Conv(ConvLayer::glorot(
                    init_seed,
                    in_shape[0],
                    channels,
                    kernel,
                    stride,
                    pad,
                )?),
                channels,
            ),
        };
        Ok(Block {
            linear,
            bn: if spec.batch_norm {
                Some(BatchNormLayer::new(channels, spec.bn_shift)?)
            } else {
                None
            },
            pool: spec.pool.map(|p| MaxPoolLayer::new(p.window, p.stride)).transpose()?,
            dropout: DropoutLayer::new(spec.dropout, dropout_seed)?,
            relu_in: None,
        })
    }

    /// Trainable parameter words, batch norm included.
    pub fn param_count(&self) -> usize {
        self.linear.weights().len() + self.linear.bias().len() + self.bn.as_ref().map_or(0, |b| b.param_count())
    }

    /// Training-mode forward; returns the tap.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = self.linear.linear_forward(x)?;
        if let Some(bn) = &mut self.bn {
            a = bn.forward(&a, true)?;
        }
        let r = crate::layers::relu(&a);
        self.relu_in = Some(a);
        let p = match &mut self.pool {
            Some(pool) => pool.forward(&r)?,
            None => r,
        };
        Ok(self.dropout.apply(&p, true))
    }

    /// Inference forward; touches no caches.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = self.linear.affine(x)?;
        if let Some(bn) = &self.bn {
            a = bn.infer(&a)?;
        }
        let r = crate::layers::relu(&a);
        Ok(match &self.pool {
            Some(pool) => pool.pool(&r)?.0,
            None => r,
        })
    }

    /// Error at the tap back to the linear pre-activation, then through the linear map.
    pub fn backward(&self, e_tap: &Tensor<T>, ie: InputError<'_, T>) -> Result<BlockGrads<T>> {
        let a = self
            .relu_in
            .as_ref()
            .ok_or_else(|| Error::state("block backward called before forward"))?;
        let mut e = self.dropout.backward(e_tap)?;
        if let Some(pool) = &self.pool {
            e = pool.backward(&e)?;
        }
        let mut e = e.reshape(a.shape())?;
        relu_mask_in_place(&mut e, a);
        let (gamma, beta) = match &self.bn {
            Some(bn) => {
                let g = bn.backward(&e)?;
                e = g.input;
                (Some(g.gamma), g.beta)
            }
            None => (None, None),
        };
        let (weight, bias, input) = self.linear.backward(&e, ie)?;
        Ok(BlockGrads {
            weight,
            bias,
            gamma,
            beta,
            input,
        })
    }

    pub fn apply(&mut self, layer: usize, g: &BlockGrads<T>, opt: &mut impl Optimizer<T>) -> Result<()> {
        opt.update(
            ParamKey::new(layer, ParamSlot::Weight),
            self.linear.weights_mut(),
            &g.weight,
        )?;
        opt.update(ParamKey::new(layer, ParamSlot::Bias), self.linear.bias_mut(), &g.bias)?;
        if let Some(bn) = &mut self.bn {
            if let Some(gg) = &g.gamma {
                opt.update(ParamKey::new(layer, ParamSlot::Gamma), &mut bn.gamma, gg)?;
            }
            if let Some(gb) = &g.beta {
                opt.update(ParamKey::new(layer, ParamSlot::Beta), &mut bn.beta, gb)?;
            }
        }
        Ok(())
    }

    /// Whether every parameter and running statistic is finite.
    pub fn all_finite(&self) -> bool {
        self.linear.weights().all_finite()
            && self.linear.bias().all_finite()
            && self.bn.as_ref().is_none_or(|b| {
                b.gamma.all_finite() && b.beta.all_finite() && b.running_mean.all_finite() && b.running_var.all_finite()
            })
    }

    pub fn set_conv_algo(&mut self, algo: ConvAlgo) {
        if let Linear::Conv(c) = &mut self.linear {
            c.algo = algo;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    pub spec: NetworkSpec,
    pub input_dropout: DropoutLayer<T>,
    pub blocks: Vec<Block<T>>,
    /// Dense output layer for backprop and feedback alignment.
    pub head: Option<DenseLayer<T>>,
    shapes: Vec<Vec<usize>>,
    counter: Option<CostCounter>,
}

impl<T: Scalar> Network<T> {
    /// Block `i` is initialised from `derive_seed(init, i)`, the head from
    /// `derive_seed(init, L)`; dropout site `k` (input first) from `derive_seed(dropout, k)`.
    pub fn build(spec: &NetworkSpec, seeds: &Seeds, with_head: bool) -> Result<Self> {
        let shapes = spec.shapes()?;
        if !(0.0..1.0).contains(&spec.input_dropout) {
            return Err(Error::config("input.dropout", "must lie in [0, 1)"));
        }
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Block::new(
                    b,
                    &shapes[i],
                    derive_seed(seeds.init, i as u64),
                    derive_seed(seeds.dropout, i as u64 + 1),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let l = spec.blocks.len();
        let head = if with_head {
            let width = shapes[l].iter().product();
            Some(DenseLayer::glorot(
                derive_seed(seeds.init, l as u64),
                width,
                spec.classes,
            )?)
        } else {
            None
        };
        Ok(Network {
            spec: spec.clone(),
            input_dropout: DropoutLayer::new(spec.input_dropout, derive_seed(seeds.dropout, 0))?,
            blocks,
            head,
            shapes,
            counter: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Per-example shape of the input (index 0) and every tap.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn tap_width(&self, block: usize) -> usize {
        self.shapes[block + 1].iter().product()
    }

    /// Trainable linear layers, head last when present.
    pub fn trainable_layers(&self) -> usize {
        self.blocks.len() + usize::from(self.head.is_some())
    }

    /// Forward-layer boundaries for feedback tensors, head included.
    pub fn boundaries(&self) -> Vec<Boundary> {
        let mut b: Vec<Boundary> = self.blocks.iter().map(|blk| blk.linear.boundary()).collect();
        if let Some(h) = &self.head {
            b.push(Boundary::Dense {
                inputs: h.inputs(),
                outputs: h.outputs(),
            });
        }
        b
    }

    /// Cost spec of every trainable layer (head included) for a batch size.
    pub fn cost_specs(&self, batch: usize) -> Result<Vec<LayerCostSpec>> {
        let mut specs = self.spec.cost_specs(batch)?;
        if let Some(h) = &self.head {
            specs.push(LayerCostSpec {
                p: h.param_count() as u64,
                a: (batch * h.outputs()) as u64,
                r: h.inputs() as u64,
            });
        }
        Ok(specs)
    }

    /// Reshapes a `[batch, features]` tensor to the network's input shape.
    pub fn shape_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let want: usize = self.shapes[0].iter().product();
        if x.rank() < 2 || x.row_len() != want {
            return Err(Error::dim(format!(
                "network expects {:?} per example, got {:?}",
                self.shapes[0],
                x.shape()
            )));
        }
        let mut shape = vec![x.rows()];
        shape.extend_from_slice(&self.shapes[0]);
        x.clone().reshape(&shape)
    }

    pub fn enable_counting(&mut self) {
        self.counter = Some(CostCounter::new(self.trainable_layers()));
    }

    pub fn counting(&self) -> bool {
        self.counter.is_some()
    }

    pub fn counter_mut(&mut self) -> Option<&mut CostCounter> {
        self.counter.as_mut()
    }

    pub fn take_counter(&mut self) -> Option<CostCounter> {
        self.counter.take()
    }

    /// Inference taps of blocks `0..=last`.
    pub fn infer_taps(&self, x: &Tensor<T>, last: usize) -> Result<Vec<Tensor<T>>> {
        if last >= self.blocks.len() {
            return Err(Error::arg(format!(
                "layer {} beyond depth {}",
                last + 1,
                self.blocks.len()
            )));
        }
        let mut h = self.shape_input(x)?;
        let mut taps = Vec::with_capacity(last + 1);
        for b in &self.blocks[..=last] {
            h = b.infer(&h)?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    /// Index of the first block whose parameters are non-finite, or the head's index.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.blocks.iter().position(|b| !b.all_finite()).or_else(|| {
            self.head
                .as_ref()
                .filter(|h| !(h.w.all_finite() && h.b.all_finite()))
                .map(|_| self.blocks.len())
        })
    }

    pub fn set_conv_algo(&mut self, algo: ConvAlgo) {
        for b in &mut self.blocks {
            b.set_conv_algo(algo);
        }
    }

    /// Dropout RNG states, input site first.
    pub fn dropout_states(&self) -> Vec<u64> {
        std::iter::once(self.input_dropout.rng_state())
            .chain(self.blocks.iter().map(|b| b.dropout.rng_state()))
            .collect()
    }

    pub fn set_dropout_states(&mut self, states: &[u64]) {
        self.input_dropout.set_rng_state(states[0]);
        for (b, &s) in self.blocks.iter_mut().zip(&states[1..]) {
            b.dropout.set_rng_state(s);
        }
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layer{i}.weight"), b.linear.weights()));
            out.push((format!("layer{i}.bias"), b.linear.bias()));
            if let Some(bn) = &b.bn {
                out.push((format!("layer{i}.gamma"), &bn.gamma));
                out.push((format!("layer{i}.beta"), &bn.beta));
                out.push((format!("layer{i}.running_mean"), &bn.running_mean));
                out.push((format!("layer{i}.running_var"), &bn.running_var));
            }
        }
        if let Some(h) = &self.head {
            out.push(("head.weight".into(), &h.w));
            out.push(("head.bias".into(), &h.b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (w, bias) = match &mut b.linear {
                Linear::Dense(l) => (&mut l.w, &mut l.b),
                Linear::Conv(l) => (&mut l.kernels, &mut l.b),
            };
            out.push((format!("layer{i}.weight"), w));
            out.push((format!("layer{i}.bias"), bias));
            if let Some(bn) = &mut b.bn {
                out.push((format!("layer{i}.gamma"), &mut bn.gamma));
                out.push((format!("layer{i}.beta"), &mut bn.beta));
                out.push((format!("layer{i}.running_mean"), &mut bn.running_mean));
                out.push((format!("layer{i}.running_var"), &mut bn.running_var));
            }
        }
        if let Some(h) = &mut self.head {
            out.push(("head.weight".into(), &mut h.w));
            out.push(("head.bias".into(), &mut h.b));
        }
        out
    }
}
