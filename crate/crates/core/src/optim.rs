//! Optimizers and classification losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which tensor of which layer a gradient belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: usize,
    pub slot: ParamSlot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// Trainable local classifier `M`.
    Classifier,
}

impl ParamKey {
    pub fn new(layer: usize, slot: ParamSlot) -> Self {
        ParamKey { layer, slot }
    }
}

pub trait Optimizer<T: Scalar> {
    /// Applies one descent step for `grad` to `param`.
    fn update(&mut self, key: ParamKey, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()>;
}

fn check_shapes<T: Scalar>(param: &Tensor<T>, grad: &Tensor<T>) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim(format!(
            "gradient {:?} for parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid adam hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamSlot<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Adam with bias-corrected moments, one state slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    slots: BTreeMap<ParamKey, AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            slots: BTreeMap::new(),
        })
    }

    pub fn slot(&self, key: ParamKey) -> Option<&AdamSlot<T>> {
        self.slots.get(&key)
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn update(&mut self, key: ParamKey, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        check_shapes(param, grad)?;
        let c = self.config;
        let slot = self.slots.entry(key).or_insert_with(|| AdamSlot {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            step: 0,
        });
        if slot.m.shape() != param.shape() {
            return Err(Error::dim(format!("parameter {key:?} changed shape")));
        }
        slot.step += 1;
        let t = slot.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (nb1, nb2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + nb1 * g;
            *v = b2 * *v + nb2 * g * g;
            let mh = *m / corr1;
            let vh = *v / corr2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// Plain gradient descent `theta -= lr * g`.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn update(&mut self, _key: ParamKey, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        check_shapes(param, grad)?;
        param.add_scaled(grad, T::of(-self.lr))
    }
}

/// Records gradients without touching parameters.
#[derive(Clone, Debug, Default)]
pub struct GradRecorder<T> {
    pub grads: BTreeMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> GradRecorder<T> {
    pub fn new() -> Self {
        GradRecorder { grads: BTreeMap::new() }
    }
}

impl<T: Scalar> Optimizer<T> for GradRecorder<T> {
    fn update(&mut self, key: ParamKey, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        check_shapes(param, grad)?;
        self.grads.insert(key, grad.clone());
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    SoftmaxXent,
    SquaredHinge,
}

impl Loss {
    /// Summed batch loss and `dE/ds`.
    pub fn eval<T: Scalar>(self, s: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
        match self {
            Loss::SoftmaxXent => softmax_xent(s, labels),
            Loss::SquaredHinge => squared_hinge(s, labels),
        }
    }
}

fn check_labels<T: Scalar>(s: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    if s.rank() != 2 || s.rows() != labels.len() {
        return Err(Error::dim(format!(
            "scores {:?} for {} labels",
            s.shape(),
            labels.len()
        )));
    }
    let c = s.row_len();
    if let Some(&bad) = labels.iter().find(|&&t| t >= c) {
        return Err(Error::arg(format!("label {bad} outside [0, {c})")));
    }
    Ok(c)
}

/// Row-wise softmax, max-subtracted.
pub fn softmax<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    let c = s.row_len();
    let mut p = s.clone();
    for row in p.data_mut().chunks_exact_mut(c) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    p
}

/// `sum_b -log softmax(s_b)[t_b]` and `e_s = softmax(s) - onehot(t)`.
pub fn softmax_xent<T: Scalar>(s: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let c = check_labels(s, labels)?;
    let mut loss = 0.0;
    for (row, &t) in s.data().chunks_exact(c).zip(labels) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.f64()));
        let lse = mx + row.iter().map(|&v| (v.f64() - mx).exp()).sum::<f64>().ln();
        loss += lse - row[t].f64();
    }
    let mut e = softmax(s);
    for (row, &t) in e.data_mut().chunks_exact_mut(c).zip(labels) {
        row[t] -= T::one();
    }
    Ok((loss, e))
}

/// One-vs-all `sum_j max(0, 1 - tau_j s_j)^2` with `tau_t = 1`, else `-1`.
pub fn squared_hinge<T: Scalar>(s: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let c = check_labels(s, labels)?;
    let mut loss = 0.0;
    let mut e = Tensor::zeros(s.shape());
    for ((row, erow), &t) in s
        .data()
        .chunks_exact(c)
        .zip(e.data_mut().chunks_exact_mut(c))
        .zip(labels)
    {
        for (j, (&v, ev)) in row.iter().zip(erow.iter_mut()).enumerate() {
            let tau = if j == t { T::one() } else { -T::one() };
            let margin = T::one() - tau * v;
            if margin > T::zero() {
                loss += margin.f64() * margin.f64();
                *ev = -T::of(2.0) * tau * margin;
            }
        }
    }
    Ok((loss, e))
}
