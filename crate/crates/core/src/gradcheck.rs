//! Central finite-difference checks of the update directions computed by the
//! training rules, run in `f64` on small networks.

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, ConvLayer, DenseLayer, InputError, MaxPoolLayer};
use crate::network::{Network, NetworkSpec, Seeds};
use crate::optim::{GradRecorder, Loss, ParamKey, ParamSlot};
use crate::randgen::{derive_seed, SplitMix64};
use crate::rules::{backprop_step, local_error_step, ClassifierMode, LocalClassifier, RuleKind, TrainRule};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a loss of magnitude `loss`, above the rounding noise
/// of a central difference.
pub fn noise_floor(loss: f64) -> f64 {
    1e-6 * loss.abs().max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    /// `<check>/<parameter>`, e.g. `local_symmetric/layer1.weight`.
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Negative controls must exceed the tolerance.
    pub expect_fail: bool,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        (self.max_rel_err <= TOLERANCE) != self.expect_fail
    }
}

/// Finite-difference settings shared by all checks.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub spec: NetworkSpec,
    pub seeds: Seeds,
    pub loss: Loss,
    pub batch: usize,
    /// Entries checked per tensor; larger tensors are sampled with a fixed stride.
    pub max_entries: usize,
}

fn param_mut<'a>(
    net: &'a mut Network<f64>,
    clfs: &'a mut [LocalClassifier<f64>],
    key: ParamKey,
) -> Option<&'a mut Tensor<f64>> {
    if key.layer == net.depth() {
        let h = net.head.as_mut()?;
        return match key.slot {
            ParamSlot::Weight => Some(&mut h.w),
            ParamSlot::Bias => Some(&mut h.b),
            _ => None,
        };
    }
    let b = net.blocks.get_mut(key.layer)?;
    match key.slot {
        ParamSlot::Weight => Some(b.linear.weights_mut()),
        ParamSlot::Bias => Some(b.linear.bias_mut()),
        ParamSlot::Gamma => b.bn.as_mut().map(|bn| &mut bn.gamma),
        ParamSlot::Beta => b.bn.as_mut().map(|bn| &mut bn.beta),
        ParamSlot::Classifier => clfs.get_mut(key.layer).map(|c| &mut c.m),
    }
}

fn key_name(key: ParamKey, depth: usize) -> String {
    let slot = match key.slot {
        ParamSlot::Weight => "weight",
        ParamSlot::Bias => "bias",
        ParamSlot::Gamma => "gamma",
        ParamSlot::Beta => "beta",
        ParamSlot::Classifier => "classifier",
    };
    if key.layer == depth {
        format!("head.{slot}")
    } else {
        format!("layer{}.{slot}", key.layer + 1)
    }
}

fn sample(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let stride = len.div_ceil(max);
        (0..len).step_by(stride).collect()
    }
}

impl GradCheck {
    fn batch_data(&self) -> (Tensor<f64>, Vec<usize>) {
        let mut r = SplitMix64::new(derive_seed(self.seeds.shuffle, u64::MAX));
        let f: usize = self.spec.input.iter().product();
        let x = Tensor::from_fn(&[self.batch, f], |_| r.next_unit());
        let t = (0..self.batch)
            .map(|_| r.below(self.spec.classes as u64) as usize)
            .collect();
        (x, t)
    }

    /// Local-error rule in `mode`: each layer's update against the gradient of its own loss.
    pub fn local(&self, mode: ClassifierMode, label: &str, expect_fail: bool) -> Result<Vec<CheckRow>> {
        self.local_with(mode, label, expect_fail, false)
    }

    /// As [`GradCheck::local`]; `corrupt_k` adds noise to every `K` so it no longer equals `M^T`.
    pub fn local_with(
        &self,
        mode: ClassifierMode,
        label: &str,
        expect_fail: bool,
        corrupt_k: bool,
    ) -> Result<Vec<CheckRow>> {
        let net = Network::<f64>::build(&self.spec, &self.seeds, false)?;
        let TrainRule::LocalError(mut clfs) = TrainRule::new(RuleKind::LocalError, mode, &net, &self.seeds)? else {
            unreachable!()
        };
        if corrupt_k {
            let mut r = SplitMix64::new(derive_seed(self.seeds.classifier, u64::MAX));
            for c in &mut clfs {
                let scale = c.k.max_abs();
                for v in c.k.data_mut() {
                    *v += scale * (r.next_unit() * 2.0 - 1.0);
                }
            }
        }
        let (x, t) = self.batch_data();
        let states = net.dropout_states();
        let mut rec = GradRecorder::new();
        local_error_step(&mut net.clone(), &mut clfs.clone(), &x, &t, self.loss, &mut rec)?;
        let local_loss = |net: &Network<f64>, clfs: &[LocalClassifier<f64>], layer: usize| -> Result<f64> {
            let mut net = net.clone();
            net.set_dropout_states(&states);
            let input = net.shape_input(&x)?;
            let mut h = net.input_dropout.apply(&input, true);
            for b in &mut net.blocks[..=layer] {
                h = b.forward(&h)?;
            }
            Ok(self.loss.eval(&clfs[layer].forward(&h)?, &t)?.0)
        };
        let depth = net.depth();
        self.compare(&rec, label, expect_fail, depth, net, clfs, |n, c, key| {
            local_loss(n, c, key.layer)
        })
    }

    /// Backpropagation: every update against the gradient of the output loss.
    pub fn backprop(&self) -> Result<Vec<CheckRow>> {
        let net = Network::<f64>::build(&self.spec, &self.seeds, true)?;
        let (x, t) = self.batch_data();
        let states = net.dropout_states();
        let mut rec = GradRecorder::new();
        backprop_step(&mut net.clone(), &x, &t, self.loss, &mut rec)?;
        let total = |net: &Network<f64>| -> Result<f64> {
            let mut net = net.clone();
            net.set_dropout_states(&states);
            let input = net.shape_input(&x)?;
            let mut h = net.input_dropout.apply(&input, true);
            for b in &mut net.blocks {
                h = b.forward(&h)?;
            }
            let s = net.head.as_ref().unwrap().affine(&h)?;
            Ok(self.loss.eval(&s, &t)?.0)
        };
        let depth = net.depth();
        self.compare(&rec, "backprop", false, depth, net, vec![], |n, _, _| total(n))
    }

    #[allow(clippy::too_many_arguments)]
    fn compare(
        &self,
        rec: &GradRecorder<f64>,
        label: &str,
        expect_fail: bool,
        depth: usize,
        mut net: Network<f64>,
        mut clfs: Vec<LocalClassifier<f64>>,
        loss: impl Fn(&Network<f64>, &[LocalClassifier<f64>], ParamKey) -> Result<f64>,
    ) -> Result<Vec<CheckRow>> {
        let mut rows = Vec::new();
        for (&key, g) in &rec.grads {
            let mut worst: f64 = 0.0;
            let floor = noise_floor(loss(&net, &clfs, key)?);
            let idx = sample(g.len(), self.max_entries);
            for &i in &idx {
                let orig = param_mut(&mut net, &mut clfs, key)
                    .ok_or_else(|| Error::state("missing parameter"))?
                    .data()[i];
                let mut at = |v: f64| -> Result<f64> {
                    param_mut(&mut net, &mut clfs, key).unwrap().data_mut()[i] = v;
                    if key.slot == ParamSlot::Classifier {
                        let c = &mut clfs[key.layer];
                        c.k = c.m.transpose()?;
                    }
                    loss(&net, &clfs, key)
                };
                let num = (at(orig + STEP)? - at(orig - STEP)?) / (2.0 * STEP);
                at(orig)?;
                worst = worst.max(relative_error(g.data()[i], num, floor));
            }
            rows.push(CheckRow {
                name: format!("{label}/{}", key_name(key, depth)),
                checked: idx.len(),
                max_rel_err: worst,
                expect_fail,
            });
        }
        Ok(rows)
    }

    /// Layer and loss checks on a fixed objective `sum(c * out^2)`.
    pub fn components(&self) -> Result<Vec<CheckRow>> {
        let mut r = SplitMix64::new(derive_seed(self.seeds.init, u64::MAX));
        let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| r.next_unit() * 2.0 - 1.0);
        let weighted = |c: &Tensor<f64>| {
            let c = c.clone();
            move |y: &Tensor<f64>| -> f64 { y.data().iter().zip(c.data()).map(|(a, b)| b * a * a).sum() }
        };
        let seed = self.seeds.init;
        let mut rows = Vec::new();

        let dense = DenseLayer::<f64>::glorot(seed, 7, 5)?;
        let x = rand(&[4, 7]);
        let c = rand(&[4, 5]);
        let obj = weighted(&c);
        let mut l = dense.clone();
        let z = l.linear_forward(&x)?;
        let g = l.backward(&e_of(&z, &c), InputError::Exact)?;
        rows.push(self.fd_tensor("dense/weight", &g.w, &dense.w, |w| {
            Ok(obj(&DenseLayer::new(w.clone(), dense.b.clone())?.affine(&x)?))
        })?);
        rows.push(self.fd_tensor("dense/bias", &g.b, &dense.b, |b| {
            Ok(obj(&DenseLayer::new(dense.w.clone(), b.clone())?.affine(&x)?))
        })?);
        rows.push(self.fd_tensor("dense/input", g.input.as_ref().unwrap(), &x, |x| {
            Ok(obj(&dense.affine(x)?))
        })?);

        let conv = ConvLayer::<f64>::glorot(seed ^ 1, 2, 3, (3, 3), 1, 1)?;
        let x = rand(&[2, 2, 5, 5]);
        let c = rand(&[2, 3, 5, 5]);
        let obj = weighted(&c);
        let mut l = conv.clone();
        let z = l.linear_forward(&x)?;
        let g = l.backward(&e_of(&z, &c), InputError::Exact)?;
        let with = |k: &Tensor<f64>, b: &Tensor<f64>| ConvLayer::new(k.clone(), b.clone(), conv.stride, conv.pad);
        rows.push(self.fd_tensor("conv/kernels", &g.kernels, &conv.kernels, |k| {
            Ok(obj(&with(k, &conv.b)?.affine(&x)?))
        })?);
        rows.push(self.fd_tensor("conv/bias", &g.b, &conv.b, |b| {
            Ok(obj(&with(&conv.kernels, b)?.affine(&x)?))
        })?);
        rows.push(self.fd_tensor("conv/input", g.input.as_ref().unwrap(), &x, |x| {
            Ok(obj(&conv.affine(x)?))
        })?);

        let pool = MaxPoolLayer::new((3, 3), 2)?;
        let x = rand(&[2, 2, 7, 7]);
        let c = rand(&[2, 2, 3, 3]);
        let obj = weighted(&c);
        let mut l = pool.clone();
        let y = l.forward(&x)?;
        let e = l.backward(&e_of(&y, &c))?;
        rows.push(self.fd_tensor("maxpool/input", &e, &x, |x| Ok(obj(&pool.pool(x)?.0)))?);

        let mut bn = BatchNormLayer::<f64>::new(3, true)?;
        bn.gamma = rand(&[3]);
        bn.beta = rand(&[3]);
        let x = rand(&[4, 3, 2, 2]);
        let c = rand(&[4, 3, 2, 2]);
        let obj = weighted(&c);
        let mut l = bn.clone();
        let y = l.forward(&x, true)?;
        let g = l.backward(&e_of(&y, &c))?;
        let run = |l: &BatchNormLayer<f64>, x: &Tensor<f64>| -> Result<f64> { Ok(obj(&l.clone().forward(x, true)?)) };
        rows.push(self.fd_tensor("batchnorm/input", &g.input, &x, |x| run(&bn, x))?);
        rows.push(self.fd_tensor("batchnorm/gamma", &g.gamma, &bn.gamma, |v| {
            let mut l = bn.clone();
            l.gamma = v.clone();
            run(&l, &x)
        })?);
        rows.push(
            self.fd_tensor("batchnorm/beta", g.beta.as_ref().unwrap(), &bn.beta, |v| {
                let mut l = bn.clone();
                l.beta = v.clone();
                run(&l, &x)
            })?,
        );

        let s = rand(&[5, 4]).scale(3.0);
        let labels = [0, 3, 1, 1, 2];
        for (name, loss) in [
            ("softmax_xent/scores", Loss::SoftmaxXent),
            ("squared_hinge/scores", Loss::SquaredHinge),
        ] {
            let (_, e) = loss.eval(&s, &labels)?;
            rows.push(self.fd_tensor(name, &e, &s, |s| Ok(loss.eval(s, &labels)?.0))?);
        }
        Ok(rows)
    }

    fn fd_tensor(
        &self,
        name: &str,
        analytic: &Tensor<f64>,
        at: &Tensor<f64>,
        f: impl Fn(&Tensor<f64>) -> Result<f64>,
    ) -> Result<CheckRow> {
        let floor = noise_floor(f(at)?);
        let idx = sample(at.len(), self.max_entries);
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let (mut p, mut m) = (at.clone(), at.clone());
            p.data_mut()[i] += STEP;
            m.data_mut()[i] -= STEP;
            let num = (f(&p)? - f(&m)?) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], num, floor));
        }
        Ok(CheckRow {
            name: name.into(),
            checked: idx.len(),
            max_rel_err: worst,
            expect_fail: false,
        })
    }

    /// The standard suite: layers and losses, symmetric and trainable local
    /// updates, backprop, and a symmetric run with corrupted `K` that must fail.
    pub fn run_all(&self) -> Result<Vec<CheckRow>> {
        let mut rows = self.components()?;
        rows.extend(self.local(ClassifierMode::Symmetric, "local_symmetric", false)?);
        rows.extend(self.local(ClassifierMode::Trainable, "local_trainable", false)?);
        rows.extend(self.backprop()?);
        let control = self.local_with(ClassifierMode::Symmetric, "control_corrupted_k", true, true)?;
        let worst = control
            .iter()
            .filter(|r| r.name.ends_with(".weight"))
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max);
        rows.push(CheckRow {
            name: "control_corrupted_k/all_weights".into(),
            checked: control
                .iter()
                .filter(|r| r.name.ends_with(".weight"))
                .map(|r| r.checked)
                .sum(),
            max_rel_err: worst,
            expect_fail: true,
        });
        Ok(rows)
    }
}

fn e_of(y: &Tensor<f64>, c: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(y.shape(), |i| 2.0 * c.data()[i] * y.data()[i])
}

/// `check,entries,max_rel_err,status`
pub fn format_rows(rows: &[CheckRow]) -> String {
    let mut s = String::from("check,entries,max_rel_err,status\n");
    for r in rows {
        let status = match (r.passed(), r.expect_fail) {
            (true, false) => "pass",
            (true, true) => "pass (control failed as expected)",
            (false, false) => "FAIL",
            (false, true) => "FAIL (control matched)",
        };
        s.push_str(&format!("{},{},{:.3e},{status}\n", r.name, r.checked, r.max_rel_err));
    }
    s
}
