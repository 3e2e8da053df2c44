//! Credit-assignment rules driving a [`Network`]: local-error learning with
//! fixed per-layer classifiers, feedback alignment and backpropagation.

use serde::{Deserialize, Serialize};

use crate::cost::{CostCounter, CostReport};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::layers::InputError;
use crate::network::{Block, BlockGrads, Network, Seeds};
use crate::optim::{Loss, Optimizer, ParamKey, ParamSlot};
use crate::randgen::{derive_seed, make_classifier, make_fa_feedback, Boundary, ClassifierSeed, FeedbackMode};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    #[default]
    LocalError,
    Backprop,
    FeedbackAlignment,
}

impl RuleKind {
    /// Backprop and feedback alignment train a dense output layer on top.
    pub fn needs_head(self) -> bool {
        !matches!(self, RuleKind::LocalError)
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::LocalError => "local_error",
            RuleKind::Backprop => "backprop",
            RuleKind::FeedbackAlignment => "feedback_alignment",
        }
    }
}

/// Feedback mode as configured; `k` seeds are derived from the classifier seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    #[default]
    Symmetric,
    SignConcordant,
    Trainable,
    FullyRandomK,
}

/// Seed spec of layer `i`'s classifier: `M` from `derive_seed(base, 2i)`, an
/// independent `K` (when used) from `derive_seed(base, 2i + 1)`.
pub fn classifier_seed(base: u64, layer: usize, classes: usize, width: usize, mode: ClassifierMode) -> ClassifierSeed {
    let k_seed = derive_seed(base, 2 * layer as u64 + 1);
    ClassifierSeed {
        seed: derive_seed(base, 2 * layer as u64),
        rows: classes,
        cols: width,
        mode: match mode {
            ClassifierMode::Symmetric => FeedbackMode::Symmetric,
            ClassifierMode::SignConcordant => FeedbackMode::SignConcordant { k_seed },
            ClassifierMode::Trainable => FeedbackMode::Trainable,
            ClassifierMode::FullyRandomK => FeedbackMode::FullyRandomK { k_seed },
        },
    }
}

/// Fixed (or, in trainable mode, learned) linear readout of one layer's tap.
#[derive(Clone, Debug)]
pub struct LocalClassifier<T = f32> {
    pub seed: ClassifierSeed,
    /// `C x N`.
    pub m: Tensor<T>,
    /// `N x C`.
    pub k: Tensor<T>,
}

impl<T: Scalar> LocalClassifier<T> {
    pub fn new(seed: ClassifierSeed) -> Result<Self> {
        let (m, k) = make_classifier(&seed)?;
        Ok(LocalClassifier { seed, m, k })
    }

    pub fn classes(&self) -> usize {
        self.seed.rows
    }

    pub fn width(&self) -> usize {
        self.seed.cols
    }

    fn check(&self, y: &Tensor<T>) -> Result<()> {
        if y.rank() < 2 || y.row_len() != self.width() {
            return Err(Error::dim(format!(
                "classifier expects tap width {}, got {:?}",
                self.width(),
                y.shape()
            )));
        }
        Ok(())
    }

    /// `s = y M^T` with `y` flattened per example.
    pub fn forward(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(y)?;
        let (b, n, c) = (y.rows(), self.width(), self.classes());
        let mut s = vec![T::zero(); b * c];
        gemm(
            MatRef::new(y.data(), b, n),
            MatRef::transposed(self.m.data(), c, n),
            &mut s,
            false,
        );
        Tensor::new(vec![b, c], s)
    }

    /// `e_s K^T`, the error at the tap.
    pub fn feedback(&self, e_s: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, c) = (e_s.rows(), self.width(), self.classes());
        if e_s.shape() != [b, c] {
            return Err(Error::dim(format!(
                "classifier error {:?} for {c} classes",
                e_s.shape()
            )));
        }
        let mut e = vec![T::zero(); b * n];
        gemm(
            MatRef::new(e_s.data(), b, c),
            MatRef::transposed(self.k.data(), n, c),
            &mut e,
            false,
        );
        Tensor::new(vec![b, n], e)
    }

    /// `sum_batch outer(e_s, y)`.
    pub fn grad_m(&self, e_s: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(y)?;
        let (b, n, c) = (y.rows(), self.width(), self.classes());
        let mut g = vec![T::zero(); c * n];
        gemm(
            MatRef::transposed(e_s.data(), b, c),
            MatRef::new(y.data(), b, n),
            &mut g,
            false,
        );
        Tensor::new(vec![c, n], g)
    }
}

/// Fixed random backward tensors, one per trainable layer (head last).
#[derive(Clone, Debug)]
pub struct FaWeights<T = f32> {
    pub seed: u64,
    /// As generated: dense `N x M`, conv `[in, out, kh, kw]`.
    pub raw: Vec<Tensor<T>>,
    /// Laid out like each layer's forward weights.
    pub replace: Vec<Tensor<T>>,
}

impl<T: Scalar> FaWeights<T> {
    pub fn new(seed: u64, boundaries: &[Boundary]) -> Result<Self> {
        let raw = make_fa_feedback::<T>(seed, boundaries)?;
        let replace = raw
            .iter()
            .zip(boundaries)
            .map(|(t, b)| match *b {
                Boundary::Dense { .. } => Ok(t.clone()),
                Boundary::Conv {
                    in_channels,
                    out_channels,
                    kh,
                    kw,
                } => {
                    let k = kh * kw;
                    let src = t.data();
                    let mut out = vec![T::zero(); t.len()];
                    for i in 0..in_channels {
                        for o in 0..out_channels {
                            out[(o * in_channels + i) * k..][..k]
                                .copy_from_slice(&src[(i * out_channels + o) * k..][..k]);
                        }
                    }
                    Tensor::new(vec![out_channels, in_channels, kh, kw], out)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FaWeights { seed, raw, replace })
    }
}

#[derive(Clone, Debug)]
pub enum TrainRule<T = f32> {
    Backprop,
    FeedbackAlignment(FaWeights<T>),
    LocalError(Vec<LocalClassifier<T>>),
}

impl<T: Scalar> TrainRule<T> {
    /// Builds the rule's fixed state for `net`; regenerated identically from the same seeds.
    pub fn new(kind: RuleKind, mode: ClassifierMode, net: &Network<T>, seeds: &Seeds) -> Result<Self> {
        if kind.needs_head() != net.head.is_some() {
            return Err(Error::state(format!(
                "{} needs a network {} an output layer",
                kind.name(),
                if kind.needs_head() { "with" } else { "without" }
            )));
        }
        Ok(match kind {
            RuleKind::Backprop => TrainRule::Backprop,
            RuleKind::FeedbackAlignment => {
                TrainRule::FeedbackAlignment(FaWeights::new(seeds.feedback, &net.boundaries())?)
            }
            RuleKind::LocalError => TrainRule::LocalError(
                (0..net.depth())
                    .map(|i| {
                        LocalClassifier::new(classifier_seed(
                            seeds.classifier,
                            i,
                            net.classes(),
                            net.tap_width(i),
                            mode,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        })
    }

    pub fn kind(&self) -> RuleKind {
        match self {
            TrainRule::Backprop => RuleKind::Backprop,
            TrainRule::FeedbackAlignment(_) => RuleKind::FeedbackAlignment,
            TrainRule::LocalError(_) => RuleKind::LocalError,
        }
    }

    /// Number of reported classifier outputs.
    pub fn outputs(&self) -> usize {
        match self {
            TrainRule::LocalError(c) => c.len(),
            _ => 1,
        }
    }

    pub fn step(
        &mut self,
        net: &mut Network<T>,
        x: &Tensor<T>,
        labels: &[usize],
        loss: Loss,
        opt: &mut impl Optimizer<T>,
    ) -> Result<StepStats> {
        match self {
            TrainRule::Backprop => backprop_step(net, x, labels, loss, opt),
            TrainRule::FeedbackAlignment(fa) => feedback_alignment_step(net, fa, x, labels, loss, opt),
            TrainRule::LocalError(c) => local_error_step(net, c, x, labels, loss, opt),
        }
    }

    /// Class scores of every reported output up to block `exit` (inclusive).
    pub fn scores(&self, net: &Network<T>, x: &Tensor<T>, exit: usize) -> Result<Vec<Tensor<T>>> {
        let taps = net.infer_taps(x, exit)?;
        match self {
            TrainRule::LocalError(c) => taps.iter().zip(c).map(|(y, clf)| clf.forward(y)).collect(),
            _ => {
                if exit + 1 != net.depth() {
                    return Err(Error::arg("early exit needs per-layer classifiers"));
                }
                let head = net
                    .head
                    .as_ref()
                    .ok_or_else(|| Error::state("network has no output layer"))?;
                Ok(vec![head.affine(taps.last().unwrap())?])
            }
        }
    }

    /// MACs of an inference forward pass over `batch` examples up to block `exit`.
    pub fn inference_macs(&self, net: &Network<T>, exit: usize, batch: usize) -> Result<u64> {
        if exit >= net.depth() {
            return Err(Error::arg(format!("layer {} beyond depth {}", exit + 1, net.depth())));
        }
        let specs = net.cost_specs(batch)?;
        let body: u64 = specs[..=exit].iter().map(|s| s.r * s.a).sum();
        let top = match self {
            TrainRule::LocalError(_) => (batch * net.tap_width(exit) * net.classes()) as u64,
            _ => {
                if exit + 1 != net.depth() {
                    return Err(Error::arg("early exit needs per-layer classifiers"));
                }
                let h = specs.last().unwrap();
                h.r * h.a
            }
        };
        Ok(body + top)
    }

    /// Checksums of every fixed tensor the rule holds.
    pub fn fixed_checksums(&self) -> Vec<String> {
        match self {
            TrainRule::Backprop => vec![],
            TrainRule::FeedbackAlignment(fa) => fa.raw.iter().map(Tensor::checksum).collect(),
            TrainRule::LocalError(c) => c
                .iter()
                .flat_map(|l| {
                    if l.seed.mode.is_trainable() {
                        vec![]
                    } else {
                        vec![l.m.checksum(), l.k.checksum()]
                    }
                })
                .collect(),
        }
    }
}

/// Per-output summed loss and correct count for one mini-batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub losses: Vec<f64>,
    pub correct: Vec<usize>,
    pub batch: usize,
}

fn count_correct<T: Scalar>(s: &Tensor<T>, labels: &[usize]) -> usize {
    s.argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count()
}

fn numerical(layer: usize, what: &str) -> Error {
    Error::Numerical {
        layer: layer + 1,
        msg: format!("non-finite {what}"),
    }
}

/// One sweep of local-error learning: each block runs forward, scores its tap
/// with its own classifier and updates immediately. No error crosses layers.
pub fn local_error_step<T: Scalar>(
    net: &mut Network<T>,
    classifiers: &mut [LocalClassifier<T>],
    x: &Tensor<T>,
    labels: &[usize],
    loss: Loss,
    opt: &mut impl Optimizer<T>,
) -> Result<StepStats> {
    if classifiers.len() != net.depth() || net.head.is_some() {
        return Err(Error::state(
            "local-error needs one classifier per layer and no output layer",
        ));
    }
    let batch = x.rows();
    let mut stats = StepStats {
        batch,
        ..StepStats::default()
    };
    let input = net.shape_input(x)?;
    let mut h = net.input_dropout.apply(&input, true);
    let mut counter = net.take_counter();
    for (i, clf) in classifiers.iter_mut().enumerate() {
        let block = &mut net.blocks[i];
        let y = block.forward(&h)?;
        let s = clf.forward(&y)?;
        let (l, e_s) = loss.eval(&s, labels)?;
        if !l.is_finite() {
            return Err(numerical(i, "local loss"));
        }
        let e_tap = clf.feedback(&e_s)?;
        let g = block.backward(&e_tap, InputError::Skip)?;
        let grad_m = if clf.seed.mode.is_trainable() {
            Some(clf.grad_m(&e_s, &y)?)
        } else {
            None
        };
        block.apply(i, &g, opt)?;
        if let Some(gm) = &grad_m {
            opt.update(ParamKey::new(i, ParamSlot::Classifier), &mut clf.m, gm)?;
            clf.k = clf.m.transpose()?;
        }
        if let Some(c) = counter.as_mut() {
            let p = block.param_count();
            let ra = batch * block_connections(block, &h);
            let cn = batch * clf.width() * clf.classes();
            c.read(i, p);
            c.mac(i, ra);
            c.mac(i, 2 * cn);
            c.mac(i, ra);
            c.write(i, p);
            if grad_m.is_some() {
                c.read(i, clf.m.len());
                c.write(i, clf.m.len());
                c.mac(i, cn);
            }
        }
        stats.losses.push(l);
        stats.correct.push(count_correct(&s, labels));
        h = y;
    }
    if let Some(c) = counter {
        restore_counter(net, c);
    }
    Ok(stats)
}

/// Connections feeding one example's worth of a block's linear outputs.
fn block_connections<T: Scalar>(block: &Block<T>, input: &Tensor<T>) -> usize {
    let per_out = block.linear.fan_in();
    let out_units = match &block.linear {
        crate::network::Linear::Dense(d) => d.outputs(),
        crate::network::Linear::Conv(c) => {
            let s = input.shape();
            let (oc, oh, ow) = c.output_shape(s[2], s[3]).unwrap_or((0, 0, 0));
            oc * oh * ow
        }
    };
    per_out * out_units
}

fn restore_counter<T: Scalar>(net: &mut Network<T>, c: CostCounter) {
    net.enable_counting();
    *net.counter_mut().unwrap() = c;
}

/// Exact backpropagation through the whole stack.
pub fn backprop_step<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    loss: Loss,
    opt: &mut impl Optimizer<T>,
) -> Result<StepStats> {
    global_step(net, None, x, labels, loss, opt)
}

/// Backpropagation with every transposed weight replaced by a fixed random tensor.
pub fn feedback_alignment_step<T: Scalar>(
    net: &mut Network<T>,
    fa: &FaWeights<T>,
    x: &Tensor<T>,
    labels: &[usize],
    loss: Loss,
    opt: &mut impl Optimizer<T>,
) -> Result<StepStats> {
    if fa.replace.len() != net.trainable_layers() {
        return Err(Error::dim(format!(
            "{} feedback tensors for {} layers",
            fa.replace.len(),
            net.trainable_layers()
        )));
    }
    global_step(net, Some(fa), x, labels, loss, opt)
}

fn global_step<T: Scalar>(
    net: &mut Network<T>,
    fa: Option<&FaWeights<T>>,
    x: &Tensor<T>,
    labels: &[usize],
    loss: Loss,
    opt: &mut impl Optimizer<T>,
) -> Result<StepStats> {
    let depth = net.depth();
    let batch = x.rows();
    let mut counter = net.take_counter();
    let input = net.shape_input(x)?;
    let mut h = net.input_dropout.apply(&input, true);
    let mut conns = Vec::with_capacity(depth + 1);
    for block in net.blocks.iter_mut() {
        conns.push(block_connections(block, &h));
        h = block.forward(&h)?;
    }
    let head = net
        .head
        .as_mut()
        .ok_or_else(|| Error::state("network has no output layer"))?;
    conns.push(head.inputs() * head.outputs());
    let s = head.linear_forward(&h)?;
    let (l, e_s) = loss.eval(&s, labels)?;
    if !l.is_finite() {
        return Err(numerical(net.first_non_finite().unwrap_or(depth), "loss"));
    }
    let ie = |layer: usize| match fa {
        Some(f) => InputError::Replace(&f.replace[layer]),
        None => InputError::Exact,
    };
    let hg = net.head.as_ref().unwrap().backward(&e_s, ie(depth))?;
    let mut e = hg.input.clone().expect("head input error");
    let mut grads: Vec<BlockGrads<T>> = Vec::with_capacity(depth);
    let counting = counter.is_some();
    for i in (0..depth).rev() {
        let mode = if i == 0 && !counting { InputError::Skip } else { ie(i) };
        let g = net.blocks[i].backward(&e, mode)?;
        if let Some(next) = &g.input {
            e = next.clone();
        }
        grads.push(g);
    }
    grads.reverse();
    if let Some(c) = counter.as_mut() {
        let params: Vec<usize> = net
            .blocks
            .iter()
            .map(|b| b.param_count())
            .chain(std::iter::once(net.head.as_ref().unwrap().param_count()))
            .collect();
        let outs: Vec<usize> = net
            .blocks
            .iter()
            .zip(&conns)
            .map(|(b, &k)| k / b.linear.fan_in())
            .chain(std::iter::once(net.classes()))
            .collect();
        for j in 0..=depth {
            let (p, a, ra) = (params[j], batch * outs[j], batch * conns[j]);
            c.read(j, p);
            c.write(j, a);
            c.mac(j, ra);
            c.read(j, a);
            c.read(j, p);
            c.mac(j, ra);
            c.mac(j, ra);
            c.write(j, p);
            if j > 0 {
                c.transfer();
            }
        }
    }
    for (i, g) in grads.iter().enumerate() {
        net.blocks[i].apply(i, g, opt)?;
    }
    let head = net.head.as_mut().unwrap();
    opt.update(ParamKey::new(depth, ParamSlot::Weight), &mut head.w, &hg.w)?;
    opt.update(ParamKey::new(depth, ParamSlot::Bias), &mut head.b, &hg.b)?;
    if let Some(c) = counter {
        restore_counter(net, c);
    }
    Ok(StepStats {
        losses: vec![l],
        correct: vec![count_correct(&s, labels)],
        batch,
    })
}

/// Runs one real training step with counting enabled and returns the counts
/// scaled to `epochs x batches`.
#[allow(clippy::too_many_arguments)]
pub fn instrument_run<T: Scalar>(
    net: &mut Network<T>,
    rule: &mut TrainRule<T>,
    x: &Tensor<T>,
    labels: &[usize],
    loss: Loss,
    opt: &mut impl Optimizer<T>,
    epochs: u64,
    batches: u64,
) -> Result<CostReport> {
    if !net.counting() {
        return Err(Error::state("instrumentation needs counting enabled on the network"));
    }
    *net.counter_mut().unwrap() = CostCounter::new(net.trainable_layers());
    rule.step(net, x, labels, loss, opt)?;
    let report = net.counter_mut().unwrap().report();
    Ok(report.scaled(epochs * batches))
}

/// Training summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean per-example loss of every reported output.
    pub losses: Vec<f64>,
    /// Training error percentage of every reported output.
    pub errors: Vec<f64>,
    pub examples: usize,
    pub steps: usize,
}

impl EpochStats {
    /// Loss of the top output.
    pub fn loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::NAN)
    }
}

/// One pass over `data` in the order given by `epoch_seed`. A trailing batch of
/// one example is skipped when the network uses batch norm.
pub fn train_epoch<T: Scalar>(
    net: &mut Network<T>,
    rule: &mut TrainRule<T>,
    data: &Dataset,
    batch_size: usize,
    epoch_seed: u64,
    loss: Loss,
    opt: &mut impl Optimizer<T>,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    let has_bn = net.blocks.iter().any(|b| b.bn.is_some());
    let outputs = rule.outputs();
    let mut losses = vec![0.0; outputs];
    let mut correct = vec![0usize; outputs];
    let (mut seen, mut steps) = (0, 0);
    for idx in batches(data.len(), batch_size, epoch_seed)? {
        if has_bn && idx.len() < 2 {
            continue;
        }
        let (x, t) = data.gather::<T>(&idx)?;
        let st = rule.step(net, &x, &t, loss, opt)?;
        for k in 0..outputs {
            losses[k] += st.losses[k];
            correct[k] += st.correct[k];
        }
        seen += idx.len();
        steps += 1;
    }
    if seen == 0 {
        return Err(Error::arg("no usable mini-batch in the training set"));
    }
    if let Some(layer) = net.first_non_finite() {
        return Err(numerical(layer, "parameters"));
    }
    Ok(EpochStats {
        losses: losses.iter().map(|l| l / seen as f64).collect(),
        errors: correct
            .iter()
            .map(|&c| 100.0 * (seen - c) as f64 / seen as f64)
            .collect(),
        examples: seen,
        steps,
    })
}

/// Test error percentage of every reported output up to block `exit`.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    rule: &TrainRule<T>,
    data: &Dataset,
    exit: Option<usize>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::arg("empty evaluation set"));
    }
    let exit = exit.unwrap_or(net.depth() - 1);
    let mut wrong: Vec<usize> = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, t) = data.gather::<T>(chunk)?;
        let scores = rule.scores(net, &x, exit)?;
        wrong.resize(scores.len(), 0);
        for (w, s) in wrong.iter_mut().zip(&scores) {
            *w += chunk.len() - count_correct(s, &t);
        }
    }
    Ok(wrong.iter().map(|&w| 100.0 * w as f64 / data.len() as f64).collect())
}
