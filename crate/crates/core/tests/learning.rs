//! Behaviour of the training rules on small networks.

use local_error::cost::{cost_backprop, cost_local, mac_advantage, LayerCost, LayerCostSpec, RunCostSpec};
use local_error::data::Dataset;
use local_error::network::{BlockSpec, Network, NetworkSpec, Seeds};
use local_error::optim::{Adam, AdamConfig, GradRecorder, Loss, ParamKey, ParamSlot};
use local_error::randgen::SplitMix64;
use local_error::rules::{train_epoch, ClassifierMode, RuleKind, TrainRule};
use local_error::Tensor;
use proptest::prelude::*;

const SEEDS: Seeds = Seeds {
    init: 101,
    classifier: 102,
    dropout: 103,
    shuffle: 104,
    feedback: 105,
};

fn batch(n: usize, f: usize, classes: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut r = SplitMix64::new(seed);
    let x = Tensor::from_fn(&[n, f], |_| r.next_unit() as f32);
    let t = (0..n).map(|_| r.below(classes as u64) as usize).collect();
    (x, t)
}

fn local(spec: &NetworkSpec, mode: ClassifierMode) -> (Network<f32>, TrainRule<f32>) {
    let net = Network::build(spec, &SEEDS, false).unwrap();
    let rule = TrainRule::new(RuleKind::LocalError, mode, &net, &SEEDS).unwrap();
    (net, rule)
}

#[test]
fn lower_layer_updates_ignore_higher_layers() {
    let spec = NetworkSpec::mlp(12, &[10, 8, 6], 4, 0.2);
    let (net, rule) = local(&spec, ClassifierMode::Symmetric);
    let (x, t) = batch(6, 12, 4, 1);
    let run = |mut net: Network<f32>, mut rule: TrainRule<f32>| {
        let mut rec = GradRecorder::new();
        rule.step(&mut net, &x, &t, Loss::SoftmaxXent, &mut rec).unwrap();
        rec.grads
    };
    let base = run(net.clone(), rule.clone());
    let mut changed = net.clone();
    for v in changed.blocks[2].linear.weights_mut().data_mut() {
        *v *= -3.0;
    }
    let mut rule2 = rule.clone();
    if let TrainRule::LocalError(c) = &mut rule2 {
        c[1].m = c[1].m.scale(2.0);
        c[1].k = c[1].m.transpose().unwrap();
    }
    let other = run(changed, rule2);
    for slot in [ParamSlot::Weight, ParamSlot::Bias] {
        let k = ParamKey::new(0, slot);
        assert_eq!(base[&k], other[&k]);
    }
    assert_ne!(
        base[&ParamKey::new(1, ParamSlot::Weight)],
        other[&ParamKey::new(1, ParamSlot::Weight)]
    );
}

#[test]
fn fixed_classifiers_never_change() {
    let spec = NetworkSpec::mlp(10, &[8, 8], 3, 0.1);
    for mode in [
        ClassifierMode::Symmetric,
        ClassifierMode::SignConcordant,
        ClassifierMode::FullyRandomK,
    ] {
        let (mut net, mut rule) = local(&spec, mode);
        let before = rule.fixed_checksums();
        assert_eq!(before.len(), 4);
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        for s in 0..5 {
            let (x, t) = batch(4, 10, 3, s);
            rule.step(&mut net, &x, &t, Loss::SoftmaxXent, &mut opt).unwrap();
        }
        assert_eq!(rule.fixed_checksums(), before, "{mode:?}");
    }
}

#[test]
fn trainable_classifier_moves_and_stays_symmetric() {
    let spec = NetworkSpec::mlp(10, &[8], 3, 0.0);
    let (mut net, mut rule) = local(&spec, ClassifierMode::Trainable);
    let m0 = match &rule {
        TrainRule::LocalError(c) => c[0].m.clone(),
        _ => unreachable!(),
    };
    let mut opt = Adam::new(AdamConfig::default()).unwrap();
    let (x, t) = batch(4, 10, 3, 3);
    rule.step(&mut net, &x, &t, Loss::SoftmaxXent, &mut opt).unwrap();
    let TrainRule::LocalError(c) = &rule else {
        unreachable!()
    };
    assert_ne!(c[0].m, m0);
    assert_eq!(c[0].k, c[0].m.transpose().unwrap());
}

#[test]
fn dropped_units_receive_no_update() {
    let spec = NetworkSpec {
        input: vec![6],
        input_dropout: 0.0,
        blocks: vec![BlockSpec::dense(20).with_dropout(0.5)],
        classes: 3,
    };
    let (mut net, mut rule) = local(&spec, ClassifierMode::Symmetric);
    let (x, t) = batch(1, 6, 3, 8);
    let mut rec = GradRecorder::new();
    rule.step(&mut net, &x, &t, Loss::SoftmaxXent, &mut rec).unwrap();
    let mask = net.blocks[0].dropout.mask().unwrap().to_vec();
    assert!(mask.contains(&0.0) && mask.iter().any(|&m| m != 0.0));
    let gw = &rec.grads[&ParamKey::new(0, ParamSlot::Weight)];
    let gb = &rec.grads[&ParamKey::new(0, ParamSlot::Bias)];
    for (j, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            assert!(gw.row(j).iter().all(|&v| v == 0.0));
            assert_eq!(gb.data()[j], 0.0);
        }
    }
}

#[test]
fn training_is_bitwise_repeatable() {
    let spec = NetworkSpec::mlp(16, &[12, 10], 4, 0.2);
    let mut r = SplitMix64::new(5);
    let images = Tensor::from_fn(&[50, 16], |_| r.next_unit() as f32);
    let labels = (0..50).map(|i| i % 4).collect();
    let data = Dataset::new(images, labels, 4).unwrap();
    for kind in [RuleKind::LocalError, RuleKind::Backprop, RuleKind::FeedbackAlignment] {
        let run = || {
            let mut net = Network::<f32>::build(&spec, &SEEDS, kind.needs_head()).unwrap();
            let mut rule = TrainRule::new(kind, ClassifierMode::SignConcordant, &net, &SEEDS).unwrap();
            let mut opt = Adam::new(AdamConfig::default()).unwrap();
            let stats: Vec<_> = (0..3)
                .map(|e| train_epoch(&mut net, &mut rule, &data, 8, e, Loss::SoftmaxXent, &mut opt).unwrap())
                .collect();
            let params: Vec<String> = net.named_params().iter().map(|(_, t)| t.checksum()).collect();
            (format!("{stats:?}"), params)
        };
        assert_eq!(run(), run(), "{kind:?}");
    }
}

#[test]
fn local_learning_fits_a_separable_problem() {
    let spec = NetworkSpec::mlp(8, &[32, 32], 2, 0.0);
    let mut r = SplitMix64::new(17);
    let images = Tensor::from_fn(&[200, 8], |_| r.next_unit() as f32);
    let labels: Vec<usize> = (0..200)
        .map(|i| usize::from(images.row(i)[0] + images.row(i)[1] > 1.0))
        .collect();
    let data = Dataset::new(images, labels, 2).unwrap();
    let (mut net, mut rule) = local(&spec, ClassifierMode::Symmetric);
    let mut opt = Adam::new(AdamConfig {
        lr: 5e-3,
        ..AdamConfig::default()
    })
    .unwrap();
    let mut last = None;
    for e in 0..30 {
        last = Some(train_epoch(&mut net, &mut rule, &data, 20, e, Loss::SoftmaxXent, &mut opt).unwrap());
    }
    let st = last.unwrap();
    assert!(st.errors[1] < 10.0, "{st:?}");
}

fn counted(spec: &NetworkSpec, kind: RuleKind, batch_size: usize) -> (Vec<LayerCost>, u64, Vec<LayerCostSpec>) {
    let mut net = Network::<f32>::build(spec, &SEEDS, kind.needs_head()).unwrap();
    let mut rule = TrainRule::new(kind, ClassifierMode::Symmetric, &net, &SEEDS).unwrap();
    let specs = net.cost_specs(batch_size).unwrap();
    net.enable_counting();
    let f = spec.input[0];
    let (x, t) = batch(batch_size, f, spec.classes, 2);
    rule.step(&mut net, &x, &t, Loss::SoftmaxXent, &mut GradRecorder::new())
        .unwrap();
    let c = net.take_counter().unwrap();
    (c.report().layers, c.error_transfers, specs)
}

#[test]
fn instrumented_counts_equal_analytic_on_three_nets() {
    let nets = [
        NetworkSpec::mlp(5, &[3], 2, 0.0),
        NetworkSpec::mlp(20, &[16, 12, 8], 10, 0.1),
        NetworkSpec {
            input: vec![30],
            input_dropout: 0.0,
            blocks: vec![BlockSpec::dense(25).with_batch_norm(), BlockSpec::dense(15)],
            classes: 7,
        },
    ];
    for (n, spec) in nets.iter().enumerate() {
        let b = 4 + n;
        let (bp, transfers, specs) = counted(spec, RuleKind::Backprop, b);
        let run = RunCostSpec::new(specs.clone(), spec.classes as u64);
        assert_eq!(bp, cost_backprop(&run).unwrap().layers, "backprop net {n}");
        assert_eq!(transfers, specs.len() as u64 - 1);
        let (lc, transfers, specs) = counted(spec, RuleKind::LocalError, b);
        let run = RunCostSpec::new(specs, spec.classes as u64);
        assert_eq!(lc, cost_local(&run).unwrap().layers, "local net {n}");
        assert_eq!(transfers, 0);
    }
}

#[test]
fn worked_example_totals() {
    let spec = RunCostSpec::new(
        vec![
            LayerCostSpec { p: 100, a: 20, r: 5 },
            LayerCostSpec { p: 50, a: 10, r: 3 },
        ],
        10,
    );
    let bp = cost_backprop(&spec).unwrap();
    let lc = cost_local(&spec).unwrap();
    assert_eq!((bp.reads, bp.writes, bp.macs), (330, 180, 390));
    assert_eq!((lc.reads, lc.writes, lc.macs), (150, 150, 860));
    assert!(!mac_advantage(&spec).unwrap().exact);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mac_advantage_agrees_with_direct_comparison(
        layers in prop::collection::vec((1u64..5000, 1u64..5000, 1u64..3000), 1..6),
        classes in 1u64..200,
        epochs in 1u64..4,
        batches in 1u64..4,
    ) {
        let mut spec = RunCostSpec::new(
            layers.iter().map(|&(p, a, r)| LayerCostSpec { p, a, r }).collect(),
            classes,
        );
        spec.epochs = epochs;
        spec.batches = batches;
        let adv = mac_advantage(&spec).unwrap();
        let direct = cost_local(&spec).unwrap().macs < cost_backprop(&spec).unwrap().macs;
        prop_assert_eq!(adv.exact, direct);
        if layers.iter().all(|l| l.1 == layers[0].1) {
            prop_assert_eq!(adv.condition, direct);
        }
    }
}
