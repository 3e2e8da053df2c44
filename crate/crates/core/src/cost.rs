//! Memory-traffic and MAC accounting for backprop versus local-error learning.
//!
//! Per trainable layer `i` with parameter words `P`, mini-batch activation
//! words `A` and fanout `R`, over `N_e` epochs of `N_b` mini-batches:
//!
//! | method   | reads        | writes      | MACs           |
//! |----------|--------------|-------------|----------------|
//! | backprop | `Σ 2P + A`   | `Σ P + A`   | `Σ 3 R A`      |
//! | local    | `Σ P`        | `Σ P`       | `Σ (2R + 2C) A`|
//!
//! all multiplied by `N_e N_b`. [`CostCounter`] records the same quantities
//! while a real training step executes. Specs derived from a network use the
//! layer's output activations for `A` and its fan-in for `R`, so `R A` is the
//! number of connections feeding the layer.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCostSpec {
    pub p: u64,
    pub a: u64,
    pub r: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunCostSpec {
    pub layers: Vec<LayerCostSpec>,
    pub epochs: u64,
    pub batches: u64,
    pub classes: u64,
    pub word_bits: u32,
}

impl RunCostSpec {
    pub fn new(layers: Vec<LayerCostSpec>, classes: u64) -> Self {
        RunCostSpec {
            layers,
            epochs: 1,
            batches: 1,
            classes,
            word_bits: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("cost spec needs at least one layer"));
        }
        if self.epochs == 0 || self.batches == 0 {
            return Err(Error::arg("epochs and batches must be at least 1"));
        }
        if let Some(i) = self.layers.iter().position(|l| l.a == 0) {
            return Err(Error::arg(format!("layer {i} has no activations")));
        }
        Ok(())
    }

    fn scale(&self) -> u64 {
        self.epochs * self.batches
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub reads: u64,
    pub writes: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub reads: u64,
    pub writes: u64,
    pub macs: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    fn from_layers(layers: Vec<LayerCost>) -> Self {
        CostReport {
            reads: layers.iter().map(|l| l.reads).sum(),
            writes: layers.iter().map(|l| l.writes).sum(),
            macs: layers.iter().map(|l| l.macs).sum(),
            layers,
        }
    }

    /// Every field multiplied by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        CostReport::from_layers(
            self.layers
                .iter()
                .map(|l| LayerCost {
                    reads: l.reads * k,
                    writes: l.writes * k,
                    macs: l.macs * k,
                })
                .collect(),
        )
    }
}

pub fn cost_backprop(spec: &RunCostSpec) -> Result<CostReport> {
    spec.validate()?;
    let k = spec.scale();
    Ok(CostReport::from_layers(
        spec.layers
            .iter()
            .map(|l| LayerCost {
                reads: k * (2 * l.p + l.a),
                writes: k * (l.p + l.a),
                macs: k * 3 * l.r * l.a,
            })
            .collect(),
    ))
}

pub fn cost_local(spec: &RunCostSpec) -> Result<CostReport> {
    spec.validate()?;
    let k = spec.scale();
    Ok(CostReport::from_layers(
        spec.layers
            .iter()
            .map(|l| LayerCost {
                reads: k * l.p,
                writes: k * l.p,
                macs: k * (2 * l.r + 2 * spec.classes) * l.a,
            })
            .collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MacAdvantage {
    /// `cost_local.macs < cost_backprop.macs`.
    pub exact: bool,
    /// `backprop.macs - local.macs`.
    pub margin: i128,
    /// `L C < 0.5 Σ R`; only equivalent to `exact` when every layer has the same `A`.
    pub condition: bool,
    /// `0.5 Σ R - L C`; zero means no advantage.
    pub condition_margin: f64,
}

pub fn mac_advantage(spec: &RunCostSpec) -> Result<MacAdvantage> {
    let bp = cost_backprop(spec)?;
    let local = cost_local(spec)?;
    let half_r = 0.5 * spec.layers.iter().map(|l| l.r as f64).sum::<f64>();
    let lc = (spec.layers.len() as u64 * spec.classes) as f64;
    Ok(MacAdvantage {
        exact: local.macs < bp.macs,
        margin: bp.macs as i128 - local.macs as i128,
        condition: lc < half_r,
        condition_margin: half_r - lc,
    })
}

/// Counts traffic and MACs as a training step executes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostCounter {
    layers: Vec<LayerCost>,
    /// Error tensors handed from one layer to another.
    pub error_transfers: u64,
}

impl CostCounter {
    pub fn new(layers: usize) -> Self {
        CostCounter {
            layers: vec![LayerCost::default(); layers],
            error_transfers: 0,
        }
    }

    fn at(&mut self, layer: usize) -> &mut LayerCost {
        if layer >= self.layers.len() {
            self.layers.resize(layer + 1, LayerCost::default());
        }
        &mut self.layers[layer]
    }

    pub fn read(&mut self, layer: usize, words: usize) {
        self.at(layer).reads += words as u64;
    }

    pub fn write(&mut self, layer: usize, words: usize) {
        self.at(layer).writes += words as u64;
    }

    pub fn mac(&mut self, layer: usize, n: usize) {
        self.at(layer).macs += n as u64;
    }

    pub fn transfer(&mut self) {
        self.error_transfers += 1;
    }

    pub fn report(&self) -> CostReport {
        CostReport::from_layers(self.layers.clone())
    }
}
