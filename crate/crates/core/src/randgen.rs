//! Deterministic random generation: SplitMix64, Glorot-uniform fills, and
//! regeneration of fixed classifier / feedback matrices from 64-bit seeds.
//!
//! A fixed matrix is never stored; it is a pure function of its seed, its shape
//! and its fan pair, so two words of seed state are enough to recover it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline(always)]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMix64 {
    state: u64,
}

pub type RngState = SplitMix64;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Value-style step: returns the output and the advanced state.
    pub fn step(self) -> (u64, SplitMix64) {
        let state = self.state.wrapping_add(GOLDEN_GAMMA);
        (mix(state), SplitMix64 { state })
    }

    #[inline(always)]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` from the top 53 bits of one draw.
    #[inline(always)]
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by 128-bit multiply-shift.
    #[inline(always)]
    pub fn below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

/// The `index`-th output (0-based) of the SplitMix64 stream seeded with `base`.
///
/// Used to hand out independent per-layer seeds from one configured seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix(base.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}

/// Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `rows x cols` tensor of i.i.d. draws from `U[-L, L)`, filled row-major from `seed`.
pub fn glorot_uniform<T: Scalar>(
    seed: u64,
    fan_in: usize,
    fan_out: usize,
    rows: usize,
    cols: usize,
) -> Result<Tensor<T>> {
    glorot_uniform_shaped(seed, fan_in, fan_out, &[rows, cols])
}

pub fn glorot_uniform_shaped<T: Scalar>(
    seed: u64,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::arg(format!(
            "glorot fan pair must be positive, got ({fan_in}, {fan_out})"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!("empty shape {shape:?}")));
    }
    let limit = glorot_limit(fan_in, fan_out);
    let mut rng = SplitMix64::new(seed);
    Ok(Tensor::from_fn(shape, |_| T::of(rng.next_unit() * 2.0 * limit - limit)))
}

/// How classifier error is carried back to the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeedbackMode {
    /// `K = M^T`; exact gradient of the local loss.
    Symmetric,
    /// Independent magnitudes from `k_seed`, signs copied from `M^T`.
    SignConcordant { k_seed: u64 },
    /// `M` is learned; `K` is re-derived as `M^T` after every update.
    Trainable,
    /// `K` independent of `M` in both sign and magnitude.
    FullyRandomK { k_seed: u64 },
}

impl FeedbackMode {
    pub fn is_trainable(&self) -> bool {
        matches!(self, FeedbackMode::Trainable)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeedbackMode::Symmetric => "symmetric",
            FeedbackMode::SignConcordant { .. } => "sign_concordant",
            FeedbackMode::Trainable => "trainable",
            FeedbackMode::FullyRandomK { .. } => "fully_random_k",
        }
    }
}

/// Everything needed to regenerate one layer's classifier pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSeed {
    pub seed: u64,
    /// Class count `C`.
    pub rows: usize,
    /// Tap width `N`.
    pub cols: usize,
    #[serde(flatten)]
    pub mode: FeedbackMode,
}

impl ClassifierSeed {
    /// Number of 64-bit seed words this spec occupies when serialized.
    pub fn seed_words(&self) -> usize {
        match self.mode {
            FeedbackMode::SignConcordant { .. } | FeedbackMode::FullyRandomK { .. } => 2,
            FeedbackMode::Symmetric | FeedbackMode::Trainable => 1,
        }
    }
}

/// Regenerates `(M[C x N], K[N x C])` from a seed spec.
pub fn make_classifier<T: Scalar>(spec: &ClassifierSeed) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, n) = (spec.rows, spec.cols);
    let m: Tensor<T> = glorot_uniform(spec.seed, n, c, c, n)?;
    let k = match spec.mode {
        FeedbackMode::Symmetric | FeedbackMode::Trainable => m.transpose()?,
        FeedbackMode::SignConcordant { k_seed } => {
            let mut k: Tensor<T> = glorot_uniform(k_seed, n, c, n, c)?;
            let md = m.data();
            for (idx, v) in k.data_mut().iter_mut().enumerate() {
                let (i, j) = (idx / c, idx % c);
                let s = md[j * n + i];
                *v = if s > T::zero() {
                    v.abs()
                } else if s < T::zero() {
                    -v.abs()
                } else {
                    T::zero()
                };
            }
            k
        }
        FeedbackMode::FullyRandomK { k_seed } => glorot_uniform(k_seed, n, c, n, c)?,
    };
    Ok((m, k))
}

/// One trainable-layer boundary of the forward network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
    },
}

/// Fixed random backward tensors for feedback alignment, one per boundary.
///
/// Dense `M -> N` boundaries get an `N x M` matrix (the shape of `W`); conv
/// boundaries get an `in_channels x out_channels x kh x kw` bank (the shape of
/// the transposed-convolution kernel).
pub fn make_fa_feedback<T: Scalar>(seed: u64, boundaries: &[Boundary]) -> Result<Vec<Tensor<T>>> {
    for pair in boundaries.windows(2) {
        let ok = match (pair[0], pair[1]) {
            (Boundary::Dense { outputs, .. }, Boundary::Dense { inputs, .. }) => outputs == inputs,
            (Boundary::Conv { out_channels, .. }, Boundary::Conv { in_channels, .. }) => out_channels == in_channels,
            // conv -> dense flattens; only the dense side knows the flat width
            (Boundary::Conv { .. }, Boundary::Dense { .. }) => true,
            (Boundary::Dense { .. }, Boundary::Conv { .. }) => false,
        };
        if !ok {
            return Err(Error::dim(format!(
                "inconsistent boundaries {:?} -> {:?}",
                pair[0], pair[1]
            )));
        }
    }
    boundaries
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let s = derive_seed(seed, i as u64);
            match *b {
                Boundary::Dense { inputs, outputs } => glorot_uniform(s, inputs, outputs, outputs, inputs),
                Boundary::Conv {
                    in_channels,
                    out_channels,
                    kh,
                    kw,
                } => glorot_uniform_shaped(
                    s,
                    in_channels * kh * kw,
                    out_channels * kh * kw,
                    &[in_channels, out_channels, kh, kw],
                ),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent evaluation of the published recurrence, written out longhand.
    fn splitmix_reference(seed: u64, count: usize) -> Vec<u64> {
        let mut state = seed;
        let mut out = Vec::new();
        for _ in 0..count {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            out.push(z ^ (z >> 31));
        }
        out
    }

    #[test]
    fn seed_zero_first_output() {
        assert_eq!(splitmix_reference(0, 1)[0], 0xE220A8397B1DCDAF);
        let (v, _) = SplitMix64::new(0).step();
        assert_eq!(v, 0xE220A8397B1DCDAF);
    }

    #[test]
    fn sequences_are_deterministic_and_seed_dependent() {
        let mut a = SplitMix64::new(42);
        let got: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        assert_eq!(got, splitmix_reference(42, 5));
        let (one, _) = SplitMix64::new(1).step();
        let (two, _) = SplitMix64::new(2).step();
        assert_ne!(one, two);
        assert_eq!(one, splitmix_reference(1, 1)[0]);
        assert_eq!(two, splitmix_reference(2, 1)[0]);
    }

    #[test]
    fn derive_seed_is_stream_position() {
        let stream = splitmix_reference(77, 4);
        for (i, want) in stream.iter().enumerate() {
            assert_eq!(derive_seed(77, i as u64), *want);
        }
    }

    #[test]
    fn glorot_bound_and_range() {
        assert!((glorot_limit(1000, 10) - 0.077075).abs() < 1e-6);
        let t: Tensor<f32> = glorot_uniform(5, 1000, 10, 100, 100).unwrap();
        let l = glorot_limit(1000, 10) as f32;
        assert!(t.data().iter().all(|v| v.abs() <= l));
        assert!(glorot_uniform::<f32>(5, 0, 10, 2, 2).is_err());
    }

    #[test]
    fn glorot_mean_is_near_zero() {
        let t: Tensor<f64> = glorot_uniform(123, 30, 30, 1000, 100).unwrap();
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.01 * glorot_limit(30, 30), "mean {mean}");
    }

    #[test]
    fn glorot_first_element_follows_mapping() {
        let t: Tensor<f64> = glorot_uniform(9, 3, 5, 1, 1).unwrap();
        let u = splitmix_reference(9, 1)[0];
        let l = glorot_limit(3, 5);
        let want = (u >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * l - l;
        assert_eq!(t.data()[0], want);
    }

    #[test]
    fn symmetric_classifier_is_exact_transpose() {
        let spec = ClassifierSeed {
            seed: 3,
            rows: 10,
            cols: 20,
            mode: FeedbackMode::Symmetric,
        };
        let (m, k) = make_classifier::<f32>(&spec).unwrap();
        assert_eq!(m.shape(), &[10, 20]);
        assert_eq!(k, m.transpose().unwrap());
        let (m2, k2) = make_classifier::<f32>(&spec).unwrap();
        assert_eq!((m.checksum(), k.checksum()), (m2.checksum(), k2.checksum()));
    }

    #[test]
    fn sign_concordant_signs_match_and_magnitudes_differ() {
        let spec = ClassifierSeed {
            seed: 8,
            rows: 10,
            cols: 100,
            mode: FeedbackMode::SignConcordant { k_seed: 99 },
        };
        let (m, k) = make_classifier::<f32>(&spec).unwrap();
        let mt = m.transpose().unwrap();
        let mut differ = 0;
        for (kv, mv) in k.data().iter().zip(mt.data()) {
            assert_eq!(kv.signum(), mv.signum());
            if kv.abs() != mv.abs() {
                differ += 1;
            }
        }
        assert!(differ as f64 >= 0.99 * k.len() as f64);
    }

    #[test]
    fn fully_random_k_is_independent_of_m() {
        let spec = ClassifierSeed {
            seed: 8,
            rows: 10,
            cols: 100,
            mode: FeedbackMode::FullyRandomK { k_seed: 99 },
        };
        let (m, k) = make_classifier::<f64>(&spec).unwrap();
        let mt = m.transpose().unwrap();
        let agree = k
            .data()
            .iter()
            .zip(mt.data())
            .filter(|(a, b)| a.signum() == b.signum())
            .count();
        let frac = agree as f64 / k.len() as f64;
        assert!((0.4..0.6).contains(&frac), "sign agreement {frac}");
    }

    #[test]
    fn fixed_state_is_at_most_two_words() {
        for mode in [
            FeedbackMode::Symmetric,
            FeedbackMode::SignConcordant { k_seed: 1 },
            FeedbackMode::FullyRandomK { k_seed: 1 },
        ] {
            let spec = ClassifierSeed {
                seed: 1,
                rows: 10,
                cols: 100_000,
                mode,
            };
            assert!(spec.seed_words() <= 2);
        }
    }

    #[test]
    fn fa_feedback_shapes_and_regeneration() {
        let b = [
            Boundary::Dense {
                inputs: 784,
                outputs: 1000,
            },
            Boundary::Dense {
                inputs: 1000,
                outputs: 10,
            },
        ];
        let fa = make_fa_feedback::<f32>(4, &b).unwrap();
        assert_eq!(fa[0].shape(), &[1000, 784]);
        assert_eq!(fa[1].shape(), &[10, 1000]);
        let again = make_fa_feedback::<f32>(4, &b).unwrap();
        assert_eq!(fa, again);

        let conv = make_fa_feedback::<f32>(
            4,
            &[Boundary::Conv {
                in_channels: 3,
                out_channels: 8,
                kh: 5,
                kw: 5,
            }],
        )
        .unwrap();
        assert_eq!(conv[0].shape(), &[3, 8, 5, 5]);

        let bad = [
            Boundary::Dense { inputs: 4, outputs: 5 },
            Boundary::Dense { inputs: 6, outputs: 2 },
        ];
        assert!(matches!(make_fa_feedback::<f32>(1, &bad), Err(Error::Dimension(_))));
    }
}
