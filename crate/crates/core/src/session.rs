//! A configured training run: network, rule and optimizer, plus metrics and
//! checkpoints.
//!
//! A checkpoint file is the magic `LLCK`, a `u64` LE manifest length, the JSON
//! manifest, then one `LLT1` record per tensor in manifest order. Fixed
//! classifier and feedback matrices are not stored; they are regenerated from
//! the seeds and verified against the manifest checksums on load.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::data::{read_tensor, write_tensor, Dataset};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::optim::Adam;
use crate::randgen::{derive_seed, ClassifierSeed};
use crate::rules::{evaluate, train_epoch, EpochStats, RuleKind, TrainRule};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"LLCK";
const FORMAT: &str = "local-error-checkpoint/1";

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub wall_s: f64,
    pub train: EpochStats,
    /// Test error percentage of every reported output.
    pub test_errors: Vec<f64>,
}

pub struct Session {
    pub config: RunConfig,
    pub net: Network<f32>,
    pub rule: TrainRule<f32>,
    pub opt: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: Value,
    epoch: usize,
    rule: RuleKind,
    tensors: Vec<String>,
    param_checksums: Vec<String>,
    classifiers: Vec<ClassifierSeed>,
    feedback_seed: Option<u64>,
    fixed_checksums: Vec<String>,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        let net = Network::build(&config.network, &config.seeds, config.rule.needs_head())?;
        let rule = TrainRule::new(config.rule, config.mode, &net, &config.seeds)?;
        let opt = Adam::new(config.adam)?;
        Ok(Session {
            config,
            net,
            rule,
            opt,
            epoch: 0,
        })
    }

    /// Trains one epoch; the visiting order comes from `derive_seed(seed.shuffle, epoch)`.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochStats> {
        let seed = derive_seed(self.config.seeds.shuffle, self.epoch as u64);
        let st = train_epoch(
            &mut self.net,
            &mut self.rule,
            train,
            self.config.batch_size,
            seed,
            self.config.loss,
            &mut self.opt,
        )?;
        self.epoch += 1;
        Ok(st)
    }

    /// Test error percentage of every reported output up to block `exit`.
    pub fn evaluate(&self, test: &Dataset, exit: Option<usize>) -> Result<Vec<f64>> {
        evaluate(&self.net, &self.rule, test, exit, self.config.eval_batch)
    }

    /// Trains the configured number of epochs, evaluating after each.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let start = Instant::now();
        let mut out = Vec::with_capacity(self.config.epochs);
        while self.epoch < self.config.epochs {
            let train_stats = self.train_epoch(train)?;
            let rec = EpochRecord {
                epoch: self.epoch,
                wall_s: start.elapsed().as_secs_f64(),
                train: train_stats,
                test_errors: self.evaluate(test, None)?,
            };
            on_epoch(&rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    fn classifier_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        match &self.rule {
            TrainRule::LocalError(c) => c
                .iter()
                .enumerate()
                .filter(|(_, l)| l.seed.mode.is_trainable())
                .map(|(i, l)| (format!("classifier{i}.m"), &l.m))
                .collect(),
            _ => vec![],
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.net.named_params();
        tensors.extend(self.classifier_tensors());
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.config.to_value(),
            epoch: self.epoch,
            rule: self.rule.kind(),
            tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
            param_checksums: tensors.iter().map(|(_, t)| t.checksum()).collect(),
            classifiers: match &self.rule {
                TrainRule::LocalError(c) => c.iter().map(|l| l.seed).collect(),
                _ => vec![],
            },
            feedback_seed: match &self.rule {
                TrainRule::FeedbackAlignment(fa) => Some(fa.seed),
                _ => None,
            },
            fixed_checksums: self.rule.fixed_checksums(),
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &tensors {
            write_tensor(&mut w, *t)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a session from a checkpoint. Optimizer moments are not stored.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::Format(format!("manifest length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)
            .map_err(|_| Error::Format("truncated checkpoint manifest".into()))?;
        let m: Manifest =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if m.format != FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {:?}", m.format)));
        }
        if m.tensors.len() != m.param_checksums.len() {
            return Err(Error::Format(
                "manifest tensor list and checksums differ in length".into(),
            ));
        }
        let config = RunConfig::from_value(&m.config, Path::new("/"))?;
        let mut s = Session::new(config)?;
        if s.rule.kind() != m.rule {
            return Err(Error::Consistency(format!(
                "manifest rule {:?} disagrees with its config",
                m.rule
            )));
        }
        let mut stored = Vec::with_capacity(m.tensors.len());
        for (name, sum) in m.tensors.iter().zip(&m.param_checksums) {
            let t = read_tensor(&mut r)?;
            if &t.checksum() != sum {
                return Err(Error::Consistency(format!("checksum mismatch for {name}")));
            }
            stored.push((name.clone(), t));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                rest.len()
            )));
        }
        s.install(stored)?;
        if let TrainRule::LocalError(c) = &s.rule {
            let seeds: Vec<ClassifierSeed> = c.iter().map(|l| l.seed).collect();
            if seeds != m.classifiers {
                return Err(Error::Consistency("classifier seeds disagree with the config".into()));
            }
        }
        if s.rule.fixed_checksums() != m.fixed_checksums {
            return Err(Error::Consistency(
                "regenerated fixed matrices do not match the stored checksums".into(),
            ));
        }
        s.epoch = m.epoch;
        Ok(s)
    }

    fn install(&mut self, stored: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let expected: Vec<String> = self
            .net
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .chain(self.classifier_tensors().into_iter().map(|(n, _)| n))
            .collect();
        let names: Vec<&String> = stored.iter().map(|(n, _)| n).collect();
        if names != expected.iter().collect::<Vec<_>>() {
            return Err(Error::Consistency(format!(
                "checkpoint holds {names:?}, network expects {expected:?}"
            )));
        }
        let mut it = stored.into_iter();
        for (name, dst) in self.net.named_params_mut() {
            let (_, t) = it.next().unwrap();
            if t.shape() != dst.shape() {
                return Err(Error::Consistency(format!(
                    "{name}: stored shape {:?}, network shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t;
        }
        if let TrainRule::LocalError(c) = &mut self.rule {
            for l in c.iter_mut().filter(|l| l.seed.mode.is_trainable()) {
                let (name, t) = it.next().unwrap();
                if t.shape() != l.m.shape() {
                    return Err(Error::Consistency(format!("{name}: stored shape {:?}", t.shape())));
                }
                l.k = t.transpose()?;
                l.m = t;
            }
        }
        Ok(())
    }
}

/// `epoch,wall_s,train_loss,err_layer_1,...`
pub fn metrics_header(outputs: usize) -> String {
    let mut h = String::from("epoch,wall_s,train_loss");
    for k in 1..=outputs {
        h.push_str(&format!(",err_layer_{k}"));
    }
    h
}

pub fn metrics_row(r: &EpochRecord) -> String {
    let mut row = format!("{},{:.3},{:.6}", r.epoch, r.wall_s, r.train.loss());
    for e in &r.test_errors {
        row.push_str(&format!(",{e:.4}"));
    }
    row
}
