//! Command implementations behind the `local-error` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::cost::{cost_backprop, cost_local, mac_advantage, CostReport, RunCostSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{format_rows, GradCheck};
use crate::session::{metrics_header, metrics_row, EpochRecord, Session};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.llck";
pub const CONFIG_FILE: &str = "config.json";

/// Output directory: `--out`, then `out.dir`, then `runs/<rule>`.
pub fn resolve_out(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.rule.name()))
}

/// Trains, writing metrics after every epoch and a checkpoint at the end.
pub fn cmd_train(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Vec<EpochRecord>> {
    let train = cfg.load_train()?;
    let test = cfg.load_test()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg.to_value())?)?;
    let mut session = Session::new(cfg.clone())?;
    let mut metrics = fs::File::create(out.join(METRICS_FILE))?;
    writeln!(metrics, "{}", metrics_header(session.rule.outputs()))?;
    writeln!(
        log,
        "training {} ({} examples, {} test) for {} epochs",
        cfg.rule.name(),
        train.len(),
        test.len(),
        cfg.epochs
    )?;
    let records = session.run(&train, &test, |r| {
        writeln!(metrics, "{}", metrics_row(r))?;
        metrics.flush()?;
        let errs: Vec<String> = r.test_errors.iter().map(|e| format!("{e:.2}")).collect();
        writeln!(
            log,
            "epoch {:>3}  {:>8.1}s  loss {:.4}  test err% [{}]",
            r.epoch,
            r.wall_s,
            r.train.loss(),
            errs.join(" ")
        )?;
        Ok(())
    })?;
    session.save_checkpoint(&out.join(CHECKPOINT_FILE))?;
    writeln!(log, "wrote {}", out.display())?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// 1-based exit layer.
    pub exit_layer: usize,
    pub examples: usize,
    pub error_pct: f64,
    /// Inference MACs for the whole test set.
    pub macs: u64,
    /// Error of every earlier output as well (local rule only).
    pub all_errors: Vec<f64>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "exit_layer,examples,test_error_pct,macs,macs_per_example\n{},{},{:.4},{},{}\n",
            self.exit_layer,
            self.examples,
            self.error_pct,
            self.macs,
            self.macs / self.examples.max(1) as u64
        )
    }
}

/// Evaluates a checkpoint on its configured test set, optionally exiting early
/// at 1-based layer `exit`.
pub fn cmd_eval(checkpoint: &Path, exit: Option<usize>, data_from: Option<&RunConfig>) -> Result<EvalReport> {
    let mut session = Session::load_checkpoint(checkpoint)?;
    if let Some(c) = data_from {
        session.config.data = c.data.clone();
    }
    let depth = session.net.depth();
    let exit_layer = exit.unwrap_or(depth);
    if exit_layer == 0 || exit_layer > depth {
        return Err(Error::Argument(format!("exit layer {exit_layer} outside 1..={depth}")));
    }
    let test = session.config.load_test()?;
    let errors = session.evaluate(&test, Some(exit_layer - 1))?;
    let macs = session.rule.inference_macs(&session.net, exit_layer - 1, test.len())?;
    Ok(EvalReport {
        exit_layer,
        examples: test.len(),
        error_pct: *errors.last().unwrap(),
        macs,
        all_errors: errors,
    })
}

/// Cost spec of a config: explicit `cost.layers` or the network's blocks.
pub fn cost_spec(cfg: &RunConfig) -> Result<RunCostSpec> {
    let layers = match &cfg.cost.layers {
        Some(l) => l.clone(),
        None => cfg.network.cost_specs(cfg.batch_size)?,
    };
    let batches = match cfg.cost.batches {
        Some(b) => b,
        None => {
            let n = cfg.load_train()?.len();
            n.div_ceil(cfg.batch_size) as u64
        }
    };
    if cfg.epochs == 0 {
        return Err(Error::config("epochs", "the cost model needs at least one epoch"));
    }
    let mut spec = RunCostSpec::new(layers, cfg.network.classes as u64);
    spec.epochs = cfg.epochs as u64;
    spec.batches = batches;
    spec.validate()?;
    Ok(spec)
}

fn cost_rows(out: &mut String, method: &str, r: &CostReport) {
    for (i, l) in r.layers.iter().enumerate() {
        out.push_str(&format!("{method},{},{},{},{}\n", i + 1, l.reads, l.writes, l.macs));
    }
    out.push_str(&format!("{method},TOTAL,{},{},{}\n", r.reads, r.writes, r.macs));
}

/// `method,layer,reads,writes,macs` for both methods, then a comment line
/// with the MAC comparison.
pub fn cmd_cost(cfg: &RunConfig) -> Result<String> {
    let spec = cost_spec(cfg)?;
    let mut out = String::from("method,layer,reads,writes,macs\n");
    cost_rows(&mut out, "backprop", &cost_backprop(&spec)?);
    cost_rows(&mut out, "local", &cost_local(&spec)?);
    let adv = mac_advantage(&spec)?;
    out.push_str(&format!(
        "# mac_advantage local_fewer_macs={} margin={} condition={} condition_margin={} word_bits={}\n",
        adv.exact, adv.margin, adv.condition, adv.condition_margin, spec.word_bits
    ));
    Ok(out)
}

/// Runs the finite-difference suite on the config's network in `f64`.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<(String, bool)> {
    let g = GradCheck {
        spec: cfg.network.clone(),
        seeds: cfg.seeds,
        loss: cfg.loss,
        batch: cfg.batch_size.clamp(2, 8),
        max_entries: 64,
    };
    let rows = g.run_all()?;
    Ok((format_rows(&rows), rows.iter().all(|r| r.passed())))
}
