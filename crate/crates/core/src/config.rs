//! Flat JSON run configuration with dotted keys.
//!
//! ```json
//! {
//!   "rule": "local_error", "mode": "symmetric", "loss": "softmax_xent",
//!   "epochs": 20, "batch_size": 100, "adam.lr": 5e-4,
//!   "seed.init": 1, "seed.classifier": 2, "seed.dropout": 3, "seed.shuffle": 4, "seed.feedback": 5,
//!   "input.shape": [784], "input.dropout": 0.1, "classes": 10,
//!   "layers": [{"type": "dense", "units": 1000, "dropout": 0.2}],
//!   "data.train_images": "train-images-idx3-ubyte", "data.train_labels": "train-labels-idx1-ubyte",
//!   "data.test_images": "t10k-images-idx3-ubyte", "data.test_labels": "t10k-labels-idx1-ubyte"
//! }
//! ```
//!
//! Seeds accept integers or `"0x..."` strings. Relative paths resolve against
//! the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::cost::LayerCostSpec;
use crate::data::{load_idx, load_llt_dataset, Dataset};
use crate::error::{Error, Result};
use crate::network::{BlockSpec, NetworkSpec, Seeds};
use crate::optim::{AdamConfig, Loss};
use crate::rules::{ClassifierMode, RuleKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DataFormat {
    #[default]
    Idx,
    Llt,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    pub format: DataFormat,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first `n` training examples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

/// Explicit cost-model layers, overriding those derived from the network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostOverride {
    pub layers: Option<Vec<LayerCostSpec>>,
    pub batches: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub rule: RuleKind,
    pub mode: ClassifierMode,
    pub loss: Loss,
    pub seeds: Seeds,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub data: DataConfig,
    pub cost: CostOverride,
    pub out_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "rule",
    "mode",
    "loss",
    "epochs",
    "batch_size",
    "eval_batch",
    "adam.lr",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "seed.init",
    "seed.classifier",
    "seed.dropout",
    "seed.shuffle",
    "seed.feedback",
    "input.shape",
    "input.dropout",
    "classes",
    "layers",
    "data.format",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "data.train_limit",
    "data.test_limit",
    "cost.layers",
    "cost.batches",
    "out.dir",
];

struct Reader<'a> {
    map: &'a Map<String, Value>,
    base: &'a Path,
}

impl Reader<'_> {
    fn get(&self, key: &str) -> Option<&Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn req(&self, key: &str) -> Result<&Value> {
        self.get(key).ok_or_else(|| Error::config(key, "missing required key"))
    }

    fn usize_or(&self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.get(key) {
            None => default.ok_or_else(|| Error::config(key, "missing required key")),
            Some(v) => v
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| Error::config(key, format!("expected a non-negative integer, got {v}"))),
        }
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key).map(|_| self.usize_or(key, None)).transpose()
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::config(key, format!("expected a number, got {v}"))),
        }
    }

    fn seed(&self, key: &str) -> Result<u64> {
        match self.req(key)? {
            Value::Number(n) => n
                .as_u64()
                .ok_or_else(|| Error::config(key, format!("seed must be a non-negative integer, got {n}"))),
            Value::String(s) => {
                let hex = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"));
                match hex {
                    Some(h) => u64::from_str_radix(h, 16),
                    None => s.parse(),
                }
                .map_err(|_| Error::config(key, format!("cannot parse seed {s:?}")))
            }
            v => Err(Error::config(
                key,
                format!("seed must be an integer or string, got {v}"),
            )),
        }
    }

    fn enum_or<T: serde::de::DeserializeOwned + Default>(&self, key: &str) -> Result<T> {
        match self.get(key) {
            None => Ok(T::default()),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::config(key, e.to_string())),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => {
                let p = PathBuf::from(s);
                Ok(Some(if p.is_absolute() { p } else { self.base.join(p) }))
            }
            Some(v) => Err(Error::config(key, format!("expected a path string, got {v}"))),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        Self::from_value(&v, base)
    }

    pub fn from_value(v: &Value, base: &Path) -> Result<Self> {
        let map = v
            .as_object()
            .ok_or_else(|| Error::config("<document>", "config must be a JSON object"))?;
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(k.clone(), "unknown key"));
        }
        let r = Reader { map, base };
        let input: Vec<usize> = serde_json::from_value(r.req("input.shape")?.clone())
            .map_err(|e| Error::config("input.shape", e.to_string()))?;
        let layers = r
            .req("layers")?
            .as_array()
            .ok_or_else(|| Error::config("layers", "expected an array of layer objects"))?;
        let blocks = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_value::<BlockSpec>(l.clone())
                    .map_err(|e| Error::config(format!("layers[{i}]"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let network = NetworkSpec {
            input,
            input_dropout: r.f64_or("input.dropout", 0.0)?,
            blocks,
            classes: r.usize_or("classes", Some(10))?,
        };
        network.shapes()?;
        if !(0.0..1.0).contains(&network.input_dropout) {
            return Err(Error::config("input.dropout", "must lie in [0, 1)"));
        }
        let defaults = AdamConfig::default();
        let adam = AdamConfig {
            lr: r.f64_or("adam.lr", defaults.lr)?,
            beta1: r.f64_or("adam.beta1", defaults.beta1)?,
            beta2: r.f64_or("adam.beta2", defaults.beta2)?,
            eps: r.f64_or("adam.eps", defaults.eps)?,
        };
        adam.validate().map_err(|e| Error::config("adam", e.to_string()))?;
        let batch_size = r.usize_or("batch_size", None)?;
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let format = match r.get("data.format").and_then(Value::as_str) {
            None | Some("idx") => DataFormat::Idx,
            Some("llt") => DataFormat::Llt,
            Some(other) => return Err(Error::config("data.format", format!("unknown format {other:?}"))),
        };
        let cost_layers = match r.get("cost.layers") {
            None => None,
            Some(v) => {
                let raw: Vec<[u64; 3]> = serde_json::from_value(v.clone())
                    .map_err(|e| Error::config("cost.layers", format!("expected [[P, A, R], ...]: {e}")))?;
                Some(raw.into_iter().map(|[p, a, r]| LayerCostSpec { p, a, r }).collect())
            }
        };
        Ok(RunConfig {
            network,
            rule: r.enum_or("rule")?,
            mode: r.enum_or("mode")?,
            loss: r.enum_or("loss")?,
            seeds: Seeds {
                init: r.seed("seed.init")?,
                classifier: r.seed("seed.classifier")?,
                dropout: r.seed("seed.dropout")?,
                shuffle: r.seed("seed.shuffle")?,
                feedback: r.seed("seed.feedback")?,
            },
            adam,
            epochs: r.usize_or("epochs", None)?,
            batch_size,
            eval_batch: r.usize_or("eval_batch", Some(1000))?.max(1),
            data: DataConfig {
                format,
                train_images: r.path("data.train_images")?,
                train_labels: r.path("data.train_labels")?,
                test_images: r.path("data.test_images")?,
                test_labels: r.path("data.test_labels")?,
                train_limit: r.opt_usize("data.train_limit")?,
                test_limit: r.opt_usize("data.test_limit")?,
            },
            cost: CostOverride {
                layers: cost_layers,
                batches: r.opt_usize("cost.batches")?.map(|b| b as u64),
            },
            out_dir: r.path("out.dir")?,
        })
    }

    /// Flat JSON form; paths are written as absolute strings.
    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("rule", serde_json::to_value(self.rule).unwrap());
        put("mode", serde_json::to_value(self.mode).unwrap());
        put("loss", serde_json::to_value(self.loss).unwrap());
        put("epochs", json!(self.epochs));
        put("batch_size", json!(self.batch_size));
        put("eval_batch", json!(self.eval_batch));
        put("adam.lr", json!(self.adam.lr));
        put("adam.beta1", json!(self.adam.beta1));
        put("adam.beta2", json!(self.adam.beta2));
        put("adam.eps", json!(self.adam.eps));
        for (k, s) in [
            ("seed.init", self.seeds.init),
            ("seed.classifier", self.seeds.classifier),
            ("seed.dropout", self.seeds.dropout),
            ("seed.shuffle", self.seeds.shuffle),
            ("seed.feedback", self.seeds.feedback),
        ] {
            put(k, json!(format!("0x{s:016x}")));
        }
        put("input.shape", json!(self.network.input));
        put("input.dropout", json!(self.network.input_dropout));
        put("classes", json!(self.network.classes));
        put("layers", serde_json::to_value(&self.network.blocks).unwrap());
        put(
            "data.format",
            json!(match self.data.format {
                DataFormat::Idx => "idx",
                DataFormat::Llt => "llt",
            }),
        );
        let abs = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| json!(fs::canonicalize(p).unwrap_or_else(|_| p.clone()).display().to_string()))
                .unwrap_or(Value::Null)
        };
        put("data.train_images", abs(&self.data.train_images));
        put("data.train_labels", abs(&self.data.train_labels));
        put("data.test_images", abs(&self.data.test_images));
        put("data.test_labels", abs(&self.data.test_labels));
        put("data.train_limit", json!(self.data.train_limit));
        put("data.test_limit", json!(self.data.test_limit));
        if let Some(l) = &self.cost.layers {
            put(
                "cost.layers",
                json!(l.iter().map(|s| [s.p, s.a, s.r]).collect::<Vec<_>>()),
            );
        }
        put("cost.batches", json!(self.cost.batches));
        Value::Object(m)
    }

    fn load_split(
        &self,
        images: &Option<PathBuf>,
        labels: &Option<PathBuf>,
        limit: Option<usize>,
        key: &str,
    ) -> Result<Dataset> {
        let (Some(i), Some(l)) = (images, labels) else {
            return Err(Error::config(key, "dataset paths not configured"));
        };
        let ds = match self.data.format {
            DataFormat::Idx => load_idx(i, l)?,
            DataFormat::Llt => load_llt_dataset(i, l, self.network.classes)?,
        };
        let ds = match limit {
            Some(n) => ds.head(n)?,
            None => ds,
        };
        if ds.features() != self.network.input.iter().product::<usize>() {
            return Err(Error::Consistency(format!(
                "{key}: {} features per example, network expects {:?}",
                ds.features(),
                self.network.input
            )));
        }
        Ok(ds)
    }

    pub fn load_train(&self) -> Result<Dataset> {
        self.load_split(
            &self.data.train_images,
            &self.data.train_labels,
            self.data.train_limit,
            "data.train_images",
        )
    }

    pub fn load_test(&self) -> Result<Dataset> {
        self.load_split(
            &self.data.test_images,
            &self.data.test_labels,
            self.data.test_limit,
            "data.test_images",
        )
    }
}
