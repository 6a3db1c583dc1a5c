use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use avtransformer::checkpoint::load_checkpoint;
use avtransformer::model::{parse_kv, ModelConfig};
use avtransformer::params::ParamSet;
use avtransformer::training::TrainConfig;

use crate::{CliResult, Failure};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train.log";
pub const THRESHOLD_FILE: &str = "threshold.txt";
pub const CHECKPOINT_STEM: &str = "model.avtm";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("{CHECKPOINT_STEM}.ep{epoch}")
}

/// Fully resolved settings of a `train` invocation.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub runs: usize,
}

const TRAIN_KEYS: &[&str] = &[
    "data",
    "out",
    "epochs",
    "batch-size",
    "batches-per-epoch",
    "patience",
    "ensemble",
    "max-ratio",
    "lr",
    "seed",
    "runs",
];

impl RunConfig {
    pub fn from_settings(map: &BTreeMap<String, String>) -> CliResult<Self> {
        let mut model = ModelConfig::default();
        let used = model.apply_pairs(map)?;
        if let Some(k) = map
            .keys()
            .find(|k| !used.contains(k) && !TRAIN_KEYS.contains(&k.as_str()))
        {
            return Err(Failure::input(format!("unknown setting {k:?}")));
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        fn num<T: std::str::FromStr>(k: &str, v: Option<&str>, default: T) -> CliResult<T> {
            match v {
                None => Ok(default),
                Some(s) => s
                    .parse()
                    .map_err(|_| Failure::input(format!("{k}: cannot parse {s:?}"))),
            }
        }
        let d = TrainConfig::default();
        let mut train = TrainConfig {
            max_epochs: num("epochs", get("epochs"), d.max_epochs)?,
            batches_per_epoch: num("batches-per-epoch", get("batches-per-epoch"), d.batches_per_epoch)?,
            batch_size: num("batch-size", get("batch-size"), d.batch_size)?,
            patience: num("patience", get("patience"), d.patience)?,
            ensemble_size: num("ensemble", get("ensemble"), d.ensemble_size)?,
            max_ratio: num("max-ratio", get("max-ratio"), d.max_ratio)?,
            seed: num("seed", get("seed"), d.seed)?,
            ..d
        };
        train.adam.learning_rate = num("lr", get("lr"), train.adam.learning_rate)?;
        let runs = num("runs", get("runs"), 1usize)?;
        if runs == 0 {
            return Err(Failure::input("runs must be at least 1"));
        }
        let data = get("data").ok_or_else(|| Failure::input("missing --data"))?.into();
        let out = get("out").ok_or_else(|| Failure::input("missing --out"))?.into();
        model.validate()?;
        train.validate()?;
        Ok(RunConfig {
            data,
            out,
            model,
            train,
            runs,
        })
    }

    /// The resolved configuration as `key=value` lines.
    pub fn echo(&self, seed: u64) -> String {
        let mut lines = vec![format!("data={}", self.data.display())];
        for (k, v) in self.train.to_pairs() {
            let v = if k == "seed" { seed.to_string() } else { v };
            lines.push(format!("{k}={v}"));
        }
        lines.extend(self.model.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}")));
        lines.join("\n") + "\n"
    }
}

/// Artifacts of a finished training run.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub config: ModelConfig,
    pub data: Option<PathBuf>,
    pub threshold: f64,
    /// `(epoch, parameters)`, oldest first.
    pub snapshots: Vec<(usize, ParamSet)>,
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::input(format!("{}: {e}", path.display()))
}

impl RunDir {
    pub fn open(path: &Path) -> CliResult<Self> {
        let mut epochs: Vec<usize> = fs::read_dir(path)
            .map_err(|e| io(path, e))?
            .filter_map(|entry| {
                let name = entry.ok()?.file_name().into_string().ok()?;
                name.strip_prefix(CHECKPOINT_STEM)?.strip_prefix(".ep")?.parse().ok()
            })
            .collect();
        if epochs.is_empty() {
            return Err(Failure::input(format!("{}: no checkpoints found", path.display())));
        }
        epochs.sort_unstable();
        let mut snapshots = Vec::with_capacity(epochs.len());
        let mut config = None;
        for epoch in epochs {
            let (cfg, params) = load_checkpoint(&path.join(checkpoint_name(epoch)))?;
            config = Some(cfg);
            snapshots.push((epoch, params));
        }
        let tpath = path.join(THRESHOLD_FILE);
        let text = fs::read_to_string(&tpath).map_err(|e| io(&tpath, e))?;
        let threshold: f64 = text
            .trim()
            .parse()
            .map_err(|_| Failure::input(format!("{}: bad threshold {text:?}", tpath.display())))?;
        let cpath = path.join(CONFIG_FILE);
        let data = match fs::read_to_string(&cpath) {
            Ok(text) => parse_kv(&text)?.get("data").map(PathBuf::from),
            Err(_) => None,
        };
        Ok(RunDir {
            path: path.to_path_buf(),
            config: config.expect("at least one checkpoint"),
            data,
            threshold,
            snapshots,
        })
    }

    pub fn manifest(&self, override_path: Option<&Path>) -> CliResult<PathBuf> {
        override_path
            .map(Path::to_path_buf)
            .or_else(|| self.data.clone())
            .ok_or_else(|| Failure::input("run records no dataset; pass --data"))
    }

    pub fn params(&self) -> Vec<&ParamSet> {
        self.snapshots.iter().map(|(_, p)| p).collect()
    }
}
