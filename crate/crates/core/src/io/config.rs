//! JSON run configuration.
//!
//! ```json
//! {
//!   "model": {"arch": {"input": [2], "layers": [{"type": "block", "hidden": 32, "out": 4}]}},
//!   "data": {"generator": "blobs", "n": 2000, "classes": 4, "spread": 0.5},
//!   "train": {"epochs": 20, "lr": 0.005},
//!   "reg": {"lc": 0.05, "layer_fraction": 1.0},
//!   "collapse": {"tau": 0.05},
//!   "output": "runs/demo"
//! }
//! ```
//!
//! Unknown keys anywhere are rejected, all at once, with their full paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::collapse::CollapseConfig;
use crate::error::{Error, Result};
use crate::loss::RegConfig;
use crate::nn::ArchSpec;
use crate::train::{
    gen_blobs, gen_regression_1d, gen_two_spirals, load_idx, Dataset, Fig1Config, Shape1d, TrainConfig, VAL_FRACTION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default)]
    pub arch: Option<ArchSpec>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Start slopes at 0 (plain ReLU) instead of the scratch value.
    #[serde(default)]
    pub retrofit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Blobs,
    Spirals,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: Option<Generator>,
    pub n: usize,
    pub classes: usize,
    pub spread: f64,
    pub noise_std: f64,
    pub shape: Shape1d,
    /// Defaults to the training seed.
    pub seed: Option<u64>,
    pub val_fraction: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generator: None,
            n: 1000,
            classes: 4,
            spread: 0.5,
            noise_std: 0.3,
            shape: Shape1d::Sine,
            seed: None,
            val_fraction: VAL_FRACTION,
            idx_images: None,
            idx_labels: None,
        }
    }
}

impl DataConfig {
    /// Builds the dataset; relative IDX paths resolve against `base`.
    pub fn load(&self, default_seed: u64, base: &Path) -> Result<Dataset> {
        let seed = self.seed.unwrap_or(default_seed);
        let ds = match (self.generator, &self.idx_images, &self.idx_labels) {
            (Some(Generator::Blobs), None, None) => gen_blobs(seed, self.n, self.classes, self.spread)?,
            (Some(Generator::Spirals), None, None) => gen_two_spirals(seed, self.n, self.classes, self.spread)?,
            (Some(Generator::Regression), None, None) => gen_regression_1d(seed, self.n, self.noise_std, self.shape)?,
            (None, Some(images), Some(labels)) => load_idx(&base.join(images), &base.join(labels))?,
            _ => {
                return Err(Error::Config(vec![
                    "data: set either `generator` or both `idx_images` and `idx_labels`".into(),
                ]))
            }
        };
        Ok(ds.with_split(seed, self.val_fraction))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    pub deltas: Vec<f64>,
    /// Standard-normal probe inputs drawn when no `data` section is given.
    pub samples: usize,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            deltas: vec![0.1, 0.05, 0.01],
            samples: 20_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<ModelSource>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Overrides `train.tau` when present.
    #[serde(default)]
    pub collapse: Option<CollapseConfig>,
    /// Overrides `train.reg` when present.
    #[serde(default)]
    pub reg: Option<RegConfig>,
    #[serde(default)]
    pub bound: BoundConfig,
    #[serde(default)]
    pub fig1: Fig1Config,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

const TOP: &[&str] = &["model", "data", "train", "collapse", "reg", "bound", "fig1", "output"];
const MODEL: &[&str] = &["arch", "checkpoint", "retrofit"];
const ARCH: &[&str] = &["input", "layers"];
const DATA: &[&str] = &[
    "generator",
    "n",
    "classes",
    "spread",
    "noise_std",
    "shape",
    "seed",
    "val_fraction",
    "idx_images",
    "idx_labels",
];
const TRAIN: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "lr_schedule",
    "reg",
    "tau",
    "max_epochs_per_layer",
    "total_epoch_cap",
];
const LR_STEP: &[&str] = &["epoch", "multiplier"];
const REG: &[&str] = &["lc", "layer_fraction"];
const COLLAPSE: &[&str] = &["tau"];
const BOUND: &[&str] = &["deltas", "samples", "seed"];
const FIG1: &[&str] = &[
    "seed",
    "samples",
    "noise_std",
    "shape",
    "hidden",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "lc",
];

fn layer_keys(kind: &str) -> Option<&'static [&'static str]> {
    Some(match kind {
        "linear" => &["type", "out"],
        "block" => &["type", "hidden", "out", "batch_norm", "dropout"],
        "prelu" | "batch_norm" | "flatten" => &["type"],
        "dropout" => &["type", "p"],
        "conv2d" => &["type", "out_channels", "kernel", "stride", "padding"],
        _ => return None,
    })
}

fn check_keys(v: &Value, path: &str, allowed: &[&str], bad: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for k in map.keys() {
            if !allowed.contains(&k.as_str()) {
                bad.push(format!("{path}{k}: unknown key"));
            }
        }
    }
}

fn unknown_keys(root: &Value) -> Vec<String> {
    let mut bad = Vec::new();
    if !root.is_object() {
        bad.push("config must be a JSON object".into());
        return bad;
    }
    check_keys(root, "", TOP, &mut bad);
    let child = |v: &Value, k: &str| v.get(k).filter(|c| !c.is_null()).cloned();
    if let Some(model) = child(root, "model") {
        check_keys(&model, "model.", MODEL, &mut bad);
        if let Some(arch) = child(&model, "arch") {
            check_keys(&arch, "model.arch.", ARCH, &mut bad);
            if let Some(Value::Array(layers)) = child(&arch, "layers") {
                for (i, l) in layers.iter().enumerate() {
                    let kind = l.get("type").and_then(Value::as_str).unwrap_or("");
                    match layer_keys(kind) {
                        Some(keys) => check_keys(l, &format!("model.arch.layers[{i}]."), keys, &mut bad),
                        None => bad.push(format!("model.arch.layers[{i}].type: unknown layer type `{kind}`")),
                    }
                }
            }
        }
    }
    if let Some(data) = child(root, "data") {
        check_keys(&data, "data.", DATA, &mut bad);
    }
    if let Some(train) = child(root, "train") {
        check_keys(&train, "train.", TRAIN, &mut bad);
        if let Some(reg) = child(&train, "reg") {
            check_keys(&reg, "train.reg.", REG, &mut bad);
        }
        if let Some(Value::Array(steps)) = child(&train, "lr_schedule") {
            for (i, s) in steps.iter().enumerate() {
                check_keys(s, &format!("train.lr_schedule[{i}]."), LR_STEP, &mut bad);
            }
        }
    }
    for (key, allowed) in [("collapse", COLLAPSE), ("reg", REG), ("bound", BOUND), ("fig1", FIG1)] {
        if let Some(v) = child(root, key) {
            check_keys(&v, &format!("{key}."), allowed, &mut bad);
        }
    }
    bad
}

impl RunConfig {
    /// Parses and validates; every problem found is listed in one
    /// [`Error::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
        let bad = unknown_keys(&root);
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    /// Training settings with the top-level `reg` and `collapse` sections
    /// applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(reg) = self.reg {
            t.reg = reg;
        }
        if let Some(c) = self.collapse {
            t.tau = c.tau;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(Error::Config(v)) = self.effective_train().validate() {
            bad.extend(v);
        }
        if let Some(m) = &self.model {
            if m.arch.is_some() == m.checkpoint.is_some() {
                bad.push("model: set exactly one of `arch` and `checkpoint`".into());
            }
        }
        if let Some(d) = &self.data {
            if d.generator.is_some() == (d.idx_images.is_some() || d.idx_labels.is_some()) {
                bad.push("data: set either `generator` or both `idx_images` and `idx_labels`".into());
            } else if d.generator.is_none() && (d.idx_images.is_none() || d.idx_labels.is_none()) {
                bad.push("data: `idx_images` and `idx_labels` go together".into());
            }
            if !(0.0..1.0).contains(&d.val_fraction) {
                bad.push(format!("data.val_fraction: must lie in [0, 1), got {}", d.val_fraction));
            }
            if !(d.spread >= 0.0 && d.noise_std >= 0.0) {
                bad.push("data: spread and noise_std must be >= 0".into());
            }
        }
        for &d in &self.bound.deltas {
            if !(d > 0.0 && d < 1.0) {
                bad.push(format!("bound.deltas: {d} is outside (0, 1)"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
        match serde_json::to_value(v).unwrap() {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => panic!("not an object"),
        }
    }

    fn sorted(v: &[&str]) -> Vec<String> {
        let mut v: Vec<String> = v.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    }

    #[test]
    fn key_lists_match_structs() {
        assert_eq!(keys_of(&RunConfig::default()), sorted(TOP));
        assert_eq!(keys_of(&TrainConfig::default()), sorted(TRAIN));
        assert_eq!(keys_of(&DataConfig::default()), sorted(DATA));
        assert_eq!(keys_of(&BoundConfig::default()), sorted(BOUND));
        assert_eq!(keys_of(&Fig1Config::default()), sorted(FIG1));
        assert_eq!(keys_of(&RegConfig::default()), sorted(REG));
        assert_eq!(keys_of(&CollapseConfig::default()), sorted(COLLAPSE));
    }

    #[test]
    fn lists_every_unknown_key() {
        let err = RunConfig::from_json(
            r#"{"trian": {}, "train": {"lr": 0.1, "bogus": 1}, "model": {"arch": {"input": [2],
                "layers": [{"type": "block", "hidden": 3, "out": 2, "widht": 1}]}}}"#,
        )
        .unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert_eq!(list.len(), 3, "{list:?}");
        assert!(list.iter().any(|s| s.starts_with("trian")));
        assert!(list.iter().any(|s| s.starts_with("train.bogus")));
        assert!(list.iter().any(|s| s.starts_with("model.arch.layers[0].widht")));
    }

    #[test]
    fn lists_every_bad_value() {
        let err =
            RunConfig::from_json(r#"{"train": {"lr": -1, "momentum": 2}, "bound": {"deltas": [0]}}"#).unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert_eq!(list.len(), 3, "{list:?}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_json(r#"{"reg": {"lc": 0.2}, "collapse": {"tau": 0.1}}"#).unwrap();
        let t = cfg.effective_train();
        assert_eq!(t.reg.lc, 0.2);
        assert_eq!(t.tau, 0.1);
    }
}
