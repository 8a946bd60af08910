//! The experiment configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use soars_core::phantom::PhantomSpec;
use soars_nasnet::SearchMode;
use soars_stratified::{Branch, NetShape, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_cases: usize,
    pub split: [f64; 3],
    /// Also write a synthetic dose plan per case.
    pub dose_plans: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_cases: 10, split: [0.6, 0.2, 0.2], dose_plans: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NasConfig {
    pub search_epochs: usize,
    pub lr_weights: f64,
    pub lr_alpha: f64,
    pub mode: SearchMode,
}

impl Default for NasConfig {
    fn default() -> Self {
        Self { search_epochs: 2, lr_weights: 3e-3, lr_alpha: 3e-3, mode: SearchMode::Alternating }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchTrain {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for BranchTrain {
    fn default() -> Self {
        Self { epochs: 20, lr: 3e-3, batch: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub anchor: BranchTrain,
    pub mid_level: BranchTrain,
    pub detector: BranchTrain,
    pub small_hard: BranchTrain,
    pub single: BranchTrain,
    /// Random-crop training for large grids; full volumes when absent.
    pub patch: Option<[usize; 3]>,
}

impl TrainingConfig {
    pub fn get(&self, b: Branch) -> &BranchTrain {
        match b {
            Branch::Anchor => &self.anchor,
            Branch::MidLevel => &self.mid_level,
            Branch::Detector => &self.detector,
            Branch::SmallHard => &self.small_hard,
            Branch::Single => &self.single,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoiExtentSource {
    /// Largest extent seen in the training truth masks.
    #[default]
    TrainMasks,
    /// One extent for every small organ.
    Fixed([usize; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub hd_percentile: f64,
    pub dvh_bin_width_gy: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { hd_percentile: 95.0, dvh_bin_width_gy: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub dataset: DatasetConfig,
    pub nas: NasConfig,
    pub net: NetShape,
    pub training: TrainingConfig,
    pub sigma_vox: f64,
    pub voi_jitter_vox: usize,
    pub voi_extent: VoiExtentSource,
    pub teacher_forcing: bool,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomSpec::default(),
            dataset: DatasetConfig::default(),
            nas: NasConfig::default(),
            net: NetShape::default(),
            training: TrainingConfig::default(),
            sigma_vox: 3.0,
            voi_jitter_vox: 2,
            voi_extent: VoiExtentSource::default(),
            teacher_forcing: false,
            eval: EvalConfig::default(),
        }
    }
}

/// Sets a dotted path such as `training.anchor.epochs` to a JSON value
/// (unparseable values are taken as strings).
fn set_path(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("--set {path}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Config("--set needs a non-empty key".into()))
}

impl ExperimentConfig {
    /// Reads the config file (or the defaults), applies `key=value`
    /// overrides, then the `SOARS_SEED` environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::default()).expect("defaults serialize"),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::Config(format!("--set {o}: expected key=value")))?;
            set_path(&mut doc, k.trim(), v.trim())?;
        }
        let mut cfg: Self = serde_json::from_value(doc).map_err(|e| {
            let origin = path.map(|p| p.display().to_string()).unwrap_or_else(|| "config".into());
            CliError::Config(format!("{origin}: {e}"))
        })?;
        if let Ok(s) = std::env::var("SOARS_SEED") {
            cfg.seed = s.trim().parse().map_err(|_| CliError::Config(format!("SOARS_SEED={s:?} is not an unsigned integer")))?;
        }
        cfg.phantom.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(CliError::Config(format!("{field}: {why}")));
        let s = self.dataset.split;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("dataset.split", "fractions must lie in [0, 1] and sum to 1");
        }
        for (name, v) in [("nas.lr_weights", self.nas.lr_weights), ("nas.lr_alpha", self.nas.lr_alpha), ("sigma_vox", self.sigma_vox)]
        {
            if !(v > 0.0) {
                return bad(name, "must be > 0");
            }
        }
        for b in Branch::ALL {
            let t = self.training.get(b);
            if !(t.lr > 0.0) {
                return bad(&format!("training.{}.lr", b.name()), "must be > 0");
            }
            if t.epochs == 0 || t.batch == 0 {
                return bad(&format!("training.{}", b.name()), "epochs and batch must be > 0");
            }
        }
        if self.training.patch.is_some_and(|p| p.contains(&0)) {
            return bad("training.patch", "extents must be positive");
        }
        if !(self.eval.dvh_bin_width_gy > 0.0) {
            return bad("eval.dvh_bin_width_gy", "must be > 0");
        }
        if !(0.0..=100.0).contains(&self.eval.hd_percentile) {
            return bad("eval.hd_percentile", "must lie in [0, 100]");
        }
        if let VoiExtentSource::Fixed(e) = self.voi_extent {
            if e.iter().any(|v| *v == 0) {
                return bad("voi_extent.fixed", "extents must be positive");
            }
        }
        self.phantom.validate().map_err(|e| CliError::Config(format!("phantom: {e}")))
    }

    pub fn hash(&self) -> String {
        soars_stratified::branch::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn train_config(&self, b: Branch) -> TrainConfig {
        let t = self.training.get(b);
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            net: self.net,
            sigma_vox: self.sigma_vox,
            voi_jitter_vox: self.voi_jitter_vox,
            teacher_forcing: self.teacher_forcing,
            lr_alpha: self.nas.lr_alpha,
            search_mode: self.nas.mode,
            seed: self.seed ^ (b as u64 + 1).wrapping_mul(0x9E37_79B9),
            patch: self.training.patch,
        }
    }

    pub fn search_config(&self, b: Branch) -> TrainConfig {
        TrainConfig { epochs: self.nas.search_epochs.max(1), lr: self.nas.lr_weights, ..self.train_config(b) }
    }
}
