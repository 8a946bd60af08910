//! The branch networks and their inference entry points.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use soars_core::volume::voxel_count;
use soars_core::{OrganRegistry, Stratum, Volume3D};
use soars_nasnet::checkpoint::Checkpoint;
use soars_nasnet::{build_unet, ArchChoice, DerivedArch, HeadKind, NasUNet, NasUNetConfig, Network, OpKind, Tensor};

use crate::error::{Result, StratError};
use crate::maps::{HeatMap, ProbMap};
use crate::voi::VoiRegion;

/// Intensity window mapped onto [-1, 1]; air saturates at -1.
pub const WINDOW_CENTER: f32 = 300.0;
pub const WINDOW_HALF_WIDTH: f32 = 500.0;

pub fn normalize(v: f32) -> f32 {
    ((v - WINDOW_CENTER) / WINDOW_HALF_WIDTH).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Anchor,
    MidLevel,
    Detector,
    SmallHard,
    /// One network for all 42 organs, the unstratified baseline.
    Single,
}

impl Branch {
    pub const ALL: [Branch; 5] = [Branch::Anchor, Branch::MidLevel, Branch::Detector, Branch::SmallHard, Branch::Single];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Anchor => "anchor",
            Branch::MidLevel => "mid_level",
            Branch::Detector => "detector",
            Branch::SmallHard => "small_hard",
            Branch::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Option<Branch> {
        match s {
            "anchor" => Some(Branch::Anchor),
            "mid" | "mid_level" => Some(Branch::MidLevel),
            "detector" => Some(Branch::Detector),
            "sh" | "small_hard" => Some(Branch::SmallHard),
            "single" | "baseline" => Some(Branch::Single),
            _ => None,
        }
    }

    /// Bundle sub-directory.
    pub fn dir(self) -> &'static str {
        match self {
            Branch::Anchor => "anchor",
            Branch::MidLevel => "mid",
            Branch::Detector => "detector",
            Branch::SmallHard => "sh",
            Branch::Single => "single",
        }
    }

    /// Output channel → registry label. Segmentation branches lead with background.
    pub fn classes(self, r: &OrganRegistry) -> Vec<u16> {
        let with_bg = |labels: Vec<u16>| std::iter::once(0).chain(labels).collect();
        match self {
            Branch::Anchor => with_bg(r.labels(Stratum::Anchor)),
            Branch::MidLevel => with_bg(r.labels(Stratum::MidLevel)),
            Branch::Detector => r.labels(Stratum::SmallHard),
            Branch::SmallHard => with_bg(r.labels(Stratum::SmallHard)),
            Branch::Single => with_bg(r.entries().iter().map(|e| e.label).collect()),
        }
    }

    pub fn needs_anchor(self) -> bool {
        matches!(self, Branch::MidLevel | Branch::Detector)
    }

    pub fn in_channels(self, r: &OrganRegistry) -> usize {
        if self.needs_anchor() {
            1 + Branch::Anchor.classes(r).len()
        } else {
            1
        }
    }

    pub fn head(self) -> HeadKind {
        if self == Branch::Detector {
            HeadKind::Regression
        } else {
            HeadKind::Segmentation
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self { levels: 3, base_channels: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct BranchModel {
    pub branch: Branch,
    pub net: NasUNet<f32>,
    pub classes: Vec<u16>,
    pub in_channels: usize,
    /// `None` while the network is still mixed.
    pub arch: Option<DerivedArch>,
}

/// `model.json` beside each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub branch: Branch,
    pub classes: Vec<u16>,
    pub in_channels: usize,
    pub net: NasUNetConfig,
    pub arch: Option<BTreeMap<String, OpKind>>,
    pub arch_hash: String,
    pub config_hash: String,
    pub epoch: usize,
    pub checkpoint: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn arch_hash(arch: &Option<DerivedArch>) -> String {
    match arch {
        None => "mixed".into(),
        Some(a) => sha256_hex(&serde_json::to_vec(&a.chosen).expect("op map serializes")),
    }
}

impl BranchModel {
    pub fn new(branch: Branch, registry: &OrganRegistry, shape: NetShape, arch: &ArchChoice, seed: u64) -> Result<Self> {
        let classes = branch.classes(registry);
        let in_channels = branch.in_channels(registry);
        let cfg = NasUNetConfig {
            levels: shape.levels,
            base_channels: shape.base_channels,
            ..NasUNetConfig::new(in_channels, classes.len(), branch.head())
        };
        let net = build_unet(&cfg, arch, seed)?;
        let arch = match arch {
            ArchChoice::Mixed => None,
            ArchChoice::Derived(d) => Some(d.clone()),
        };
        Ok(Self { branch, net, classes, in_channels, arch })
    }

    /// Default architecture: a 3×3×3 convolution in every block.
    pub fn default_arch(shape: NetShape) -> DerivedArch {
        let cfg = NasUNetConfig { levels: shape.levels, ..NasUNetConfig::new(1, 1, HeadKind::Regression) };
        DerivedArch::uniform_op(cfg.block_ids(), OpKind::Conv3dK3)
    }

    pub fn manifest(&self, epoch: usize, config_hash: &str) -> ModelManifest {
        ModelManifest {
            branch: self.branch,
            classes: self.classes.clone(),
            in_channels: self.in_channels,
            net: self.net.cfg.clone(),
            arch: self.arch.as_ref().map(|a| a.chosen.clone()),
            arch_hash: arch_hash(&self.arch),
            config_hash: config_hash.to_string(),
            epoch,
            checkpoint: "model.ckpt".into(),
        }
    }

    /// Writes `model.ckpt` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path, ckpt: Checkpoint, manifest: &ModelManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| StratError::io(dir, e))?;
        ckpt.save(&dir.join(&manifest.checkpoint))?;
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(manifest).map_err(|e| StratError::Data(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| StratError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelManifest, Checkpoint)> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| StratError::io(&path, e))?;
        let m: ModelManifest =
            serde_json::from_str(&text).map_err(|e| StratError::Data(format!("{}: {e}", path.display())))?;
        let arch = match &m.arch {
            None => ArchChoice::Mixed,
            Some(chosen) => ArchChoice::Derived(DerivedArch { chosen: chosen.clone() }),
        };
        let mut net: NasUNet<f32> = build_unet(&m.net, &arch, 0)?;
        let ckpt = Checkpoint::load(&dir.join(&m.checkpoint))?;
        ckpt.apply_to(net.store_mut())?;
        let model = Self {
            branch: m.branch,
            net,
            classes: m.classes.clone(),
            in_channels: m.in_channels,
            arch: m.arch.clone().map(|chosen| DerivedArch { chosen }),
        };
        Ok((model, m, ckpt))
    }

    fn expect(&self, branch: Branch) -> Result<()> {
        if self.branch != branch {
            return Err(StratError::Config(format!("expected a {} model, got {}", branch.name(), self.branch.name())));
        }
        Ok(())
    }

    /// Raw network output for a channel-major input over `shape`.
    pub fn run(&self, input: Vec<f32>, shape: [usize; 3]) -> Result<Vec<f32>> {
        let n = voxel_count(shape);
        if input.len() != self.in_channels * n {
            return Err(StratError::Shape(format!(
                "{} model takes {} channels, input has {}",
                self.branch.name(),
                self.in_channels,
                input.len() as f64 / n as f64
            )));
        }
        let t = Tensor::new(vec![1, self.in_channels, shape[0], shape[1], shape[2]], input)?;
        Ok(self.net.predict(t)?.into_data())
    }
}

/// Normalised intensity channel.
pub fn image_channel(x: &Volume3D) -> Vec<f32> {
    x.values().iter().map(|v| normalize(*v)).collect()
}

/// `[X, anchor probabilities]`, channel-major.
pub fn conditioned_input(x: &Volume3D, anchor_probs: &[f32]) -> Vec<f32> {
    let mut v = image_channel(x);
    v.extend_from_slice(anchor_probs);
    v
}

fn check_anchor(x: &Volume3D, anchor: &ProbMap, registry_anchor: usize) -> Result<()> {
    if anchor.shape() != x.shape() || anchor.spacing_mm() != x.spacing_mm() {
        return Err(StratError::Alignment(format!(
            "anchor map grid {:?} @ {:?} mm differs from image grid {:?} @ {:?} mm",
            anchor.shape(),
            anchor.spacing_mm(),
            x.shape(),
            x.spacing_mm()
        )));
    }
    if anchor.classes().len() != registry_anchor {
        return Err(StratError::Shape(format!("anchor map has {} channels, expected {registry_anchor}", anchor.classes().len())));
    }
    Ok(())
}

pub fn predict_anchor(m: &BranchModel, x: &Volume3D) -> Result<ProbMap> {
    m.expect(Branch::Anchor)?;
    let out = m.run(image_channel(x), x.shape())?;
    ProbMap::from_scores(x.shape(), x.spacing_mm(), m.classes.clone(), &out)
}

pub fn predict_single(m: &BranchModel, x: &Volume3D) -> Result<ProbMap> {
    m.expect(Branch::Single)?;
    let out = m.run(image_channel(x), x.shape())?;
    ProbMap::from_scores(x.shape(), x.spacing_mm(), m.classes.clone(), &out)
}

pub fn predict_midlevel(m: &BranchModel, x: &Volume3D, anchor: &ProbMap) -> Result<ProbMap> {
    m.expect(Branch::MidLevel)?;
    check_anchor(x, anchor, m.in_channels - 1)?;
    let out = m.run(conditioned_input(x, anchor.probs()), x.shape())?;
    ProbMap::from_scores(x.shape(), x.spacing_mm(), m.classes.clone(), &out)
}

pub fn predict_detector(m: &BranchModel, x: &Volume3D, anchor: &ProbMap) -> Result<HeatMap> {
    m.expect(Branch::Detector)?;
    check_anchor(x, anchor, m.in_channels - 1)?;
    let out = m.run(conditioned_input(x, anchor.probs()), x.shape())?;
    HeatMap::new(x.shape(), x.spacing_mm(), m.classes.clone(), out)
}

/// Binary map over the VOI: background versus the VOI's organ.
/// Probability that each voxel belongs to `organ`, from a softmax over
/// `classes`. A bilateral twin counts as the organ itself: crops centred on
/// either lens look alike, and laterality already came from the detector.
pub fn voi_foreground(probs: &[f32], classes: &[u16], organ: u16, registry: &OrganRegistry) -> Result<Vec<f32>> {
    let n = probs.len() / classes.len().max(1);
    let at = |l: u16| classes.iter().position(|c| *c == l);
    let c = at(organ).ok_or_else(|| StratError::Config(format!("small-organ model has no class for organ {organ}")))?;
    let twin = registry.mirror_of(organ).and_then(|e| at(e.label));
    Ok((0..n).map(|i| (probs[c * n + i] + twin.map_or(0.0, |t| probs[t * n + i])).min(1.0)).collect())
}

/// Organ-versus-background map over the VOI.
pub fn predict_sh(m: &BranchModel, voi: &VoiRegion) -> Result<ProbMap> {
    m.expect(Branch::SmallHard)?;
    let shape = voi.image.shape();
    let out = m.run(image_channel(&voi.image), shape)?;
    let probs = ProbMap::from_scores(shape, voi.image.spacing_mm(), m.classes.clone(), &out)?;
    let organ = voi_foreground(probs.probs(), &m.classes, voi.organ, &OrganRegistry::canonical())?;
    let mut p: Vec<f32> = organ.iter().map(|v| 1.0 - v).collect();
    p.extend_from_slice(&organ);
    ProbMap::new(shape, voi.image.spacing_mm(), vec![0, voi.organ], p)
}
