//! The frozen three-branch pipeline and its bundle directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use soars_core::{LabelMask, OrganRegistry, Stratum, Volume3D};
use soars_nasnet::checkpoint::Checkpoint;
use soars_nasnet::Network;

use crate::branch::{
    predict_anchor, predict_detector, predict_midlevel, predict_sh, sha256_hex, Branch, BranchModel, WINDOW_CENTER,
    WINDOW_HALF_WIDTH,
};
use crate::error::{Result, StratError};
use crate::fusion::{fuse_predictions, FUSION_PRIORITY};
use crate::maps::{detect_centers, Detection, ProbMap};
use crate::voi::{crop_voi, ExtentTable, VoiRegion};

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub anchor: BranchModel,
    pub mid: BranchModel,
    pub detector: BranchModel,
    pub sh: BranchModel,
    pub extents: ExtentTable,
    pub sigma_vox: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub mask: LabelMask,
    pub anchor: ProbMap,
    pub mid: ProbMap,
    pub detections: BTreeMap<u16, Detection>,
    pub vois: Vec<(VoiRegion, ProbMap)>,
}

/// `pipeline.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub registry_hash: String,
    /// Organ name → maximum extent in voxels.
    pub voi_extents: BTreeMap<String, [usize; 3]>,
    pub sigma_vox: f64,
    pub fusion_priority: Vec<Stratum>,
    pub window: [f32; 2],
    pub config_hash: String,
}

pub fn registry_hash(r: &OrganRegistry) -> String {
    sha256_hex(&serde_json::to_vec(r).expect("registry serializes"))
}

impl Pipeline {
    pub fn predict(&self, image: &Volume3D, case_id: &str) -> Result<PipelineOutput> {
        let registry = OrganRegistry::canonical();
        let anchor = predict_anchor(&self.anchor, image)?;
        let mid = predict_midlevel(&self.mid, image, &anchor)?;
        let heat = predict_detector(&self.detector, image, &anchor)?;
        let detections = detect_centers(&heat);
        let mut vois = Vec::with_capacity(detections.len());
        for (organ, d) in &detections {
            let voi = crop_voi(image, d.center, self.extents.get(*organ)?, *organ, case_id)?;
            let p = predict_sh(&self.sh, &voi)?;
            vois.push((voi, p));
        }
        let mask = fuse_predictions(&anchor, &mid, &vois, &registry)?;
        Ok(PipelineOutput { mask, anchor, mid, detections, vois })
    }

    pub fn manifest(&self, config_hash: &str) -> PipelineManifest {
        let r = OrganRegistry::canonical();
        PipelineManifest {
            registry_hash: registry_hash(&r),
            voi_extents: self
                .extents
                .0
                .iter()
                .map(|(l, e)| (r.get(*l).map(|x| x.name.clone()).unwrap_or_else(|| l.to_string()), *e))
                .collect(),
            sigma_vox: self.sigma_vox,
            fusion_priority: FUSION_PRIORITY.to_vec(),
            window: [WINDOW_CENTER, WINDOW_HALF_WIDTH],
            config_hash: config_hash.to_string(),
        }
    }

    /// Writes `anchor/`, `mid/`, `detector/`, `sh/` and `pipeline.json`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        for m in [&self.anchor, &self.mid, &self.detector, &self.sh] {
            let ckpt = Checkpoint::from_store(m.net.store(), serde_json::Value::Null);
            m.save(&dir.join(m.branch.dir()), ckpt, &m.manifest(0, config_hash))?;
        }
        let path = dir.join("pipeline.json");
        let text = serde_json::to_string_pretty(&self.manifest(config_hash)).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| StratError::io(&path, e))
    }

    /// Assembles a bundle from four trained model directories.
    pub fn assemble(dir: &Path, models: [&Path; 4], extents: ExtentTable, sigma_vox: f64, config_hash: &str) -> Result<Self> {
        let load = |p: &Path, b: Branch| -> Result<BranchModel> {
            let (m, _, _) = BranchModel::load(p)?;
            if m.branch != b {
                return Err(StratError::Config(format!("{} holds a {} model, expected {}", p.display(), m.branch.name(), b.name())));
            }
            Ok(m)
        };
        let p = Self {
            anchor: load(models[0], Branch::Anchor)?,
            mid: load(models[1], Branch::MidLevel)?,
            detector: load(models[2], Branch::Detector)?,
            sh: load(models[3], Branch::SmallHard)?,
            extents,
            sigma_vox,
        };
        p.save(dir, config_hash)?;
        Ok(p)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("pipeline.json");
        let text = std::fs::read_to_string(&path).map_err(|e| StratError::io(&path, e))?;
        let m: PipelineManifest =
            serde_json::from_str(&text).map_err(|e| StratError::Data(format!("{}: {e}", path.display())))?;
        let r = OrganRegistry::canonical();
        if m.registry_hash != registry_hash(&r) {
            return Err(StratError::Data(format!("{}: organ registry differs from this build", path.display())));
        }
        let mut extents = BTreeMap::new();
        for (name, e) in &m.voi_extents {
            let entry = r.by_name(name).ok_or_else(|| StratError::Data(format!("{}: unknown organ {name}", path.display())))?;
            extents.insert(entry.label, *e);
        }
        let load = |b: Branch| -> Result<BranchModel> {
            let (model, _, _) = BranchModel::load(&dir.join(b.dir()))?;
            if model.branch != b {
                return Err(StratError::Data(format!("{}/{} holds a {} model", dir.display(), b.dir(), model.branch.name())));
            }
            Ok(model)
        };
        Ok(Self {
            anchor: load(Branch::Anchor)?,
            mid: load(Branch::MidLevel)?,
            detector: load(Branch::Detector)?,
            sh: load(Branch::SmallHard)?,
            extents: ExtentTable(extents),
            sigma_vox: m.sigma_vox,
        })
    }
}

/// Mid-level prediction with every anchor channel set to zero.
pub fn predict_midlevel_unconditioned(m: &BranchModel, x: &Volume3D) -> Result<ProbMap> {
    if m.branch != Branch::MidLevel {
        return Err(StratError::Config(format!("expected a mid_level model, got {}", m.branch.name())));
    }
    let n = x.values().len();
    let mut input = crate::branch::image_channel(x);
    input.extend(std::iter::repeat_n(0.0, (m.in_channels - 1) * n));
    let out = m.run(input, x.shape())?;
    ProbMap::from_scores(x.shape(), x.spacing_mm(), m.classes.clone(), &out)
}
