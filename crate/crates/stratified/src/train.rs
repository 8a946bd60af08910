//! Branch training: sample construction, epochs, checkpoints and resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use soars_core::io::{load_mask, load_volume};
use soars_core::phantom::{CaseEntry, DatasetManifest, PhantomCase, Split};
use soars_core::volume::{crop_pad_slice, voxel_count, Shape};
use soars_core::{BoxRegion, LabelMask, OrganRegistry, Stratum, Volume3D};
use soars_nasnet::checkpoint::Checkpoint;
use soars_nasnet::search::eval_loss;
use soars_nasnet::{
    search_step, train_step, Adam, AdamConfig, ArchChoice, Batch, Network, ParamKindTag, SearchMode, SearchState, Target,
    Tensor,
};

use crate::branch::{conditioned_input, image_channel, predict_anchor, Branch, BranchModel, NetShape};
use crate::error::{Result, StratError};
use crate::maps::{gaussian_heatmap, ProbMap};
use crate::voi::{crop_labels, crop_voi, ExtentTable};

/// One case with its truth and true organ centres.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseData {
    pub id: String,
    pub image: Volume3D,
    pub truth: LabelMask,
    pub centers: BTreeMap<u16, [usize; 3]>,
}

impl CaseData {
    pub fn from_phantom(id: impl Into<String>, case: PhantomCase) -> Self {
        Self { id: id.into(), image: case.image, truth: case.truth, centers: case.centers }
    }

    pub fn load(dir: &Path, entry: &CaseEntry) -> Result<Self> {
        let image = load_volume(&DatasetManifest::image_path(dir, entry))?;
        let truth = load_mask(&DatasetManifest::mask_path(dir, entry))?;
        let mut centers = BTreeMap::new();
        for (name, c) in &entry.centers {
            let e = truth
                .registry()
                .by_name(name)
                .ok_or_else(|| StratError::Data(format!("case {}: unknown organ {name} in manifest", entry.id)))?;
            centers.insert(e.label, *c);
        }
        Ok(Self { id: entry.id.clone(), image, truth, centers })
    }

    /// Every case of one split of a dataset directory.
    pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Self>> {
        let manifest = DatasetManifest::load(dir)?;
        manifest.cases(split).map(|e| Self::load(dir, e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub net: NetShape,
    pub sigma_vox: f64,
    /// Uniform per-axis offset applied to true centres when cropping training VOIs.
    pub voi_jitter_vox: usize,
    /// Condition on truth anchors instead of anchor-model outputs during training.
    pub teacher_forcing: bool,
    /// Logit learning rate, used only when the network is mixed.
    pub lr_alpha: f64,
    pub search_mode: SearchMode,
    pub seed: u64,
    /// Train whole-volume branches on random crops of this size instead of
    /// full volumes. Inference always runs on the full grid.
    pub patch: Option<Shape>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch: 2,
            net: NetShape::default(),
            sigma_vox: 3.0,
            voi_jitter_vox: 2,
            teacher_forcing: false,
            lr_alpha: 3e-3,
            search_mode: SearchMode::Alternating,
            seed: 0,
            patch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(StratError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_alpha > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.sigma_vox > 0.0) {
            return bad("sigma_vox must be positive");
        }
        if self.patch.is_some_and(|p| p.contains(&0)) {
            return bad("patch extents must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in curve {
        let val = r.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
        s.push_str(&format!("{},{:.8},{val}\n", r.epoch, r.train_loss));
    }
    s
}

/// Inputs shared by dependent branches.
#[derive(Debug, Clone, Copy, Default)]
pub struct Context<'a> {
    pub anchor: Option<&'a BranchModel>,
    pub extents: Option<&'a ExtentTable>,
}

/// Where the run persists its state.
#[derive(Debug, Clone, Default)]
pub struct Persist {
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BranchModel,
    pub curve: Vec<EpochRecord>,
}

struct Sample {
    input: Vec<f32>,
    shape: Shape,
    target: SampleTarget,
}

enum SampleTarget {
    Labels(Vec<u16>),
    Dense { values: Vec<f32>, weights: Vec<f32> },
}

/// Heat-map values at or above this count as the peak region.
pub const HEAT_FG_THRESHOLD: f32 = 0.1;

/// Per-channel weights giving the peak region and the rest equal total
/// weight, scaled so the mean weight is 1.
pub fn heat_weights(target: &[f32], voxels: usize) -> Vec<f32> {
    let mut w = Vec::with_capacity(target.len());
    for ch in target.chunks(voxels) {
        let fg = ch.iter().filter(|t| **t >= HEAT_FG_THRESHOLD).count();
        let bg = ch.len() - fg;
        let n = ch.len() as f32;
        let (wf, wb) = match (fg, bg) {
            (0, _) | (_, 0) => (1.0, 1.0),
            _ => (0.5 * n / fg as f32, 0.5 * n / bg as f32),
        };
        w.extend(ch.iter().map(|t| if *t >= HEAT_FG_THRESHOLD { wf } else { wb }));
    }
    w
}

fn remap(labels: &[u16], classes: &[u16]) -> Vec<u16> {
    let mut lut = vec![0u16; labels.iter().copied().max().unwrap_or(0) as usize + 1];
    for (k, l) in classes.iter().enumerate() {
        if (*l as usize) < lut.len() {
            lut[*l as usize] = k as u16;
        }
    }
    labels.iter().map(|l| lut[*l as usize]).collect()
}

fn anchor_channels(case: &CaseData, ctx: &Context, teacher: bool, registry: &OrganRegistry) -> Result<Vec<f32>> {
    if teacher {
        let classes = Branch::Anchor.classes(registry);
        let m = ProbMap::one_hot(case.image.shape(), case.image.spacing_mm(), classes, case.truth.labels())?;
        return Ok(m.probs().to_vec());
    }
    let anchor = ctx.anchor.ok_or_else(|| StratError::Config("this branch needs a trained anchor model".into()))?;
    Ok(predict_anchor(anchor, &case.image)?.probs().to_vec())
}

/// Samples that do not change between epochs (everything except VOIs).
fn static_samples(
    branch: Branch,
    cases: &[CaseData],
    ctx: &Context,
    cfg: &TrainConfig,
    registry: &OrganRegistry,
    teacher: bool,
) -> Result<Vec<Sample>> {
    let classes = branch.classes(registry);
    cases
        .iter()
        .map(|c| {
            let shape = c.image.shape();
            Ok(match branch {
                Branch::Anchor | Branch::Single => Sample {
                    input: image_channel(&c.image),
                    shape,
                    target: SampleTarget::Labels(remap(c.truth.labels(), &classes)),
                },
                Branch::MidLevel => Sample {
                    input: conditioned_input(&c.image, &anchor_channels(c, ctx, teacher, registry)?),
                    shape,
                    target: SampleTarget::Labels(remap(c.truth.labels(), &classes)),
                },
                Branch::Detector => {
                    let mut target = Vec::with_capacity(classes.len() * c.image.values().len());
                    for organ in &classes {
                        let center = c
                            .centers
                            .get(organ)
                            .ok_or_else(|| StratError::Data(format!("case {} has no centre for organ {organ}", c.id)))?;
                        target.extend(gaussian_heatmap(*center, cfg.sigma_vox, shape));
                    }
                    let weights = heat_weights(&target, c.image.values().len());
                    Sample {
                        input: conditioned_input(&c.image, &anchor_channels(c, ctx, teacher, registry)?),
                        shape,
                        target: SampleTarget::Dense { values: target, weights },
                    }
                }
                Branch::SmallHard => unreachable!("VOI samples are drawn per epoch"),
            })
        })
        .collect()
}

fn voi_samples(
    cases: &[CaseData],
    extents: &ExtentTable,
    jitter: usize,
    registry: &OrganRegistry,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Sample>> {
    let classes = Branch::SmallHard.classes(registry);
    let organs = registry.labels(Stratum::SmallHard);
    let mut rng = rng;
    let mut out = Vec::new();
    for c in cases {
        let shape = c.image.shape();
        for organ in &organs {
            let true_c = *c
                .centers
                .get(organ)
                .ok_or_else(|| StratError::Data(format!("case {} has no centre for organ {organ}", c.id)))?;
            let center: [usize; 3] = match rng.as_deref_mut() {
                Some(r) if jitter > 0 => std::array::from_fn(|a| {
                    let j = jitter as i64;
                    (true_c[a] as i64 + r.random_range(-j..=j)).clamp(0, shape[a] as i64 - 1) as usize
                }),
                _ => true_c,
            };
            let voi = crop_voi(&c.image, center, extents.get(*organ)?, *organ, &c.id)?;
            let labels = crop_labels(&c.truth, &voi.region);
            out.push(Sample {
                input: image_channel(&voi.image),
                shape: voi.image.shape(),
                target: SampleTarget::Labels(remap(&labels, &classes)),
            });
        }
    }
    Ok(out)
}

/// A random box of `patch` (clamped to the sample) cut from every channel.
fn random_patch(s: &Sample, patch: Shape, rng: &mut ChaCha8Rng) -> Sample {
    let extent: Shape = std::array::from_fn(|a| patch[a].min(s.shape[a]));
    let lo: [i64; 3] = std::array::from_fn(|a| rng.random_range(0..=s.shape[a] - extent[a]) as i64);
    let region = BoxRegion { lo, hi: std::array::from_fn(|a| lo[a] + extent[a] as i64) };
    let n = voxel_count(s.shape);
    let cut = |v: &[f32]| -> Vec<f32> { v.chunks(n).flat_map(|ch| crop_pad_slice(ch, s.shape, &region, 0.0)).collect() };
    let target = match &s.target {
        SampleTarget::Labels(l) => SampleTarget::Labels(crop_pad_slice(l, s.shape, &region, 0)),
        SampleTarget::Dense { values, weights } => SampleTarget::Dense { values: cut(values), weights: cut(weights) },
    };
    Sample { input: cut(&s.input), shape: extent, target }
}

/// `present_dice` scores Dice only on the classes a batch contains, for crops
/// that hold one organ out of many.
fn to_batch(samples: &[&Sample], channels: usize, present_dice: bool) -> Result<Batch<f32>> {
    let shape = samples[0].shape;
    let mut input = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for s in samples {
        input.extend_from_slice(&s.input);
        match &s.target {
            SampleTarget::Labels(l) => labels.extend_from_slice(l),
            SampleTarget::Dense { values: v, weights: w } => {
                values.extend_from_slice(v);
                weights.extend_from_slice(w);
            }
        }
    }
    let target = match (values.is_empty(), present_dice) {
        (true, false) => Target::Labels(labels),
        (true, true) => Target::PresentLabels(labels),
        (false, _) => Target::Weighted { values, weights },
    };
    Ok(Batch { input: Tensor::new(vec![samples.len(), channels, shape[0], shape[1], shape[2]], input)?, target })
}

/// Shuffled batches; only samples of equal shape share a batch.
fn batches<'a>(samples: &'a [Sample], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a Sample>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut buckets: BTreeMap<Shape, Vec<&Sample>> = BTreeMap::new();
    for i in order {
        buckets.entry(samples[i].shape).or_default().push(&samples[i]);
    }
    let mut out: Vec<Vec<&Sample>> =
        buckets.into_values().flat_map(|b| b.chunks(size).map(|c| c.to_vec()).collect::<Vec<_>>()).collect();
    out.shuffle(rng);
    out
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    branch: Branch,
    epochs_done: usize,
    curve: Vec<EpochRecord>,
}

/// Trains one branch. A mixed `arch` runs the architecture search instead of
/// plain training: weights step on training batches, logits on validation batches.
pub fn train_branch(
    branch: Branch,
    train: &[CaseData],
    val: &[CaseData],
    ctx: Context,
    cfg: &TrainConfig,
    arch: &ArchChoice,
    persist: &Persist,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(StratError::Data("no training cases".into()));
    }
    let registry = train[0].truth.registry().clone();
    if branch.needs_anchor() && ctx.anchor.is_none() && !cfg.teacher_forcing {
        return Err(StratError::Config(format!("{} training needs an anchor model", branch.name())));
    }
    let extents = match (branch, ctx.extents) {
        (Branch::SmallHard, Some(e)) => Some(e.clone()),
        (Branch::SmallHard, None) => {
            Some(ExtentTable::measure(train.iter().map(|c| &c.truth), &registry.labels(Stratum::SmallHard))?)
        }
        _ => None,
    };
    let mut model = BranchModel::new(branch, &registry, cfg.net, arch, cfg.seed)?;
    let mixed = matches!(arch, ArchChoice::Mixed);
    let mut state = SearchState::new(cfg.lr, cfg.lr_alpha);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), ParamKindTag::Weight);
    let mut curve = Vec::new();
    let mut start = 0;
    if let Some(dir) = &persist.resume_from {
        let (loaded, manifest, ckpt) = BranchModel::load(dir)?;
        if manifest.branch != branch || loaded.net.cfg != model.net.cfg {
            return Err(StratError::Config(format!("{} does not hold a compatible {} model", dir.display(), branch.name())));
        }
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| StratError::Data(format!("{}: checkpoint metadata: {e}", dir.display())))?;
        model = loaded;
        start = meta.epochs_done;
        curve = meta.curve;
        if mixed {
            state.weights = ckpt.optimizers.get("weights").cloned().unwrap_or(state.weights);
            state.arch = ckpt.optimizers.get("arch").cloned().unwrap_or(state.arch);
        } else if let Some(o) = ckpt.optimizers.get("weights") {
            opt = o.clone();
        }
    }

    let stat_train = match branch {
        Branch::SmallHard => None,
        _ => Some(static_samples(branch, train, &ctx, cfg, &registry, cfg.teacher_forcing)?),
    };
    // Validation always conditions on model outputs, as at inference.
    let val_samples = match branch {
        Branch::SmallHard => voi_samples(val, extents.as_ref().expect("set above"), 0, &registry, None)?,
        _ if branch.needs_anchor() && ctx.anchor.is_none() => {
            static_samples(branch, val, &ctx, cfg, &registry, true)?
        }
        _ => static_samples(branch, val, &ctx, cfg, &registry, false)?,
    };
    let channels = model.in_channels;
    let present = branch == Branch::SmallHard;

    for epoch in start..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let drawn;
        let samples: &[Sample] = match &stat_train {
            Some(s) => match cfg.patch {
                Some(p) => {
                    drawn = s.iter().map(|x| random_patch(x, p, &mut rng)).collect::<Vec<_>>();
                    &drawn
                }
                None => s,
            },
            None => {
                drawn = voi_samples(train, extents.as_ref().expect("set above"), cfg.voi_jitter_vox, &registry, Some(&mut rng))?;
                &drawn
            }
        };
        let bs = batches(samples, cfg.batch, &mut rng);
        let val_pool: &[Sample] = if val_samples.is_empty() { samples } else { &val_samples };
        let mut total = 0.0;
        for (k, b) in bs.iter().enumerate() {
            let batch = to_batch(b, channels, present)?;
            let loss = if mixed {
                let v = &val_pool[(epoch * bs.len() + k) % val_pool.len()];
                let vb = to_batch(&[v], channels, present)?;
                search_step(&mut model.net, &batch, &vb, &mut state, cfg.search_mode)?.train
            } else {
                train_step(&mut model.net, &batch, &mut opt)?
            };
            total += loss;
        }
        let train_loss = total / bs.len() as f64;
        let val_loss = if val_samples.is_empty() {
            None
        } else {
            let mut s = 0.0;
            for v in &val_samples {
                s += eval_loss(&model.net, &to_batch(&[v], channels, present)?)?;
            }
            Some(s / val_samples.len() as f64)
        };
        curve.push(EpochRecord { epoch: epoch + 1, train_loss, val_loss });
        if let Some(dir) = &persist.out_dir {
            let meta = CheckpointMeta { branch, epochs_done: epoch + 1, curve: curve.clone() };
            let mut ckpt = Checkpoint::from_store(model.net.store(), serde_json::to_value(&meta).expect("meta serializes"));
            ckpt = if mixed {
                ckpt.with_optimizer("weights", &state.weights).with_optimizer("arch", &state.arch)
            } else {
                ckpt.with_optimizer("weights", &opt)
            };
            model.save(dir, ckpt, &model.manifest(epoch + 1, &persist.config_hash))?;
            let path = dir.join("curve.csv");
            std::fs::write(&path, curve_csv(&curve)).map_err(|e| StratError::io(&path, e))?;
            if let Some(e) = &extents {
                let path = dir.join("voi_extents.json");
                let text = serde_json::to_string_pretty(e).expect("extents serialize");
                std::fs::write(&path, text).map_err(|e| StratError::io(&path, e))?;
            }
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Moving average of the training loss with the given window.
pub fn moving_average(curve: &[EpochRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    curve
        .windows(w.min(curve.len()).max(1))
        .map(|c| c.iter().map(|r| r.train_loss).sum::<f64>() / c.len() as f64)
        .collect()
}
