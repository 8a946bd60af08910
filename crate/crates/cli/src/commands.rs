//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use soars_core::dosimetry::{align_dose, dose_row, dvh, DoseRow};
use soars_core::io::{load_mask, load_volume, save_mask, save_volume};
use soars_core::metrics::{aggregate, evaluate_case, MetricsReport, SegRow};
use soars_core::phantom::{make_dataset, Split};
use soars_core::{LabelMask, OrganRegistry, Stratum, Volume3D, VolumeKind};
use soars_nasnet::arch::{load_arch_json, save_arch_json};
use soars_nasnet::{ArchChoice, Network};
use soars_stratified::train::CaseData;
use soars_stratified::{
    predict_single, train_branch, Branch, BranchModel, Context, Detection, ExtentTable, Persist, Pipeline, TrainConfig,
};

use crate::config::{ExperimentConfig, VoiExtentSource};
use crate::data::CaseDir;
use crate::dose_gen::synthetic_dose;
use crate::error::{CliError, Result};
use crate::manifest::{read_json, write_json, Recorder};
use crate::parallel::par_map;

/// `<dir>/<file_stem>.` prefix and directory for the manifest of a file output.
fn beside(file: &Path) -> (PathBuf, String) {
    let dir = file.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| ".".into());
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (dir, format!("{stem}."))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn record_pair(rec: &mut Recorder, base: &Path) {
    rec.output(&base.with_extension("json"));
    rec.output(&base.with_extension("raw"));
}

pub fn phantom_gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut rec = Recorder::start("phantom-gen", cfg, out, &[])?;
    rec.stage("phantoms");
    let manifest = make_dataset(&cfg.phantom, cfg.dataset.n_cases, cfg.dataset.split, out)?;
    rec.output(&out.join("manifest.json"));
    let dir = CaseDir::open(out)?;
    for c in &manifest.cases {
        record_pair(&mut rec, &dir.image_path(&c.id));
        record_pair(&mut rec, &dir.mask_path(&c.id));
    }
    if cfg.dataset.dose_plans {
        rec.stage("dose_plans");
        for c in &manifest.cases {
            let image = load_volume(&dir.image_path(&c.id))?;
            let dose = synthetic_dose(&image, c.seed)?;
            let base = dir.dose_path(&c.id);
            save_volume(&dose, &base)?;
            record_pair(&mut rec, &base);
        }
    }
    rec.finish(cfg, "")?;
    Ok(())
}

fn load_split(data: &Path, split: Split) -> Result<Vec<CaseData>> {
    Ok(CaseData::load_split(data, split)?)
}

fn load_anchor(path: Option<&Path>) -> Result<Option<BranchModel>> {
    let Some(p) = path else { return Ok(None) };
    let (m, _, _) = BranchModel::load(p)?;
    if m.branch != Branch::Anchor {
        return Err(CliError::Config(format!("--anchor {}: holds a {} model", p.display(), m.branch.name())));
    }
    Ok(Some(m))
}

fn extent_table(cfg: &ExperimentConfig) -> Option<ExtentTable> {
    match cfg.voi_extent {
        VoiExtentSource::TrainMasks => None,
        VoiExtentSource::Fixed(e) => {
            let r = OrganRegistry::canonical();
            Some(ExtentTable(r.labels(Stratum::SmallHard).into_iter().map(|l| (l, e)).collect()))
        }
    }
}

fn parse_branch(s: &str) -> Result<Branch> {
    Branch::parse(s).ok_or_else(|| {
        CliError::Config(format!("--branch {s}: expected one of anchor, mid_level, detector, small_hard, single"))
    })
}

pub struct SearchArgs<'a> {
    pub data: &'a Path,
    pub branch: &'a str,
    pub out: &'a Path,
    pub anchor: Option<&'a Path>,
}

pub fn search(cfg: &ExperimentConfig, a: SearchArgs) -> Result<()> {
    let branch = parse_branch(a.branch)?;
    let (root, prefix) = beside(a.out);
    create_dir(&root)?;
    let mut inputs = vec![a.data];
    inputs.extend(a.anchor);
    let mut rec = Recorder::start("search", cfg, &root, &inputs)?;
    rec.stage("load");
    let train = load_split(a.data, Split::Train)?;
    let val = load_split(a.data, Split::Val)?;
    let anchor = load_anchor(a.anchor)?;
    let extents = extent_table(cfg);
    let mut tcfg = cfg.search_config(branch);
    // Without an anchor model, dependent branches condition on the truth.
    if branch.needs_anchor() && anchor.is_none() {
        tcfg.teacher_forcing = true;
    }
    rec.stage("search");
    let ctx = Context { anchor: anchor.as_ref(), extents: extents.as_ref() };
    let outcome = train_branch(branch, &train, &val, ctx, &tcfg, &ArchChoice::Mixed, &Persist::default())?;
    save_arch_json(a.out, &outcome.model.net.arch_params())?;
    rec.output(a.out);
    let curve = root.join(format!("{prefix}curve.csv"));
    std::fs::write(&curve, soars_stratified::train::curve_csv(&outcome.curve)).map_err(|e| CliError::io(&curve, e))?;
    rec.output(&curve);
    rec.finish(cfg, &prefix)?;
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub branch: &'a str,
    pub arch: Option<&'a Path>,
    pub out: &'a Path,
    pub anchor: Option<&'a Path>,
    pub resume: bool,
}

pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

pub fn train(cfg: &ExperimentConfig, a: TrainArgs) -> Result<()> {
    let branch = parse_branch(a.branch)?;
    create_dir(a.out)?;
    let mut inputs = vec![a.data];
    inputs.extend(a.arch);
    inputs.extend(a.anchor);
    let mut rec = Recorder::start("train", cfg, a.out, &inputs)?;
    rec.stage("load");
    let choice = match a.arch {
        Some(p) => ArchChoice::Derived(load_arch_json(p)?.1),
        None => ArchChoice::Derived(BranchModel::default_arch(cfg.net)),
    };
    let train = load_split(a.data, Split::Train)?;
    let val = load_split(a.data, Split::Val)?;
    let anchor = load_anchor(a.anchor)?;
    let extents = extent_table(cfg);
    let tcfg = cfg.train_config(branch);
    if a.resume && !a.out.join("model.ckpt").is_file() {
        return Err(CliError::Io(format!("--resume: {} has no model.ckpt", a.out.display())));
    }
    rec.stage("train");
    let persist = Persist {
        out_dir: Some(a.out.to_path_buf()),
        resume_from: a.resume.then(|| a.out.to_path_buf()),
        config_hash: cfg.hash(),
    };
    let ctx = Context { anchor: anchor.as_ref(), extents: extents.as_ref() };
    train_branch(branch, &train, &val, ctx, &tcfg, &choice, &persist)?;
    let tc = a.out.join(TRAIN_CONFIG_FILE);
    write_json(&tc, &tcfg)?;
    for f in ["model.ckpt", "model.json", "curve.csv", "voi_extents.json", TRAIN_CONFIG_FILE] {
        let p = a.out.join(f);
        if p.is_file() {
            rec.output(&p);
        }
    }
    rec.finish(cfg, "")?;
    Ok(())
}

enum Predictor {
    Staged(Box<Pipeline>),
    Single(Box<BranchModel>),
}

/// Loads `pipeline.json`, or builds it from `anchor/ mid/ detector/ sh/`
/// model directories, or falls back to a single-model baseline.
fn open_predictor(dir: &Path, rec: &mut Recorder) -> Result<Predictor> {
    if dir.join("pipeline.json").is_file() {
        return Ok(Predictor::Staged(Box::new(Pipeline::load(dir)?)));
    }
    let staged = [Branch::Anchor, Branch::MidLevel, Branch::Detector, Branch::SmallHard];
    if staged.iter().all(|b| dir.join(b.dir()).join("model.json").is_file()) {
        let load = |b: Branch| -> Result<BranchModel> {
            let p = dir.join(b.dir());
            let (m, _, _) = BranchModel::load(&p)?;
            if m.branch != b {
                return Err(CliError::Data(format!("{}: holds a {} model", p.display(), m.branch.name())));
            }
            Ok(m)
        };
        let sh_dir = dir.join(Branch::SmallHard.dir());
        let extents: ExtentTable = read_json(&sh_dir.join("voi_extents.json"))?;
        let det_cfg: TrainConfig = read_json(&dir.join(Branch::Detector.dir()).join(TRAIN_CONFIG_FILE))?;
        let detector = load(Branch::Detector)?;
        let p = Pipeline {
            anchor: load(Branch::Anchor)?,
            mid: load(Branch::MidLevel)?,
            sh: load(Branch::SmallHard)?,
            detector,
            extents,
            sigma_vox: det_cfg.sigma_vox,
        };
        let (_, det_manifest, _) = BranchModel::load(&dir.join(Branch::Detector.dir()))?;
        let path = dir.join("pipeline.json");
        write_json(&path, &p.manifest(&det_manifest.config_hash))?;
        rec.output(&path);
        return Ok(Predictor::Staged(Box::new(p)));
    }
    for candidate in [dir.join(Branch::Single.dir()), dir.to_path_buf()] {
        if candidate.join("model.json").is_file() {
            let (m, _, _) = BranchModel::load(&candidate)?;
            if m.branch == Branch::Single {
                return Ok(Predictor::Single(Box::new(m)));
            }
        }
    }
    Err(CliError::Data(format!(
        "{}: no pipeline.json, no anchor/mid/detector/sh model directories and no single-model baseline",
        dir.display()
    )))
}

pub struct PredictArgs<'a> {
    pub pipeline: &'a Path,
    pub cases: &'a Path,
    pub out: &'a Path,
    pub split: Option<Split>,
    pub jobs: usize,
}

#[derive(Serialize)]
struct CaseDetections {
    case: String,
    detections: BTreeMap<String, Detection>,
}

pub fn predict(cfg: &ExperimentConfig, a: PredictArgs) -> Result<()> {
    create_dir(a.out)?;
    let mut rec = Recorder::start("predict", cfg, a.out, &[a.pipeline, a.cases])?;
    rec.stage("load");
    let predictor = open_predictor(a.pipeline, &mut rec)?;
    let dir = CaseDir::open(a.cases)?;
    let ids = dir.ids(a.split, "")?;
    if ids.is_empty() {
        return Err(CliError::Data(format!("{}: no cases to predict", a.cases.display())));
    }
    rec.stage("predict");
    let registry = OrganRegistry::canonical();
    let results = par_map(&ids, a.jobs, |id| -> Result<Option<CaseDetections>> {
        let image = load_volume(&dir.image_path(id))?;
        let (mask, det) = match &predictor {
            Predictor::Staged(p) => {
                let o = p.predict(&image, id)?;
                let det = o
                    .detections
                    .iter()
                    .map(|(l, d)| (registry.get(*l).map(|e| e.name.clone()).unwrap_or_else(|| l.to_string()), *d))
                    .collect();
                (o.mask, Some(CaseDetections { case: id.clone(), detections: det }))
            }
            Predictor::Single(m) => {
                let probs = predict_single(m, &image)?;
                let labels = probs.argmax_labels();
                (LabelMask::new(image.shape(), image.spacing_mm(), labels, registry.clone())?, None)
            }
        };
        save_mask(&mask, &a.out.join(format!("{id}_mask")))?;
        Ok(det)
    })?;
    for id in &ids {
        record_pair(&mut rec, &a.out.join(format!("{id}_mask")));
    }
    let dets: Vec<CaseDetections> = results.into_iter().flatten().collect();
    if !dets.is_empty() {
        let p = a.out.join("detections.json");
        write_json(&p, &dets)?;
        rec.output(&p);
    }
    rec.finish(cfg, "")?;
    Ok(())
}

/// `name=dir` or a bare `dir` named after its last component.
pub fn parse_sets(list: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, path) = match item.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(item);
                let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| item.to_string());
                (name, p)
            }
        };
        if out.iter().any(|(n, _)| *n == name) {
            return Err(CliError::Config(format!("set name {name} is used twice")));
        }
        out.push((name, path));
    }
    if out.is_empty() {
        return Err(CliError::Config("no prediction sets given".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub kind: String,
    pub config_hash: String,
    pub hd_percentile: f64,
    pub sets: Vec<String>,
    #[serde(flatten)]
    pub report: MetricsReport,
}

pub struct EvalSegArgs<'a> {
    pub pred: &'a str,
    pub reference: &'a Path,
    pub out: &'a Path,
    pub jobs: usize,
}

pub fn eval_seg(cfg: &ExperimentConfig, a: EvalSegArgs) -> Result<SegReport> {
    let sets = parse_sets(a.pred)?;
    let (root, prefix) = beside(a.out);
    create_dir(&root)?;
    let mut inputs: Vec<&Path> = sets.iter().map(|(_, p)| p.as_path()).collect();
    inputs.push(a.reference);
    let mut rec = Recorder::start("eval-seg", cfg, &root, &inputs)?;
    rec.stage("evaluate");
    let reference = CaseDir::open(a.reference)?;
    let mut jobs = Vec::new();
    for (name, dir) in &sets {
        let d = CaseDir::open(dir)?;
        let ids = d.ids(None, "_mask")?;
        if ids.is_empty() {
            return Err(CliError::Data(format!("{}: no <case>_mask volumes", dir.display())));
        }
        for id in ids {
            jobs.push((name.clone(), d.mask_path(&id), id));
        }
    }
    let hd_q = cfg.eval.hd_percentile;
    let rows: Vec<Vec<SegRow>> = par_map(&jobs, a.jobs, |(set, pred_path, id)| {
        let ref_path = reference.mask_path(id);
        if !ref_path.with_extension("json").is_file() {
            return Err(CliError::Data(format!("case {id} of set {set}: no reference mask at {}", ref_path.display())));
        }
        let pred = load_mask(pred_path)?;
        let truth = load_mask(&ref_path)?;
        Ok(evaluate_case(&pred, &truth, id, set, hd_q)?)
    })?;
    let rows: Vec<SegRow> = rows.into_iter().flatten().collect();
    let names: Vec<String> = sets.iter().map(|(n, _)| n.clone()).collect();
    let compare = (names.len() >= 2).then(|| (names[0].as_str(), names[1].as_str()));
    let mut report = aggregate(rows.clone(), compare);
    for other in names.iter().skip(2) {
        report.paired.extend(aggregate(rows.clone(), Some((&names[0], other))).paired);
    }
    let out = SegReport { kind: "segmentation".into(), config_hash: cfg.hash(), hd_percentile: hd_q, sets: names, report };
    write_json(a.out, &out)?;
    rec.output(a.out);
    rec.finish(cfg, &prefix)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseSummary {
    pub set: String,
    pub group: String,
    pub n: usize,
    pub mean_abs_diff_mean_pct: Option<f64>,
    pub mean_abs_diff_max_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseReport {
    pub kind: String,
    pub config_hash: String,
    pub bin_width_gy: f64,
    pub sets: Vec<String>,
    pub rows: Vec<DoseRow>,
    pub summary: Vec<DoseSummary>,
    pub warnings: Vec<String>,
}

pub const REFERENCE_SET: &str = "reference";

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn summarize_dose(rows: &[DoseRow], registry: &OrganRegistry) -> Vec<DoseSummary> {
    let mut groups: BTreeMap<(String, String), Vec<&DoseRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.set.clone(), r.organ.clone())).or_default().push(r);
        if let Some(e) = registry.by_name(&r.organ) {
            groups.entry((r.set.clone(), e.stratum.name().to_string())).or_default().push(r);
        }
        groups.entry((r.set.clone(), "all".into())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((set, group), rs)| DoseSummary {
            n: rs.len(),
            mean_abs_diff_mean_pct: mean_of(rs.iter().map(|r| r.abs_diff_mean_pct)),
            mean_abs_diff_max_pct: mean_of(rs.iter().map(|r| r.abs_diff_max_pct)),
            set,
            group,
        })
        .collect()
}

pub struct EvalDoseArgs<'a> {
    pub dose_dir: &'a Path,
    pub reference: &'a Path,
    pub sets: &'a str,
    pub out: &'a Path,
    pub jobs: usize,
}

fn dvh_csv(c: &soars_core::dosimetry::DvhCurve) -> String {
    let mut s = String::from("dose_gy,volume_fraction\n");
    for (d, v) in c.dose_gy.iter().zip(&c.volume_fraction) {
        s.push_str(&format!("{d},{v}\n"));
    }
    s
}

pub fn eval_dose(cfg: &ExperimentConfig, a: EvalDoseArgs) -> Result<DoseReport> {
    let sets = parse_sets(a.sets)?;
    if sets.iter().any(|(n, _)| n == REFERENCE_SET) {
        return Err(CliError::Config(format!("set name {REFERENCE_SET} is reserved")));
    }
    let (root, prefix) = beside(a.out);
    create_dir(&root)?;
    let mut inputs: Vec<&Path> = sets.iter().map(|(_, p)| p.as_path()).collect();
    inputs.extend([a.dose_dir, a.reference]);
    let mut rec = Recorder::start("eval-dose", cfg, &root, &inputs)?;
    rec.stage("dose");
    let reference = CaseDir::open(a.reference)?;
    let doses = CaseDir::open(a.dose_dir)?;
    let set_dirs: Vec<(String, CaseDir)> =
        sets.iter().map(|(n, p)| Ok((n.clone(), CaseDir::open(p)?))).collect::<Result<_>>()?;
    let ids: Vec<String> = reference
        .ids(None, "_mask")?
        .into_iter()
        .filter(|id| doses.dose_path(id).with_extension("json").is_file())
        .collect();
    if ids.is_empty() {
        return Err(CliError::Data(format!(
            "no case has both a reference mask in {} and a dose plan in {}",
            a.reference.display(),
            a.dose_dir.display()
        )));
    }
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dose".into());
    let dvh_root = root.join(format!("{stem}_dvh"));
    let bin = cfg.eval.dvh_bin_width_gy;
    let registry = OrganRegistry::canonical();
    let per_case = par_map(&ids, a.jobs, |id| -> Result<(Vec<DoseRow>, Vec<String>, Vec<PathBuf>)> {
        let truth = load_mask(&reference.mask_path(id))?;
        let dose = load_volume(&doses.dose_path(id))?;
        let grid = Volume3D::filled(truth.shape(), truth.spacing_mm(), 0.0, VolumeKind::Intensity)?;
        let aligned = align_dose(&dose, &grid)?;
        let warnings = aligned.warnings.iter().map(|w| format!("{id}: {w}")).collect();
        let mut masks: Vec<(String, LabelMask)> = vec![(REFERENCE_SET.to_string(), truth.clone())];
        for (name, d) in &set_dirs {
            let p = d.mask_path(id);
            if p.with_extension("json").is_file() {
                let m = load_mask(&p)?;
                if m.shape() != truth.shape() || m.spacing_mm() != truth.spacing_mm() {
                    return Err(CliError::Data(format!("{}: grid differs from the reference mask", p.display())));
                }
                masks.push((name.clone(), m));
            }
        }
        let mut rows = Vec::new();
        let mut files = Vec::new();
        for e in truth.registry().entries() {
            let r = truth.binary(e.label);
            for (set, m) in &masks {
                let sub = m.binary(e.label);
                if let Some(row) = dose_row(id, &e.name, set, &sub, &r, &aligned)? {
                    let curve = dvh(&sub, aligned.dose.values(), bin)?;
                    let path = dvh_root.join(id).join(set).join(format!("{}.csv", e.name));
                    create_dir(path.parent().expect("nested"))?;
                    std::fs::write(&path, dvh_csv(&curve)).map_err(|err| CliError::io(&path, err))?;
                    files.push(path);
                    rows.push(row);
                }
            }
        }
        Ok((rows, warnings, files))
    })?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (r, w, files) in per_case {
        rows.extend(r);
        warnings.extend(w);
        for f in files {
            rec.output(&f);
        }
    }
    rows.sort_by(|x, y| (&x.case, &x.organ, &x.set).cmp(&(&y.case, &y.organ, &y.set)));
    let summary = summarize_dose(&rows, &registry);
    let mut names = vec![REFERENCE_SET.to_string()];
    names.extend(sets.into_iter().map(|(n, _)| n));
    let report =
        DoseReport { kind: "dose".into(), config_hash: cfg.hash(), bin_width_gy: bin, sets: names, rows, summary, warnings };
    write_json(a.out, &report)?;
    rec.output(a.out);
    rec.finish(cfg, &prefix)?;
    Ok(report)
}
