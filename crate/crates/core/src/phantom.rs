//! Seeded synthetic head-and-neck phantoms with 42-organ ground truth.
//!
//! Every organ is a voxelised ellipsoid. Anchor and mid-level organs are sized
//! as fractions of the grid; small & hard organs have radii in voxels. Organ
//! positions are fractions of the grid (z cranial→caudal, y anterior→posterior,
//! x with left-sided organs at x > 0.5); bilateral pairs are mirrored in x.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::{save_mask, save_volume};
use crate::registry::{OrganRegistry, Stratum};
use crate::volume::{index, voxel_count, LabelMask, Shape, Spacing, Volume3D, VolumeKind};

pub const BACKGROUND_HU: f32 = -1000.0;
pub const BODY_HU: f32 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_shape: Shape,
    pub spacing_mm: Spacing,
    pub noise_sigma: f64,
    /// Largest per-organ displacement, as a fraction of the grid.
    pub position_jitter: f64,
    /// Displacement shared by all organs of a case, as a fraction of the grid.
    pub global_jitter: f64,
    /// Relative size jitter; semi-axes are scaled by a factor in `1 ± size_jitter`.
    pub size_jitter: f64,
    pub seed: u64,
    /// Whole-case restarts before giving up; each organ also gets 20 tries per restart.
    pub max_retries: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_shape: [64, 64, 64],
            spacing_mm: [1.0; 3],
            noise_sigma: 10.0,
            position_jitter: 0.01,
            global_jitter: 0.02,
            size_jitter: 0.1,
            seed: 0,
            max_retries: 50,
        }
    }
}

impl PhantomSpec {
    pub fn with_grid(edge: usize) -> Self {
        Self { grid_shape: [edge; 3], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Invalid(m));
        if self.grid_shape.iter().any(|n| *n < 32) {
            return bad(format!("grid {:?} is too small for 42 organs (minimum 32 per axis)", self.grid_shape));
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return bad("spacing must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        if !(0.0..=0.2).contains(&self.position_jitter) || !(0.0..=0.2).contains(&self.global_jitter) {
            return bad("position jitter must lie in [0, 0.2]".into());
        }
        if !(0.0..=0.3).contains(&self.size_jitter) {
            return bad("size_jitter must lie in [0, 0.3]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Size {
    /// Semi-axes as grid fractions.
    Fraction([f64; 3]),
    /// Sphere radius in voxels.
    Voxels(f64),
}

#[derive(Debug, Clone, Copy)]
struct Template {
    name: &'static str,
    center: [f64; 3],
    size: Size,
    contrast: f32,
}

const fn frac(name: &'static str, center: [f64; 3], semi: [f64; 3], contrast: f32) -> Template {
    Template { name, center, size: Size::Fraction(semi), contrast }
}

const fn vox(name: &'static str, center: [f64; 3], radius: f64, contrast: f32) -> Template {
    Template { name, center, size: Size::Voxels(radius), contrast }
}

/// Left-sided and midline organs; `_Rt` partners are mirrored from `_Lt`.
const TEMPLATES: [Template; 28] = [
    frac("BrainStem", [0.438, 0.552, 0.500], [0.10, 0.06, 0.06], 400.0),
    frac("Cerebellum", [0.400, 0.790, 0.500], [0.08, 0.08, 0.15], 350.0),
    frac("Eye_Lt", [0.218, 0.252, 0.655], [0.07, 0.07, 0.07], 450.0),
    frac("Mandible_Lt", [0.583, 0.221, 0.657], [0.05, 0.10, 0.04], 700.0),
    frac("SpinalCord", [0.728, 0.632, 0.500], [0.17, 0.04, 0.04], 500.0),
    frac("TMJ_Lt", [0.400, 0.416, 0.800], [0.04, 0.04, 0.04], 600.0),
    frac("BasalGanglia_Lt", [0.128, 0.446, 0.568], [0.05, 0.06, 0.04], 45.0),
    frac("Brachial_Lt", [0.842, 0.608, 0.734], [0.04, 0.05, 0.06], 30.0),
    frac("Const_Inf", [0.750, 0.412, 0.500], [0.04, 0.03, 0.05], 60.0),
    frac("Const_Mid", [0.655, 0.497, 0.500], [0.04, 0.03, 0.05], 65.0),
    frac("Const_Sup", [0.562, 0.423, 0.500], [0.04, 0.03, 0.05], 70.0),
    frac("Epiglottis", [0.655, 0.341, 0.500], [0.03, 0.03, 0.04], 55.0),
    frac("Esophagus", [0.843, 0.531, 0.500], [0.06, 0.04, 0.04], 50.0),
    frac("GSL", [0.775, 0.310, 0.500], [0.04, 0.04, 0.06], 40.0),
    frac("OralCavity", [0.526, 0.202, 0.500], [0.06, 0.08, 0.07], 35.0),
    frac("Parotid_Lt", [0.564, 0.451, 0.800], [0.07, 0.06, 0.05], 80.0),
    frac("SMG_Lt", [0.700, 0.270, 0.680], [0.04, 0.05, 0.04], 75.0),
    frac("TempLobe_Lt", [0.200, 0.500, 0.720], [0.07, 0.12, 0.06], 40.0),
    frac("Thyroid_Lt", [0.870, 0.401, 0.619], [0.05, 0.04, 0.04], 70.0),
    vox("Cochlea_Lt", [0.420, 0.600, 0.660], 1.2, 45.0),
    vox("Hypothalamus", [0.148, 0.595, 0.500], 1.5, 25.0),
    vox("InnerEar_Lt", [0.340, 0.680, 0.760], 1.5, 40.0),
    vox("LacrimalGland_Lt", [0.255, 0.302, 0.790], 1.5, 30.0),
    vox("Lens_Lt", [0.371, 0.157, 0.575], 1.3, 50.0),
    vox("OpticChiasm", [0.257, 0.532, 0.500], 1.5, 30.0),
    vox("OpticNerve_Lt", [0.259, 0.412, 0.615], 1.5, 35.0),
    vox("PinealGland", [0.247, 0.688, 0.500], 1.2, 20.0),
    vox("Pituitary", [0.363, 0.399, 0.500], 1.2, 35.0),
];

/// Rounded-box body, `|d/s|^4` summed over axes ≤ 1.
const BODY_SEMI: [f64; 3] = [0.48, 0.45, 0.44];

fn template_for(name: &str) -> Option<(Template, bool)> {
    if let Some(t) = TEMPLATES.iter().find(|t| t.name == name) {
        return Some((*t, false));
    }
    let base = name.strip_suffix("_Rt")?;
    TEMPLATES.iter().find(|t| t.name == format!("{base}_Lt")).map(|t| (*t, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub image: Volume3D,
    pub truth: LabelMask,
    /// True organ centres, voxel indices.
    pub centers: BTreeMap<u16, [usize; 3]>,
    /// Contrast above body intensity used for each organ.
    pub contrast: BTreeMap<u16, f32>,
}

fn in_body(shape: Shape, z: usize, y: usize, x: usize) -> bool {
    let p = [z, y, x];
    (0..3)
        .map(|a| {
            let d = ((p[a] as f64 + 0.5) / shape[a] as f64 - 0.5) / BODY_SEMI[a];
            d.powi(4)
        })
        .sum::<f64>()
        <= 1.0
}

/// Voxels of an axis-aligned ellipsoid centred on the voxel `c`.
fn ellipsoid(shape: Shape, c: [usize; 3], semi: [f64; 3]) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    let r: [i64; 3] = semi.map(|s| s.floor() as i64);
    for dz in -r[0]..=r[0] {
        for dy in -r[1]..=r[1] {
            for dx in -r[2]..=r[2] {
                let q = (dz as f64 / semi[0]).powi(2) + (dy as f64 / semi[1]).powi(2) + (dx as f64 / semi[2]).powi(2);
                if q > 1.0 {
                    continue;
                }
                let p = [c[0] as i64 + dz, c[1] as i64 + dy, c[2] as i64 + dx];
                if (0..3).any(|a| p[a] < 0 || p[a] >= shape[a] as i64) {
                    return None;
                }
                out.push(index(shape, p[0] as usize, p[1] as usize, p[2] as usize));
            }
        }
    }
    Some(out)
}

/// Generates one case. Pure in `(spec, case_seed)`.
pub fn generate_phantom(spec: &PhantomSpec, case_seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    let registry = OrganRegistry::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ case_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut last = None;
    for _ in 0..spec.max_retries.max(1) {
        match place_organs(spec, &registry, &mut rng) {
            Ok(layout) => return render(spec, registry, layout, &mut rng),
            Err(name) => last = Some(name),
        }
    }
    Err(CoreError::Placement(format!(
        "could not place {} after {} attempts (case seed {case_seed})",
        last.unwrap_or_default(),
        spec.max_retries
    )))
}

struct Layout {
    body: Vec<bool>,
    labels: Vec<u16>,
    centers: BTreeMap<u16, [usize; 3]>,
    contrast: BTreeMap<u16, f32>,
}

const ORGAN_TRIES: usize = 20;

/// One attempt at placing every organ; returns the name of the first organ that did not fit.
fn place_organs(spec: &PhantomSpec, registry: &OrganRegistry, rng: &mut ChaCha8Rng) -> std::result::Result<Layout, String> {
    let shape = spec.grid_shape;
    let n = voxel_count(shape);
    // Whole voxels, so that the shared shift never changes relative spacing.
    let global: [i64; 3] =
        std::array::from_fn(|a| (rng.random_range(-1.0..=1.0) * spec.global_jitter * shape[a] as f64).round() as i64);

    // Body interior with a one-voxel rind that keeps organs off the skin.
    let mut body = vec![false; n];
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                body[index(shape, z, y, x)] = in_body(shape, z, y, x);
            }
        }
    }
    // `blocked` marks voxels no new organ may touch: outside the body,
    // the rind, and every placed organ dilated by one voxel.
    let mut blocked: Vec<bool> = body.iter().map(|b| !b).collect();
    dilate_into(&mut blocked, &body.iter().map(|b| !b).collect::<Vec<_>>(), shape);

    let mut labels = vec![0u16; n];
    let mut centers = BTreeMap::new();
    let mut contrast = BTreeMap::new();
    let mut order: Vec<_> = registry.entries().to_vec();
    // Big organs first so that small ones fill the gaps.
    order.sort_by_key(|e| (e.stratum, e.label));
    for e in &order {
        let (t, mirrored) = template_for(&e.name).ok_or_else(|| e.name.clone())?;
        let mut placed = None;
        for _ in 0..ORGAN_TRIES {
            let scale = 1.0 + rng.random_range(-1.0..=1.0) * spec.size_jitter;
            let mut c = [0usize; 3];
            for a in 0..3 {
                let mut f = t.center[a];
                if a == 2 && mirrored {
                    f = 1.0 - f;
                }
                f += rng.random_range(-1.0..=1.0) * spec.position_jitter;
                let v = (f * shape[a] as f64).floor() as i64 + global[a];
                c[a] = v.clamp(0, shape[a] as i64 - 1) as usize;
            }
            let semi = match t.size {
                Size::Fraction(s) => std::array::from_fn(|a| (s[a] * shape[a] as f64 * scale).max(1.0)),
                Size::Voxels(r) => [(r * scale).clamp(1.0, 3.0); 3],
            };
            let Some(vox) = ellipsoid(shape, c, semi) else { continue };
            if vox.iter().all(|v| !blocked[*v]) {
                placed = Some((c, vox));
                break;
            }
        }
        let (c, vox) = placed.ok_or_else(|| e.name.clone())?;
        let mut own = vec![false; n];
        for v in &vox {
            labels[*v] = e.label;
            own[*v] = true;
        }
        dilate_into(&mut blocked, &own, shape);
        centers.insert(e.label, c);
        let k = t.contrast * (1.0 + rng.random_range(-0.05f32..=0.05));
        contrast.insert(e.label, k);
    }
    Ok(Layout { body, labels, centers, contrast })
}

fn render(spec: &PhantomSpec, registry: OrganRegistry, layout: Layout, rng: &mut ChaCha8Rng) -> Result<PhantomCase> {
    let Layout { body, labels, centers, contrast } = layout;
    let shape = spec.grid_shape;
    let n = voxel_count(shape);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let values = (0..n)
        .map(|i| {
            let base = if !body[i] {
                BACKGROUND_HU
            } else if labels[i] != 0 {
                BODY_HU + contrast[&labels[i]]
            } else {
                BODY_HU
            };
            let eps = if spec.noise_sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
            base + eps
        })
        .collect();
    Ok(PhantomCase {
        image: Volume3D::new(shape, spec.spacing_mm, values, VolumeKind::Intensity)?,
        truth: LabelMask::new(shape, spec.spacing_mm, labels, registry)?,
        centers,
        contrast,
    })
}

/// Marks every voxel within Chebyshev distance 1 of `src` in `dst`.
fn dilate_into(dst: &mut [bool], src: &[bool], shape: Shape) {
    for (i, s) in src.iter().enumerate() {
        if !s {
            continue;
        }
        let [z, y, x] = crate::volume::coords(shape, i);
        for zz in z.saturating_sub(1)..=(z + 1).min(shape[0] - 1) {
            for yy in y.saturating_sub(1)..=(y + 1).min(shape[1] - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(shape[2] - 1) {
                    dst[index(shape, zz, yy, xx)] = true;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    /// Organ name → true centre voxel.
    pub centers: BTreeMap<String, [usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub split: [f64; 3],
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
    }

    pub fn cases(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn image_path(dir: &Path, c: &CaseEntry) -> std::path::PathBuf {
        dir.join(c.split.dir()).join(&c.id)
    }

    pub fn mask_path(dir: &Path, c: &CaseEntry) -> std::path::PathBuf {
        dir.join(c.split.dir()).join(format!("{}_mask", c.id))
    }
}

/// Case counts for `n` cases: train and val are rounded, test takes the rest.
pub fn split_counts(n: usize, split: [f64; 3]) -> Result<[usize; 3]> {
    if split.iter().any(|f| !(0.0..=1.0).contains(f)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CoreError::Split(format!("fractions {split:?} must be in [0, 1] and sum to 1")));
    }
    let train = ((n as f64 * split[0]).round() as usize).min(n);
    let val = ((n as f64 * split[1]).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

/// Seed of case `i`; distinct for distinct `(base, i)` in practice.
pub fn case_seed(base: u64, i: usize) -> u64 {
    let mut z = base.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `n_cases` phantoms under `out_dir/{train,val,test}/` plus `manifest.json`.
pub fn make_dataset(spec: &PhantomSpec, n_cases: usize, split: [f64; 3], out_dir: &Path) -> Result<DatasetManifest> {
    let counts = split_counts(n_cases, split)?;
    spec.validate()?;
    let registry = OrganRegistry::canonical();
    let mut cases = Vec::with_capacity(n_cases);
    for s in Split::ALL {
        let dir = out_dir.join(s.dir());
        std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    }
    for i in 0..n_cases {
        let which = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        let seed = case_seed(spec.seed, i);
        let case = generate_phantom(spec, seed)?;
        let entry = CaseEntry {
            id: format!("case_{i:04}"),
            seed,
            split: which,
            centers: case
                .centers
                .iter()
                .map(|(l, c)| (registry.get(*l).expect("canonical").name.clone(), *c))
                .collect(),
        };
        save_volume(&case.image, &DatasetManifest::image_path(out_dir, &entry))?;
        save_mask(&case.truth, &DatasetManifest::mask_path(out_dir, &entry))?;
        cases.push(entry);
    }
    let manifest = DatasetManifest { spec: spec.clone(), split, cases };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

/// Largest per-axis extent of each organ over a set of masks, in voxels.
pub fn max_extents<'a>(masks: impl IntoIterator<Item = &'a LabelMask>) -> BTreeMap<u16, [usize; 3]> {
    let mut out: BTreeMap<u16, [usize; 3]> = BTreeMap::new();
    for m in masks {
        let shape = m.shape();
        let mut lo: BTreeMap<u16, [usize; 3]> = BTreeMap::new();
        let mut hi: BTreeMap<u16, [usize; 3]> = BTreeMap::new();
        for (i, l) in m.labels().iter().enumerate() {
            if *l == 0 {
                continue;
            }
            let c = crate::volume::coords(shape, i);
            let e = lo.entry(*l).or_insert(c);
            let h = hi.entry(*l).or_insert(c);
            for a in 0..3 {
                e[a] = e[a].min(c[a]);
                h[a] = h[a].max(c[a]);
            }
        }
        for (l, a) in lo {
            let b = hi[&l];
            let ext: [usize; 3] = std::array::from_fn(|k| b[k] - a[k] + 1);
            let cur = out.entry(l).or_insert([0; 3]);
            for k in 0..3 {
                cur[k] = cur[k].max(ext[k]);
            }
        }
    }
    out
}

/// Mean contrast per stratum over a case.
pub fn stratum_contrast(case: &PhantomCase) -> BTreeMap<Stratum, f64> {
    let mut acc: BTreeMap<Stratum, (f64, usize)> = BTreeMap::new();
    for (l, k) in &case.contrast {
        let s = case.truth.registry().get(*l).expect("registry label").stratum;
        let e = acc.entry(s).or_default();
        e.0 += *k as f64;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (v, n))| (s, v / n as f64)).collect()
}
