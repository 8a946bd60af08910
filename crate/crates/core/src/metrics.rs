//! Overlap and surface-distance metrics, and report aggregation.
//!
//! Boundary voxels are mask voxels with at least one 6-connected neighbour
//! outside the mask, the grid border counting as outside. Distances are
//! Euclidean, in mm, between voxel centres.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::registry::Stratum;
use crate::stats::{wilcoxon_signed_rank, Wilcoxon};
use crate::volume::{coords, index, LabelMask, Shape, Spacing};

pub fn dsc(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::GridMismatch(format!("{} vs {} voxels", a.len(), b.len())));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        na += *x as usize;
        nb += *y as usize;
        both += (*x && *y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Indices of the boundary voxels of `mask`.
pub fn boundary(mask: &[bool], shape: Shape) -> Vec<usize> {
    let [nz, ny, nx] = shape;
    let mut out = Vec::new();
    for (i, m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let [z, y, x] = coords(shape, i);
        let edge = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
        if edge
            || !mask[i - nx * ny]
            || !mask[i + nx * ny]
            || !mask[i - nx]
            || !mask[i + nx]
            || !mask[i - 1]
            || !mask[i + 1]
        {
            out.push(i);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistanceSet {
    pub d_ab: Vec<f64>,
    pub d_ba: Vec<f64>,
    pub spacing_mm: Spacing,
}

/// Squared distance transform of a feature set over a sub-box of the grid,
/// following Felzenszwalb & Huttenlocher's separable lower-envelope method.
struct Edt {
    lo: [usize; 3],
    ext: [usize; 3],
    d2: Vec<f64>,
}

impl Edt {
    fn new(features: &[usize], shape: Shape, lo: [usize; 3], hi: [usize; 3], spacing: Spacing) -> Self {
        let ext: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
        let mut d2 = vec![f64::INFINITY; ext.iter().product()];
        for f in features {
            let c = coords(shape, *f);
            d2[index(ext, c[0] - lo[0], c[1] - lo[1], c[2] - lo[2])] = 0.0;
        }
        let strides = [ext[1] * ext[2], ext[2], 1];
        let mut line = Vec::new();
        let mut out = Vec::new();
        for axis in (0..3).rev() {
            let n = ext[axis];
            let others: Vec<usize> = (0..3).filter(|a| *a != axis).collect();
            for i in 0..ext[others[0]] {
                for j in 0..ext[others[1]] {
                    let base = i * strides[others[0]] + j * strides[others[1]];
                    line.clear();
                    line.extend((0..n).map(|k| d2[base + k * strides[axis]]));
                    envelope(&line, spacing[axis], &mut out);
                    for (k, v) in out.iter().enumerate() {
                        d2[base + k * strides[axis]] = *v;
                    }
                }
            }
        }
        Self { lo, ext, d2 }
    }

    fn distance(&self, c: [usize; 3]) -> f64 {
        self.d2[index(self.ext, c[0] - self.lo[0], c[1] - self.lo[1], c[2] - self.lo[2])].sqrt()
    }
}

/// `out[q] = min_p (s (q - p))^2 + f[p]`.
fn envelope(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let sites: Vec<usize> = (0..n).filter(|p| f[*p].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let pos = |p: usize| p as f64 * s;
    let meet = |p: usize, q: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
    let mut v: Vec<usize> = vec![sites[0]];
    let mut z: Vec<f64> = vec![f64::NEG_INFINITY];
    for &q in &sites[1..] {
        let mut m = meet(*v.last().expect("nonempty"), q);
        while m <= *z.last().expect("nonempty") {
            v.pop();
            z.pop();
            if v.is_empty() {
                break;
            }
            m = meet(*v.last().expect("nonempty"), q);
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            v.push(q);
            z.push(m);
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

fn bbox(points: impl Iterator<Item = usize>, shape: Shape) -> ([usize; 3], [usize; 3]) {
    let mut lo = shape;
    let mut hi = [0; 3];
    for p in points {
        let c = coords(shape, p);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a] + 1);
        }
    }
    (lo, hi)
}

pub fn surface_distances(a: &[bool], b: &[bool], shape: Shape, spacing: Spacing) -> Result<SurfaceDistanceSet> {
    let n = shape.iter().product::<usize>();
    if a.len() != n || b.len() != n {
        return Err(CoreError::GridMismatch(format!("masks do not match shape {shape:?}")));
    }
    let ba = boundary(a, shape);
    let bb = boundary(b, shape);
    if ba.is_empty() || bb.is_empty() {
        return Err(CoreError::EmptyMask(if ba.is_empty() { "first mask" } else { "second mask" }.into()));
    }
    let (lo, hi) = bbox(ba.iter().chain(&bb).copied(), shape);
    let to_b = Edt::new(&bb, shape, lo, hi, spacing);
    let to_a = Edt::new(&ba, shape, lo, hi, spacing);
    Ok(SurfaceDistanceSet {
        d_ab: ba.iter().map(|i| to_b.distance(coords(shape, *i))).collect(),
        d_ba: bb.iter().map(|i| to_a.distance(coords(shape, *i))).collect(),
        spacing_mm: spacing,
    })
}

/// Linear interpolation between order statistics at `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl SurfaceDistanceSet {
    pub fn hausdorff(&self, q: f64) -> f64 {
        percentile(&self.d_ab, q).max(percentile(&self.d_ba, q))
    }

    pub fn asd(&self) -> f64 {
        let s: f64 = self.d_ab.iter().chain(&self.d_ba).sum();
        s / (self.d_ab.len() + self.d_ba.len()) as f64
    }
}

pub fn hausdorff(a: &[bool], b: &[bool], shape: Shape, spacing: Spacing, q: f64) -> Result<f64> {
    Ok(surface_distances(a, b, shape, spacing)?.hausdorff(q))
}

pub fn asd(a: &[bool], b: &[bool], shape: Shape, spacing: Spacing) -> Result<f64> {
    Ok(surface_distances(a, b, shape, spacing)?.asd())
}

/// One (case, organ, prediction set) row. Distance metrics are `None` when
/// either mask is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegRow {
    pub case: String,
    pub organ: String,
    pub stratum: Stratum,
    pub set: String,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub asd_mm: Option<f64>,
}

/// Scores every registry organ of `reference` against `pred`.
pub fn evaluate_case(pred: &LabelMask, reference: &LabelMask, case: &str, set: &str, hd_percentile: f64) -> Result<Vec<SegRow>> {
    if pred.shape() != reference.shape() || pred.spacing_mm() != reference.spacing_mm() {
        return Err(CoreError::GridMismatch(format!(
            "prediction {:?} @ {:?} vs reference {:?} @ {:?}",
            pred.shape(),
            pred.spacing_mm(),
            reference.shape(),
            reference.spacing_mm()
        )));
    }
    let shape = reference.shape();
    let spacing = reference.spacing_mm();
    let mut rows = Vec::new();
    for e in reference.registry().entries() {
        let a = pred.binary(e.label);
        let b = reference.binary(e.label);
        let (hd, hd95, asd_mm) = match surface_distances(&a, &b, shape, spacing) {
            Ok(s) => (Some(s.hausdorff(100.0)), Some(s.hausdorff(hd_percentile)), Some(s.asd())),
            Err(CoreError::EmptyMask(_)) => (None, None, None),
            Err(e) => return Err(e),
        };
        rows.push(SegRow {
            case: case.into(),
            organ: e.name.clone(),
            stratum: e.stratum,
            set: set.into(),
            dsc: dsc(&a, &b)?,
            hd_mm: hd,
            hd95_mm: hd95,
            asd_mm,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub set: String,
    /// Organ name, stratum name, or `all`.
    pub group: String,
    pub dsc: Option<MeanSd>,
    pub hd_mm: Option<MeanSd>,
    pub hd95_mm: Option<MeanSd>,
    pub asd_mm: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub group: String,
    pub set_a: String,
    pub set_b: String,
    pub n_cases: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `None` when every paired difference is zero.
    pub test: Option<Wilcoxon>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<SegRow>,
    pub per_organ: Vec<Aggregate>,
    pub per_stratum: Vec<Aggregate>,
    pub paired: Vec<PairedTest>,
}

fn summarize(set: &str, group: &str, rows: &[&SegRow]) -> Aggregate {
    let pick = |f: fn(&SegRow) -> Option<f64>| MeanSd::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    Aggregate {
        set: set.into(),
        group: group.into(),
        dsc: pick(|r| Some(r.dsc)),
        hd_mm: pick(|r| r.hd_mm),
        hd95_mm: pick(|r| r.hd95_mm),
        asd_mm: pick(|r| r.asd_mm),
    }
}

/// Mean DSC per case over the rows selected by `keep`.
fn case_means(rows: &[SegRow], set: &str, keep: impl Fn(&SegRow) -> bool) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.set == set && keep(r)) {
        let e = acc.entry(r.case.clone()).or_default();
        e.0 += r.dsc;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Wilcoxon test on per-case mean DSC of `group` between two sets.
pub fn paired_dsc_test(rows: &[SegRow], set_a: &str, set_b: &str, group: &str, keep: impl Fn(&SegRow) -> bool + Copy) -> PairedTest {
    let a = case_means(rows, set_a, keep);
    let b = case_means(rows, set_b, keep);
    let shared: Vec<&String> = a.keys().filter(|k| b.contains_key(*k)).collect();
    let xa: Vec<f64> = shared.iter().map(|k| a[*k]).collect();
    let xb: Vec<f64> = shared.iter().map(|k| b[*k]).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let test = if shared.is_empty() { None } else { wilcoxon_signed_rank(&xa, &xb).ok() };
    PairedTest {
        group: group.into(),
        set_a: set_a.into(),
        set_b: set_b.into(),
        n_cases: shared.len(),
        mean_a: mean(&xa),
        mean_b: mean(&xb),
        degenerate: test.is_none(),
        test,
    }
}

/// Builds per-organ and per-stratum summaries, plus paired tests between
/// `compare` sets when given. Rows are sorted by (case, organ, set).
pub fn aggregate(mut rows: Vec<SegRow>, compare: Option<(&str, &str)>) -> MetricsReport {
    rows.sort_by(|a, b| (&a.case, &a.organ, &a.set).cmp(&(&b.case, &b.organ, &b.set)));
    let mut by_organ: BTreeMap<(String, Stratum, String), Vec<&SegRow>> = BTreeMap::new();
    let mut by_stratum: BTreeMap<(String, String), Vec<&SegRow>> = BTreeMap::new();
    for r in &rows {
        by_organ.entry((r.set.clone(), r.stratum, r.organ.clone())).or_default().push(r);
        by_stratum.entry((r.set.clone(), r.stratum.name().to_string())).or_default().push(r);
        by_stratum.entry((r.set.clone(), "all".to_string())).or_default().push(r);
    }
    let per_organ = by_organ.iter().map(|((set, _, organ), rs)| summarize(set, organ, rs)).collect();
    let per_stratum = by_stratum.iter().map(|((set, group), rs)| summarize(set, group, rs)).collect();
    let mut paired = Vec::new();
    if let Some((a, b)) = compare {
        let mut organs: Vec<(Stratum, String)> = rows.iter().map(|r| (r.stratum, r.organ.clone())).collect();
        organs.sort();
        organs.dedup();
        for (_, organ) in &organs {
            paired.push(paired_dsc_test(&rows, a, b, organ, |r| &r.organ == organ));
        }
        for s in Stratum::ALL {
            paired.push(paired_dsc_test(&rows, a, b, s.name(), |r| r.stratum == s));
        }
        paired.push(paired_dsc_test(&rows, a, b, "all", |_| true));
    }
    MetricsReport { rows, per_organ, per_stratum, paired }
}
