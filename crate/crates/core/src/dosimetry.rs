//! Dose on the image grid, per-organ dose statistics and DVH curves.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::{trilinear, Volume3D, VolumeKind};

/// Dose spacing outside this band (mm) is flagged but still processed.
pub const SPACING_BAND_MM: (f64, f64) = (1.0, 5.0);

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDose {
    pub dose: Volume3D,
    /// Whether each target voxel centre lies inside the dose grid.
    pub covered: Vec<bool>,
    pub warnings: Vec<String>,
}

impl AlignedDose {
    pub fn coverage(&self, mask: &[bool]) -> f64 {
        let n = mask.iter().filter(|m| **m).count();
        if n == 0 {
            return 0.0;
        }
        mask.iter().zip(&self.covered).filter(|(m, c)| **m && **c).count() as f64 / n as f64
    }
}

/// Samples `dose` trilinearly at every voxel centre of `target`. Voxels whose
/// centre falls outside the dose grid receive 0 Gy.
pub fn align_dose(dose: &Volume3D, target: &Volume3D) -> Result<AlignedDose> {
    if dose.kind() != VolumeKind::DoseGy {
        return Err(CoreError::Invalid("align_dose needs a dose_gy volume".into()));
    }
    let mut warnings = Vec::new();
    let sp = dose.spacing_mm();
    if sp.iter().any(|s| *s < SPACING_BAND_MM.0 || *s > SPACING_BAND_MM.1) {
        warnings.push(format!("dose spacing {sp:?} mm is outside the expected band"));
    }
    let (ds, dorig) = (dose.shape(), dose.origin_mm());
    let (ts, tsp, torig) = (target.shape(), target.spacing_mm(), target.origin_mm());
    // Continuous dose index of each target centre, per axis.
    let axis = |a: usize| -> Vec<(f64, bool)> {
        (0..ts[a])
            .map(|i| {
                let p = torig[a] + (i as f64 + 0.5) * tsp[a];
                let u = (p - dorig[a]) / sp[a] - 0.5;
                (u, u >= -0.5 - 1e-9 && u <= ds[a] as f64 - 0.5 + 1e-9)
            })
            .collect()
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    let mut values = Vec::with_capacity(ts.iter().product());
    let mut covered = Vec::with_capacity(values.capacity());
    for (uz, cz) in &az {
        for (uy, cy) in &ay {
            for (ux, cx) in &ax {
                let inside = *cz && *cy && *cx;
                covered.push(inside);
                values.push(if inside { trilinear(dose.values(), ds, [*uz, *uy, *ux]) as f32 } else { 0.0 });
            }
        }
    }
    let n_cov = covered.iter().filter(|c| **c).count();
    if n_cov == 0 {
        return Err(CoreError::NoOverlap);
    }
    if n_cov < covered.len() {
        warnings.push(format!("{} of {} target voxels lie outside the dose grid", covered.len() - n_cov, covered.len()));
    }
    let dose = Volume3D::with_origin(ts, tsp, torig, values, VolumeKind::DoseGy)?;
    Ok(AlignedDose { dose, covered, warnings })
}

fn masked<'a>(mask: &'a [bool], dose: &'a [f32]) -> Result<impl Iterator<Item = f64> + 'a> {
    if mask.len() != dose.len() {
        return Err(CoreError::GridMismatch(format!("mask has {} voxels, dose {}", mask.len(), dose.len())));
    }
    if !mask.iter().any(|m| *m) {
        return Err(CoreError::EmptyMask("dose statistics need a nonempty mask".into()));
    }
    Ok(mask.iter().zip(dose).filter(|(m, _)| **m).map(|(_, d)| *d as f64))
}

pub fn mean_dose(mask: &[bool], dose: &[f32]) -> Result<f64> {
    let (s, n) = masked(mask, dose)?.fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    Ok(s / n as f64)
}

pub fn max_dose(mask: &[bool], dose: &[f32]) -> Result<f64> {
    Ok(masked(mask, dose)?.fold(f64::NEG_INFINITY, f64::max))
}

fn relative(sub: f64, reference: f64, what: &str) -> Result<f64> {
    if reference == 0.0 {
        return Err(CoreError::ZeroReferenceDose(what.into()));
    }
    Ok(100.0 * (sub - reference) / reference)
}

/// Signed percentage change of the mean dose when `sub` replaces `reference`.
pub fn diff_mean_dose(sub: &[bool], reference: &[bool], dose: &[f32]) -> Result<f64> {
    relative(mean_dose(sub, dose)?, mean_dose(reference, dose)?, "mean dose")
}

/// Signed percentage change of the maximum dose.
pub fn diff_max_dose(sub: &[bool], reference: &[bool], dose: &[f32]) -> Result<f64> {
    relative(max_dose(sub, dose)?, max_dose(reference, dose)?, "max dose")
}

/// Cumulative dose-volume histogram: `volume_fraction[k]` is the fraction of
/// organ voxels receiving at least `dose_gy[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhCurve {
    pub dose_gy: Vec<f64>,
    pub volume_fraction: Vec<f64>,
}

/// Edges run from 0 in steps of `bin_width` up to the first edge above the
/// maximum dose, where the fraction is 0.
pub fn dvh(mask: &[bool], dose: &[f32], bin_width: f64) -> Result<DvhCurve> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(CoreError::Invalid(format!("bin width {bin_width} must be positive")));
    }
    let mut values: Vec<f64> = masked(mask, dose)?.collect();
    values.sort_by(f64::total_cmp);
    let max = *values.last().expect("nonempty");
    let edges = (max / bin_width).floor() as usize + 2;
    let n = values.len() as f64;
    let mut dose_gy = Vec::with_capacity(edges);
    let mut volume_fraction = Vec::with_capacity(edges);
    for k in 0..edges {
        let d = k as f64 * bin_width;
        let below = values.partition_point(|v| *v < d);
        dose_gy.push(d);
        volume_fraction.push((values.len() - below) as f64 / n);
    }
    Ok(DvhCurve { dose_gy, volume_fraction })
}

/// One (case, organ, contour set) row of the dose report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseRow {
    pub case: String,
    pub organ: String,
    pub set: String,
    pub mean_gy: f64,
    pub max_gy: f64,
    pub diff_mean_pct: Option<f64>,
    pub diff_max_pct: Option<f64>,
    pub abs_diff_mean_pct: Option<f64>,
    pub abs_diff_max_pct: Option<f64>,
    pub coverage: f64,
}

/// Builds the row for `sub` against `reference`; `None` if `sub` is empty.
pub fn dose_row(case: &str, organ: &str, set: &str, sub: &[bool], reference: &[bool], aligned: &AlignedDose) -> Result<Option<DoseRow>> {
    let d = aligned.dose.values();
    let (mean_gy, max_gy) = match (mean_dose(sub, d), max_dose(sub, d)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(CoreError::EmptyMask(_)), _) => return Ok(None),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let soft = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(CoreError::ZeroReferenceDose(_) | CoreError::EmptyMask(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let dm = soft(diff_mean_dose(sub, reference, d))?;
    let dx = soft(diff_max_dose(sub, reference, d))?;
    Ok(Some(DoseRow {
        case: case.into(),
        organ: organ.into(),
        set: set.into(),
        mean_gy,
        max_gy,
        diff_mean_pct: dm,
        diff_max_pct: dx,
        abs_diff_mean_pct: dm.map(f64::abs),
        abs_diff_max_pct: dx.map(f64::abs),
        coverage: aligned.coverage(sub),
    }))
}
