//! Dense 3D grids in C order `(z, y, x)` with physical spacing in mm.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::registry::OrganRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Intensity,
    DoseGy,
}

pub type Shape = [usize; 3];
pub type Spacing = [f64; 3];

pub fn voxel_count(shape: Shape) -> usize {
    shape.iter().product()
}

#[inline]
pub fn index(shape: Shape, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

#[inline]
pub fn coords(shape: Shape, i: usize) -> [usize; 3] {
    let plane = shape[1] * shape[2];
    [i / plane, (i % plane) / shape[2], i % shape[2]]
}

fn check_geometry(shape: Shape, spacing: Spacing, len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(CoreError::Invalid(format!("shape {shape:?} has a zero extent")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(CoreError::Invalid(format!("spacing {spacing:?} must be positive")));
    }
    if len != voxel_count(shape) {
        return Err(CoreError::Invalid(format!("{len} values for shape {shape:?}")));
    }
    Ok(())
}

/// A scalar grid. `origin_mm` is the position of the grid's corner (the low
/// face of voxel 0); voxel `i` is centred at `origin + (i + 0.5) * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: Shape,
    spacing_mm: Spacing,
    origin_mm: [f64; 3],
    values: Vec<f32>,
    kind: VolumeKind,
}

impl Volume3D {
    pub fn new(shape: Shape, spacing_mm: Spacing, values: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        Self::with_origin(shape, spacing_mm, [0.0; 3], values, kind)
    }

    pub fn with_origin(
        shape: Shape,
        spacing_mm: Spacing,
        origin_mm: [f64; 3],
        values: Vec<f32>,
        kind: VolumeKind,
    ) -> Result<Self> {
        check_geometry(shape, spacing_mm, values.len())?;
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(CoreError::Invalid("origin must be finite".into()));
        }
        if kind == VolumeKind::DoseGy && values.iter().any(|v| !(*v >= 0.0)) {
            return Err(CoreError::Invalid("dose values must be non-negative".into()));
        }
        Ok(Self { shape, spacing_mm, origin_mm, values, kind })
    }

    pub fn filled(shape: Shape, spacing_mm: Spacing, value: f32, kind: VolumeKind) -> Result<Self> {
        Self::new(shape, spacing_mm, vec![value; voxel_count(shape)], kind)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing_mm(&self) -> Spacing {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[index(self.shape, z, y, x)]
    }

    pub fn min_value(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn same_grid<G: GridLike>(&self, other: &G) -> bool {
        self.shape == other.grid_shape() && self.spacing_mm == other.grid_spacing()
    }

    /// Copies `box` out of the grid; voxels outside the grid get `pad`.
    pub fn crop_pad(&self, region: &BoxRegion, pad: f32) -> Volume3D {
        let values = crop_pad_slice(&self.values, self.shape, region, pad);
        Volume3D { shape: region.extent(), values, ..self.clone() }
    }

    pub fn resample(&self, target_mm: Spacing, mode: Interpolation) -> Result<Volume3D> {
        let shape = resampled_shape(self.shape, self.spacing_mm, target_mm)?;
        let values = match mode {
            Interpolation::Nearest => resample_nearest(&self.values, self.shape, self.spacing_mm, shape, target_mm),
            Interpolation::Trilinear => {
                let mut out = Vec::with_capacity(voxel_count(shape));
                for z in 0..shape[0] {
                    let uz = (z as f64 + 0.5) * target_mm[0] / self.spacing_mm[0] - 0.5;
                    for y in 0..shape[1] {
                        let uy = (y as f64 + 0.5) * target_mm[1] / self.spacing_mm[1] - 0.5;
                        for x in 0..shape[2] {
                            let ux = (x as f64 + 0.5) * target_mm[2] / self.spacing_mm[2] - 0.5;
                            out.push(trilinear(&self.values, self.shape, [uz, uy, ux]) as f32);
                        }
                    }
                }
                out
            }
        };
        Volume3D::with_origin(shape, target_mm, self.origin_mm, values, self.kind)
    }
}

/// Trilinear interpolation at continuous voxel index `u`, clamped to the grid.
pub fn trilinear(values: &[f32], shape: Shape, u: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let max = (shape[a] - 1) as f64;
        let c = u[a].clamp(0.0, max);
        let f = c.floor();
        lo[a] = f as usize;
        frac[a] = c - f;
        if lo[a] + 1 >= shape[a] {
            lo[a] = shape[a] - 1;
            frac[a] = 0.0;
        }
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[0] } else { frac[0] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[2] } else { frac[2] };
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * values[index(shape, lo[0] + dz, lo[1] + dy, lo[2] + dx)] as f64;
            }
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

fn resampled_shape(shape: Shape, spacing: Spacing, target: Spacing) -> Result<Shape> {
    if target.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(CoreError::Invalid(format!("target spacing {target:?} must be positive")));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        // Guard against 64.0000001-style rounding pushing the extent up by one.
        let r = shape[a] as f64 * spacing[a] / target[a];
        out[a] = ((r - 1e-9).ceil() as usize).max(1);
    }
    Ok(out)
}

fn resample_nearest<T: Copy>(values: &[T], shape: Shape, spacing: Spacing, out_shape: Shape, target: Spacing) -> Vec<T> {
    let pick = |a: usize, j: usize| (((j as f64 + 0.5) * target[a] / spacing[a]).floor() as usize).min(shape[a] - 1);
    let xs: Vec<usize> = (0..out_shape[2]).map(|j| pick(2, j)).collect();
    let mut out = Vec::with_capacity(voxel_count(out_shape));
    for z in 0..out_shape[0] {
        let iz = pick(0, z);
        for y in 0..out_shape[1] {
            let iy = pick(1, y);
            out.extend(xs.iter().map(|ix| values[index(shape, iz, iy, *ix)]));
        }
    }
    out
}

/// A per-voxel organ label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    shape: Shape,
    spacing_mm: Spacing,
    labels: Vec<u16>,
    registry: OrganRegistry,
}

impl LabelMask {
    pub fn new(shape: Shape, spacing_mm: Spacing, labels: Vec<u16>, registry: OrganRegistry) -> Result<Self> {
        check_geometry(shape, spacing_mm, labels.len())?;
        if let Some(bad) = labels.iter().find(|l| **l != 0 && !registry.contains(**l)) {
            return Err(CoreError::Invalid(format!("label {bad} is not in the registry")));
        }
        Ok(Self { shape, spacing_mm, labels, registry })
    }

    pub fn empty(shape: Shape, spacing_mm: Spacing, registry: OrganRegistry) -> Result<Self> {
        Self::new(shape, spacing_mm, vec![0; voxel_count(shape)], registry)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing_mm(&self) -> Spacing {
        self.spacing_mm
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn registry(&self) -> &OrganRegistry {
        &self.registry
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        self.labels[index(self.shape, z, y, x)]
    }

    /// Binary mask of one label.
    pub fn binary(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|l| *l == label).collect()
    }

    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; self.registry.max_label() as usize + 1];
        for l in &self.labels {
            seen[*l as usize] = true;
        }
        (1..seen.len()).filter(|l| seen[*l]).map(|l| l as u16).collect()
    }

    pub fn crop_pad(&self, region: &BoxRegion, pad: u16) -> Result<LabelMask> {
        let labels = crop_pad_slice(&self.labels, self.shape, region, pad);
        LabelMask::new(region.extent(), self.spacing_mm, labels, self.registry.clone())
    }

    /// Labels only support nearest-neighbour resampling.
    pub fn resample(&self, target_mm: Spacing, mode: Interpolation) -> Result<LabelMask> {
        if mode != Interpolation::Nearest {
            return Err(CoreError::Mode("label masks can only be resampled with nearest".into()));
        }
        let shape = resampled_shape(self.shape, self.spacing_mm, target_mm)?;
        let labels = resample_nearest(&self.labels, self.shape, self.spacing_mm, shape, target_mm);
        LabelMask::new(shape, target_mm, labels, self.registry.clone())
    }
}

pub trait GridLike {
    fn grid_shape(&self) -> Shape;
    fn grid_spacing(&self) -> Spacing;
}

impl GridLike for Volume3D {
    fn grid_shape(&self) -> Shape {
        self.shape
    }
    fn grid_spacing(&self) -> Spacing {
        self.spacing_mm
    }
}

impl GridLike for LabelMask {
    fn grid_shape(&self) -> Shape {
        self.shape
    }
    fn grid_spacing(&self) -> Spacing {
        self.spacing_mm
    }
}

/// Half-open voxel box; may extend past the grid on any side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl BoxRegion {
    pub fn new(lo: [i64; 3], hi: [i64; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(CoreError::Invalid(format!("degenerate box {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn full(shape: Shape) -> Self {
        Self { lo: [0; 3], hi: shape.map(|s| s as i64) }
    }

    /// Box of `extent` whose middle voxel is `center` (for even extents the
    /// centre sits just past the middle).
    pub fn centered(center: [usize; 3], extent: Shape) -> Result<Self> {
        let lo: [i64; 3] = std::array::from_fn(|a| center[a] as i64 - (extent[a] / 2) as i64);
        Self::new(lo, std::array::from_fn(|a| lo[a] + extent[a] as i64))
    }

    pub fn extent(&self) -> Shape {
        std::array::from_fn(|a| (self.hi[a] - self.lo[a]) as usize)
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }
}

pub fn crop_pad_slice<T: Copy>(src: &[T], shape: Shape, region: &BoxRegion, pad: T) -> Vec<T> {
    let ext = region.extent();
    let mut out = vec![pad; voxel_count(ext)];
    // Overlap of the box with the grid, in grid coordinates.
    let lo: [i64; 3] = std::array::from_fn(|a| region.lo[a].max(0));
    let hi: [i64; 3] = std::array::from_fn(|a| region.hi[a].min(shape[a] as i64));
    if (0..3).any(|a| lo[a] >= hi[a]) {
        return out;
    }
    let w = (hi[2] - lo[2]) as usize;
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            let s = index(shape, z as usize, y as usize, lo[2] as usize);
            let d = index(
                ext,
                (z - region.lo[0]) as usize,
                (y - region.lo[1]) as usize,
                (lo[2] - region.lo[2]) as usize,
            );
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Writes `patch` (laid out over `region`) back into `dst`, skipping voxels
/// outside the grid. Inverse placement of [`crop_pad_slice`].
pub fn paste_slice<T: Copy>(dst: &mut [T], shape: Shape, region: &BoxRegion, patch: &[T], mut keep: impl FnMut(T) -> bool) {
    let ext = region.extent();
    for (i, v) in patch.iter().enumerate() {
        let [z, y, x] = coords(ext, i);
        let p = [region.lo[0] + z as i64, region.lo[1] + y as i64, region.lo[2] + x as i64];
        if (0..3).all(|a| p[a] >= 0 && p[a] < shape[a] as i64) && keep(*v) {
            dst[index(shape, p[0] as usize, p[1] as usize, p[2] as usize)] = *v;
        }
    }
}
