//! Volumes of interest around detected small organs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use soars_core::volume::{crop_pad_slice, Shape};
use soars_core::{BoxRegion, LabelMask, Volume3D};

use crate::error::{Result, StratError};

/// Crop size relative to the largest extent of the organ.
pub const VOI_FACTOR: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct VoiRegion {
    pub region: BoxRegion,
    pub organ: u16,
    pub case_id: String,
    pub image: Volume3D,
}

/// Crops a `3 * extent` box centred on `center`, padding with the image minimum.
pub fn crop_voi(x: &Volume3D, center: [usize; 3], extent: Shape, organ: u16, case_id: &str) -> Result<VoiRegion> {
    if extent.iter().any(|e| *e == 0) {
        return Err(StratError::Config(format!("organ {organ}: VOI extent {extent:?} must be positive")));
    }
    let region = BoxRegion::centered(center, extent.map(|e| VOI_FACTOR * e))?;
    let image = x.crop_pad(&region, x.min_value());
    Ok(VoiRegion { region, organ, case_id: case_id.to_string(), image })
}

/// Truth labels under a VOI box, zero outside the grid.
pub fn crop_labels(mask: &LabelMask, region: &BoxRegion) -> Vec<u16> {
    crop_pad_slice(mask.labels(), mask.shape(), region, 0)
}

/// Per-organ maximum extent over a set of truth masks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtentTable(pub BTreeMap<u16, Shape>);

impl ExtentTable {
    pub fn measure<'a>(masks: impl IntoIterator<Item = &'a LabelMask>, organs: &[u16]) -> Result<Self> {
        let all = soars_core::phantom::max_extents(masks);
        let mut t = BTreeMap::new();
        for o in organs {
            let e = all.get(o).ok_or_else(|| StratError::Data(format!("organ {o} never appears in the training masks")))?;
            t.insert(*o, *e);
        }
        Ok(Self(t))
    }

    pub fn get(&self, organ: u16) -> Result<Shape> {
        self.0.get(&organ).copied().ok_or_else(|| StratError::Config(format!("no VOI extent for organ {organ}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use soars_core::volume::index;
    use soars_core::VolumeKind;

    fn ramp(n: usize) -> Volume3D {
        let v = (0..n * n * n).map(|i| i as f32 + 5.0).collect();
        Volume3D::new([n; 3], [1.0; 3], v, VolumeKind::Intensity).unwrap()
    }

    #[test]
    fn interior_and_corner_sizes() {
        let x = ramp(30);
        let v = crop_voi(&x, [15, 15, 15], [7, 7, 7], 29, "c").unwrap();
        assert_eq!(v.image.shape(), [21, 21, 21]);
        assert_eq!(v.region.lo, [5, 5, 5]);
        let c = crop_voi(&x, [0, 0, 0], [7, 7, 7], 29, "c").unwrap();
        assert_eq!(c.image.shape(), [21, 21, 21]);
        assert_eq!(c.image.get(0, 0, 0), x.min_value());
    }

    #[test]
    fn voxels_agree_with_the_source() {
        let x = ramp(12);
        for center in [[0, 0, 0], [11, 3, 6], [5, 5, 5], [11, 11, 11]] {
            let v = crop_voi(&x, center, [3, 4, 5], 30, "c").unwrap();
            let e = v.region.extent();
            for z in 0..e[0] {
                for y in 0..e[1] {
                    for xx in 0..e[2] {
                        let p = [v.region.lo[0] + z as i64, v.region.lo[1] + y as i64, v.region.lo[2] + xx as i64];
                        let got = v.image.values()[index(e, z, y, xx)];
                        if (0..3).all(|a| p[a] >= 0 && p[a] < 12) {
                            assert_eq!(got, x.get(p[0] as usize, p[1] as usize, p[2] as usize));
                        } else {
                            assert_eq!(got, 5.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(crop_voi(&ramp(4), [1, 1, 1], [0, 1, 1], 30, "c").is_err());
    }
}
