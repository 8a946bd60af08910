//! Whole-volume label fusion across the three branches.

use soars_core::volume::{coords, index, voxel_count};
use soars_core::{LabelMask, OrganRegistry, Stratum};

use crate::error::{Result, StratError};
use crate::maps::ProbMap;
use crate::voi::VoiRegion;

/// Later strata overwrite earlier ones.
pub const FUSION_PRIORITY: [Stratum; 3] = [Stratum::SmallHard, Stratum::MidLevel, Stratum::Anchor];

/// Anchor and mid-level argmax labels on the full grid, overlaid by every
/// VOI's organ wherever its probability beats background. Overlapping VOIs
/// resolve to the more probable organ.
pub fn fuse_predictions(
    anchor: &ProbMap,
    mid: &ProbMap,
    sh: &[(VoiRegion, ProbMap)],
    registry: &OrganRegistry,
) -> Result<LabelMask> {
    if !anchor.same_grid(mid) {
        return Err(StratError::Alignment(format!(
            "anchor grid {:?} and mid-level grid {:?} differ",
            anchor.shape(),
            mid.shape()
        )));
    }
    let shape = anchor.shape();
    let n = voxel_count(shape);
    let mut labels = anchor.argmax_labels();
    for (l, m) in labels.iter_mut().zip(mid.argmax_labels()) {
        if m != 0 {
            *l = m;
        }
    }
    let mut best = vec![0f32; n];
    for (voi, probs) in sh {
        if probs.shape() != voi.region.extent() {
            return Err(StratError::Alignment(format!(
                "VOI map {:?} does not match its box {:?}",
                probs.shape(),
                voi.region.extent()
            )));
        }
        let p = probs
            .channel_of(voi.organ)
            .ok_or_else(|| StratError::Shape(format!("VOI map lacks organ {}", voi.organ)))?;
        let bg = probs.channel(0);
        for (i, (pv, bv)) in p.iter().zip(bg).enumerate() {
            if pv <= bv {
                continue;
            }
            let c = coords(voi.region.extent(), i);
            let g: [i64; 3] = std::array::from_fn(|a| voi.region.lo[a] + c[a] as i64);
            if (0..3).any(|a| g[a] < 0 || g[a] >= shape[a] as i64) {
                continue;
            }
            let j = index(shape, g[0] as usize, g[1] as usize, g[2] as usize);
            if *pv > best[j] {
                best[j] = *pv;
                labels[j] = voi.organ;
            }
        }
    }
    Ok(LabelMask::new(shape, anchor.spacing_mm(), labels, registry.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::Branch;
    use crate::voi::crop_voi;
    use proptest::prelude::*;
    use soars_core::{BoxRegion, Volume3D, VolumeKind};

    const SHAPE: [usize; 3] = [6, 6, 6];

    fn maps(labels: &[u16]) -> (ProbMap, ProbMap) {
        let r = OrganRegistry::canonical();
        (
            ProbMap::one_hot(SHAPE, [1.0; 3], Branch::Anchor.classes(&r), labels).unwrap(),
            ProbMap::one_hot(SHAPE, [1.0; 3], Branch::MidLevel.classes(&r), labels).unwrap(),
        )
    }

    fn sh_nets(labels: &[u16]) -> Vec<(VoiRegion, ProbMap)> {
        let r = OrganRegistry::canonical();
        let img = Volume3D::filled(SHAPE, [1.0; 3], 0.0, VolumeKind::Intensity).unwrap();
        let mut present: Vec<u16> =
            labels.iter().copied().filter(|l| r.get(*l).is_some_and(|e| e.stratum == Stratum::SmallHard)).collect();
        present.sort();
        present.dedup();
        present
            .into_iter()
            .map(|organ| {
                let voi = crop_voi(&img, [3, 3, 3], [2, 2, 2], organ, "c").unwrap();
                let sub = soars_core::volume::crop_pad_slice(labels, SHAPE, &voi.region, 0);
                let p = ProbMap::one_hot(voi.region.extent(), [1.0; 3], vec![0, organ], &sub).unwrap();
                (voi, p)
            })
            .collect()
    }

    #[test]
    fn priority_rules() {
        let n = voxel_count(SHAPE);
        let mut a = vec![0u16; n];
        a[0] = 1; // anchor only
        a[1] = 1; // anchor and mid
        let mut m = vec![0u16; n];
        m[1] = 10;
        m[2] = 11; // mid and S&H
        let mut s = vec![0u16; n];
        s[2] = 30;
        let r = OrganRegistry::canonical();
        let am = ProbMap::one_hot(SHAPE, [1.0; 3], Branch::Anchor.classes(&r), &a).unwrap();
        let mm = ProbMap::one_hot(SHAPE, [1.0; 3], Branch::MidLevel.classes(&r), &m).unwrap();
        let img = Volume3D::filled(SHAPE, [1.0; 3], 0.0, VolumeKind::Intensity).unwrap();
        let mut voi = crop_voi(&img, [0, 0, 0], [1, 1, 1], 30, "c").unwrap();
        voi.region = BoxRegion::full(SHAPE);
        let sp = ProbMap::one_hot(SHAPE, [1.0; 3], vec![0, 30], &s).unwrap();
        let f = fuse_predictions(&am, &mm, &[(voi, sp)], &r).unwrap();
        assert_eq!(&f.labels()[..4], &[1, 10, 30, 0]);
        assert!(f.labels()[3..].iter().all(|l| *l == 0));
    }

    #[test]
    fn misaligned_maps_are_rejected() {
        let r = OrganRegistry::canonical();
        let a = ProbMap::one_hot(SHAPE, [1.0; 3], Branch::Anchor.classes(&r), &vec![0; 216]).unwrap();
        let m = ProbMap::one_hot([6, 6, 5], [1.0; 3], Branch::MidLevel.classes(&r), &vec![0; 180]).unwrap();
        assert!(matches!(fuse_predictions(&a, &m, &[], &r), Err(StratError::Alignment(_))));
    }

    proptest! {
        #[test]
        fn fusion_is_idempotent(raw in prop::collection::vec(0u16..43, 216)) {
            // Small organs live inside the central VOI; elsewhere they become background.
            let r = OrganRegistry::canonical();
            let img = Volume3D::filled(SHAPE, [1.0; 3], 0.0, VolumeKind::Intensity).unwrap();
            let region = crop_voi(&img, [3, 3, 3], [2, 2, 2], 30, "c").unwrap().region;
            let labels: Vec<u16> = raw.iter().enumerate().map(|(i, l)| {
                let c = coords(SHAPE, i);
                let inside = region.contains(c.map(|v| v as i64));
                if r.get(*l).is_some_and(|e| e.stratum == Stratum::SmallHard) && !inside { 0 } else { *l }
            }).collect();
            let (a, m) = maps(&labels);
            let fused = fuse_predictions(&a, &m, &sh_nets(&labels), &r).unwrap();
            prop_assert_eq!(fused.labels(), labels.as_slice());
            let (a2, m2) = maps(fused.labels());
            let again = fuse_predictions(&a2, &m2, &sh_nets(fused.labels()), &r).unwrap();
            prop_assert_eq!(again, fused);
        }
    }
}
