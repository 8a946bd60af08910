//! Per-voxel class probabilities and detection heat maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use soars_core::volume::{coords, voxel_count, Shape, Spacing};

use crate::error::{Result, StratError};

/// Class probabilities over a grid. Channel 0 is background; `classes[c]`
/// is the registry label of channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    shape: Shape,
    spacing_mm: Spacing,
    classes: Vec<u16>,
    /// Channel-major: `probs[c * n + i]`.
    probs: Vec<f32>,
}

pub const SUM_TOLERANCE: f64 = 1e-6;

impl ProbMap {
    pub fn new(shape: Shape, spacing_mm: Spacing, classes: Vec<u16>, probs: Vec<f32>) -> Result<Self> {
        let n = voxel_count(shape);
        if classes.first() != Some(&0) {
            return Err(StratError::Shape("channel 0 must be background".into()));
        }
        if probs.len() != n * classes.len() {
            return Err(StratError::Shape(format!(
                "{} probabilities for {} classes over {n} voxels",
                probs.len(),
                classes.len()
            )));
        }
        let m = Self { shape, spacing_mm, classes, probs };
        if let Some(i) = (0..n).find(|i| (m.voxel_sum(*i) - 1.0).abs() > SUM_TOLERANCE) {
            return Err(StratError::Shape(format!("probabilities at voxel {i} sum to {}", m.voxel_sum(i))));
        }
        Ok(m)
    }

    /// Normalises raw non-negative scores (channel-major) voxel by voxel in f64.
    pub fn from_scores(shape: Shape, spacing_mm: Spacing, classes: Vec<u16>, scores: &[f32]) -> Result<Self> {
        let n = voxel_count(shape);
        let c = classes.len();
        if scores.len() != n * c {
            return Err(StratError::Shape(format!("{} scores for {c} classes over {n} voxels", scores.len())));
        }
        let mut probs = vec![0f32; n * c];
        for i in 0..n {
            let s: f64 = (0..c).map(|k| scores[k * n + i] as f64).sum();
            for k in 0..c {
                probs[k * n + i] = if s > 0.0 { (scores[k * n + i] as f64 / s) as f32 } else if k == 0 { 1.0 } else { 0.0 };
            }
        }
        Self::new(shape, spacing_mm, classes, probs)
    }

    /// Certain probabilities from a label grid; labels outside `classes` count as background.
    pub fn one_hot(shape: Shape, spacing_mm: Spacing, classes: Vec<u16>, labels: &[u16]) -> Result<Self> {
        let n = voxel_count(shape);
        if labels.len() != n {
            return Err(StratError::Shape(format!("{} labels for {n} voxels", labels.len())));
        }
        let index: BTreeMap<u16, usize> = classes.iter().enumerate().map(|(k, l)| (*l, k)).collect();
        let mut probs = vec![0f32; n * classes.len()];
        for (i, l) in labels.iter().enumerate() {
            let k = index.get(l).copied().unwrap_or(0);
            probs[k * n + i] = 1.0;
        }
        Self::new(shape, spacing_mm, classes, probs)
    }

    fn voxel_sum(&self, i: usize) -> f64 {
        let n = voxel_count(self.shape);
        (0..self.classes.len()).map(|k| self.probs[k * n + i] as f64).sum()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing_mm(&self) -> Spacing {
        self.spacing_mm
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.shape);
        &self.probs[c * n..(c + 1) * n]
    }

    /// Channel of a registry label, if this map carries it.
    pub fn channel_of(&self, label: u16) -> Option<&[f32]> {
        self.classes.iter().position(|l| *l == label).map(|c| self.channel(c))
    }

    /// Most probable label per voxel; ties go to the lower channel.
    pub fn argmax_labels(&self) -> Vec<u16> {
        let n = voxel_count(self.shape);
        (0..n)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.classes.len() {
                    if self.probs[k * n + i] > self.probs[best * n + i] {
                        best = k;
                    }
                }
                self.classes[best]
            })
            .collect()
    }

    pub fn same_grid(&self, other: &ProbMap) -> bool {
        self.shape == other.shape && self.spacing_mm == other.spacing_mm
    }
}

/// Gaussian target `exp(-|p - c|^2 / (2 sigma^2))` over a grid, in voxel units.
pub fn gaussian_heatmap(center: [usize; 3], sigma_vox: f64, shape: Shape) -> Vec<f32> {
    let n = voxel_count(shape);
    let k = 1.0 / (2.0 * sigma_vox * sigma_vox);
    (0..n)
        .map(|i| {
            let p = coords(shape, i);
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - center[a] as f64).powi(2)).sum();
            (-d2 * k).exp() as f32
        })
        .collect()
}

/// One regression channel per organ, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub shape: Shape,
    pub spacing_mm: Spacing,
    pub organs: Vec<u16>,
    pub values: Vec<f32>,
}

/// Peak below which a detection is flagged as unreliable.
pub const LOW_CONFIDENCE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: [usize; 3],
    pub peak: f32,
    pub low_confidence: bool,
}

impl HeatMap {
    pub fn new(shape: Shape, spacing_mm: Spacing, organs: Vec<u16>, values: Vec<f32>) -> Result<Self> {
        if values.len() != voxel_count(shape) * organs.len() {
            return Err(StratError::Shape(format!("{} values for {} heat-map channels", values.len(), organs.len())));
        }
        Ok(Self { shape, spacing_mm, organs, values })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.shape);
        &self.values[c * n..(c + 1) * n]
    }
}

/// Global argmax per channel. The first maximum in raster order wins, which
/// is the lexicographically lowest `(z, y, x)`.
pub fn detect_centers(h: &HeatMap) -> BTreeMap<u16, Detection> {
    h.organs
        .iter()
        .enumerate()
        .map(|(c, organ)| {
            let ch = h.channel(c);
            let mut best = 0;
            for (i, v) in ch.iter().enumerate() {
                if *v > ch[best] {
                    best = i;
                }
            }
            let peak = ch.get(best).copied().unwrap_or(0.0);
            (*organ, Detection { center: coords(h.shape, best), peak, low_confidence: peak < LOW_CONFIDENCE })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heatmap_formula() {
        let shape = [9, 9, 9];
        let h = gaussian_heatmap([4, 4, 4], 2.0, shape);
        let at = |z, y, x| h[soars_core::volume::index(shape, z, y, x)] as f64;
        assert_eq!(at(4, 4, 4), 1.0);
        assert!((at(4, 4, 6) - (-0.5f64).exp()).abs() < 1e-7);
        assert!((at(4, 4, 6) - 0.60653).abs() < 1e-5);
        assert_eq!(h.iter().filter(|v| **v == 1.0).count(), 1);
    }

    proptest! {
        #[test]
        fn heatmap_is_symmetric(dz in 0usize..4, dy in 0usize..4, dx in 0usize..4, sigma in 0.5f64..4.0) {
            let shape = [9, 9, 9];
            let h = gaussian_heatmap([4, 4, 4], sigma, shape);
            let at = |z: usize, y: usize, x: usize| h[soars_core::volume::index(shape, z, y, x)];
            prop_assert_eq!(at(4 + dz, 4 + dy, 4 + dx), at(4 - dz, 4 - dy, 4 - dx));
        }
    }

    #[test]
    fn detection_of_exact_targets() {
        let shape = [7, 8, 9];
        let mut values = gaussian_heatmap([2, 5, 3], 3.0, shape);
        values.extend(vec![0.0; voxel_count(shape)]);
        let d = detect_centers(&HeatMap::new(shape, [1.0; 3], vec![30, 31], values).unwrap());
        assert_eq!(d[&30].center, [2, 5, 3]);
        assert!(!d[&30].low_confidence);
        assert_eq!(d[&31].center, [0, 0, 0]);
        assert!(d[&31].low_confidence);
    }

    #[test]
    fn detection_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let shape = [5, 6, 7];
            let n = voxel_count(shape);
            // Coarse values to force ties.
            let values: Vec<f32> = (0..2 * n).map(|_| rng.random_range(0..20) as f32 / 19.0).collect();
            let h = HeatMap::new(shape, [1.0; 3], vec![1, 2], values.clone()).unwrap();
            let d = detect_centers(&h);
            for (c, organ) in [1u16, 2].iter().enumerate() {
                let ch = &values[c * n..(c + 1) * n];
                let max = ch.iter().cloned().fold(f32::MIN, f32::max);
                let mut expect = None;
                'scan: for z in 0..shape[0] {
                    for y in 0..shape[1] {
                        for x in 0..shape[2] {
                            if ch[soars_core::volume::index(shape, z, y, x)] == max {
                                expect = Some([z, y, x]);
                                break 'scan;
                            }
                        }
                    }
                }
                assert_eq!(Some(d[organ].center), expect);
            }
        }
    }

    #[test]
    fn probmap_validation() {
        let shape = [1, 1, 2];
        assert!(ProbMap::new(shape, [1.0; 3], vec![0, 5], vec![0.5, 1.0, 0.5, 0.0]).is_ok());
        assert!(ProbMap::new(shape, [1.0; 3], vec![0, 5], vec![0.5, 1.0, 0.6, 0.0]).is_err());
        assert!(ProbMap::new(shape, [1.0; 3], vec![5, 0], vec![0.5, 1.0, 0.5, 0.0]).is_err());
        let m = ProbMap::from_scores(shape, [1.0; 3], vec![0, 5, 6], &[1.0, 0.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.argmax_labels(), vec![5, 0]);
        let oh = ProbMap::one_hot(shape, [1.0; 3], vec![0, 5], &[5, 9]).unwrap();
        assert_eq!(oh.argmax_labels(), vec![5, 0]);
    }
}
