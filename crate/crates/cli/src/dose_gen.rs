//! Synthetic dose plans for phantom cases.
//!
//! A plan is a sum of Gaussian dose clouds centred near the middle of the
//! body on a coarser grid than the image, with a small uniform floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soars_core::{Volume3D, VolumeKind};

use crate::error::Result;

pub const DOSE_SPACING_MM: f64 = 2.0;
pub const PRESCRIPTION_GY: f64 = 70.0;
const FLOOR_GY: f64 = 2.0;

/// Dose grid covering `image`, regenerated identically from `seed`.
pub fn synthetic_dose(image: &Volume3D, seed: u64) -> Result<Volume3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD05E_D05E_D05E_D05E);
    let (shape, sp) = (image.shape(), image.spacing_mm());
    let extent_mm: Vec<f64> = (0..3).map(|a| shape[a] as f64 * sp[a]).collect();
    let dshape: [usize; 3] = std::array::from_fn(|a| (extent_mm[a] / DOSE_SPACING_MM).ceil().max(1.0) as usize);
    let clouds: Vec<([f64; 3], f64, f64)> = (0..rng.random_range(1..=3))
        .map(|k| {
            let c = std::array::from_fn(|a| extent_mm[a] * rng.random_range(0.35..0.65));
            let width = extent_mm.iter().cloned().fold(f64::INFINITY, f64::min) * rng.random_range(0.12..0.25);
            let peak = if k == 0 { PRESCRIPTION_GY } else { PRESCRIPTION_GY * rng.random_range(0.3..0.8) };
            (c, width, peak)
        })
        .collect();
    let mut values = Vec::with_capacity(dshape.iter().product());
    for z in 0..dshape[0] {
        for y in 0..dshape[1] {
            for x in 0..dshape[2] {
                let p = [z, y, x].map(|i| (i as f64 + 0.5) * DOSE_SPACING_MM);
                let d: f64 = clouds
                    .iter()
                    .map(|(c, w, peak)| {
                        let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                        peak * (-r2 / (2.0 * w * w)).exp()
                    })
                    .sum();
                values.push((d.min(1.1 * PRESCRIPTION_GY) + FLOOR_GY) as f32);
            }
        }
    }
    Ok(Volume3D::with_origin(dshape, [DOSE_SPACING_MM; 3], image.origin_mm(), values, VolumeKind::DoseGy)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_are_seeded_and_cover_the_image() {
        let img = Volume3D::filled([32, 32, 33], [1.0; 3], 0.0, VolumeKind::Intensity).unwrap();
        let a = synthetic_dose(&img, 7).unwrap();
        assert_eq!(a, synthetic_dose(&img, 7).unwrap());
        assert_ne!(a, synthetic_dose(&img, 8).unwrap());
        assert_eq!(a.shape(), [16, 16, 17]);
        assert!(a.values().iter().all(|v| *v >= FLOOR_GY as f32 && *v <= (1.1 * PRESCRIPTION_GY + FLOOR_GY) as f32));
        let aligned = soars_core::dosimetry::align_dose(&a, &img).unwrap();
        assert!(aligned.covered.iter().all(|c| *c));
    }
}
