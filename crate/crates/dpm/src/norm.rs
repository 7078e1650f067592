//! Affine intensity maps between image units and the model's [−1, 1] range.
//!
//! MRI targets use one (min, max) pair taken over the whole training set, so
//! synthesized images can be mapped back without knowing the subject's MRI.
//! PET conditions are divided by their own volume mean first, which removes
//! the dependence on injected dose and count level, and then scaled by the
//! largest max/mean ratio seen in training.

use petdiff_core::{Result, Volume, VolumeKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mri_min: f64,
    pub mri_max: f64,
    /// Max/mean ratio mapped to +1.
    pub pet_scale: f64,
}

impl Normalization {
    /// Fits the constants on `(pet, mri)` training volumes.
    pub fn fit<'a>(pairs: impl IntoIterator<Item = (&'a Volume, &'a Volume)>) -> Result<Self> {
        let (mut lo, mut hi, mut scale) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        let mut n = 0;
        for (pet, mri) in pairs {
            let (a, b) = mri.min_max();
            lo = lo.min(a);
            hi = hi.max(b);
            let m = pet.mean();
            ensure!(m > 0.0, Invalid, "PET volume with non-positive mean {m} cannot be normalized");
            scale = scale.max(pet.min_max().1 / m);
            n += 1;
        }
        ensure!(n > 0, Invalid, "normalization needs at least one training volume");
        let norm = Normalization {
            mri_min: lo,
            mri_max: hi,
            pet_scale: scale,
        };
        norm.validate()?;
        Ok(norm)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.mri_max > self.mri_min && self.mri_min.is_finite() && self.mri_max.is_finite(),
            Invalid,
            "MRI range [{}, {}] is empty or not finite",
            self.mri_min,
            self.mri_max
        );
        ensure!(
            self.pet_scale > 0.0 && self.pet_scale.is_finite(),
            Invalid,
            "PET scale must be positive, got {}",
            self.pet_scale
        );
        Ok(())
    }

    pub fn mri_to_model(&self, mri: &Volume) -> Result<Volume> {
        let (lo, w) = (self.mri_min, self.mri_max - self.mri_min);
        mri.like(VolumeKind::Generic, mri.data().iter().map(|v| 2.0 * (v - lo) / w - 1.0).collect())
    }

    pub fn mri_from_model(&self, x: &Volume) -> Result<Volume> {
        let (lo, w) = (self.mri_min, self.mri_max - self.mri_min);
        x.like(VolumeKind::Anatomical, x.data().iter().map(|v| (v + 1.0) / 2.0 * w + lo).collect())
    }

    pub fn pet_to_model(&self, pet: &Volume) -> Result<Volume> {
        let m = pet.mean();
        ensure!(m > 0.0, Invalid, "PET volume with non-positive mean {m} cannot be normalized");
        let k = 2.0 / (self.pet_scale * m);
        pet.like(VolumeKind::Generic, pet.data().iter().map(|v| k * v - 1.0).collect())
    }
}
