//! Anatomically guided MAP reconstruction: a Markov random field prior whose
//! pair weights combine PET/MRI joint-entropy similarity with Bowsher
//! neighbour selection, and a per-voxel adaptive hyperparameter.

mod map;
pub mod neighbors;
pub mod parzen;
pub mod prior;

pub use map::{map_reconstruct, write_log_csv, MapIteration, MapResult};
pub use neighbors::{bowsher_select, full_neighborhood, local_sd, region_mean_weight, NeighborSets};
pub use parzen::{Bandwidth, JointDensity};
pub use prior::{adaptive_beta, prior_gradient, prior_value, similarity_weights, PairIndex, Potential};

use crate::error::{ensure, Error, Result};
use crate::volume::{Volume, VolumeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRule {
    /// Unit preconditioned step every iteration.
    Fixed,
    /// Halve the step up to 20 times until the objective does not decrease.
    Backtracking,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MriScaling {
    MinMax,
    /// Map the given lower/upper percentiles (0-100) onto each other.
    Percentile { lower: f64, upper: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    /// Radius of the cube neighbourhood `N_j`, voxels.
    pub neighborhood_radius: usize,
    pub bowsher_count: usize,
    pub parzen_bandwidth_u: Bandwidth,
    pub parzen_bandwidth_v: Bandwidth,
    pub parzen_bins: usize,
    pub alpha: f64,
    pub n_outer_iterations: usize,
    pub step_rule: StepRule,
    pub potential: Potential,
    pub symmetrize_weights: bool,
    pub mri_scaling: MriScaling,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            neighborhood_radius: 1,
            bowsher_count: 13,
            parzen_bandwidth_u: Bandwidth::Silverman,
            parzen_bandwidth_v: Bandwidth::Silverman,
            parzen_bins: 64,
            alpha: 1.0,
            n_outer_iterations: 10,
            step_rule: StepRule::Backtracking,
            potential: Potential::Identity,
            symmetrize_weights: false,
            mri_scaling: MriScaling::MinMax,
        }
    }
}

impl PriorConfig {
    pub fn neighborhood_size(&self) -> usize {
        (2 * self.neighborhood_radius + 1).pow(3) - 1
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.neighborhood_radius >= 1, Invalid, "neighborhood_radius must be at least 1");
        ensure!(
            (1..=self.neighborhood_size()).contains(&self.bowsher_count),
            Invalid,
            "bowsher_count must lie in 1..={}, got {}",
            self.neighborhood_size(),
            self.bowsher_count
        );
        for bw in [self.parzen_bandwidth_u, self.parzen_bandwidth_v] {
            if let Bandwidth::Fixed(h) = bw {
                ensure!(h > 0.0 && h.is_finite(), Invalid, "Parzen bandwidths must be positive");
            }
        }
        ensure!(self.parzen_bins >= 2, Invalid, "parzen_bins must be at least 2");
        ensure!(self.alpha >= 0.0 && self.alpha.is_finite(), Invalid, "alpha must be >= 0");
        ensure!(self.n_outer_iterations >= 1, Invalid, "n_outer_iterations must be at least 1");
        if let MriScaling::Percentile { lower, upper } = self.mri_scaling {
            ensure!(
                (0.0..100.0).contains(&lower) && lower < upper && upper <= 100.0,
                Invalid,
                "MRI scaling percentiles must satisfy 0 <= lower < upper <= 100"
            );
        }
        Ok(())
    }
}

/// Linear-interpolated percentile of a sorted sample.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let t = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - t) + sorted[i + 1] * t
    } else {
        sorted[i]
    }
}

fn intensity_range(vol: &Volume, mask: &[usize], scaling: MriScaling) -> (f64, f64) {
    let mut vals: Vec<f64> = mask.iter().map(|&i| vol.data()[i]).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    match scaling {
        MriScaling::MinMax => (vals[0], vals[vals.len() - 1]),
        MriScaling::Percentile { lower, upper } => (percentile(&vals, lower), percentile(&vals, upper)),
    }
}

/// Affine rescaling of `mri` so that its intensity range inside `mask`
/// matches that of `pet`.
pub fn scale_mri_to_pet(mri: &Volume, pet: &Volume, mask: &Volume, scaling: MriScaling) -> Result<Volume> {
    mri.check_same_grid(pet, "PET")?;
    mri.check_same_grid(mask, "mask")?;
    let idx = mask.mask_indices();
    ensure!(!idx.is_empty(), Invalid, "MRI scaling mask is empty");
    let (m_lo, m_hi) = intensity_range(mri, &idx, scaling);
    let (p_lo, p_hi) = intensity_range(pet, &idx, scaling);
    if m_hi <= m_lo {
        return Err(Error::Numerical(format!(
            "MRI intensity range inside the mask is degenerate ({m_lo} to {m_hi})"
        )));
    }
    let gain = (p_hi - p_lo) / (m_hi - m_lo);
    mri.like(
        VolumeKind::Generic,
        mri.data().iter().map(|&x| p_lo + gain * (x - m_lo)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<f64>) -> Volume {
        Volume::new([data.len(), 1, 1], [1.0; 3], VolumeKind::Generic, data).unwrap()
    }

    #[test]
    fn scaling_cases() {
        let mask = vol(vec![1.0; 4]);
        let pet = vol(vec![0.0, 10.0, 5.0, 2.0]);
        let same = scale_mri_to_pet(&pet, &pet, &mask, MriScaling::MinMax).unwrap();
        assert_eq!(same.data(), pet.data());
        let mri = vol(vec![1.0, 0.0, 0.5, 0.25]);
        let s = scale_mri_to_pet(&mri, &pet, &mask, MriScaling::MinMax).unwrap();
        assert_eq!(s.data(), &[10.0, 0.0, 5.0, 2.5]);
        let flat = vol(vec![0.3; 4]);
        assert!(scale_mri_to_pet(&flat, &pet, &mask, MriScaling::MinMax).is_err());
    }

    #[test]
    fn percentile_scaling_ignores_outliers() {
        let mut m: Vec<f64> = (0..101).map(|i| i as f64).collect();
        m[100] = 1e6;
        let mri = vol(m);
        let pet = vol((0..101).map(|i| 2.0 * i as f64).collect());
        let mask = vol(vec![1.0; 101]);
        let s = scale_mri_to_pet(&mri, &pet, &mask, MriScaling::Percentile { lower: 1.0, upper: 99.0 }).unwrap();
        assert!((s.data()[50] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(PriorConfig::default().validate().is_ok());
        let bad = PriorConfig {
            bowsher_count: 27,
            ..PriorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PriorConfig {
            parzen_bandwidth_u: Bandwidth::Fixed(-1.0),
            ..PriorConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
