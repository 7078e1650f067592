//! Ordered-subsets expectation maximisation.

use crate::error::{ensure, Result};
use crate::filter::smooth_volume_fwhm;
use crate::projector::{Projector, Sinogram, SinogramVariant, SystemFactors};
use crate::volume::{Volume, VolumeKind};

/// Guard for denominators that may vanish in cold bins.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct OsemConfig {
    pub n_iterations: usize,
    pub n_subsets: usize,
    pub init_value: f64,
    /// Gaussian post-filter FWHM in millimetres; 0 disables it.
    pub post_filter_fwhm: f64,
}

impl Default for OsemConfig {
    fn default() -> Self {
        OsemConfig {
            n_iterations: 8,
            n_subsets: 4,
            init_value: 1.0,
            post_filter_fwhm: 0.0,
        }
    }
}

impl OsemConfig {
    pub fn validate(&self, n_angles: usize) -> Result<()> {
        ensure!(self.n_iterations >= 1, Invalid, "n_iterations must be at least 1");
        ensure!(self.n_subsets >= 1, Invalid, "n_subsets must be at least 1");
        ensure!(
            n_angles % self.n_subsets == 0,
            Invalid,
            "n_subsets {} does not divide the {n_angles} projection angles",
            self.n_subsets
        );
        ensure!(
            self.init_value > 0.0 && self.init_value.is_finite(),
            Invalid,
            "init_value must be positive"
        );
        ensure!(self.post_filter_fwhm >= 0.0, Invalid, "post_filter_fwhm must be >= 0");
        Ok(())
    }
}

/// Angle indices of each subset, formed by striding: subset `s` holds the
/// angles `k` with `k % n_subsets == s`.
pub fn angle_subsets(n_angles: usize, n_subsets: usize) -> Vec<Vec<usize>> {
    (0..n_subsets)
        .map(|s| (s..n_angles).step_by(n_subsets).collect())
        .collect()
}

/// `sum_i y_i ln(ybar_i) - ybar_i`, dropping the `ln(y_i!)` constant.
pub fn poisson_log_likelihood(counts: &[f64], expected: &[f64]) -> f64 {
    counts
        .iter()
        .zip(expected)
        .map(|(&y, &m)| {
            let ll = if y > 0.0 { y * m.max(DENOMINATOR_FLOOR).ln() } else { 0.0 };
            ll - m
        })
        .sum()
}

/// Measured counts together with the system model, ready for iterative
/// reconstruction. Holds the per-ray multiplicative factor `n * a`.
pub struct EmissionData<'a> {
    pub projector: &'a Projector,
    pub counts: &'a [f64],
    pub multiplicative: Vec<f64>,
    pub background: &'a [f64],
    pub n_slices: usize,
}

impl<'a> EmissionData<'a> {
    pub fn new(projector: &'a Projector, counts: &'a Sinogram, factors: &'a SystemFactors) -> Result<Self> {
        ensure!(
            counts.variant() == SinogramVariant::Counts,
            Invalid,
            "reconstruction needs a count sinogram"
        );
        projector.check_sinogram(counts)?;
        factors.check_matches(counts)?;
        factors.validate()?;
        Ok(EmissionData {
            projector,
            counts: counts.data(),
            multiplicative: factors.multiplicative(),
            background: factors.background.data(),
            n_slices: counts.n_slices(),
        })
    }

    pub fn n_voxels(&self) -> usize {
        let (nx, ny, _) = self.projector.grid();
        nx * ny * self.n_slices
    }

    pub fn dims(&self) -> [usize; 3] {
        let (nx, ny, _) = self.projector.grid();
        [nx, ny, self.n_slices]
    }

    /// Expected counts `n a G u + b`.
    pub fn expected(&self, u: &[f64]) -> Vec<f64> {
        let mut m = self.projector.forward_raw(u, None);
        for ((v, na), b) in m.iter_mut().zip(&self.multiplicative).zip(self.background) {
            *v = na * *v + b;
        }
        m
    }

    pub fn log_likelihood(&self, u: &[f64]) -> f64 {
        poisson_log_likelihood(self.counts, &self.expected(u))
    }

    /// Sensitivity `G^T (n a)` restricted to the given angles.
    pub fn sensitivity(&self, angles: Option<&[usize]>) -> Vec<f64> {
        self.projector.back_raw(&self.multiplicative, angles)
    }

    /// Gradient of the log-likelihood, `G^T [n a (y / ybar - 1)]`.
    pub fn log_likelihood_gradient(&self, expected: &[f64]) -> Vec<f64> {
        let w: Vec<f64> = self
            .counts
            .iter()
            .zip(expected)
            .zip(&self.multiplicative)
            .map(|((&y, &m), &na)| na * (y / m.max(DENOMINATOR_FLOOR) - 1.0))
            .collect();
        self.projector.back_raw(&w, None)
    }

    pub fn to_volume(&self, data: Vec<f64>) -> Result<Volume> {
        let (_, _, spacing) = self.projector.grid();
        Volume::new(self.dims(), spacing, VolumeKind::Activity, data)
    }
}

/// OSEM with precomputed subset sensitivities.
pub struct Osem<'a> {
    data: EmissionData<'a>,
    subsets: Vec<Vec<usize>>,
    subset_sensitivity: Vec<Vec<f64>>,
    cfg: OsemConfig,
}

impl<'a> Osem<'a> {
    pub fn new(
        counts: &'a Sinogram,
        factors: &'a SystemFactors,
        projector: &'a Projector,
        cfg: &OsemConfig,
    ) -> Result<Self> {
        cfg.validate(counts.geometry().n_angles())?;
        let data = EmissionData::new(projector, counts, factors)?;
        let subsets = angle_subsets(counts.geometry().n_angles(), cfg.n_subsets);
        let subset_sensitivity = subsets.iter().map(|s| data.sensitivity(Some(s))).collect();
        Ok(Osem {
            data,
            subsets,
            subset_sensitivity,
            cfg: cfg.clone(),
        })
    }

    pub fn data(&self) -> &EmissionData<'a> {
        &self.data
    }

    /// One pass over all subsets, in place.
    pub fn iterate(&self, u: &mut [f64]) {
        let d = &self.data;
        for (subset, sens) in self.subsets.iter().zip(&self.subset_sensitivity) {
            let fp = d.projector.forward_raw(u, Some(subset));
            let mut ratio = vec![0.0; fp.len()];
            let nb = d.projector.geometry().n_bins();
            let rays_per_slice = d.projector.geometry().n_rays();
            for z in 0..d.n_slices {
                for &a in subset {
                    let start = z * rays_per_slice + a * nb;
                    for i in start..start + nb {
                        let na = d.multiplicative[i];
                        let denom = (na * fp[i] + d.background[i]).max(DENOMINATOR_FLOOR);
                        ratio[i] = na * d.counts[i] / denom;
                    }
                }
            }
            let bp = d.projector.back_raw(&ratio, Some(subset));
            for ((uj, bj), &sj) in u.iter_mut().zip(bp).zip(sens) {
                if sj > 0.0 {
                    *uj *= bj / sj;
                }
            }
        }
    }

    /// Runs all iterations from `init`, calling `observe(iteration, u)` after
    /// each full pass. The post-filter is not applied.
    pub fn run(&self, mut u: Vec<f64>, mut observe: impl FnMut(usize, &[f64])) -> Vec<f64> {
        for it in 0..self.cfg.n_iterations {
            self.iterate(&mut u);
            observe(it + 1, &u);
        }
        u
    }
}

pub fn osem_reconstruct(
    counts: &Sinogram,
    factors: &SystemFactors,
    projector: &Projector,
    cfg: &OsemConfig,
) -> Result<Volume> {
    let osem = Osem::new(counts, factors, projector, cfg)?;
    let n = osem.data.n_voxels();
    let total_sens = osem.data.sensitivity(None);
    let frozen = total_sens.iter().filter(|&&s| s <= 0.0).count();
    if frozen > 0 {
        log::info!("osem: {frozen} voxels with zero sensitivity stay at the initial value");
    }
    let u = osem.run(vec![cfg.init_value; n], |_, _| {});
    let vol = osem.data.to_volume(u)?;
    Ok(if cfg.post_filter_fwhm > 0.0 {
        smooth_volume_fwhm(&vol, cfg.post_filter_fwhm)
    } else {
        vol
    })
}
