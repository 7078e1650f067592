use std::path::Path;

use rayon::prelude::*;

use super::neighbors::{bowsher_select, full_neighborhood, local_sd, region_mean_weight};
use super::parzen::JointDensity;
use super::prior::{adaptive_beta, prior_gradient, prior_value, similarity_weights, xi_coefficients, PairIndex};
use super::{scale_mri_to_pet, PriorConfig, StepRule};
use crate::error::{ensure, Error, Result};
use crate::io::write_atomic;
use crate::osem::EmissionData;
use crate::projector::{Projector, Sinogram, SystemFactors};
use crate::volume::{Volume, VolumeKind};

const MAX_HALVINGS: usize = 20;
/// A voxel pushed to zero or below keeps this fraction of its previous value.
const POSITIVITY_FRACTION: f64 = 1e-3;
/// Relative value given to non-positive initial voxels inside the field of view.
const INIT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MapIteration {
    pub iteration: usize,
    pub log_likelihood: f64,
    /// `sum_j beta_j phi(S_j)` after the update.
    pub prior_value: f64,
    pub objective: f64,
    pub step_scale: f64,
    /// Objective of the previous iterate under this iteration's frozen prior
    /// state; the accepted step never goes below it under backtracking.
    pub objective_before: f64,
}

#[derive(Clone, Debug)]
pub struct MapResult {
    pub image: Volume,
    pub log: Vec<MapIteration>,
}

pub fn write_log_csv(log: &[MapIteration], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    w.write_record(["iteration", "log_likelihood", "prior_value", "objective", "step_scale"])
        .map_err(csv_err)?;
    for r in log {
        w.write_record([
            r.iteration.to_string(),
            r.log_likelihood.to_string(),
            r.prior_value.to_string(),
            r.objective.to_string(),
            r.step_scale.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

/// Preconditioned gradient ascent on `L(u) - sum_j beta_j phi(S_j(u))`.
///
/// Every outer iteration rescales the MRI to the current estimate and
/// recomputes the local deviations, joint density, weights, `z` and `beta`,
/// all held fixed while the step is taken. Bowsher neighbours are selected
/// once: a positive affine rescaling does not change their ranking.
pub fn map_reconstruct(
    counts: &Sinogram,
    factors: &SystemFactors,
    projector: &Projector,
    mri: &Volume,
    cfg: &PriorConfig,
    init: &Volume,
) -> Result<MapResult> {
    cfg.validate()?;
    let data = EmissionData::new(projector, counts, factors)?;
    let dims = data.dims();
    ensure!(
        init.dims() == dims && mri.dims() == dims,
        Shape,
        "init {:?} and MRI {:?} must match the reconstruction grid {dims:?}",
        init.dims(),
        mri.dims()
    );
    ensure!(init.data().iter().all(|&x| x >= 0.0), Invalid, "initial image must be non-negative");
    let sens = data.sensitivity(None);
    let inside: Vec<bool> = sens.iter().map(|&s| s > 0.0).collect();
    let mask = init.like(VolumeKind::Mask, inside.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    let mask_idx = mask.mask_indices();
    ensure!(!mask_idx.is_empty(), Invalid, "no voxel has positive sensitivity");

    let init_max = init.data().iter().cloned().fold(0.0, f64::max);
    ensure!(init_max > 0.0, Invalid, "initial image is zero everywhere");
    let mut u: Vec<f64> = init
        .data()
        .iter()
        .zip(&inside)
        .map(|(&x, &m)| match (m, x > 0.0) {
            (false, _) => 0.0,
            (true, true) => x,
            (true, false) => INIT_FLOOR * init_max,
        })
        .collect();

    let full = full_neighborhood(dims, cfg.neighborhood_radius);
    let mut selected = None;
    let mut log = Vec::with_capacity(cfg.n_outer_iterations);

    for it in 1..=cfg.n_outer_iterations {
        let u_vol = data.to_volume(u.clone())?;
        let v_vol = scale_mri_to_pet(mri, &u_vol, &mask, cfg.mri_scaling)?;
        let v = v_vol.data();
        let (sel, pairs) = selected.get_or_insert_with(|| {
            let s = bowsher_select(&v_vol, cfg.neighborhood_radius, cfg.bowsher_count);
            let p = PairIndex::new(&s);
            (s, p)
        });

        let sigma_u = local_sd(&u, &full);
        let sigma_v = local_sd(v, &full);
        let xi = xi_coefficients(&sigma_u, &full);
        let us: Vec<f64> = mask_idx.iter().map(|&i| u[i]).collect();
        let vs: Vec<f64> = mask_idx.iter().map(|&i| v[i]).collect();
        let density = JointDensity::fit(&us, &vs, cfg.parzen_bandwidth_u, cfg.parzen_bandwidth_v, cfg.parzen_bins)?;
        let omega = similarity_weights(
            &u,
            v,
            sel,
            &sigma_u,
            &sigma_v,
            |a, b| density.eval(a, b),
            cfg.symmetrize_weights,
        );
        let z = region_mean_weight(&u, sel);
        let beta = adaptive_beta(&z, &sens, cfg.alpha);

        let objective = |x: &[f64]| -> (f64, f64, f64) {
            let ll = data.log_likelihood(x);
            let pv = prior_value(x, sel, &xi, &omega, cfg.potential, Some(&beta));
            (ll, pv, ll - pv)
        };

        let expected = data.expected(&u);
        let grad_l = data.log_likelihood_gradient(&expected);
        let grad_r = prior_gradient(&u, sel, pairs, &xi, &omega, cfg.potential);
        let direction: Vec<f64> = grad_l
            .iter()
            .zip(&grad_r)
            .zip(&beta)
            .map(|((gl, gr), b)| gl - b * gr)
            .collect();
        let (_, _, phi0) = objective(&u);
        if !phi0.is_finite() {
            return Err(Error::Numerical(format!("MAP objective is not finite at iteration {it}")));
        }

        let candidate = |s: f64| -> Vec<f64> {
            u.par_iter()
                .zip(&direction)
                .zip(&sens)
                .map(|((&uj, &dj), &sj)| {
                    if sj <= 0.0 {
                        return 0.0;
                    }
                    let raw = uj + s * uj / sj * dj;
                    if raw > 0.0 {
                        raw
                    } else {
                        uj * POSITIVITY_FRACTION
                    }
                })
                .collect()
        };

        let (next, step_scale, (ll, pv, phi)) = match cfg.step_rule {
            StepRule::Fixed => {
                let next = candidate(1.0);
                let obj = objective(&next);
                (next, 1.0, obj)
            }
            StepRule::Backtracking => {
                let mut accepted = None;
                let mut s = 1.0;
                for _ in 0..=MAX_HALVINGS {
                    let next = candidate(s);
                    let obj = objective(&next);
                    if obj.2.is_finite() && obj.2 >= phi0 {
                        accepted = Some((next, s, obj));
                        break;
                    }
                    s *= 0.5;
                }
                accepted.unwrap_or_else(|| {
                    let obj = objective(&u);
                    (u.clone(), 0.0, obj)
                })
            }
        };
        if !phi.is_finite() {
            return Err(Error::Numerical(format!(
                "MAP objective became non-finite at iteration {it} (log-likelihood {ll}, prior {pv})"
            )));
        }
        log::debug!("map iteration {it}: objective {phi:.6e}, step {step_scale}");
        log.push(MapIteration {
            iteration: it,
            log_likelihood: ll,
            prior_value: pv,
            objective: phi,
            step_scale,
            objective_before: phi0,
        });
        u = next;
    }
    Ok(MapResult {
        image: data.to_volume(u)?,
        log,
    })
}
