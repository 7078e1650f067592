//! 3D synthesis with a 2D model: every reverse step updates the axial slices
//! independently and then smooths the stack along z by minimizing
//! `‖X − Y‖² + τ Σ √((D_z X)² + ε²)` with gradient descent.

use std::path::Path;

use petdiff_core::io::write_atomic;
use petdiff_core::rng::Generator;
use petdiff_core::{Error, Result, RngStream, Slice2D, Volume, VolumeKind};
use rayon::prelude::*;

use crate::model::EpsilonModel;
use crate::norm::Normalization;
use crate::sample::{reverse_step, standard_normal};
use crate::schedule::NoiseSchedule;

/// Step halvings tried before a TV iteration gives up.
const MAX_HALVINGS: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub tau: f64,
    pub tv_steps: usize,
    pub tv_step_size: f64,
    /// Smoothing of `|d|`, relative to the value range of the input.
    pub tv_smooth_eps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tau: 0.05,
            tv_steps: 10,
            tv_step_size: 0.1,
            tv_smooth_eps: 1e-3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau >= 0.0 && self.tau.is_finite(), Invalid, "tau must be >= 0, got {}", self.tau);
        ensure!(self.tau == 0.0 || self.tv_steps >= 1, Invalid, "tv_steps must be >= 1 when tau > 0");
        ensure!(self.tv_step_size > 0.0, Invalid, "tv_step_size must be > 0, got {}", self.tv_step_size);
        ensure!(self.tv_smooth_eps > 0.0, Invalid, "tv_smooth_eps must be > 0, got {}", self.tv_smooth_eps);
        Ok(())
    }
}

/// One generator per axial slice, derived from `seed`.
pub fn slice_streams(seed: u64, nz: usize) -> Vec<Generator> {
    let root = RngStream::new(seed).split_named("synth");
    (0..nz).map(|z| root.split(z as u64).generator()).collect()
}

fn stack(slices: Vec<Slice2D>, spacing: [f64; 3]) -> Result<Volume> {
    Volume::from_slices(&slices, spacing, VolumeKind::Generic)
}

/// Applies one reverse step to every slice of `x_t`, slice `z` drawing its
/// noise from `streams[z]`.
pub fn slice_update<M: EpsilonModel + ?Sized>(
    model: &M,
    x_t: &Volume,
    c: &Volume,
    t: usize,
    sched: &NoiseSchedule,
    streams: &mut [Generator],
) -> Result<Volume> {
    x_t.check_same_grid(c, "slice update condition")?;
    let nz = x_t.dims()[2];
    ensure!(
        streams.len() == nz,
        Shape,
        "{} noise streams for {nz} slices",
        streams.len()
    );
    let slices: Vec<Slice2D> = streams
        .par_iter_mut()
        .enumerate()
        .map(|(z, g)| reverse_step(model, &x_t.slice(z), t, &c.slice(z), sched, g))
        .collect::<Result<_>>()?;
    stack(slices, x_t.spacing())
}

fn smooth_abs(d: f64, eps: f64) -> f64 {
    (d * d + eps * eps).sqrt()
}

fn column_objective(x: &[f64], y: &[f64], tau: f64, eps: f64) -> f64 {
    let fid: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let tv: f64 = x.windows(2).map(|w| smooth_abs(w[1] - w[0], eps)).sum();
    fid + tau * tv
}

fn column_gradient(x: &[f64], y: &[f64], tau: f64, eps: f64, g: &mut [f64]) {
    for i in 0..x.len() {
        g[i] = 2.0 * (x[i] - y[i]);
    }
    for i in 0..x.len().saturating_sub(1) {
        let d = x[i + 1] - x[i];
        let s = tau * d / smooth_abs(d, eps);
        g[i + 1] += s;
        g[i] -= s;
    }
}

/// Gradient descent on one z-column; returns the objective after every
/// iteration, starting with the value at `x = y`.
fn solve_column(y: &[f64], tau: f64, eps: f64, steps: usize, step0: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x = y.to_vec();
    let mut f = column_objective(&x, y, tau, eps);
    let mut trace = vec![f];
    let mut g = vec![0.0; x.len()];
    let mut trial = vec![0.0; x.len()];
    for _ in 0..steps {
        column_gradient(&x, y, tau, eps, &mut g);
        let mut step = step0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            for i in 0..x.len() {
                trial[i] = x[i] - step * g[i];
            }
            let ft = column_objective(&trial, y, tau, eps);
            if ft <= f {
                std::mem::swap(&mut x, &mut trial);
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trace.push(f);
        if !accepted {
            break;
        }
    }
    (x, trace)
}

/// Smooths `y` along z; also returns the total objective after each iteration.
pub fn tv_denoise_z_traced(y: &Volume, tau: f64, cfg: &SynthConfig) -> Result<(Volume, Vec<f64>)> {
    ensure!(tau >= 0.0 && tau.is_finite(), Invalid, "tau must be >= 0, got {tau}");
    if tau == 0.0 {
        return Ok((y.clone(), Vec::new()));
    }
    ensure!(cfg.tv_steps >= 1, Invalid, "tv_steps must be >= 1 when tau > 0");
    let [nx, ny, nz] = y.dims();
    let plane = nx * ny;
    let (lo, hi) = y.min_max();
    let eps = cfg.tv_smooth_eps * if hi > lo { hi - lo } else { 1.0 };
    let data = y.data();
    let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..plane)
        .into_par_iter()
        .map(|p| {
            let col: Vec<f64> = (0..nz).map(|z| data[p + plane * z]).collect();
            solve_column(&col, tau, eps, cfg.tv_steps, cfg.tv_step_size)
        })
        .collect();
    let mut out = vec![0.0; data.len()];
    let mut trace = vec![0.0; cfg.tv_steps + 1];
    for (p, (x, tr)) in cols.iter().enumerate() {
        for z in 0..nz {
            out[p + plane * z] = x[z];
        }
        for (k, slot) in trace.iter_mut().enumerate() {
            // a column that stopped early keeps its last value
            *slot += tr[k.min(tr.len() - 1)];
        }
    }
    if trace.iter().any(|f| !f.is_finite()) {
        return Err(Error::Numerical(format!("non-finite TV objective (tau {tau})")));
    }
    Ok((y.like(y.kind(), out)?, trace))
}

pub fn tv_denoise_z(y: &Volume, tau: f64, cfg: &SynthConfig) -> Result<Volume> {
    Ok(tv_denoise_z_traced(y, tau, cfg)?.0)
}

/// Exact (unsmoothed) TV objective, `‖X − Y‖² + τ‖D_z X‖₁`.
pub fn tv_objective(x: &Volume, y: &Volume, tau: f64) -> f64 {
    let [nx, ny, nz] = x.dims();
    let plane = nx * ny;
    let (a, b) = (x.data(), y.data());
    let fid: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    let tv: f64 = (0..nz.saturating_sub(1) * plane).map(|i| (a[i + plane] - a[i]).abs()).sum();
    fid + tau * tv
}

/// Mean absolute difference between neighbouring slices.
pub fn z_total_variation(x: &Volume) -> f64 {
    let [nx, ny, nz] = x.dims();
    let plane = nx * ny;
    if nz < 2 {
        return 0.0;
    }
    let d = x.data();
    let n = (nz - 1) * plane;
    (0..n).map(|i| (d[i + plane] - d[i]).abs()).sum::<f64>() / n as f64
}

/// Reverse chain over a normalized condition volume; returns model units.
pub fn synthesize_normalized<M: EpsilonModel + ?Sized>(
    model: &M,
    c: &Volume,
    sched: &NoiseSchedule,
    cfg: &SynthConfig,
) -> Result<Volume> {
    cfg.validate()?;
    let [nx, ny, nz] = c.dims();
    let mut streams = slice_streams(cfg.seed, nz);
    let init: Vec<Slice2D> = streams.iter_mut().map(|g| standard_normal(nx, ny, g)).collect();
    let mut x = stack(init, c.spacing())?;
    for t in (1..=sched.t_max()).rev() {
        let y = slice_update(model, &x, c, t, sched, &mut streams)?;
        x = tv_denoise_z(&y, cfg.tau, cfg)?;
    }
    Ok(x)
}

/// Pseudo-MRI for a PET volume, in MRI units.
pub fn synthesize_volume<M: EpsilonModel + ?Sized>(
    model: &M,
    norm: &Normalization,
    pet: &Volume,
    sched: &NoiseSchedule,
    cfg: &SynthConfig,
) -> Result<Volume> {
    norm.validate()?;
    let c = norm.pet_to_model(pet)?;
    norm.mri_from_model(&synthesize_normalized(model, &c, sched, cfg)?)
}

pub fn rmse(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_grid(b, "RMSE")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TauSearch {
    pub best: f64,
    /// `(tau, mean RMSE)` in grid order.
    pub rows: Vec<(f64, f64)>,
}

impl TauSearch {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("tau,mean_rmse\n");
        for (tau, r) in &self.rows {
            s.push_str(&format!("{tau},{r}\n"));
        }
        write_atomic(path, s.as_bytes())
    }
}

/// Picks the τ with the lowest mean RMSE to the true MRI over `val`. Ties go
/// to the smaller τ, and among equal τ to the first listed.
pub fn grid_search_tau<M: EpsilonModel + ?Sized>(
    model: &M,
    norm: &Normalization,
    val: &[(Volume, Volume)],
    grid: &[f64],
    sched: &NoiseSchedule,
    cfg: &SynthConfig,
) -> Result<TauSearch> {
    ensure!(!grid.is_empty(), Invalid, "tau grid is empty");
    ensure!(!val.is_empty(), Invalid, "validation set is empty");
    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &tau in grid {
        let c = SynthConfig { tau, ..cfg.clone() };
        let mut total = 0.0;
        for (pet, mri) in val {
            total += rmse(&synthesize_volume(model, norm, pet, sched, &c)?, mri)?;
        }
        let score = total / val.len() as f64;
        log::info!("tau {tau}: mean RMSE {score:.5}");
        rows.push((tau, score));
        best = match best {
            Some((bt, bs)) if bs < score || (bs == score && bt <= tau) => Some((bt, bs)),
            _ => Some((tau, score)),
        };
    }
    Ok(TauSearch {
        best: best.unwrap().0,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianOracle;
    use crate::sample::sample_with;
    use crate::schedule::{make_schedule, ScheduleKind};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sched() -> NoiseSchedule {
        make_schedule(30, ScheduleKind::Linear, 1e-3, 0.5).unwrap()
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut g = RngStream::new(seed).generator();
        let n = dims.iter().product();
        Volume::new(dims, [1.0; 3], VolumeKind::Generic, (0..n).map(|_| g.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn zero_tau_is_identity() {
        let y = random_volume([3, 4, 5], 1);
        let out = tv_denoise_z(&y, 0.0, &SynthConfig::default()).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn constant_along_z_is_fixed_point() {
        let base = random_volume([4, 3, 1], 2);
        let y = Volume::from_fn([4, 3, 6], [1.0; 3], VolumeKind::Generic, |x, yy, _| base.get(x, yy, 0)).unwrap();
        let out = tv_denoise_z(&y, 0.7, &SynthConfig::default()).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..20 {
            let y = random_volume([3, 3, 7], 10 + seed);
            let cfg = SynthConfig {
                tv_steps: 25,
                tv_step_size: 0.4,
                ..Default::default()
            };
            let (_, trace) = tv_denoise_z_traced(&y, 0.3, &cfg).unwrap();
            assert!(trace.windows(2).all(|w| w[1] <= w[0]), "{trace:?}");
            assert!(trace.last() < trace.first());
        }
    }

    #[test]
    fn single_slice_update_matches_reverse_step() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let x = random_volume([5, 4, 1], 3);
        let c = random_volume([5, 4, 1], 4);
        let mut streams = slice_streams(7, 1);
        let out = slice_update(&o, &x, &c, 12, &s, &mut streams).unwrap();
        let mut g = slice_streams(7, 1).remove(0);
        let direct = reverse_step(&o, &x.slice(0), 12, &c.slice(0), &s, &mut g).unwrap();
        assert_eq!(out.slice(0), direct);
    }

    #[test]
    fn identical_slices_with_identical_noise_stay_identical() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let base = random_volume([4, 4, 1], 5);
        let x = Volume::from_fn([4, 4, 3], [1.0; 3], VolumeKind::Generic, |a, b, _| base.get(a, b, 0)).unwrap();
        let stream = RngStream::new(1).generator();
        let mut streams = vec![stream.clone(), stream.clone(), stream];
        let out = slice_update(&o, &x, &x, 9, &s, &mut streams).unwrap();
        assert_eq!(out.slice(0), out.slice(1));
        assert_eq!(out.slice(1), out.slice(2));
    }

    #[test]
    fn permuting_slices_and_streams_permutes_output() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let x = random_volume([3, 3, 4], 6);
        let c = random_volume([3, 3, 4], 7);
        let perm = [2usize, 0, 3, 1];
        let streams = slice_streams(3, 4);
        let out = slice_update(&o, &x, &c, 20, &s, &mut streams.clone()).unwrap();
        let px = Volume::from_slices(&perm.map(|z| x.slice(z)), [1.0; 3], VolumeKind::Generic).unwrap();
        let pc = Volume::from_slices(&perm.map(|z| c.slice(z)), [1.0; 3], VolumeKind::Generic).unwrap();
        let mut ps: Vec<Generator> = perm.iter().map(|&z| streams[z].clone()).collect();
        let pout = slice_update(&o, &px, &pc, 20, &s, &mut ps).unwrap();
        for (k, &z) in perm.iter().enumerate() {
            assert_eq!(pout.slice(k), out.slice(z));
        }
    }

    #[test]
    fn zero_tau_equals_independent_slice_sampling() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let c = random_volume([4, 3, 3], 8);
        let cfg = SynthConfig {
            tau: 0.0,
            seed: 11,
            ..Default::default()
        };
        let vol = synthesize_normalized(&o, &c, &s, &cfg).unwrap();
        let mut streams = slice_streams(11, 3);
        for z in 0..3 {
            let single = sample_with(&o, &c.slice(z), &s, &mut streams[z]).unwrap();
            assert_eq!(vol.slice(z), single);
        }
        assert_eq!(vol, synthesize_normalized(&o, &c, &s, &cfg).unwrap());
    }

    #[test]
    fn grid_search_edge_cases() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let norm = Normalization {
            mri_min: -1.0,
            mri_max: 1.0,
            pet_scale: 2.0,
        };
        let pet = Volume::filled([4, 4, 6], [1.0; 3], VolumeKind::Activity, 1.0).unwrap();
        let mri = Volume::filled([4, 4, 6], [1.0; 3], VolumeKind::Anatomical, 0.3).unwrap();
        let val = vec![(pet, mri)];
        let cfg = SynthConfig::default();
        assert_eq!(grid_search_tau(&o, &norm, &val, &[0.2], &s, &cfg).unwrap().best, 0.2);
        assert!(grid_search_tau(&o, &norm, &val, &[], &s, &cfg).is_err());
        assert!(grid_search_tau(&o, &norm, &[], &[0.0], &s, &cfg).is_err());
        let r = grid_search_tau(&o, &norm, &val, &[0.0, 0.0], &s, &cfg).unwrap();
        assert_eq!(r.best, 0.0);
        assert_eq!(r.rows[0], r.rows[1]);
    }

    #[test]
    fn validation() {
        assert!(SynthConfig::default().validate().is_ok());
        assert!(SynthConfig { tau: -1.0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { tv_steps: 0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { tv_steps: 0, tau: 0.0, ..Default::default() }.validate().is_ok());
        assert!(SynthConfig { tv_smooth_eps: 0.0, ..Default::default() }.validate().is_err());
    }
}
