use petdiff_core::{RngStream, Volume, VolumeKind};
use petdiff_dpm::synth::{rmse, synthesize_normalized, tv_denoise_z_traced, tv_objective, z_total_variation};
use petdiff_dpm::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn column(v: [f64; 3]) -> Volume {
    Volume::new([1, 1, 3], [1.0; 3], VolumeKind::Generic, v.to_vec()).unwrap()
}

#[test]
fn tv_solver_reaches_brute_force_minimum() {
    let y = column([0.0, 1.0, 0.0]);
    let tau = 0.1;
    let grid: Vec<f64> = (0..=200).map(|i| -0.5 + 0.01 * i as f64).collect();
    let f = |a: f64, b: f64, c: f64| a * a + (b - 1.0) * (b - 1.0) + c * c + tau * ((b - a).abs() + (c - b).abs());
    let mut best = f64::INFINITY;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                best = best.min(f(a, b, c));
            }
        }
    }
    let cfg = SynthConfig::default();
    let (x, trace) = tv_denoise_z_traced(&y, tau, &cfg).unwrap();
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    let got = tv_objective(&x, &y, tau);
    assert!(got <= best + 1e-3, "solver {got} vs grid {best}");
}

#[test]
fn tv_objective_non_increasing_on_random_volumes() {
    let mut g = RngStream::new(77).generator();
    for _ in 0..100 {
        let dims = [g.random_range(1..5), g.random_range(1..5), g.random_range(2..9)];
        let n = dims.iter().product();
        let scale = 10f64.powf(g.random_range(-2.0..2.0));
        let data = (0..n).map(|_| scale * g.sample::<f64, _>(StandardNormal)).collect();
        let y = Volume::new(dims, [1.0; 3], VolumeKind::Generic, data).unwrap();
        let tau = 10f64.powf(g.random_range(-3.0..1.0));
        let cfg = SynthConfig {
            tv_steps: g.random_range(1..30),
            tv_step_size: 10f64.powf(g.random_range(-2.0..0.5)),
            ..Default::default()
        };
        let (_, trace) = tv_denoise_z_traced(&y, tau, &cfg).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]), "{trace:?}");
    }
}

fn flat_pair() -> (Volume, Volume) {
    let pet = Volume::filled([6, 6, 8], [1.0; 3], VolumeKind::Activity, 1.0).unwrap();
    let mri = Volume::filled([6, 6, 8], [1.0; 3], VolumeKind::Anatomical, 0.3).unwrap();
    (pet, mri)
}

fn identity_norm() -> Normalization {
    Normalization {
        mri_min: -1.0,
        mri_max: 1.0,
        pet_scale: 2.0,
    }
}

#[test]
fn grid_search_prefers_smoothing_when_it_helps() {
    // the oracle draws i.i.d. pixels around the constant truth, so smoothing
    // along z can only bring the synthesis closer to it
    let sched = make_schedule(60, ScheduleKind::Linear, 1e-3, 0.3).unwrap();
    let oracle = GaussianOracle::new(0.3, 0.2, &sched).unwrap();
    let val = vec![flat_pair()];
    let cfg = SynthConfig {
        seed: 3,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let res = grid_search_tau(&oracle, &identity_norm(), &val, &[0.0, 0.5], &sched, &cfg).unwrap();
    res.write_csv(&dir.path().join("tau.csv")).unwrap();
    assert_eq!(res.best, 0.5);
    assert!(res.rows[1].1 < res.rows[0].1);
    let csv = std::fs::read_to_string(dir.path().join("tau.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn smoothing_reduces_slice_to_slice_variation() {
    let sched = make_schedule(60, ScheduleKind::Linear, 1e-3, 0.3).unwrap();
    let oracle = GaussianOracle::new(0.3, 0.2, &sched).unwrap();
    let c = Volume::filled([8, 8, 8], [1.0; 3], VolumeKind::Generic, 0.0).unwrap();
    let run = |tau| {
        synthesize_normalized(
            &oracle,
            &c,
            &sched,
            &SynthConfig {
                tau,
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let (raw, smooth) = (run(0.0), run(0.1));
    assert!(z_total_variation(&smooth) < z_total_variation(&raw));
    assert_eq!(smooth, run(0.1));
}

#[test]
fn synthesis_round_trips_units() {
    let sched = make_schedule(30, ScheduleKind::Linear, 1e-3, 0.5).unwrap();
    let oracle = GaussianOracle::new(0.3, 1e-6, &sched).unwrap();
    let (pet, mri) = flat_pair();
    let norm = Normalization {
        mri_min: 0.0,
        mri_max: 2.0,
        pet_scale: 2.0,
    };
    // model units 0.3 map to MRI units 1.3
    let out = synthesize_volume(&oracle, &norm, &pet, &sched, &SynthConfig::default()).unwrap();
    assert_eq!(out.kind(), VolumeKind::Anatomical);
    let target = Volume::filled(mri.dims(), [1.0; 3], VolumeKind::Anatomical, 1.3).unwrap();
    assert!(rmse(&out, &target).unwrap() < 1e-3);
    let bad = Normalization { mri_max: 0.0, ..norm };
    assert!(synthesize_volume(&oracle, &bad, &pet, &sched, &SynthConfig::default()).is_err());
}
