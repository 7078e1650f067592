use petdiff_core::guided::{map_reconstruct, write_log_csv, PriorConfig, StepRule};
use petdiff_core::osem::{osem_reconstruct, Osem, OsemConfig};
use petdiff_core::phantom::{generate_phantom, PhantomConfig, PhantomPair};
use petdiff_core::projector::{
    apply_factors, decimate, sample_poisson, Geometry2D, Projector, Sinogram, SystemFactors,
};
use petdiff_core::volume::Volume;
use petdiff_core::RngStream;

struct Problem {
    phantom: PhantomPair,
    projector: Projector,
    factors: SystemFactors,
    counts: Sinogram,
}

fn problem(seed: u64, total_counts: f64, geom: Option<Geometry2D>) -> Problem {
    let phantom = generate_phantom(&PhantomConfig {
        dims: [40, 40, 16],
        spacing: [4.0; 3],
        seed,
        ..PhantomConfig::default()
    })
    .unwrap();
    let geom = geom.unwrap_or_else(|| Geometry2D::covering(40, 40, 40, [4.0, 4.0], 2.0).unwrap());
    let projector = Projector::for_volume(geom, &phantom.pet).unwrap();
    let factors = SystemFactors::from_labels(&phantom.labels, &projector).unwrap();
    let ybar = apply_factors(&projector.forward(&phantom.pet).unwrap(), &factors).unwrap();
    let ybar = ybar.scaled(total_counts / ybar.total()).unwrap();
    let counts = sample_poisson(&ybar, &RngStream::new(seed + 100)).unwrap();
    Problem {
        phantom,
        projector,
        factors,
        counts,
    }
}

fn osem_init(p: &Problem) -> Volume {
    osem_reconstruct(&p.counts, &p.factors, &p.projector, &OsemConfig::default()).unwrap()
}

#[test]
fn zero_alpha_fixed_step_is_mlem() {
    let p = problem(1, 2e5, None);
    let init = osem_init(&p);
    let cfg = PriorConfig {
        alpha: 0.0,
        n_outer_iterations: 4,
        step_rule: StepRule::Fixed,
        ..PriorConfig::default()
    };
    let map = map_reconstruct(&p.counts, &p.factors, &p.projector, &p.phantom.mri, &cfg, &init).unwrap();
    let mlem_cfg = OsemConfig {
        n_iterations: 4,
        n_subsets: 1,
        ..OsemConfig::default()
    };
    let mlem = Osem::new(&p.counts, &p.factors, &p.projector, &mlem_cfg)
        .unwrap()
        .run(init.data().to_vec(), |_, _| {});
    for (a, b) in map.image.data().iter().zip(&mlem) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12), "{a} vs {b}");
    }
}

#[test]
fn backtracking_never_decreases_the_objective() {
    for (seed, counts) in [(2, 1e6), (3, 5e4)] {
        let p = problem(seed, counts, None);
        let init = osem_init(&p);
        let cfg = PriorConfig {
            n_outer_iterations: 6,
            ..PriorConfig::default()
        };
        let res = map_reconstruct(&p.counts, &p.factors, &p.projector, &p.phantom.mri, &cfg, &init).unwrap();
        assert_eq!(res.log.len(), 6);
        for row in &res.log {
            assert!(row.objective >= row.objective_before, "{row:?}");
            assert!((row.objective - (row.log_likelihood - row.prior_value)).abs() < 1e-6 * row.objective.abs());
        }
    }
}

#[test]
fn output_is_zero_only_outside_the_field_of_view() {
    // four narrow views leave part of the grid unseen
    let geom = Geometry2D::new(4, 11, 4.0).unwrap();
    let p = problem(4, 2e5, Some(geom));
    let sens = p.projector.back_raw(&p.factors.multiplicative(), None);
    assert!(sens.iter().any(|&s| s == 0.0));
    let init = osem_init(&p);
    let cfg = PriorConfig {
        n_outer_iterations: 3,
        ..PriorConfig::default()
    };
    let res = map_reconstruct(&p.counts, &p.factors, &p.projector, &p.phantom.mri, &cfg, &init).unwrap();
    for (&u, &s) in res.image.data().iter().zip(&sens) {
        assert!(u >= 0.0);
        assert_eq!(u == 0.0, s == 0.0);
    }
}

#[test]
fn reconstruction_is_deterministic() {
    let p = problem(5, 1e5, None);
    let init = osem_init(&p);
    let cfg = PriorConfig {
        n_outer_iterations: 3,
        ..PriorConfig::default()
    };
    let a = map_reconstruct(&p.counts, &p.factors, &p.projector, &p.phantom.mri, &cfg, &init).unwrap();
    let b = map_reconstruct(&p.counts, &p.factors, &p.projector, &p.phantom.mri, &cfg, &init).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.log, b.log);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_log_csv(&a.log, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("iteration,log_likelihood,prior_value,objective,step_scale\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn true_anatomy_beats_shuffled_slices() {
    let p = problem(6, 2.5e5, None);
    let full = p.counts.clone();
    let counts = decimate(&full, 0.5, &RngStream::new(1)).unwrap();
    let init = osem_reconstruct(&counts, &p.factors, &p.projector, &OsemConfig::default()).unwrap();
    let mri = &p.phantom.mri;
    let mut slices = mri.slices();
    // reverse the slice order: same intensities, wrong anatomy
    slices.reverse();
    let shuffled = Volume::from_slices(&slices, mri.spacing(), mri.kind()).unwrap();
    let cfg = PriorConfig::default();
    let good = map_reconstruct(&counts, &p.factors, &p.projector, mri, &cfg, &init).unwrap();
    let bad = map_reconstruct(&counts, &p.factors, &p.projector, &shuffled, &cfg, &init).unwrap();

    let truth = &p.phantom.pet;
    let mask = p.phantom.brain_mask().mask_indices();
    let scale = truth.sum() / init.sum();
    let rmse = |v: &Volume| {
        (mask.iter().map(|&i| (v.data()[i] * scale - truth.data()[i]).powi(2)).sum::<f64>() / mask.len() as f64).sqrt()
    };
    let (g, b) = (rmse(&good.image), rmse(&bad.image));
    assert!(g < b, "true-MRI RMSE {g} vs shuffled {b}");
}
