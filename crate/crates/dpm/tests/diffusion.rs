use petdiff_core::osem::{osem_reconstruct, OsemConfig};
use petdiff_core::phantom::{generate_phantom, PhantomConfig};
use petdiff_core::projector::{apply_factors, sample_poisson, Geometry2D, Projector, SystemFactors};
use petdiff_core::{RngStream, Slice2D};
use petdiff_dpm::train::Pair;
use petdiff_dpm::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

fn desk_schedule() -> NoiseSchedule {
    make_schedule(200, ScheduleKind::Linear, 5e-4, 0.1).unwrap()
}

#[test]
fn oracle_samples_reproduce_data_distribution() {
    let (m, s) = (0.3, 0.2);
    let sched = desk_schedule();
    let oracle = GaussianOracle::new(m, s, &sched).unwrap();
    let c = Slice2D::zeros(100, 100);
    let out = sample(&oracle, &c, &sched, &RngStream::new(2024)).unwrap();
    let (mean, var) = mean_var(&out.data);
    assert!((mean - m).abs() <= 4.0 * s / 100.0, "mean {mean}");
    assert!((var - s * s).abs() <= 0.1 * s * s, "variance {var}");
}

#[test]
fn marginal_variance_matches_schedule() {
    let sched = desk_schedule();
    let n = 10_000;
    let mut g = RngStream::new(5).generator();
    let x0 = Slice2D::filled(n, 1, 0.4);
    let eps = Slice2D::new(n, 1, (0..n).map(|_| g.sample(StandardNormal)).collect()).unwrap();
    for t in [10usize, 80, 200] {
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let (_, var) = mean_var(&xt.data);
        let expect = 1.0 - sched.alpha_bar(t);
        assert!((var - expect).abs() <= 0.05 * expect, "t={t}: {var} vs {expect}");
    }
}

#[test]
fn sequential_transitions_match_direct_marginal() {
    let sched = desk_schedule();
    let (x0, k, n) = (0.7, 50, 10_000);
    let mut g = RngStream::new(6).generator();
    let chained: Vec<f64> = (0..n)
        .map(|_| {
            let mut x = x0;
            for t in 1..=k {
                let z: f64 = g.sample(StandardNormal);
                x = sched.alpha(t).sqrt() * x + sched.beta(t).sqrt() * z;
            }
            x
        })
        .collect();
    let eps = Slice2D::new(n, 1, (0..n).map(|_| g.sample(StandardNormal)).collect()).unwrap();
    let direct = q_sample(&Slice2D::filled(n, 1, x0), k, &eps, &sched).unwrap();
    let (mc, vc) = mean_var(&chained);
    let (md, vd) = mean_var(&direct.data);
    let (ma, va) = (sched.alpha_bar(k).sqrt() * x0, 1.0 - sched.alpha_bar(k));
    for (m, v) in [(mc, vc), (md, vd)] {
        assert!((m - ma).abs() <= 0.05 * ma, "mean {m} vs {ma}");
        assert!((v - va).abs() <= 0.05 * va, "variance {v} vs {va}");
    }
    assert!((mc - md).abs() <= 0.05 * ma && (vc - vd).abs() <= 0.05 * va);
}

fn phantom_pairs() -> Vec<Pair> {
    let mut out = Vec::new();
    let geom = Geometry2D::covering(40, 40, 40, [4.0, 4.0], 2.0).unwrap();
    let mut vols = Vec::new();
    for seed in 0..2 {
        let ph = generate_phantom(&PhantomConfig {
            dims: [40, 40, 16],
            spacing: [4.0; 3],
            seed,
            ..Default::default()
        })
        .unwrap();
        let p = Projector::for_volume(geom.clone(), &ph.pet).unwrap();
        let f = SystemFactors::from_labels(&ph.labels, &p).unwrap();
        let ybar = apply_factors(&p.forward(&ph.pet).unwrap(), &f).unwrap();
        let ybar = ybar.scaled(2e5 / ybar.total()).unwrap();
        let counts = sample_poisson(&ybar, &RngStream::new(seed)).unwrap();
        let osem = osem_reconstruct(&counts, &f, &p, &OsemConfig::default()).unwrap();
        vols.push((osem, ph.mri));
    }
    let norm = Normalization::fit(vols.iter().map(|(p, m)| (p, m))).unwrap();
    for (pet, mri) in &vols {
        let c = norm.pet_to_model(pet).unwrap();
        let x = norm.mri_to_model(mri).unwrap();
        out.extend((0..16).map(|z| (x.slice(z), c.slice(z))));
    }
    out
}

#[test]
fn epoch_loss_falls_on_phantom_corpus() {
    let data = phantom_pairs();
    let arch = Architecture {
        width: 8,
        depth: 2,
        n_embed: 8,
    };
    let cfg = TrainConfig {
        n_epochs: 5,
        batch_size: 4,
        seed: 1,
        ..Default::default()
    };
    let mut tr = Trainer::new(ConvNet::new(arch, 1).unwrap(), desk_schedule(), cfg).unwrap();
    let hist = tr.fit(&data, |_| {}).unwrap();
    let losses: Vec<f64> = hist.iter().map(|h| h.eps_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}
