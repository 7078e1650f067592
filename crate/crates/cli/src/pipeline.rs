//! End-to-end experiment: phantoms, simulation, OSEM, diffusion model,
//! synthesized MRI, guided reconstruction and VOI reports.
//!
//! Run directory layout:
//!
//! ```text
//! config.txt                      effective configuration
//! phantoms/<subject>/             test phantoms with VOI masks
//! sino/<subject>/                 system factors and count sinograms of test subjects
//! dpm_data/{train,val}/<subject>/ full-count OSEM and true MRI
//! model/                          checkpoint, loss.csv, tau.csv
//! deep_mri/<subject>_<frac>.vol
//! recon/<subject>/<frac>_{osem,guided_true,guided_deep}.vol
//! reports/                        VOI statistics, comparisons, MAP logs
//! figures/<subject>_<frac>_{pet,mri}.pgm
//! manifest.txt                    configuration plus sha256 of every output
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use petdiff_core::eval::{voi_stats, write_comparison_csv, write_reports_csv, VoiReport};
use petdiff_core::guided::{map_reconstruct, write_log_csv};
use petdiff_core::io::{export_pgm_row, save_volume, write_atomic};
use petdiff_core::osem::osem_reconstruct;
use petdiff_core::phantom::{generate_phantom, split_dataset, PhantomConfig, PhantomPair};
use petdiff_core::projector::{
    apply_factors, decimate, sample_poisson, save_sinogram, Projector, Sinogram, SystemFactors,
};
use petdiff_core::{RngStream, Volume};
use petdiff_dpm::{
    grid_search_tau, synthesize_volume, Checkpoint, ConvNet, NoiseSchedule, Normalization, SynthConfig, Trainer,
};
use rand::RngCore;
use rayon::prelude::*;

use crate::config::{PipelineConfig, TauChoice};
use crate::error::{CliError, CliResult, ErrorKind};
use crate::store;

pub const RECON_KINDS: [&str; 3] = ["osem", "guided_true", "guided_deep"];

/// Seed for consumer `i` of stage `what`, derived from the master seed.
pub fn derive_seed(master: u64, what: &str, i: u64) -> u64 {
    RngStream::new(master).split_named(what).split(i).generator().next_u64()
}

pub fn phantom_seed(master: u64, subject: usize) -> u64 {
    derive_seed(master, "phantom", subject as u64)
}

pub fn subject_name(i: usize) -> String {
    format!("subject_{i:02}")
}

pub fn fraction_label(f: f64) -> String {
    format!("f{f}")
}

/// Identifies the reconstruction that produced the training conditions.
pub fn condition_identity(cfg: &PipelineConfig) -> String {
    let o = &cfg.osem;
    format!(
        "osem iterations={} subsets={} init={} fwhm={}; counts={}",
        o.n_iterations, o.n_subsets, o.init_value, o.post_filter_fwhm, cfg.counts
    )
}

/// Scales the noiseless expected sinogram to `counts` in total and draws
/// Poisson data.
pub fn simulate_counts(
    pet: &Volume,
    labels: &Volume,
    projector: &Projector,
    counts: f64,
    rng: &RngStream,
) -> CliResult<(SystemFactors, Sinogram)> {
    let factors = SystemFactors::from_labels(labels, projector)?;
    let ybar = apply_factors(&projector.forward(pet)?, &factors)?;
    let ybar = ybar.scaled(counts / ybar.total())?;
    Ok((factors, sample_poisson(&ybar, rng)?))
}

struct Subject {
    index: usize,
    name: String,
    phantom: PhantomPair,
    factors: SystemFactors,
    /// One sinogram per dose fraction (only full dose outside the test split).
    counts: Vec<Sinogram>,
    osem: Vec<Volume>,
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub tau: f64,
    pub test_subjects: Vec<String>,
}

fn stage<T>(name: &str, r: CliResult<T>) -> CliResult<T> {
    r.map_err(|e| e.context(&format!("stage {name}")))
}

pub fn run_pipeline(cfg: &PipelineConfig) -> CliResult<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    prepare_output(&out)?;
    store::write_text(&out.join("config.txt"), &cfg.render())?;
    let master = RngStream::new(cfg.seed);
    let n_train = if cfg.model.is_some() { 0 } else { cfg.n_train };

    log::info!("phantoms: {} subjects", n_train + cfg.n_val + cfg.n_test);
    let phantoms = stage("phantoms", make_phantoms(cfg, n_train + cfg.n_val + cfg.n_test))?;
    let (train, val, test) = split_dataset(phantoms, n_train, cfg.n_val, cfg.n_test)?;

    let projector = stage(
        "simulate",
        Projector::for_volume(cfg.geometry()?, &test[0].1.pet).map_err(CliError::from),
    )?;
    log::info!("simulate + osem");
    let full = [1.0];
    let train = stage("simulate", simulate_split(cfg, &projector, &master, train, &full))?;
    let val = stage("simulate", simulate_split(cfg, &projector, &master, val, &full))?;
    let test = stage("simulate", simulate_split(cfg, &projector, &master, test, &cfg.fractions))?;
    stage("osem", write_split_data(cfg.seed, &out, &train, &val, &test, &cfg.fractions))?;

    let model_dir = out.join("model");
    store::create_dir(&model_dir)?;
    let ckpt = match &cfg.model {
        Some(path) => stage("dpm-train", Checkpoint::load(path).map_err(CliError::from))?,
        None => stage("dpm-train", train_model(cfg, &train, &model_dir))?,
    };
    let net = ckpt.ema_net()?;
    let sched = &ckpt.schedule;
    let norm = &ckpt.normalization;

    let base_synth = SynthConfig {
        seed: derive_seed(cfg.seed, "tau-search", 0),
        ..cfg.synth.clone()
    };
    let tau = match cfg.tau {
        TauChoice::Fixed(t) => t,
        TauChoice::Auto => stage("tau-search", {
            log::info!("tau search over {:?}", cfg.tau_grid);
            let pairs: Vec<(Volume, Volume)> =
                val.iter().map(|s| (s.osem[0].clone(), s.phantom.mri.clone())).collect();
            grid_search_tau(&net, norm, &pairs, &cfg.tau_grid, sched, &base_synth)
                .map_err(CliError::from)
                .and_then(|res| {
                    res.write_csv(&model_dir.join("tau.csv"))?;
                    Ok(res.best)
                })
        })?,
    };
    log::info!("tau = {tau}");

    let deep = stage("dpm-synth", synthesize_test(cfg, &out, &net, norm, sched, tau, &test))?;
    let recons = stage("recon-guided", guided_recons(cfg, &out, &projector, &test, &deep))?;
    stage("eval", evaluate(cfg, &out, &test, &deep, &recons))?;
    stage("eval", write_figures(cfg, &out, &test, &deep, &recons))?;
    stage("manifest", write_manifest(cfg, &out))?;
    Ok(RunSummary {
        dir: out,
        tau,
        test_subjects: test.iter().map(|s| s.name.clone()).collect(),
    })
}

fn prepare_output(out: &Path) -> CliResult<()> {
    if out.exists() && !store::sorted_entries(out)?.is_empty() {
        return Err(CliError::new(
            ErrorKind::Usage,
            format!("output directory {} already exists and is not empty", out.display()),
        ));
    }
    store::create_dir(out)
}

fn make_phantoms(cfg: &PipelineConfig, n: usize) -> CliResult<Vec<(usize, PhantomPair)>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let pc = PhantomConfig {
                seed: phantom_seed(cfg.seed, i),
                ..cfg.phantom.clone()
            };
            Ok((i, generate_phantom(&pc)?))
        })
        .collect()
}

fn simulate_split(
    cfg: &PipelineConfig,
    projector: &Projector,
    master: &RngStream,
    subjects: Vec<(usize, PhantomPair)>,
    fractions: &[f64],
) -> CliResult<Vec<Subject>> {
    subjects
        .into_par_iter()
        .map(|(index, phantom)| {
            let idx = index as u64;
            let (factors, full) =
                simulate_counts(&phantom.pet, &phantom.labels, projector, cfg.counts, &master.split_named("poisson").split(idx))?;
            let thin = master.split_named("decimate").split(idx);
            let counts = fractions
                .iter()
                .enumerate()
                .map(|(k, &f)| decimate(&full, f, &thin.split(k as u64)))
                .collect::<petdiff_core::Result<Vec<_>>>()?;
            let osem = counts
                .iter()
                .map(|c| osem_reconstruct(c, &factors, projector, &cfg.osem))
                .collect::<petdiff_core::Result<Vec<_>>>()?;
            Ok(Subject {
                index,
                name: subject_name(index),
                phantom,
                factors,
                counts,
                osem,
            })
        })
        .collect()
}

fn write_split_data(seed: u64, out: &Path, train: &[Subject], val: &[Subject], test: &[Subject], fractions: &[f64]) -> CliResult<()> {
    for (split, subjects) in [("train", train), ("val", val)] {
        for s in subjects {
            store::write_pair(&out.join("dpm_data").join(split).join(&s.name), &s.osem[0], &s.phantom.mri)?;
        }
    }
    for s in test {
        store::write_phantom(&out.join("phantoms").join(&s.name), &s.phantom, phantom_seed(seed, s.index))?;
        let sino = out.join("sino").join(&s.name);
        s.factors.save(sino.join("factors"))?;
        let recon = out.join("recon").join(&s.name);
        store::create_dir(&recon)?;
        for (k, &f) in fractions.iter().enumerate() {
            save_sinogram(&s.counts[k], sino.join(format!("{}.sino", fraction_label(f))))?;
            save_volume(&s.osem[k], recon.join(format!("{}_osem.vol", fraction_label(f))))?;
        }
    }
    Ok(())
}

/// Normalization and (MRI, condition) slice pairs from full-count pairs.
pub fn training_slices(pairs: &[(&Volume, &Volume)]) -> CliResult<(Normalization, Vec<petdiff_dpm::train::Pair>)> {
    let norm = Normalization::fit(pairs.iter().copied())?;
    let mut data = Vec::new();
    for (pet, mri) in pairs {
        let c = norm.pet_to_model(pet)?;
        let x = norm.mri_to_model(mri)?;
        data.extend((0..x.dims()[2]).map(|z| (x.slice(z), c.slice(z))));
    }
    Ok((norm, data))
}

/// Trains on (condition PET, MRI) pairs and returns the checkpoint together
/// with the per-epoch losses.
pub fn train_checkpoint(
    cfg: &PipelineConfig,
    pairs: &[(&Volume, &Volume)],
    seed: u64,
) -> CliResult<(Checkpoint, Vec<petdiff_dpm::train::EpochStats>)> {
    let (normalization, data) = training_slices(pairs)?;
    let schedule: NoiseSchedule = cfg.dpm.schedule()?;
    let train_cfg = petdiff_dpm::TrainConfig {
        seed: derive_seed(seed, "train", 0),
        ..cfg.train.clone()
    };
    let net = ConvNet::new(cfg.dpm.arch, derive_seed(seed, "init", 0))?;
    let mut trainer = Trainer::new(net, schedule.clone(), train_cfg.clone())?;
    let history = trainer.fit(&data, |_| {})?;
    let (net, ema) = trainer.into_parts();
    let ckpt = Checkpoint {
        arch: cfg.dpm.arch,
        schedule,
        normalization,
        train: train_cfg,
        condition_recon: condition_identity(cfg),
        params: net.params().to_vec(),
        ema,
    };
    Ok((ckpt, history))
}

fn train_model(cfg: &PipelineConfig, train: &[Subject], model_dir: &Path) -> CliResult<Checkpoint> {
    let pairs: Vec<(&Volume, &Volume)> = train.iter().map(|s| (&s.osem[0], &s.phantom.mri)).collect();
    log::info!("training on {} subjects", pairs.len());
    let (ckpt, history) = train_checkpoint(cfg, &pairs, cfg.seed)?;
    store::write_loss_csv(&history, &model_dir.join("loss.csv"))?;
    ckpt.save(model_dir.join("model.pdm"))?;
    Ok(ckpt)
}

/// Synthesized MRI per test subject and fraction.
fn synthesize_test(
    cfg: &PipelineConfig,
    out: &Path,
    net: &ConvNet,
    norm: &Normalization,
    sched: &NoiseSchedule,
    tau: f64,
    test: &[Subject],
) -> CliResult<Vec<Vec<Volume>>> {
    let dir = out.join("deep_mri");
    store::create_dir(&dir)?;
    let mut all = Vec::new();
    for (i, s) in test.iter().enumerate() {
        let mut per = Vec::new();
        for (k, &f) in cfg.fractions.iter().enumerate() {
            log::info!("synthesizing {} {}", s.name, fraction_label(f));
            let sc = SynthConfig {
                tau,
                seed: derive_seed(cfg.seed, "synth", (i * cfg.fractions.len() + k) as u64),
                ..cfg.synth.clone()
            };
            let mri = synthesize_volume(net, norm, &s.osem[k], sched, &sc)?;
            save_volume(&mri, dir.join(format!("{}_{}.vol", s.name, fraction_label(f))))?;
            per.push(mri);
        }
        all.push(per);
    }
    Ok(all)
}

/// `[subject][fraction] -> (guided with true MRI, guided with deep MRI)`.
type Guided = Vec<Vec<(Volume, Volume)>>;

fn guided_recons(
    cfg: &PipelineConfig,
    out: &Path,
    projector: &Projector,
    test: &[Subject],
    deep: &[Vec<Volume>],
) -> CliResult<Guided> {
    let logs = out.join("reports").join("map_logs");
    store::create_dir(&logs)?;
    let nf = cfg.fractions.len();
    let jobs: Vec<(usize, usize, bool)> = (0..test.len())
        .flat_map(|i| (0..nf).flat_map(move |k| [(i, k, true), (i, k, false)]))
        .collect();
    let done: Vec<Volume> = jobs
        .par_iter()
        .map(|&(i, k, true_mri)| {
            let s = &test[i];
            let mri = if true_mri { &s.phantom.mri } else { &deep[i][k] };
            let res = map_reconstruct(&s.counts[k], &s.factors, projector, mri, &cfg.prior, &s.osem[k])?;
            let tag = if true_mri { "guided_true" } else { "guided_deep" };
            let label = fraction_label(cfg.fractions[k]);
            write_log_csv(&res.log, logs.join(format!("{}_{label}_{tag}.csv", s.name)))?;
            save_volume(&res.image, out.join("recon").join(&s.name).join(format!("{label}_{tag}.vol")))?;
            Ok(res.image)
        })
        .collect::<CliResult<_>>()?;
    let mut it = done.into_iter();
    Ok((0..test.len())
        .map(|_| (0..nf).map(|_| (it.next().unwrap(), it.next().unwrap())).collect())
        .collect())
}

fn evaluate(cfg: &PipelineConfig, out: &Path, test: &[Subject], deep: &[Vec<Volume>], recons: &Guided) -> CliResult<()> {
    let reports = out.join("reports");
    let mut stats: Vec<VoiReport> = Vec::new();
    let mut fidelity = String::from("subject,fraction,class,true_mean,deep_mean,relative_difference_percent\n");
    for (i, s) in test.iter().enumerate() {
        for (k, &f) in cfg.fractions.iter().enumerate() {
            let label = format!("{}/{}", s.name, fraction_label(f));
            let (gt, gd) = &recons[i][k];
            for (kind, img) in RECON_KINDS.iter().zip([&s.osem[k], gt, gd]) {
                stats.push(voi_stats(&format!("{label}/{kind}"), img, &s.phantom.vois)?);
            }
            for class in ["GM", "WM", "CSF"] {
                let mask = s.phantom.voi(class).expect("phantoms define the tissue classes");
                let t = s.phantom.mri.masked_mean(mask)?;
                let d = deep[i][k].masked_mean(mask)?;
                let _ = writeln!(fidelity, "{},{f},{class},{t},{d},{}", s.name, 100.0 * (d - t) / t);
            }
        }
    }
    write_reports_csv(&stats, reports.join("voi_stats.csv"))?;
    let triples: Vec<&[VoiReport]> = stats.chunks(3).collect();
    let pairs = |a: usize, b: usize| -> Vec<(&VoiReport, &VoiReport)> { triples.iter().map(|t| (&t[a], &t[b])).collect() };
    write_comparison_csv(&pairs(1, 2), reports.join("guided_true_vs_guided_deep.csv"))?;
    write_comparison_csv(&pairs(1, 0), reports.join("guided_true_vs_osem.csv"))?;
    write_comparison_csv(&pairs(2, 0), reports.join("guided_deep_vs_osem.csv"))?;
    store::write_text(&reports.join("deep_mri_fidelity.csv"), &fidelity)
}

fn write_figures(cfg: &PipelineConfig, out: &Path, test: &[Subject], deep: &[Vec<Volume>], recons: &Guided) -> CliResult<()> {
    let dir = out.join("figures");
    store::create_dir(&dir)?;
    for (i, s) in test.iter().enumerate() {
        let z = s.phantom.pet.dims()[2] / 2;
        let pet_win = (0.0, s.phantom.pet.min_max().1.max(f64::MIN_POSITIVE));
        let mri_win = (0.0, s.phantom.mri.min_max().1.max(f64::MIN_POSITIVE));
        for (k, &f) in cfg.fractions.iter().enumerate() {
            let (gt, gd) = &recons[i][k];
            let label = format!("{}_{}", s.name, fraction_label(f));
            let pet = export_pgm_row(&[(&s.osem[k], pet_win), (gt, pet_win), (gd, pet_win)], z)?;
            write_atomic(&dir.join(format!("{label}_pet.pgm")), &pet)?;
            let mri = export_pgm_row(&[(&s.phantom.mri, mri_win), (&deep[i][k], mri_win)], z)?;
            write_atomic(&dir.join(format!("{label}_mri.pgm")), &mri)?;
        }
    }
    Ok(())
}

/// Configuration text followed by commented digests, so the manifest can be
/// passed back as `--config` to repeat the run.
fn write_manifest(cfg: &PipelineConfig, out: &Path) -> CliResult<()> {
    let mut text = cfg.render();
    text.push_str("\n# outputs: sha256  path\n");
    for (path, hex) in store::digest_tree(out, &["manifest.txt"])? {
        let _ = writeln!(text, "# {hex}  {path}");
    }
    store::write_text(&out.join("manifest.txt"), &text)
}

/// Digest lines of a manifest, as (path, sha256).
pub fn manifest_digests(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once("  "))
        .filter(|(hex, _)| hex.len() == 64 && hex.bytes().all(|b| b.is_ascii_hexdigit()))
        .map(|(hex, path)| (path.to_string(), hex.to_string()))
        .collect()
}

pub fn recon_path(run_dir: &Path, subject: &str, fraction: f64, kind: &str) -> PathBuf {
    run_dir.join("recon").join(subject).join(format!("{}_{kind}.vol", fraction_label(fraction)))
}
