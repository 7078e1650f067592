use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use petdiff_core::eval::{read_reports_csv, voi_stats, write_comparison_csv, write_reports_csv};
use petdiff_core::guided::{map_reconstruct, write_log_csv};
use petdiff_core::io::{load_volume, save_volume};
use petdiff_core::osem::osem_reconstruct;
use petdiff_core::phantom::generate_phantom;
use petdiff_core::projector::{
    decimate, load_sinogram, save_sinogram, Geometry2D, Projector, SystemFactors,
};
use petdiff_core::{Error, RngStream, VolumeKind};
use petdiff_dpm::{grid_search_tau, synthesize_volume, Checkpoint, SynthConfig};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult, Context};
use crate::pipeline::{run_pipeline, simulate_counts, train_checkpoint};
use crate::store;

#[derive(Parser, Debug)]
#[command(name = "petdiff", version, about = "Diffusion-synthesized MRI for anatomically guided PET reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate one phantom (labels, MRI, activity, VOI masks).
    Phantom(PhantomArgs),
    /// Simulate a count sinogram from an activity and label volume.
    Simulate(SimulateArgs),
    /// OSEM reconstruction.
    ReconOsem(ReconOsemArgs),
    /// MRI-guided MAP reconstruction.
    ReconGuided(ReconGuidedArgs),
    /// Train the diffusion model on (OSEM, MRI) pairs.
    DpmTrain(DpmTrainArgs),
    /// Synthesize an MRI from a PET volume.
    DpmSynth(DpmSynthArgs),
    /// VOI statistics of one or more images.
    Eval(EvalArgs),
    /// Relative differences between two VOI report files.
    EvalCompare(EvalCompareArgs),
    /// Full experiment.
    Pipeline(PipelineArgs),
    /// Print or check configuration files.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub pet: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Configuration file; its [simulation] section sets the geometry.
    #[arg(long)]
    pub geom: Option<PathBuf>,
    #[arg(long)]
    pub counts: f64,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconOsemArgs {
    #[arg(long)]
    pub sino: PathBuf,
    #[arg(long)]
    pub factors: PathBuf,
    /// Configuration file; [osem] and the in-plane grid of [phantom] apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconGuidedArgs {
    #[arg(long)]
    pub sino: PathBuf,
    #[arg(long)]
    pub factors: PathBuf,
    #[arg(long)]
    pub mri: PathBuf,
    /// Starting image, usually the OSEM reconstruction; it also fixes the grid.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DpmTrainArgs {
    /// Directory of subject directories, each holding osem.vol and mri.vol.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch losses; defaults to the checkpoint path with a .loss.csv suffix.
    #[arg(long)]
    pub loss: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DpmSynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pet: PathBuf,
    /// A number, or `auto` to pick it from the grid against --val.
    #[arg(long, default_value = "auto")]
    pub tau: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of validation subjects (osem.vol, mri.vol) for `--tau auto`.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Configuration file; [synth] applies.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    /// Directory of VOI masks, one `<name>.vol` each.
    #[arg(long)]
    pub vois: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalCompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Configuration or manifest file; defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    #[arg(long)]
    pub print_defaults: bool,
    /// Parse and validate a file.
    #[arg(long)]
    pub check: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Simulate(a) => simulate(a),
        Command::ReconOsem(a) => recon_osem(a),
        Command::ReconGuided(a) => recon_guided(a),
        Command::DpmTrain(a) => dpm_train(a),
        Command::DpmSynth(a) => dpm_synth(a),
        Command::Eval(a) => eval(a),
        Command::EvalCompare(a) => eval_compare(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Config(a) => config(a),
    }
}

fn phantom(a: PhantomArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let pc = petdiff_core::phantom::PhantomConfig {
        seed: a.seed.unwrap_or(cfg.seed),
        ..cfg.phantom
    };
    let ph = generate_phantom(&pc)?;
    store::write_phantom(&a.out, &ph, pc.seed)
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let cfg = load_config(a.geom.as_deref())?;
    let pet = load_volume(&a.pet)?;
    let labels = load_volume(&a.labels)?.with_kind(VolumeKind::Label)?;
    pet.check_same_grid(&labels, "labels")?;
    let [nx, ny, _] = pet.dims();
    let [sx, sy, _] = pet.spacing();
    let geom = Geometry2D::covering(cfg.n_angles, nx, ny, [sx, sy], cfg.bin_spacing)?;
    let projector = Projector::for_volume(geom, &pet)?;
    let root = RngStream::new(a.seed);
    let (factors, full) = simulate_counts(&pet, &labels, &projector, a.counts, &root.split_named("poisson"))?;
    let counts = decimate(&full, a.fraction, &root.split_named("decimate"))?;
    factors.save(a.out.join("factors"))?;
    save_sinogram(&counts, a.out.join("counts.sino"))?;
    Ok(())
}

fn load_emission(sino: &Path, factors: &Path) -> CliResult<(petdiff_core::projector::Sinogram, SystemFactors)> {
    let counts = load_sinogram(sino).in_context(&sino.display().to_string())?;
    let factors = SystemFactors::load(factors).in_context(&factors.display().to_string())?;
    Ok((counts, factors))
}

fn recon_osem(a: ReconOsemArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (counts, factors) = load_emission(&a.sino, &a.factors)?;
    let [nx, ny, _] = cfg.phantom.dims;
    let [sx, sy, sz] = cfg.phantom.spacing;
    let projector = Projector::new(counts.geometry().clone(), nx, ny, [sx, sy, sz])?;
    let img = osem_reconstruct(&counts, &factors, &projector, &cfg.osem)?;
    save_volume(&img, &a.out)?;
    Ok(())
}

fn recon_guided(a: ReconGuidedArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (counts, factors) = load_emission(&a.sino, &a.factors)?;
    let init = load_volume(&a.init)?;
    let mri = load_volume(&a.mri)?;
    let projector = Projector::for_volume(counts.geometry().clone(), &init)?;
    let res = map_reconstruct(&counts, &factors, &projector, &mri, &cfg.prior, &init)?;
    save_volume(&res.image, &a.out)?;
    if let Some(log) = &a.log {
        write_log_csv(&res.log, log)?;
    }
    Ok(())
}

fn dpm_train(a: DpmTrainArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let pairs = store::load_pairs(&a.data)?;
    let refs: Vec<_> = pairs.iter().map(|(p, m)| (p, m)).collect();
    let (ckpt, history) = train_checkpoint(&cfg, &refs, a.seed.unwrap_or(cfg.seed))?;
    ckpt.save(&a.out)?;
    let loss = a.loss.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    store::write_loss_csv(&history, &loss)
}

fn dpm_synth(a: DpmSynthArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ckpt = Checkpoint::load(&a.model)?;
    let net = ckpt.ema_net()?;
    let pet = load_volume(&a.pet)?;
    let synth = SynthConfig {
        seed: a.seed,
        ..cfg.synth.clone()
    };
    let tau = if a.tau == "auto" {
        let val = a
            .val
            .as_deref()
            .ok_or_else(|| CliError::usage("--tau auto needs --val <dir>"))?;
        let pairs = store::load_pairs(val)?;
        let res = grid_search_tau(&net, &ckpt.normalization, &pairs, &cfg.tau_grid, &ckpt.schedule, &synth)?;
        log::info!("tau = {}", res.best);
        res.best
    } else {
        a.tau
            .parse::<f64>()
            .ok()
            .filter(|t| *t >= 0.0)
            .ok_or_else(|| CliError::usage(format!("--tau must be a number >= 0 or auto, got {:?}", a.tau)))?
    };
    let mri = synthesize_volume(&net, &ckpt.normalization, &pet, &ckpt.schedule, &SynthConfig { tau, ..synth })?;
    save_volume(&mri, &a.out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let vois = store::load_vois(&a.vois)?;
    let mut reports = Vec::new();
    for path in &a.images {
        let img = load_volume(path)?;
        reports.push(voi_stats(&path.display().to_string(), &img, &vois)?);
    }
    write_reports_csv(&reports, &a.out)?;
    Ok(())
}

fn eval_compare(a: EvalCompareArgs) -> CliResult<()> {
    let ra = read_reports_csv(&a.a)?;
    let rb = read_reports_csv(&a.b)?;
    if ra.len() != rb.len() {
        return Err(Error::Invalid(format!(
            "{} holds {} images but {} holds {}",
            a.a.display(),
            ra.len(),
            a.b.display(),
            rb.len()
        ))
        .into());
    }
    let pairs: Vec<_> = ra.iter().zip(&rb).collect();
    write_comparison_csv(&pairs, &a.out)?;
    Ok(())
}

fn pipeline(a: PipelineArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let summary = run_pipeline(&cfg)?;
    println!("{}", summary.dir.display());
    Ok(())
}

fn config(a: ConfigArgs) -> CliResult<()> {
    if let Some(path) = &a.check {
        PipelineConfig::load(path)?;
        println!("{}: ok", path.display());
    }
    if a.print_defaults {
        print!("{}", PipelineConfig::default().render());
    }
    if a.check.is_none() && !a.print_defaults {
        return Err(CliError::usage("config needs --print-defaults or --check <file>"));
    }
    Ok(())
}
