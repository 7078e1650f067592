//! Pipeline configuration: `key = value` lines grouped under `[section]`
//! headers, `#` comments. Every key has a default; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use petdiff_core::guided::{Bandwidth, MriScaling, Potential, PriorConfig, StepRule};
use petdiff_core::osem::OsemConfig;
use petdiff_core::phantom::PhantomConfig;
use petdiff_core::projector::Geometry2D;
use petdiff_dpm::net::Architecture;
use petdiff_dpm::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use petdiff_dpm::synth::SynthConfig;
use petdiff_dpm::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauChoice {
    Fixed(f64),
    /// Grid search on the validation subjects.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpmConfig {
    pub t_max: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub arch: Architecture,
}

impl DpmConfig {
    pub fn schedule(&self) -> petdiff_core::Result<NoiseSchedule> {
        make_schedule(self.t_max, self.schedule, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Phantom settings shared by all subjects; the per-subject seed is
    /// derived from `seed`.
    pub phantom: PhantomConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_angles: usize,
    pub bin_spacing: f64,
    /// Expected total counts per subject at full dose.
    pub counts: f64,
    pub fractions: Vec<f64>,
    pub osem: OsemConfig,
    pub prior: PriorConfig,
    pub dpm: DpmConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub tau: TauChoice,
    pub tau_grid: Vec<f64>,
    /// Pre-trained checkpoint; training is skipped when set.
    pub model: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            phantom: PhantomConfig {
                dims: [40, 40, 16],
                spacing: [4.0; 3],
                ..Default::default()
            },
            n_train: 8,
            n_val: 1,
            n_test: 5,
            n_angles: 80,
            bin_spacing: 2.0,
            counts: 1e6,
            fractions: vec![1.0, 0.25, 0.05],
            osem: OsemConfig::default(),
            prior: PriorConfig::default(),
            dpm: DpmConfig {
                t_max: 200,
                schedule: ScheduleKind::Linear,
                beta_start: 5e-4,
                beta_end: 0.1,
                arch: Architecture {
                    width: 16,
                    depth: 4,
                    n_embed: 8,
                },
            },
            train: TrainConfig {
                n_epochs: 400,
                ..Default::default()
            },
            synth: SynthConfig::default(),
            tau: TauChoice::Auto,
            tau_grid: vec![0.0, 0.01, 0.05, 0.1, 0.5],
            model: None,
            output_dir: PathBuf::from("petdiff-run"),
        }
    }
}

impl PipelineConfig {
    pub fn geometry(&self) -> petdiff_core::Result<Geometry2D> {
        let [nx, ny, _] = self.phantom.dims;
        let [sx, sy, _] = self.phantom.spacing;
        Geometry2D::covering(self.n_angles, nx, ny, [sx, sy], self.bin_spacing)
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg = |e: petdiff_core::Error| CliError::config(e.to_string());
        self.phantom.validate().map_err(cfg)?;
        check(self.n_train >= 1 || self.model.is_some(), "split.n_train must be >= 1 unless a pretrained model is given")?;
        check(self.n_test >= 1, "split.n_test must be >= 1")?;
        check(
            self.tau != TauChoice::Auto || self.n_val >= 1,
            "synth.tau = auto needs split.n_val >= 1",
        )?;
        check(self.counts > 0.0, "simulation.counts must be > 0")?;
        check(!self.fractions.is_empty(), "simulation.fractions must not be empty")?;
        for &f in &self.fractions {
            check(
                f > 0.0 && f <= 1.0,
                &format!("simulation.fractions: {f} is outside the allowed range (0, 1]"),
            )?;
        }
        let g = self.geometry().map_err(cfg)?;
        self.osem.validate(g.n_angles()).map_err(cfg)?;
        self.prior.validate().map_err(cfg)?;
        self.dpm.schedule().map_err(cfg)?;
        self.dpm.arch.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.synth.validate().map_err(cfg)?;
        if let TauChoice::Fixed(t) = self.tau {
            check(t >= 0.0, "synth.tau must be >= 0 or auto")?;
        }
        check(
            !self.tau_grid.is_empty() && self.tau_grid.iter().all(|&t| t >= 0.0),
            "synth.tau_grid must hold values >= 0",
        )?;
        Ok(())
    }

    /// Canonical text form; parses back to `self`.
    pub fn render(&self) -> String {
        let mut out = String::from("# petdiff pipeline configuration\n");
        let mut section = "";
        for f in FIELDS {
            if f.section != section {
                section = f.section;
                let _ = write!(out, "\n[{section}]\n");
            }
            let _ = writeln!(out, "# {}\n{} = {}", f.doc, f.key, (f.get)(self));
        }
        out
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = PipelineConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::config(format!("line {line_no}: malformed section header {line:?}")))?
                    .trim();
                if !FIELDS.iter().any(|f| f.section == name) {
                    let names: Vec<&str> = FIELDS.iter().map(|f| f.section).collect();
                    return Err(CliError::config(format!(
                        "line {line_no}: unknown section [{name}]{}",
                        suggest(name, &names)
                    )));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {line_no}: expected `key = value`, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let field = FIELDS.iter().find(|f| f.section == section && f.key == key).ok_or_else(|| {
                let keys: Vec<&str> = FIELDS.iter().filter(|f| f.section == section).map(|f| f.key).collect();
                CliError::config(format!(
                    "line {line_no}: unknown key {key:?} in [{section}]{}",
                    suggest(key, &keys)
                ))
            })?;
            (field.set)(&mut cfg, value)
                .map_err(|e| CliError::config(format!("line {line_no}: [{section}] {key}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from(petdiff_core::Error::io(path, e)))?;
        Self::parse(&text).map_err(|e| e.context(&path.display().to_string()))
    }
}

fn check(ok: bool, msg: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(msg.to_string()))
    }
}

fn suggest(word: &str, candidates: &[&str]) -> String {
    candidates
        .iter()
        .map(|c| (strsim::jaro_winkler(word, c), *c))
        .filter(|(s, _)| *s > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| format!("; did you mean {c:?}?"))
        .unwrap_or_default()
}

type Setter = fn(&mut PipelineConfig, &str) -> Result<(), String>;

struct Field {
    section: &'static str,
    key: &'static str,
    doc: &'static str,
    get: fn(&PipelineConfig) -> String,
    set: Setter,
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse {s:?} as a number"))
}

fn list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|v| num(v.trim())).collect()
}

fn triple<T: std::str::FromStr + Copy>(s: &str) -> Result<[T; 3], String> {
    let v: Vec<T> = s.split(',').map(|v| num(v.trim())).collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected three comma-separated values, found {s:?}")),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, found {s:?}")),
    }
}

fn bandwidth(s: &str) -> Result<Bandwidth, String> {
    if s == "silverman" {
        Ok(Bandwidth::Silverman)
    } else {
        num(s).map(Bandwidth::Fixed).map_err(|_| format!("expected silverman or a number, found {s:?}"))
    }
}

fn show_bandwidth(b: Bandwidth) -> String {
    match b {
        Bandwidth::Silverman => "silverman".into(),
        Bandwidth::Fixed(h) => h.to_string(),
    }
}

macro_rules! field {
    ($section:literal, $key:literal, $doc:literal, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Field {
            section: $section,
            key: $key,
            doc: $doc,
            get: |$c: &PipelineConfig| $get,
            set: |$m: &mut PipelineConfig, $v: &str| {
                $set;
                Ok(())
            },
        }
    };
}

const FIELDS: &[Field] = &[
    field!("run", "seed", "master seed; every random stream of the run derives from it",
        |c| c.seed.to_string(), |m, v| m.seed = num(v)?),
    field!("run", "output_dir", "experiment directory (the command line --out overrides it)",
        |c| c.output_dir.display().to_string(), |m, v| m.output_dir = PathBuf::from(v)),
    field!("run", "model", "pre-trained checkpoint; empty means train a new model",
        |c| c.model.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        |m, v| m.model = if v.is_empty() { None } else { Some(PathBuf::from(v)) }),
    field!("phantom", "dims", "grid size in voxels (x, y, z)",
        |c| join(&c.phantom.dims), |m, v| m.phantom.dims = triple(v)?),
    field!("phantom", "spacing", "voxel size in millimetres (x, y, z)",
        |c| join(&c.phantom.spacing), |m, v| m.phantom.spacing = triple(v)?),
    field!("phantom", "gm_wm_activity_ratio", "grey/white matter activity ratio, within [2.5, 4.1]",
        |c| c.phantom.gm_wm_activity_ratio.to_string(), |m, v| m.phantom.gm_wm_activity_ratio = num(v)?),
    field!("phantom", "mri_csf", "mean T1-like intensity of CSF",
        |c| c.phantom.mri_class_means.csf.to_string(), |m, v| m.phantom.mri_class_means.csf = num(v)?),
    field!("phantom", "mri_gm", "mean T1-like intensity of grey matter",
        |c| c.phantom.mri_class_means.gm.to_string(), |m, v| m.phantom.mri_class_means.gm = num(v)?),
    field!("phantom", "mri_wm", "mean T1-like intensity of white matter",
        |c| c.phantom.mri_class_means.wm.to_string(), |m, v| m.phantom.mri_class_means.wm = num(v)?),
    field!("phantom", "mri_class_sd", "relative within-class texture of the MRI",
        |c| c.phantom.mri_class_sd.to_string(), |m, v| m.phantom.mri_class_sd = num(v)?),
    field!("phantom", "activity_class_sd", "relative within-class texture of the activity",
        |c| c.phantom.activity_class_sd.to_string(), |m, v| m.phantom.activity_class_sd = num(v)?),
    field!("phantom", "n_subcortical_regions", "number of small grey matter VOIs",
        |c| c.phantom.n_subcortical_regions.to_string(), |m, v| m.phantom.n_subcortical_regions = num(v)?),
    field!("phantom", "texture_correlation_length", "texture smoothing, millimetres",
        |c| c.phantom.texture_correlation_length.to_string(), |m, v| m.phantom.texture_correlation_length = num(v)?),
    field!("split", "n_train", "subjects used to train the diffusion model",
        |c| c.n_train.to_string(), |m, v| m.n_train = num(v)?),
    field!("split", "n_val", "subjects used to choose tau",
        |c| c.n_val.to_string(), |m, v| m.n_val = num(v)?),
    field!("split", "n_test", "subjects reconstructed and evaluated",
        |c| c.n_test.to_string(), |m, v| m.n_test = num(v)?),
    field!("simulation", "n_angles", "projection angles over [0, pi)",
        |c| c.n_angles.to_string(), |m, v| m.n_angles = num(v)?),
    field!("simulation", "bin_spacing", "radial bin size, millimetres",
        |c| c.bin_spacing.to_string(), |m, v| m.bin_spacing = num(v)?),
    field!("simulation", "counts", "expected total counts per subject at full dose",
        |c| c.counts.to_string(), |m, v| m.counts = num(v)?),
    field!("simulation", "fractions", "dose fractions, each in (0, 1]",
        |c| join(&c.fractions), |m, v| m.fractions = list(v)?),
    field!("osem", "n_iterations", "full passes over the data",
        |c| c.osem.n_iterations.to_string(), |m, v| m.osem.n_iterations = num(v)?),
    field!("osem", "n_subsets", "angular subsets per pass",
        |c| c.osem.n_subsets.to_string(), |m, v| m.osem.n_subsets = num(v)?),
    field!("osem", "init_value", "uniform starting image",
        |c| c.osem.init_value.to_string(), |m, v| m.osem.init_value = num(v)?),
    field!("osem", "post_filter_fwhm", "Gaussian post-filter FWHM in millimetres, 0 = off",
        |c| c.osem.post_filter_fwhm.to_string(), |m, v| m.osem.post_filter_fwhm = num(v)?),
    field!("prior", "alpha", "overall prior strength",
        |c| c.prior.alpha.to_string(), |m, v| m.prior.alpha = num(v)?),
    field!("prior", "n_outer_iterations", "MAP iterations",
        |c| c.prior.n_outer_iterations.to_string(), |m, v| m.prior.n_outer_iterations = num(v)?),
    field!("prior", "neighborhood_radius", "cube neighbourhood radius in voxels",
        |c| c.prior.neighborhood_radius.to_string(), |m, v| m.prior.neighborhood_radius = num(v)?),
    field!("prior", "bowsher_count", "most similar MRI neighbours kept per voxel",
        |c| c.prior.bowsher_count.to_string(), |m, v| m.prior.bowsher_count = num(v)?),
    field!("prior", "parzen_bins", "joint density grid size per axis",
        |c| c.prior.parzen_bins.to_string(), |m, v| m.prior.parzen_bins = num(v)?),
    field!("prior", "parzen_bandwidth_u", "PET kernel width: silverman or a value",
        |c| show_bandwidth(c.prior.parzen_bandwidth_u), |m, v| m.prior.parzen_bandwidth_u = bandwidth(v)?),
    field!("prior", "parzen_bandwidth_v", "MRI kernel width: silverman or a value",
        |c| show_bandwidth(c.prior.parzen_bandwidth_v), |m, v| m.prior.parzen_bandwidth_v = bandwidth(v)?),
    field!("prior", "step_rule", "backtracking or fixed",
        |c| match c.prior.step_rule { StepRule::Backtracking => "backtracking".into(), StepRule::Fixed => "fixed".into() },
        |m, v| m.prior.step_rule = match v {
            "backtracking" => StepRule::Backtracking,
            "fixed" => StepRule::Fixed,
            _ => return Err(format!("expected backtracking or fixed, found {v:?}")),
        }),
    field!("prior", "potential", "identity or log1p",
        |c| match c.prior.potential { Potential::Identity => "identity".into(), Potential::Log1p => "log1p".into() },
        |m, v| m.prior.potential = match v {
            "identity" => Potential::Identity,
            "log1p" => Potential::Log1p,
            _ => return Err(format!("expected identity or log1p, found {v:?}")),
        }),
    field!("prior", "symmetrize_weights", "average the similarity weights over each pair",
        |c| c.prior.symmetrize_weights.to_string(), |m, v| m.prior.symmetrize_weights = boolean(v)?),
    field!("prior", "mri_scaling", "minmax, or percentile LOW HIGH",
        |c| match c.prior.mri_scaling {
            MriScaling::MinMax => "minmax".into(),
            MriScaling::Percentile { lower, upper } => format!("percentile {lower} {upper}"),
        },
        |m, v| m.prior.mri_scaling = {
            let parts: Vec<&str> = v.split_whitespace().collect();
            match parts[..] {
                ["minmax"] => MriScaling::MinMax,
                ["percentile", a, b] => MriScaling::Percentile { lower: num(a)?, upper: num(b)? },
                _ => return Err(format!("expected minmax or `percentile LOW HIGH`, found {v:?}")),
            }
        }),
    field!("dpm", "steps", "diffusion steps T",
        |c| c.dpm.t_max.to_string(), |m, v| m.dpm.t_max = num(v)?),
    field!("dpm", "schedule", "linear or cosine",
        |c| c.dpm.schedule.name().into(), |m, v| m.dpm.schedule = v.parse().map_err(|e: petdiff_core::Error| e.to_string())?),
    field!("dpm", "beta_start", "first noise variance",
        |c| c.dpm.beta_start.to_string(), |m, v| m.dpm.beta_start = num(v)?),
    field!("dpm", "beta_end", "last noise variance",
        |c| c.dpm.beta_end.to_string(), |m, v| m.dpm.beta_end = num(v)?),
    field!("dpm", "width", "hidden channels of the network",
        |c| c.dpm.arch.width.to_string(), |m, v| m.dpm.arch.width = num(v)?),
    field!("dpm", "depth", "hidden convolution layers",
        |c| c.dpm.arch.depth.to_string(), |m, v| m.dpm.arch.depth = num(v)?),
    field!("dpm", "embedding_channels", "timestep embedding channels (even)",
        |c| c.dpm.arch.n_embed.to_string(), |m, v| m.dpm.arch.n_embed = num(v)?),
    field!("train", "n_epochs", "passes over the training slices",
        |c| c.train.n_epochs.to_string(), |m, v| m.train.n_epochs = num(v)?),
    field!("train", "batch_size", "slices per optimizer step",
        |c| c.train.batch_size.to_string(), |m, v| m.train.batch_size = num(v)?),
    field!("train", "learning_rate", "Adam step size",
        |c| c.train.learning_rate.to_string(), |m, v| m.train.learning_rate = num(v)?),
    field!("train", "ema_decay", "decay of the parameter moving average used for sampling",
        |c| c.train.ema_decay.to_string(), |m, v| m.train.ema_decay = num(v)?),
    field!("train", "vlb_weight", "weight of the variational term that trains the variance channel",
        |c| c.train.vlb_weight.to_string(), |m, v| m.train.vlb_weight = num(v)?),
    field!("synth", "tau", "slice-consistency weight, or auto for a grid search on the validation subjects",
        |c| match c.tau { TauChoice::Auto => "auto".into(), TauChoice::Fixed(t) => t.to_string() },
        |m, v| m.tau = if v == "auto" { TauChoice::Auto } else { TauChoice::Fixed(num(v)?) }),
    field!("synth", "tau_grid", "candidates tried by tau = auto",
        |c| join(&c.tau_grid), |m, v| m.tau_grid = list(v)?),
    field!("synth", "tv_steps", "gradient steps of the slice-consistency solve per diffusion step",
        |c| c.synth.tv_steps.to_string(), |m, v| m.synth.tv_steps = num(v)?),
    field!("synth", "tv_step_size", "initial gradient step",
        |c| c.synth.tv_step_size.to_string(), |m, v| m.synth.tv_step_size = num(v)?),
    field!("synth", "tv_smooth_eps", "smoothing of |d|, relative to the value range",
        |c| c.synth.tv_smooth_eps.to_string(), |m, v| m.synth.tv_smooth_eps = num(v)?),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = PipelineConfig::default().render();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn every_key_is_unique() {
        for (i, a) in FIELDS.iter().enumerate() {
            for b in &FIELDS[i + 1..] {
                assert!(!(a.section == b.section && a.key == b.key), "{}.{}", a.section, a.key);
            }
        }
    }

    #[test]
    fn misspelled_key_gets_a_suggestion() {
        let err = PipelineConfig::parse("[simulation]\nfracions = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("\"fractions\""), "{msg}");
    }

    #[test]
    fn fraction_out_of_range() {
        let err = PipelineConfig::parse("[simulation]\nfractions = 1.0, 1.5\n").unwrap_err();
        assert!(err.to_string().contains("(0, 1]"), "{err}");
    }

    #[test]
    fn malformed_lines() {
        for text in ["[simulation\n", "[nope]\n", "[run]\nseed\n", "[run]\nseed = x\n", "[phantom]\ndims = 1, 2\n"] {
            assert!(PipelineConfig::parse(text).is_err(), "{text}");
        }
        let err = PipelineConfig::parse("# c\n\n[run]\nseed = abc\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let c = PipelineConfig::parse(
            "[run]\nseed = 7 # trailing comment\nmodel = m.pdm\n[synth]\ntau = 0.1\n[prior]\nmri_scaling = percentile 1 99\nparzen_bandwidth_u = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model, Some(PathBuf::from("m.pdm")));
        assert_eq!(c.tau, TauChoice::Fixed(0.1));
        assert_eq!(c.prior.mri_scaling, MriScaling::Percentile { lower: 1.0, upper: 99.0 });
        assert_eq!(c.prior.parzen_bandwidth_u, Bandwidth::Fixed(0.5));
        assert_eq!(PipelineConfig::parse(&c.render()).unwrap(), c);
    }
}
