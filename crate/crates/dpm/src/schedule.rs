//! Forward noising schedule and the closed-form Gaussian quantities built on it.
//!
//! Timesteps are 1-based: `t` runs over `1..=T`, and `ᾱ_0 = 1`. Per-step
//! arrays are stored 0-based, so `beta[t - 1]` is `β_t`.

use petdiff_core::{Error, Result, Slice2D};


/// `ᾱ_T` must fall below this for `x_T` to count as pure noise.
pub const TERMINAL_ALPHA_BAR: f64 = 1e-4;

/// Offset of the squared-cosine profile.
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ScheduleKind::Linear => 0,
            ScheduleKind::Cosine => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ScheduleKind::Linear),
            1 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::Invalid(format!("unknown schedule kind {s:?} (expected linear or cosine)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
}

/// Builds a schedule of `t_max` steps.
///
/// `Linear` interpolates β from `beta_start` to `beta_end`. `Cosine` derives β
/// from the squared-cosine ᾱ profile and clips it into `[beta_start, beta_end]`.
pub fn make_schedule(t_max: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure!(t_max >= 1, Invalid, "schedule needs T >= 1");
    ensure!(
        beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        Invalid,
        "need 0 < beta_start <= beta_end < 1 so that every beta_t lies in (0, 1), got {beta_start} and {beta_end}"
    );
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let a = (t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                a.cos().powi(2)
            };
            (1..=t_max)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_start, beta_end))
                .collect()
        }
    };
    let s = NoiseSchedule::from_betas(kind, beta_start, beta_end, beta)?;
    let last = s.alpha_bar[t_max - 1];
    ensure!(
        last < TERMINAL_ALPHA_BAR,
        Invalid,
        "alpha_bar_T = {last:.3e} is not below {TERMINAL_ALPHA_BAR:e}, so x_T is not close to pure noise; use a larger T or beta_end"
    );
    Ok(s)
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, beta_start: f64, beta_end: f64, beta: Vec<f64>) -> Result<Self> {
        ensure!(
            beta.iter().all(|&b| b > 0.0 && b < 1.0),
            Invalid,
            "every beta_t must lie in (0, 1)"
        );
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else {
                    beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i])
                }
            })
            .collect();
        Ok(NoiseSchedule {
            kind,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.t_max()).contains(&t),
            Invalid,
            "timestep {t} outside 1..={}",
            self.t_max()
        );
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    /// Coefficients `(a, b)` of `x_t = a·x_0 + b·ε`.
    pub fn marginal_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Coefficients `(c_xt, c_x0)` of the posterior mean `μ_q = c_xt·x_t + c_x0·x_0`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        posterior_coefficients(self.alpha(t), self.alpha_bar(t - 1), self.alpha_bar(t))
    }

    /// Coefficients `(a, b)` of `μ_θ = a·(x_t − b·ε̂)`.
    pub fn reverse_coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha(t);
        (1.0 / a.sqrt(), (1.0 - a) / (1.0 - self.alpha_bar(t)).sqrt())
    }
}

/// Posterior mean coefficients from `α_t`, `ᾱ_{t−1}` and `ᾱ_t`.
pub fn posterior_coefficients(alpha_t: f64, alpha_bar_prev: f64, alpha_bar_t: f64) -> (f64, f64) {
    let d = 1.0 - alpha_bar_t;
    (
        alpha_t.sqrt() * (1.0 - alpha_bar_prev) / d,
        alpha_bar_prev.sqrt() * (1.0 - alpha_t) / d,
    )
}

pub(crate) fn check_shapes(a: &Slice2D, b: &Slice2D, what: &str) -> Result<()> {
    ensure!(
        a.same_shape(b),
        Shape,
        "{what}: {}x{} vs {}x{}",
        a.nx,
        a.ny,
        b.nx,
        b.ny
    );
    Ok(())
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
pub fn q_sample(x0: &Slice2D, t: usize, eps: &Slice2D, sched: &NoiseSchedule) -> Result<Slice2D> {
    sched.check_t(t)?;
    check_shapes(x0, eps, "q_sample")?;
    let (a, b) = sched.marginal_coefficients(t);
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// Mean of `q(x_{t−1} | x_t, x_0)`.
pub fn posterior_mean_q(x_t: &Slice2D, x0: &Slice2D, t: usize, sched: &NoiseSchedule) -> Result<Slice2D> {
    sched.check_t(t)?;
    check_shapes(x_t, x0, "posterior_mean_q")?;
    let (cx, c0) = sched.posterior_coefficients(t);
    Ok(x_t.zip_map(x0, |xt, x| cx * xt + c0 * x))
}

/// `μ_θ = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t` for a given noise prediction.
pub fn reverse_mean_from_eps(x_t: &Slice2D, eps_hat: &Slice2D, t: usize, sched: &NoiseSchedule) -> Result<Slice2D> {
    sched.check_t(t)?;
    check_shapes(x_t, eps_hat, "reverse_mean")?;
    let (a, b) = sched.reverse_coefficients(t);
    Ok(x_t.zip_map(eps_hat, |x, e| a * (x - b * e)))
}

/// Variance `exp(v ln β + (1−v) ln β̃)`.
pub fn interpolated_variance(v: f64, beta: f64, beta_tilde: f64) -> f64 {
    (v * beta.ln() + (1.0 - v) * beta_tilde.ln()).exp()
}

/// Per-pixel reverse standard deviation for the variance channel `v`.
pub fn learned_sigma(v: &Slice2D, t: usize, sched: &NoiseSchedule) -> Result<Slice2D> {
    sched.check_t(t)?;
    let (b, bt) = (sched.beta(t), sched.beta_tilde(t));
    Ok(v.map(|v| interpolated_variance(v.clamp(0.0, 1.0), b, bt).sqrt()))
}
