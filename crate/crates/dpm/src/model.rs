//! Noise predictors and the reverse-step means built from them.

use petdiff_core::{Result, Slice2D};

use crate::schedule::{check_shapes, reverse_mean_from_eps, NoiseSchedule};

/// The two output channels of a noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub eps: Slice2D,
    /// Variance interpolation weight in `[0, 1]`.
    pub v: Slice2D,
}

/// Predicts the noise in `x_t` at step `t` given the condition image `c`.
pub trait EpsilonModel: Sync {
    fn predict(&self, x_t: &Slice2D, t: usize, c: &Slice2D) -> Result<ModelOutput>;
}

impl<M: EpsilonModel + ?Sized> EpsilonModel for &M {
    fn predict(&self, x_t: &Slice2D, t: usize, c: &Slice2D) -> Result<ModelOutput> {
        (**self).predict(x_t, t, c)
    }
}

/// Reverse-step mean using the model's noise channel.
pub fn reverse_mean<M: EpsilonModel + ?Sized>(
    model: &M,
    x_t: &Slice2D,
    t: usize,
    c: &Slice2D,
    sched: &NoiseSchedule,
) -> Result<Slice2D> {
    sched.check_t(t)?;
    check_shapes(x_t, c, "reverse_mean condition")?;
    let out = model.predict(x_t, t, c)?;
    check_shapes(x_t, &out.eps, "model output")?;
    reverse_mean_from_eps(x_t, &out.eps, t, sched)
}

/// Exact noise predictor for data distributed as `N(m, s²)` per pixel.
///
/// The variance channel encodes the exact reverse variance
/// `β̃_t + c_0² Var(x_0 | x_t)` (clamped into the learnable range), unless the
/// oracle was built with [`GaussianOracle::with_lower_bound_variance`], which
/// always reports `v = 0`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    m: f64,
    s: f64,
    sched: NoiseSchedule,
    lower_bound: bool,
}

impl GaussianOracle {
    pub fn new(m: f64, s: f64, sched: &NoiseSchedule) -> Result<Self> {
        ensure!(s > 0.0 && s.is_finite(), Invalid, "oracle needs s > 0, got {s}");
        Ok(GaussianOracle {
            m,
            s,
            sched: sched.clone(),
            lower_bound: false,
        })
    }

    pub fn with_lower_bound_variance(mut self) -> Self {
        self.lower_bound = true;
        self
    }

    /// `(slope, intercept)` of the affine map `x_t ↦ ε*`.
    pub fn affine(&self, t: usize) -> (f64, f64) {
        let ab = self.sched.alpha_bar(t);
        let d = ab * self.s * self.s + 1.0 - ab;
        let slope = (1.0 - ab).sqrt() / d;
        (slope, -slope * ab.sqrt() * self.m)
    }

    /// `E[x_0 | x_t]`.
    pub fn posterior_x0(&self, x_t: f64, t: usize) -> f64 {
        let ab = self.sched.alpha_bar(t);
        let s2 = self.s * self.s;
        (ab.sqrt() * s2 * x_t + (1.0 - ab) * self.m) / (ab * s2 + 1.0 - ab)
    }

    /// Variance of `p(x_{t−1} | x_t)` under the data model.
    pub fn reverse_variance(&self, t: usize) -> f64 {
        let ab = self.sched.alpha_bar(t);
        let s2 = self.s * self.s;
        let var_x0 = s2 * (1.0 - ab) / (ab * s2 + 1.0 - ab);
        let (_, c0) = self.sched.posterior_coefficients(t);
        self.sched.beta_tilde(t) + c0 * c0 * var_x0
    }

    fn v(&self, t: usize) -> f64 {
        let (b, bt) = (self.sched.beta(t), self.sched.beta_tilde(t));
        let span = (b / bt).ln();
        if self.lower_bound || span <= 0.0 {
            return 0.0;
        }
        ((self.reverse_variance(t) / bt).ln() / span).clamp(0.0, 1.0)
    }
}

impl EpsilonModel for GaussianOracle {
    fn predict(&self, x_t: &Slice2D, t: usize, _c: &Slice2D) -> Result<ModelOutput> {
        self.sched.check_t(t)?;
        let (a, b) = self.affine(t);
        Ok(ModelOutput {
            eps: x_t.map(|x| a * x + b),
            v: Slice2D::filled(x_t.nx, x_t.ny, self.v(t)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, posterior_mean_q, q_sample, ScheduleKind};
    use petdiff_core::RngStream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    struct Zero;

    impl EpsilonModel for Zero {
        fn predict(&self, x_t: &Slice2D, _t: usize, _c: &Slice2D) -> Result<ModelOutput> {
            Ok(ModelOutput {
                eps: Slice2D::zeros(x_t.nx, x_t.ny),
                v: Slice2D::zeros(x_t.nx, x_t.ny),
            })
        }
    }

    /// Replays a fixed noise image.
    struct Fixed(Slice2D, f64);

    impl EpsilonModel for Fixed {
        fn predict(&self, _x_t: &Slice2D, _t: usize, _c: &Slice2D) -> Result<ModelOutput> {
            Ok(ModelOutput {
                eps: self.0.map(|e| self.1 * e),
                v: self.0.map(|_| 0.0),
            })
        }
    }

    fn sched() -> NoiseSchedule {
        make_schedule(200, ScheduleKind::Linear, 5e-4, 0.1).unwrap()
    }

    fn randn(n: usize, seed: u64) -> Slice2D {
        let mut g = RngStream::new(seed).generator();
        Slice2D::new(n, 1, (0..n).map(|_| g.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn zero_prediction_scales_input() {
        let s = sched();
        let x = randn(6, 1);
        let m = reverse_mean(&Zero, &x, 40, &x, &s).unwrap();
        let a = s.alpha(40).sqrt();
        for (mu, xt) in m.data.iter().zip(&x.data) {
            assert!((mu - xt / a).abs() < 1e-15);
        }
    }

    #[test]
    fn true_noise_reproduces_posterior_mean() {
        let s = sched();
        let mut g = RngStream::new(5).generator();
        for k in 0..50 {
            let t = g.random_range(1..=200);
            let x0 = randn(16, 100 + k);
            let eps = randn(16, 200 + k);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let mu = reverse_mean(&Fixed(eps.clone(), 1.0), &xt, t, &xt, &s).unwrap();
            let mq = posterior_mean_q(&xt, &x0, t, &s).unwrap();
            for (a, b) in mu.data.iter().zip(&mq.data) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn doubling_prediction_shifts_mean_affinely() {
        let s = sched();
        let x = randn(8, 2);
        let e = randn(8, 3);
        let t = 77;
        let m1 = reverse_mean(&Fixed(e.clone(), 1.0), &x, t, &x, &s).unwrap();
        let m2 = reverse_mean(&Fixed(e.clone(), 2.0), &x, t, &x, &s).unwrap();
        let k = (1.0 - s.alpha(t)) / (s.alpha(t).sqrt() * (1.0 - s.alpha_bar(t)).sqrt());
        for i in 0..8 {
            assert!((m1.data[i] - m2.data[i] - k * e.data[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn oracle_degenerate_data_returns_exact_noise() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 1e-9, &s).unwrap();
        let x = randn(5, 4);
        for t in [1usize, 20, 200] {
            let ab = s.alpha_bar(t);
            let out = o.predict(&x, t, &x).unwrap();
            for (e, xt) in out.eps.data.iter().zip(&x.data) {
                let exact = (xt - ab.sqrt() * 0.3) / (1.0 - ab).sqrt();
                assert!((e - exact).abs() < 1e-9 * (1.0 + exact.abs()));
            }
        }
    }

    #[test]
    fn oracle_is_affine_in_x() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let t = 60;
        let xs: Vec<f64> = (0..21).map(|i| -2.0 + 0.2 * i as f64).collect();
        let x = Slice2D::new(xs.len(), 1, xs.clone()).unwrap();
        let e = o.predict(&x, t, &x).unwrap().eps.data;
        // least-squares line through the outputs
        let n = xs.len() as f64;
        let (mx, me) = (xs.iter().sum::<f64>() / n, e.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&e).map(|(a, b)| (a - mx) * (b - me)).sum();
        let sxx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
        let slope = sxy / sxx;
        let ab = s.alpha_bar(t);
        let expect = (1.0 - ab).sqrt() / (ab * 0.04 + 1.0 - ab);
        assert!((slope - expect).abs() < 1e-12);
        for (a, b) in xs.iter().zip(&e) {
            assert!((me + slope * (a - mx) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_beats_zero_predictor() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let mut g = RngStream::new(9).generator();
        for t in [5usize, 50, 150] {
            let n = 20_000;
            let x0 = Slice2D::new(n, 1, (0..n).map(|_| 0.3 + 0.2 * g.sample::<f64, _>(StandardNormal)).collect()).unwrap();
            let eps = Slice2D::new(n, 1, (0..n).map(|_| g.sample(StandardNormal)).collect()).unwrap();
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let pred = o.predict(&xt, t, &xt).unwrap().eps;
            let l_oracle: f64 = pred.data.iter().zip(&eps.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
            let l_zero: f64 = eps.data.iter().map(|e| e * e).sum::<f64>() / n as f64;
            assert!(l_oracle < l_zero, "t={t}");
        }
    }

    #[test]
    fn oracle_variance_channel() {
        let s = sched();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let lb = o.clone().with_lower_bound_variance();
        let x = randn(3, 1);
        for t in 2..=200 {
            let v = o.predict(&x, t, &x).unwrap().v.data[0];
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(lb.predict(&x, t, &x).unwrap().v.data[0], 0.0);
            let var = crate::schedule::interpolated_variance(v, s.beta(t), s.beta_tilde(t));
            let exact = o.reverse_variance(t).clamp(s.beta_tilde(t), s.beta(t));
            assert!((var - exact).abs() < 1e-12 * exact.max(1e-12), "t={t}");
        }
        assert!(GaussianOracle::new(0.0, 0.0, &s).is_err());
    }
}
