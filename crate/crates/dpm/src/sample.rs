//! Ancestral sampling.

use petdiff_core::rng::Generator;
use petdiff_core::{Result, RngStream, Slice2D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::EpsilonModel;
use crate::schedule::{check_shapes, interpolated_variance, reverse_mean_from_eps, NoiseSchedule};

pub fn standard_normal(nx: usize, ny: usize, g: &mut Generator) -> Slice2D {
    Slice2D {
        nx,
        ny,
        data: (0..nx * ny).map(|_| g.sample(StandardNormal)).collect(),
    }
}

/// One reverse transition `x_t → x_{t−1} = μ_θ + σ_θ z`. The step to `t = 0`
/// is taken without noise and draws nothing from `g`.
pub fn reverse_step<M: EpsilonModel + ?Sized>(
    model: &M,
    x_t: &Slice2D,
    t: usize,
    c: &Slice2D,
    sched: &NoiseSchedule,
    g: &mut Generator,
) -> Result<Slice2D> {
    sched.check_t(t)?;
    check_shapes(x_t, c, "reverse step condition")?;
    let out = model.predict(x_t, t, c)?;
    check_shapes(x_t, &out.eps, "model noise output")?;
    check_shapes(x_t, &out.v, "model variance output")?;
    let mut mu = reverse_mean_from_eps(x_t, &out.eps, t, sched)?;
    if t > 1 {
        let (b, bt) = (sched.beta(t), sched.beta_tilde(t));
        for (m, v) in mu.data.iter_mut().zip(&out.v.data) {
            let z: f64 = g.sample(StandardNormal);
            *m += interpolated_variance(v.clamp(0.0, 1.0), b, bt).sqrt() * z;
        }
    }
    Ok(mu)
}

/// Runs the reverse chain from `x_T` for the whole schedule using `g`.
pub fn sample_with<M: EpsilonModel + ?Sized>(
    model: &M,
    c: &Slice2D,
    sched: &NoiseSchedule,
    g: &mut Generator,
) -> Result<Slice2D> {
    let mut x = standard_normal(c.nx, c.ny, g);
    for t in (1..=sched.t_max()).rev() {
        x = reverse_step(model, &x, t, c, sched, g)?;
    }
    Ok(x)
}

pub fn sample<M: EpsilonModel + ?Sized>(
    model: &M,
    c: &Slice2D,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Slice2D> {
    sample_with(model, c, sched, &mut rng.generator())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianOracle;
    use crate::schedule::{make_schedule, ScheduleKind};

    #[test]
    fn same_stream_same_sample() {
        let s = make_schedule(50, ScheduleKind::Linear, 1e-3, 0.4).unwrap();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let c = Slice2D::zeros(6, 5);
        let a = sample(&o, &c, &s, &RngStream::new(3)).unwrap();
        let b = sample(&o, &c, &s, &RngStream::new(3)).unwrap();
        let d = sample(&o, &c, &s, &RngStream::new(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn single_step_returns_posterior_mean() {
        let s = make_schedule(1, ScheduleKind::Linear, 0.99995, 0.99995).unwrap();
        let o = GaussianOracle::new(0.3, 0.2, &s).unwrap();
        let c = Slice2D::zeros(4, 4);
        let rng = RngStream::new(8);
        let out = sample(&o, &c, &s, &rng).unwrap();
        let x1 = standard_normal(4, 4, &mut rng.generator());
        for (y, x) in out.data.iter().zip(&x1.data) {
            let ab: f64 = 1.0 - 0.99995;
            let post = (ab.sqrt() * 0.04 * x + (1.0 - ab) * 0.3) / (ab * 0.04 + 1.0 - ab);
            assert!((y - post).abs() < 1e-12, "{y} vs {post}");
        }
    }
}
