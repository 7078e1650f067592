//! Joint (PET, MRI) intensity density from a smoothed 2D histogram.
//!
//! Nodes sit on a `bins x bins` grid spanning the sample range padded by three
//! bandwidths on each side. Each axis of the grid is mapped onto `[0, 1]` and
//! the density integrates to one over that unit square, so `1 / p` does not
//! depend on the intensity units or the bin count.

use crate::error::{ensure, Result};
use crate::filter::gaussian_smooth;

/// Evaluations are floored at this fraction of the peak.
pub const DENSITY_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule for two dimensions, `sd * n^(-1/6)`.
    Silverman,
    /// Fixed bandwidth in intensity units.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug)]
struct Axis {
    lo: f64,
    step: f64,
}

impl Axis {
    fn new(samples: &[f64], h: f64, bins: usize) -> Axis {
        let (min, max) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let pad = 3.0 * h;
        let step = (max - min + 2.0 * pad) / (bins - 1) as f64;
        // a degenerate axis puts its only value exactly on a node
        let lo = if max > min { min - pad } else { min - ((bins - 1) / 2) as f64 * step };
        Axis { lo, step }
    }

    fn coord(&self, x: f64, bins: usize) -> f64 {
        let c = (x - self.lo) / self.step;
        // absorb rounding so values placed on a node evaluate exactly there
        let c = if (c - c.round()).abs() < 1e-9 { c.round() } else { c };
        c.clamp(0.0, (bins - 1) as f64)
    }
}

fn sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn resolve_bandwidth(bw: Bandwidth, samples: &[f64]) -> Result<f64> {
    let h = match bw {
        Bandwidth::Silverman => sd(samples) * (samples.len() as f64).powf(-1.0 / 6.0),
        Bandwidth::Fixed(h) => {
            ensure!(h > 0.0 && h.is_finite(), Invalid, "Parzen bandwidth must be positive, got {h}");
            h
        }
    };
    if h > 0.0 {
        return Ok(h);
    }
    // identical samples: any positive width gives the same normalised shape
    let scale = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(1e-6 * scale.max(1.0))
}

#[derive(Clone, Debug)]
pub struct JointDensity {
    bins: usize,
    u_axis: Axis,
    v_axis: Axis,
    /// u-fastest node values
    values: Vec<f64>,
    floor: f64,
}

impl JointDensity {
    /// Builds the density from paired samples.
    pub fn fit(u: &[f64], v: &[f64], bw_u: Bandwidth, bw_v: Bandwidth, bins: usize) -> Result<Self> {
        ensure!(!u.is_empty(), Invalid, "Parzen density needs a non-empty mask");
        ensure!(u.len() == v.len(), Shape, "Parzen samples differ in length");
        ensure!(bins >= 2, Invalid, "Parzen grid needs at least 2 bins");
        let hu = resolve_bandwidth(bw_u, u)?;
        let hv = resolve_bandwidth(bw_v, v)?;
        let u_axis = Axis::new(u, hu, bins);
        let v_axis = Axis::new(v, hv, bins);
        let mut hist = vec![0.0; bins * bins];
        for (&a, &b) in u.iter().zip(v) {
            let i = u_axis.coord(a, bins).round() as usize;
            let k = v_axis.coord(b, bins).round() as usize;
            hist[i + bins * k] += 1.0;
        }
        let mut values = gaussian_smooth(&hist, [bins, bins, 1], [hu / u_axis.step, hv / v_axis.step, 0.0]);
        let total: f64 = values.iter().sum();
        let cell = Self::cell_area(bins);
        values.iter_mut().for_each(|x| *x /= total * cell);
        let peak = values.iter().cloned().fold(0.0, f64::max);
        Ok(JointDensity {
            bins,
            u_axis,
            v_axis,
            values,
            floor: DENSITY_FLOOR * peak,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn node_values(&self) -> &[f64] {
        &self.values
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    fn cell_area(bins: usize) -> f64 {
        ((bins - 1) as f64).powi(-2)
    }

    /// Integral over the unit square, by the node rule.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * Self::cell_area(self.bins)
    }

    /// Node coordinates `(u, v)` of grid index `(i, k)`.
    pub fn node(&self, i: usize, k: usize) -> (f64, f64) {
        (
            self.u_axis.lo + i as f64 * self.u_axis.step,
            self.v_axis.lo + k as f64 * self.v_axis.step,
        )
    }

    /// Bilinear interpolation, clamped to the grid and floored.
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        let n = self.bins;
        let fu = self.u_axis.coord(u, n);
        let fv = self.v_axis.coord(v, n);
        let i = (fu.floor() as usize).min(n - 2);
        let k = (fv.floor() as usize).min(n - 2);
        let (tu, tv) = (fu - i as f64, fv - k as f64);
        let at = |a: usize, b: usize| self.values[a + n * b];
        let p = (1.0 - tu) * (1.0 - tv) * at(i, k)
            + tu * (1.0 - tv) * at(i + 1, k)
            + (1.0 - tu) * tv * at(i, k + 1)
            + tu * tv * at(i + 1, k + 1);
        p.max(self.floor)
    }
}
