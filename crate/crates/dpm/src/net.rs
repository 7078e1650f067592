//! Small residual convolutional noise predictor with hand-written gradients.
//!
//! Input channels are `x_t`, the condition `c` and a sinusoidal embedding of
//! `t` broadcast over the image. A 3×3 convolution lifts them to `width`
//! channels, `depth − 1` residual blocks `h + silu(conv(h))` follow, and a
//! final 3×3 convolution emits two channels: the noise estimate and the
//! pre-sigmoid variance weight. Convolutions use zero padding and are computed
//! as im2col followed by a matrix product.
//!
//! All parameters live in one flat vector, layer by layer, each layer storing
//! its `cout × (cin·9)` weights row-major followed by `cout` biases.

use ndarray::{Array2, ArrayView2, Axis};
use petdiff_core::{Result, RngStream, Slice2D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{EpsilonModel, ModelOutput};
use crate::schedule::{check_shapes, NoiseSchedule};

const EMBED_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub width: usize,
    pub depth: usize,
    /// Number of timestep embedding channels (even).
    pub n_embed: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            width: 32,
            depth: 4,
            n_embed: 8,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 1, Invalid, "network width must be >= 1");
        ensure!(self.depth >= 1, Invalid, "network depth must be >= 1");
        ensure!(
            self.n_embed >= 2 && self.n_embed % 2 == 0,
            Invalid,
            "timestep embedding needs an even number (>= 2) of channels, got {}",
            self.n_embed
        );
        Ok(())
    }

    fn in_channels(&self) -> usize {
        2 + self.n_embed
    }

    /// `(cin, cout)` of every convolution.
    fn layers(&self) -> Vec<(usize, usize)> {
        let mut l = vec![(self.in_channels(), self.width)];
        l.extend((1..self.depth).map(|_| (self.width, self.width)));
        l.push((self.width, 2));
        l
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|&(ci, co)| co * ci * 9 + co).sum()
    }
}

pub fn timestep_embedding(t: usize, n_embed: usize) -> Vec<f64> {
    let half = n_embed / 2;
    let mut e = Vec::with_capacity(n_embed);
    for k in 0..half {
        let f = (-(EMBED_BASE.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * f;
        e.push(a.sin());
        e.push(a.cos());
    }
    e
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Valid `(dst_start, src_start, len)` of a row shifted by `k − 1`.
fn shifted(n: usize, k: usize) -> (usize, usize, usize) {
    match k {
        0 => (1, 0, n - 1),
        1 => (0, 0, n),
        _ => (0, 1, n - 1),
    }
}

/// Zero-padded 3×3 patches: row `ci·9 + ky·3 + kx`, column = pixel.
fn im2col(input: ArrayView2<f64>, nx: usize, ny: usize) -> Array2<f64> {
    let cin = input.nrows();
    let mut col = Array2::<f64>::zeros((cin * 9, nx * ny));
    for ci in 0..cin {
        let src = input.row(ci);
        let src = src.as_slice().expect("contiguous rows");
        for ky in 0..3 {
            let (y0, sy0, ylen) = shifted(ny, ky);
            for kx in 0..3 {
                let (x0, sx0, xlen) = shifted(nx, kx);
                let mut row = col.row_mut(ci * 9 + ky * 3 + kx);
                let dst = row.as_slice_mut().expect("contiguous rows");
                for j in 0..ylen {
                    let (y, sy) = (y0 + j, sy0 + j);
                    dst[y * nx + x0..y * nx + x0 + xlen].copy_from_slice(&src[sy * nx + sx0..sy * nx + sx0 + xlen]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &Array2<f64>, cin: usize, nx: usize, ny: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((cin, nx * ny));
    for ci in 0..cin {
        let mut row = out.row_mut(ci);
        let dst = row.as_slice_mut().expect("contiguous rows");
        for ky in 0..3 {
            let (y0, sy0, ylen) = shifted(ny, ky);
            for kx in 0..3 {
                let (x0, sx0, xlen) = shifted(nx, kx);
                let src = col.row(ci * 9 + ky * 3 + kx);
                let src = src.as_slice().expect("contiguous rows");
                for j in 0..ylen {
                    let (y, sy) = (y0 + j, sy0 + j);
                    let d = &mut dst[sy * nx + sx0..sy * nx + sx0 + xlen];
                    for (a, b) in d.iter_mut().zip(&src[y * nx + x0..y * nx + x0 + xlen]) {
                        *a += b;
                    }
                }
            }
        }
    }
    out
}

/// One training example: clean target, condition, timestep and the noise
/// used to corrupt the target.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x0: Slice2D,
    pub c: Slice2D,
    pub t: usize,
    pub eps: Slice2D,
}

/// Per-example hybrid loss and its parameter gradient.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    /// The noise-prediction part, mean over pixels.
    pub eps_loss: f64,
    pub grad: Vec<f64>,
    /// Reverse mean computed from the predicted noise.
    pub mean: Vec<f64>,
}

struct Tape {
    cols: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    arch: Architecture,
    params: Vec<f64>,
}

impl ConvNet {
    /// Fresh network; the output layer starts at zero so `ε̂ ≡ 0`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut g = RngStream::new(seed).split_named("init").generator();
        let mut params = Vec::with_capacity(arch.n_params());
        let layers = arch.layers();
        for (l, &(ci, co)) in layers.iter().enumerate() {
            let k = ci * 9;
            let last = l + 1 == layers.len();
            let sd = if last { 0.0 } else { (1.0 / k as f64).sqrt() };
            for _ in 0..co * k {
                let z: f64 = g.sample(StandardNormal);
                params.push(sd * z);
            }
            params.extend(std::iter::repeat_n(0.0, co));
        }
        log::debug!("reference network {:?}: {} parameters", arch, params.len());
        Ok(ConvNet { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        ensure!(
            params.len() == arch.n_params(),
            Shape,
            "architecture {arch:?} needs {} parameters, got {}",
            arch.n_params(),
            params.len()
        );
        Ok(ConvNet { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_views(&self) -> Vec<(ArrayView2<'_, f64>, &[f64])> {
        let mut off = 0;
        self.arch
            .layers()
            .into_iter()
            .map(|(ci, co)| {
                let w = ArrayView2::from_shape((co, ci * 9), &self.params[off..off + co * ci * 9]).unwrap();
                off += co * ci * 9;
                let b = &self.params[off..off + co];
                off += co;
                (w, b)
            })
            .collect()
    }

    fn input(&self, x_t: &Slice2D, t: usize, c: &Slice2D) -> Array2<f64> {
        let n = x_t.len();
        let mut input = Array2::<f64>::zeros((self.arch.in_channels(), n));
        input.row_mut(0).assign(&ndarray::aview1(&x_t.data));
        input.row_mut(1).assign(&ndarray::aview1(&c.data));
        for (k, e) in timestep_embedding(t, self.arch.n_embed).into_iter().enumerate() {
            input.row_mut(2 + k).fill(e);
        }
        input
    }

    fn forward(&self, x_t: &Slice2D, t: usize, c: &Slice2D) -> Tape {
        let (nx, ny) = (x_t.nx, x_t.ny);
        let layers = self.layer_views();
        let n_layers = layers.len();
        let mut h = self.input(x_t, t, c);
        let mut cols = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut out = None;
        for (l, (w, b)) in layers.into_iter().enumerate() {
            let col = im2col(h.view(), nx, ny);
            let mut z = w.dot(&col);
            for (mut row, &bi) in z.axis_iter_mut(Axis(0)).zip(b) {
                row += bi;
            }
            if l + 1 == n_layers {
                out = Some(z);
            } else {
                let a = z.mapv(silu);
                h = if l == 0 { a } else { h + a };
                pre.push(z);
            }
            cols.push(col);
        }
        Tape {
            cols,
            pre,
            out: out.unwrap(),
        }
    }

    /// Parameter gradient given the loss gradient w.r.t. the two raw output
    /// channels (`2 × n_pixels`).
    fn backward(&self, tape: &Tape, d_out: Array2<f64>, nx: usize, ny: usize) -> Vec<f64> {
        let layers = self.layer_views();
        let shapes = self.arch.layers();
        let last = layers.len() - 1;
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
        let conv_grad = |dz: &Array2<f64>, col: &Array2<f64>| {
            let mut g = dz.dot(&col.t()).into_raw_vec_and_offset().0;
            g.extend(dz.sum_axis(Axis(1)).iter());
            g
        };
        grads[last] = conv_grad(&d_out, &tape.cols[last]);
        // gradient w.r.t. the residual stream entering the output layer
        let mut dh = col2im(&layers[last].0.t().dot(&d_out), shapes[last].0, nx, ny);
        for l in (0..last).rev() {
            let dz = &dh * &tape.pre[l].mapv(silu_grad);
            grads[l] = conv_grad(&dz, &tape.cols[l]);
            if l == 0 {
                break;
            }
            dh += &col2im(&layers[l].0.t().dot(&dz), shapes[l].0, nx, ny);
        }
        grads.concat()
    }

    fn check_inputs(&self, x_t: &Slice2D, c: &Slice2D) -> Result<()> {
        check_shapes(x_t, c, "network input vs condition")
    }

    /// Hybrid loss for one example, mean over pixels:
    /// `‖ε − ε̂‖²/n + λ·T·KL(q(x_{t−1}|x_t,x_0) ‖ N(μ, σ_θ²))/n`.
    ///
    /// The KL term only trains the variance channel: `μ` is held fixed at the
    /// value computed from `ε̂` (or `frozen_mean` when given).
    pub fn loss_and_grad(
        &self,
        sample: &TrainSample,
        sched: &NoiseSchedule,
        vlb_weight: f64,
        frozen_mean: Option<&[f64]>,
    ) -> Result<LossEval> {
        let TrainSample { x0, c, t, eps } = sample;
        let t = *t;
        sched.check_t(t)?;
        check_shapes(x0, eps, "training noise")?;
        self.check_inputs(x0, c)?;
        let (nx, ny) = (x0.nx, x0.ny);
        let n = x0.len();
        let (a, b) = sched.marginal_coefficients(t);
        let x_t = x0.zip_map(eps, |x, e| a * x + b * e);
        let tape = self.forward(&x_t, t, c);
        let eps_hat = tape.out.row(0);
        let raw_v = tape.out.row(1);

        let (ra, rb) = sched.reverse_coefficients(t);
        let mean: Vec<f64> = (0..n).map(|p| ra * (x_t.data[p] - rb * eps_hat[p])).collect();
        let mu = frozen_mean.unwrap_or(&mean);
        ensure!(mu.len() == n, Shape, "frozen mean has {} values, image has {n}", mu.len());
        let (cx, c0) = sched.posterior_coefficients(t);
        let (beta, bt) = (sched.beta(t), sched.beta_tilde(t));
        let (lb, lbt) = (beta.ln(), bt.ln());
        let span = lb - lbt;
        let scale = vlb_weight * sched.t_max() as f64 / n as f64;

        let mut d_out = Array2::<f64>::zeros((2, n));
        let mut eps_loss = 0.0;
        let mut kl = 0.0;
        for p in 0..n {
            let r = eps.data[p] - eps_hat[p];
            eps_loss += r * r;
            d_out[[0, p]] = -2.0 * r / n as f64;
            if vlb_weight > 0.0 {
                let v = sigmoid(raw_v[p]);
                let ell = v * lb + (1.0 - v) * lbt;
                let mq = cx * x_t.data[p] + c0 * x0.data[p];
                let d = mq - mu[p];
                let q = (bt + d * d) * (-ell).exp();
                kl += 0.5 * (ell - lbt + q - 1.0);
                d_out[[1, p]] = scale * 0.5 * (1.0 - q) * span * v * (1.0 - v);
            }
        }
        eps_loss /= n as f64;
        let loss = eps_loss + scale * kl;
        let grad = self.backward(&tape, d_out, nx, ny);
        Ok(LossEval {
            loss,
            eps_loss,
            grad,
            mean,
        })
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, sample: &TrainSample, sched: &NoiseSchedule, vlb_weight: f64, frozen_mean: Option<&[f64]>) -> Result<f64> {
        Ok(self.loss_and_grad(sample, sched, vlb_weight, frozen_mean)?.loss)
    }
}

impl EpsilonModel for ConvNet {
    fn predict(&self, x_t: &Slice2D, t: usize, c: &Slice2D) -> Result<ModelOutput> {
        self.check_inputs(x_t, c)?;
        let tape = self.forward(x_t, t, c);
        let (nx, ny) = (x_t.nx, x_t.ny);
        Ok(ModelOutput {
            eps: Slice2D {
                nx,
                ny,
                data: tape.out.row(0).to_vec(),
            },
            v: Slice2D {
                nx,
                ny,
                data: tape.out.row(1).iter().map(|&o| sigmoid(o)).collect(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn small() -> Architecture {
        Architecture {
            width: 4,
            depth: 3,
            n_embed: 4,
        }
    }

    fn randomized(arch: Architecture, seed: u64) -> ConvNet {
        let mut net = ConvNet::new(arch, seed).unwrap();
        let mut g = RngStream::new(seed + 1000).generator();
        for p in net.params_mut() {
            *p = 0.3 * g.sample::<f64, _>(StandardNormal);
        }
        net
    }

    fn image(nx: usize, ny: usize, g: &mut petdiff_core::rng::Generator) -> Slice2D {
        Slice2D::new(nx, ny, (0..nx * ny).map(|_| g.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn parameter_count() {
        let a = small();
        // (6*9*4+4) + 2*(4*9*4+4) + (4*9*2+2)
        assert_eq!(a.n_params(), 220 + 2 * 148 + 74);
        assert_eq!(ConvNet::new(a, 0).unwrap().n_params(), a.n_params());
    }

    #[test]
    fn same_seed_same_init_and_zero_output() {
        let a = Architecture::default();
        let n1 = ConvNet::new(a, 11).unwrap();
        assert_eq!(n1, ConvNet::new(a, 11).unwrap());
        assert_ne!(n1, ConvNet::new(a, 12).unwrap());
        let mut g = RngStream::new(1).generator();
        let x = image(9, 7, &mut g);
        let out = n1.predict(&x, 17, &x).unwrap();
        assert!(out.eps.data.iter().all(|&e| e == 0.0));
        assert!(out.v.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn im2col_is_adjoint_of_col2im() {
        let mut g = RngStream::new(2).generator();
        let (nx, ny, c) = (5, 4, 3);
        let x = Array2::from_shape_fn((c, nx * ny), |_| g.sample::<f64, _>(StandardNormal));
        let y = Array2::from_shape_fn((c * 9, nx * ny), |_| g.sample::<f64, _>(StandardNormal));
        let lhs = (&im2col(x.view(), nx, ny) * &y).sum();
        let rhs = (&x * &col2im(&y, c, nx, ny)).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let sched = make_schedule(200, ScheduleKind::Linear, 5e-4, 0.1).unwrap();
        let mut net = randomized(small(), 3);
        let mut g = RngStream::new(4).generator();
        for (t, lambda) in [(1usize, 0.0), (37, 0.5), (180, 0.01)] {
            let s = TrainSample {
                x0: image(8, 8, &mut g),
                c: image(8, 8, &mut g),
                t,
                eps: image(8, 8, &mut g),
            };
            let base = net.loss_and_grad(&s, &sched, lambda, None).unwrap();
            let h = 1e-5;
            for i in (0..net.n_params()).step_by(7) {
                let p0 = net.params()[i];
                net.params_mut()[i] = p0 + h;
                let up = net.loss(&s, &sched, lambda, Some(&base.mean)).unwrap();
                net.params_mut()[i] = p0 - h;
                let down = net.loss(&s, &sched, lambda, Some(&base.mean)).unwrap();
                net.params_mut()[i] = p0;
                let fd = (up - down) / (2.0 * h);
                let a = base.grad[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "t={t} param {i}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn loss_is_non_negative() {
        let sched = make_schedule(200, ScheduleKind::Linear, 5e-4, 0.1).unwrap();
        let net = randomized(small(), 5);
        let mut g = RngStream::new(6).generator();
        for t in [1usize, 2, 50, 200] {
            let s = TrainSample {
                x0: image(6, 6, &mut g),
                c: image(6, 6, &mut g),
                t,
                eps: image(6, 6, &mut g),
            };
            let l = net.loss_and_grad(&s, &sched, 0.001, None).unwrap();
            assert!(l.loss >= 0.0 && l.eps_loss >= 0.0);
        }
    }
}
