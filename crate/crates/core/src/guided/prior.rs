//! The anatomically weighted Markov random field prior
//! `R(u) = sum_j phi(S_j)`, `S_j = sum_{b in B_j} xi_j omega_jb (u_j - u_b)^2`.

use rayon::prelude::*;

use super::neighbors::NeighborSets;

/// Floor on local variances entering the weights.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Outer function `phi` applied to each voxel's weighted neighbour sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Potential {
    Identity,
    /// `ln(1 + s)`
    Log1p,
}

impl Potential {
    pub fn value(self, s: f64) -> f64 {
        match self {
            Potential::Identity => s,
            Potential::Log1p => s.ln_1p(),
        }
    }

    pub fn derivative(self, s: f64) -> f64 {
        match self {
            Potential::Identity => 1.0,
            Potential::Log1p => 1.0 / (1.0 + s),
        }
    }
}

/// `xi_j = 1 / (2 |N_j| sigma_u,j^2)`.
pub fn xi_coefficients(sigma_u: &[f64], full: &NeighborSets) -> Vec<f64> {
    sigma_u
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let n = full.of(j).len().max(1) as f64;
            1.0 / (2.0 * n * (s * s).max(VARIANCE_FLOOR))
        })
        .collect()
}

fn omega(du: f64, dv: f64, su: f64, sv: f64, p: f64) -> f64 {
    let eu = (-du * du / (2.0 * (su * su).max(VARIANCE_FLOOR))).exp();
    let ev = (-dv * dv / (2.0 * (sv * sv).max(VARIANCE_FLOOR))).exp();
    eu * ev / p
}

/// Burg joint-entropy similarity weights `omega_jb` for every selected pair,
/// aligned with the flat pair layout of `selected`. With `symmetrize` each
/// weight is averaged with its `b`-centred counterpart.
pub fn similarity_weights(
    u: &[f64],
    v: &[f64],
    selected: &NeighborSets,
    sigma_u: &[f64],
    sigma_v: &[f64],
    density: impl Fn(f64, f64) -> f64 + Sync,
    symmetrize: bool,
) -> Vec<f64> {
    let p: Vec<f64> = u.par_iter().zip(v).map(|(&a, &b)| density(a, b)).collect();
    let rows: Vec<Vec<f64>> = (0..selected.n_voxels())
        .into_par_iter()
        .map(|j| {
            selected
                .of(j)
                .iter()
                .map(|&b| {
                    let b = b as usize;
                    let (du, dv) = (u[j] - u[b], v[j] - v[b]);
                    let w = omega(du, dv, sigma_u[j], sigma_v[j], p[j]);
                    if symmetrize {
                        0.5 * (w + omega(du, dv, sigma_u[b], sigma_v[b], p[b]))
                    } else {
                        w
                    }
                })
                .collect()
        })
        .collect();
    rows.concat()
}

/// Per-voxel sums `S_j`.
pub fn neighbor_sums(u: &[f64], selected: &NeighborSets, xi: &[f64], omega: &[f64]) -> Vec<f64> {
    (0..selected.n_voxels())
        .into_par_iter()
        .map(|j| {
            let off = selected.offset(j);
            let s: f64 = selected
                .of(j)
                .iter()
                .enumerate()
                .map(|(t, &b)| omega[off + t] * (u[j] - u[b as usize]).powi(2))
                .sum();
            xi[j] * s
        })
        .collect()
}

/// `sum_j beta_j phi(S_j)`; unit weights when `beta` is `None`.
pub fn prior_value(
    u: &[f64],
    selected: &NeighborSets,
    xi: &[f64],
    omega: &[f64],
    potential: Potential,
    beta: Option<&[f64]>,
) -> f64 {
    let s = neighbor_sums(u, selected, xi, omega);
    s.iter()
        .enumerate()
        .map(|(j, &sj)| beta.map_or(1.0, |b| b[j]) * potential.value(sj))
        .sum()
}

/// Pair structure needed by the gradient: for each voxel, the pairs in which
/// it appears as the neighbour, and the owner voxel of every pair.
#[derive(Clone, Debug)]
pub struct PairIndex {
    incoming_ptr: Vec<usize>,
    incoming: Vec<u32>,
    owner: Vec<u32>,
}

impl PairIndex {
    pub fn new(selected: &NeighborSets) -> Self {
        let (incoming_ptr, incoming) = selected.incoming();
        let mut owner = vec![0u32; selected.n_pairs()];
        for j in 0..selected.n_voxels() {
            let off = selected.offset(j);
            for t in 0..selected.of(j).len() {
                owner[off + t] = j as u32;
            }
        }
        PairIndex {
            incoming_ptr,
            incoming,
            owner,
        }
    }
}

/// `dR/du` with `xi` and `omega` held fixed. Each `u_k` enters through its own
/// sum `S_k` and through every `S_j` that selects it as a neighbour.
pub fn prior_gradient(
    u: &[f64],
    selected: &NeighborSets,
    pairs: &PairIndex,
    xi: &[f64],
    omega: &[f64],
    potential: Potential,
) -> Vec<f64> {
    let s = neighbor_sums(u, selected, xi, omega);
    let dphi: Vec<f64> = s.iter().map(|&x| potential.derivative(x)).collect();
    (0..selected.n_voxels())
        .into_par_iter()
        .map(|k| {
            let off = selected.offset(k);
            let own: f64 = selected
                .of(k)
                .iter()
                .enumerate()
                .map(|(t, &b)| omega[off + t] * (u[k] - u[b as usize]))
                .sum();
            let mut g = 2.0 * dphi[k] * xi[k] * own;
            for &p in &pairs.incoming[pairs.incoming_ptr[k]..pairs.incoming_ptr[k + 1]] {
                let j = pairs.owner[p as usize] as usize;
                g -= 2.0 * dphi[j] * xi[j] * omega[p as usize] * (u[j] - u[k]);
            }
            g
        })
        .collect()
}

/// `beta_j = alpha * sqrt(z_j * s_j)` with `s` the sensitivity image.
pub fn adaptive_beta(z: &[f64], sensitivity: &[f64], alpha: f64) -> Vec<f64> {
    z.iter()
        .zip(sensitivity)
        .map(|(&zj, &sj)| alpha * (zj.max(0.0) * sj.max(0.0)).sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::neighbors::{bowsher_select, full_neighborhood, local_sd};
    use super::*;
    use crate::volume::{Volume, VolumeKind};
    use crate::RngStream;
    use rand::Rng;

    #[test]
    fn weight_formula_cases() {
        let sel = full_neighborhood([2, 1, 1], 1);
        // equal intensities: both exponentials are one
        let w = similarity_weights(&[2.0, 2.0], &[5.0, 5.0], &sel, &[1.0, 1.0], &[1.0, 1.0], |_, _| 0.25, false);
        assert_eq!(w, vec![4.0, 4.0]);
        // (du)^2 / 2 sigma^2 = 1, dv = 0, p = 0.5
        let su = 1.0 / 2f64.sqrt();
        let w = similarity_weights(&[1.0, 0.0], &[3.0, 3.0], &sel, &[su, su], &[1.0, 1.0], |_, _| 0.5, false);
        assert!((w[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((w[0] - 0.7357588823428847).abs() < 1e-12);
        // large MRI difference kills the weight
        let w = similarity_weights(&[1.0, 1.0], &[0.0, 1e3], &sel, &[1.0, 1.0], &[1.0, 1.0], |_, _| 0.5, false);
        assert!(w.iter().all(|&x| x >= 0.0 && x < 1e-100));
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let sel = full_neighborhood([4, 4, 2], 1);
        let pairs = PairIndex::new(&sel);
        let omega = vec![1.3; sel.n_pairs()];
        let xi = vec![0.7; 32];
        let g = prior_gradient(&[4.0; 32], &sel, &pairs, &xi, &omega, Potential::Identity);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn three_voxel_line_by_hand() {
        // voxel 0 -> {1}, voxel 1 -> {0, 2}, voxel 2 -> {1}
        let sel = full_neighborhood([3, 1, 1], 1);
        let pairs = PairIndex::new(&sel);
        let u = [1.0, 2.0, 4.0];
        let xi = [0.5, 1.0, 2.0];
        // pair order: (0,1), (1,0), (1,2), (2,1)
        let omega = [3.0, 5.0, 7.0, 11.0];
        // R = .5*3*(u0-u1)^2 + 1*(5(u1-u0)^2 + 7(u1-u2)^2) + 2*11*(u2-u1)^2
        //   = 6.5 (u0-u1)^2 + 29 (u1-u2)^2
        let expected = [
            2.0 * 6.5 * (u[0] - u[1]),
            -2.0 * 6.5 * (u[0] - u[1]) + 2.0 * 29.0 * (u[1] - u[2]),
            -2.0 * 29.0 * (u[1] - u[2]),
        ];
        let g = prior_gradient(&u, &sel, &pairs, &xi, &omega, Potential::Identity);
        for k in 0..3 {
            assert!((g[k] - expected[k]).abs() < 1e-12, "{k}: {} vs {}", g[k], expected[k]);
        }
        let r = prior_value(&u, &sel, &xi, &omega, Potential::Identity, None);
        assert!((r - (6.5 + 29.0 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dims = [8, 8, 4];
        let mut g = RngStream::new(31).generator();
        let u: Vec<f64> = (0..256).map(|_| g.random_range(0.5..2.0)).collect();
        let v: Vec<f64> = (0..256).map(|_| g.random_range(0.0..1.0)).collect();
        let vv = Volume::new(dims, [1.0; 3], VolumeKind::Generic, v.clone()).unwrap();
        let full = full_neighborhood(dims, 1);
        let sel = bowsher_select(&vv, 1, 13);
        let pairs = PairIndex::new(&sel);
        let su = local_sd(&u, &full);
        let sv = local_sd(&v, &full);
        let xi = xi_coefficients(&su, &full);
        let omega = similarity_weights(&u, &v, &sel, &su, &sv, |_, _| 0.1, false);
        for potential in [Potential::Identity, Potential::Log1p] {
            let grad = prior_gradient(&u, &sel, &pairs, &xi, &omega, potential);
            let h = 1e-5;
            for k in (0..256).step_by(7) {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (prior_value(&up, &sel, &xi, &omega, potential, None)
                    - prior_value(&dn, &sel, &xi, &omega, potential, None))
                    / (2.0 * h);
                let rel = (fd - grad[k]).abs() / grad[k].abs().max(1e-8);
                assert!(rel < 1e-6, "{potential:?} voxel {k}: fd {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn beta_cases() {
        let sens = [4.0, 9.0, 0.0];
        assert_eq!(adaptive_beta(&[0.0; 3], &sens, 1.0), vec![0.0; 3]);
        assert_eq!(adaptive_beta(&[1.0; 3], &sens, 1.0), vec![2.0, 3.0, 0.0]);
        assert_eq!(adaptive_beta(&[1.0; 3], &sens, 2.0), vec![4.0, 6.0, 0.0]);
    }
}
