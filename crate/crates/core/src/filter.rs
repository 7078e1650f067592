//! Separable Gaussian smoothing on volumes and 2D grids.

use crate::volume::Volume;

pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Smooths along one axis of an x-fastest grid. Near the borders the kernel
/// is renormalised over the in-bounds taps, so constants are preserved.
fn smooth_axis(data: &[f64], dims: [usize; 3], axis: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || dims[axis] == 1 {
        return data.to_vec();
    }
    let k = kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis] as isize;
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = ((i / stride) % dims[axis]) as isize;
        let base = i as isize - pos * stride as isize;
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (t, &w) in k.iter().enumerate() {
            let p = pos + t as isize - radius;
            if p >= 0 && p < n {
                acc += w * data[(base + p * stride as isize) as usize];
                wsum += w;
            }
        }
        *o = acc / wsum;
    }
    out
}

/// Gaussian smoothing with per-axis standard deviations given in voxels.
pub fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma_voxels: [f64; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        cur = smooth_axis(&cur, dims, axis, sigma_voxels[axis]);
    }
    cur
}

/// Gaussian post-filter specified by an isotropic FWHM in millimetres.
pub fn smooth_volume_fwhm(vol: &Volume, fwhm_mm: f64) -> Volume {
    if fwhm_mm <= 0.0 {
        return vol.clone();
    }
    let sigma = fwhm_to_sigma(fwhm_mm);
    let sp = vol.spacing();
    let data = gaussian_smooth(vol.data(), vol.dims(), [sigma / sp[0], sigma / sp[1], sigma / sp[2]]);
    vol.like(vol.kind(), data).expect("smoothing preserves the grid")
}
