//! 2D parallel-beam PET system model applied slice by slice.
//!
//! The system matrix holds exact ray/voxel intersection lengths (Siddon-style
//! tracing) for one axial slice and is shared by all slices. Forward and back
//! projection traverse the same sparse rows, so the pair are exact transposes.
//!
//! Sinogram layout is bin-fastest: `index = (slice * n_angles + angle) * n_bins + bin`.
//! File layout (little-endian): magic `PDIFSIN1` | n_angles, n_bins, n_slices
//! `u32` | bin_spacing `f64` | variant `u8` | angles `f64 x n_angles` | payload `f64`.

use std::path::Path;

use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::io::{write_atomic, Reader};
use crate::rng::RngStream;
use crate::volume::{Volume, VolumeKind};

pub const SINOGRAM_MAGIC: &[u8; 8] = b"PDIFSIN1";

/// Linear attenuation coefficient of water at 511 keV, per millimetre.
pub const WATER_MU_PER_MM: f64 = 0.0096;

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry2D {
    n_angles: usize,
    n_bins: usize,
    bin_spacing: f64,
    angles: Vec<f64>,
}

impl Geometry2D {
    /// Uniform angles `k * pi / n_angles`.
    pub fn new(n_angles: usize, n_bins: usize, bin_spacing: f64) -> Result<Self> {
        let angles = (0..n_angles)
            .map(|k| k as f64 * std::f64::consts::PI / n_angles as f64)
            .collect();
        Self::with_angles(angles, n_bins, bin_spacing)
    }

    pub fn with_angles(angles: Vec<f64>, n_bins: usize, bin_spacing: f64) -> Result<Self> {
        ensure!(!angles.is_empty(), Invalid, "geometry needs at least one angle");
        ensure!(n_bins % 2 == 1, Invalid, "n_bins must be odd (centred), got {n_bins}");
        ensure!(bin_spacing > 0.0, Invalid, "bin spacing must be positive");
        ensure!(
            angles.iter().all(|&a| (0.0..std::f64::consts::PI).contains(&a)),
            Invalid,
            "angles must lie in [0, pi)"
        );
        ensure!(
            angles.windows(2).all(|w| w[0] < w[1]),
            Invalid,
            "angles must be strictly increasing"
        );
        Ok(Geometry2D {
            n_angles: angles.len(),
            n_bins,
            bin_spacing,
            angles,
        })
    }

    /// Smallest odd bin count with the given spacing that covers the slice diagonal.
    pub fn covering(n_angles: usize, nx: usize, ny: usize, spacing: [f64; 2], bin_spacing: f64) -> Result<Self> {
        let diag = ((nx as f64 * spacing[0]).powi(2) + (ny as f64 * spacing[1]).powi(2)).sqrt();
        let mut n_bins = (diag / bin_spacing).ceil() as usize;
        if n_bins % 2 == 0 {
            n_bins += 1;
        }
        Self::new(n_angles, n_bins, bin_spacing)
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn bin_spacing(&self) -> f64 {
        self.bin_spacing
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_rays(&self) -> usize {
        self.n_angles * self.n_bins
    }

    /// Signed distance of bin `k` from the rotation centre, mm.
    pub fn bin_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_bins - 1) as f64 / 2.0) * self.bin_spacing
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SinogramVariant {
    /// Non-negative expected counts.
    Expected = 0,
    /// Non-negative integer counts.
    Counts = 1,
    /// Unconstrained values (projections of signed images).
    Generic = 2,
}

impl SinogramVariant {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => SinogramVariant::Expected,
            1 => SinogramVariant::Counts,
            2 => SinogramVariant::Generic,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    geometry: Geometry2D,
    n_slices: usize,
    variant: SinogramVariant,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(geometry: Geometry2D, n_slices: usize, variant: SinogramVariant, data: Vec<f64>) -> Result<Self> {
        ensure!(n_slices > 0, Invalid, "sinogram needs at least one slice");
        let n = geometry.n_rays() * n_slices;
        ensure!(data.len() == n, Shape, "sinogram data holds {} values, geometry needs {n}", data.len());
        ensure!(data.iter().all(|v| v.is_finite()), Invalid, "sinogram contains non-finite values");
        match variant {
            SinogramVariant::Expected => {
                ensure!(data.iter().all(|&v| v >= 0.0), Invalid, "expected sinogram must be non-negative")
            }
            SinogramVariant::Counts => ensure!(
                data.iter().all(|&v| v >= 0.0 && v.fract() == 0.0),
                Invalid,
                "count sinogram must hold non-negative integers"
            ),
            SinogramVariant::Generic => {}
        }
        Ok(Sinogram {
            geometry,
            n_slices,
            variant,
            data,
        })
    }

    pub fn filled(geometry: &Geometry2D, n_slices: usize, variant: SinogramVariant, value: f64) -> Result<Self> {
        let n = geometry.n_rays() * n_slices;
        Self::new(geometry.clone(), n_slices, variant, vec![value; n])
    }

    pub fn geometry(&self) -> &Geometry2D {
        &self.geometry
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn variant(&self) -> SinogramVariant {
        self.variant
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_shape(&self, other: &Sinogram) -> bool {
        self.geometry == other.geometry && self.n_slices == other.n_slices
    }

    fn check_same_shape(&self, other: &Sinogram, what: &str) -> Result<()> {
        ensure!(
            self.same_shape(other),
            Shape,
            "{what}: sinogram shapes differ ({} angles x {} bins x {} slices vs {} x {} x {})",
            self.geometry.n_angles,
            self.geometry.n_bins,
            self.n_slices,
            other.geometry.n_angles,
            other.geometry.n_bins,
            other.n_slices
        );
        Ok(())
    }

    /// Same shape, new contents.
    pub fn like(&self, variant: SinogramVariant, data: Vec<f64>) -> Result<Self> {
        Self::new(self.geometry.clone(), self.n_slices, variant, data)
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        let variant = match self.variant {
            SinogramVariant::Counts => SinogramVariant::Expected,
            v => v,
        };
        self.like(variant, self.data.iter().map(|v| v * k).collect())
    }
}

pub fn save_sinogram(sino: &Sinogram, path: impl AsRef<Path>) -> Result<()> {
    let g = &sino.geometry;
    let mut out = Vec::with_capacity(8 + 12 + 8 + 1 + 8 * (g.n_angles + sino.data.len()));
    out.extend_from_slice(SINOGRAM_MAGIC);
    out.extend_from_slice(&(g.n_angles as u32).to_le_bytes());
    out.extend_from_slice(&(g.n_bins as u32).to_le_bytes());
    out.extend_from_slice(&(sino.n_slices as u32).to_le_bytes());
    out.extend_from_slice(&g.bin_spacing.to_le_bytes());
    out.push(sino.variant as u8);
    for a in &g.angles {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for v in &sino.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path.as_ref(), &out)
}

pub fn load_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.expect_magic(SINOGRAM_MAGIC)?;
    let n_angles = r.u32()? as usize;
    let n_bins = r.u32()? as usize;
    let n_slices = r.u32()? as usize;
    let bin_spacing = r.f64()?;
    let tag = r.u8()?;
    let variant = SinogramVariant::from_tag(tag)
        .ok_or_else(|| Error::Invalid(format!("{}: unknown sinogram variant {tag}", path.display())))?;
    let angles = (0..n_angles).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let data = r.f64_payload(n_angles * n_bins * n_slices)?;
    let geometry = Geometry2D::with_angles(angles, n_bins, bin_spacing)?;
    Sinogram::new(geometry, n_slices, variant, data)
}

/// Intersection lengths of one ray with the voxels of a centred `nx x ny` grid.
fn trace_ray(theta: f64, offset: f64, nx: usize, ny: usize, sx: f64, sy: f64) -> Vec<(u32, f64)> {
    const EPS: f64 = 1e-12;
    let (dir_x, dir_y) = (-theta.sin(), theta.cos());
    let (p0x, p0y) = (offset * theta.cos(), offset * theta.sin());
    let half_x = nx as f64 * sx / 2.0;
    let half_y = ny as f64 * sy / 2.0;

    let axis_range = |p0: f64, d: f64, half: f64| -> Option<(f64, f64)> {
        if d.abs() > EPS {
            let a = (-half - p0) / d;
            let b = (half - p0) / d;
            Some((a.min(b), a.max(b)))
        } else if p0 > -half && p0 < half {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            None
        }
    };
    let (Some((x0, x1)), Some((y0, y1))) = (axis_range(p0x, dir_x, half_x), axis_range(p0y, dir_y, half_y)) else {
        return Vec::new();
    };
    let (l_in, l_out) = (x0.max(y0), x1.min(y1));
    if l_out - l_in <= EPS {
        return Vec::new();
    }

    let mut lambdas = vec![l_in, l_out];
    let mut planes = |p0: f64, d: f64, n: usize, s: f64, half: f64| {
        if d.abs() > EPS {
            for i in 0..=n {
                let l = (-half + i as f64 * s - p0) / d;
                if l > l_in && l < l_out {
                    lambdas.push(l);
                }
            }
        }
    };
    planes(p0x, dir_x, nx, sx, half_x);
    planes(p0y, dir_y, ny, sy, half_y);
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut entries: Vec<(u32, f64)> = Vec::new();
    for w in lambdas.windows(2) {
        let len = w[1] - w[0];
        if len <= EPS {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let px = p0x + mid * dir_x;
        let py = p0y + mid * dir_y;
        let ix = (((px + half_x) / sx).floor() as isize).clamp(0, nx as isize - 1) as usize;
        let iy = (((py + half_y) / sy).floor() as isize).clamp(0, ny as isize - 1) as usize;
        let col = (ix + nx * iy) as u32;
        match entries.last_mut() {
            Some(last) if last.0 == col => last.1 += len,
            _ => entries.push((col, len)),
        }
    }
    entries
}

/// Sparse per-slice system matrix bound to an image grid.
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: Geometry2D,
    nx: usize,
    ny: usize,
    spacing: [f64; 3],
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// Angle indices processed together in one ordered-subsets update.
pub type AngleSubset = [usize];

impl Projector {
    /// `spacing` is the voxel size in millimetres; only x and y enter the
    /// system matrix, z is carried through to back-projected volumes.
    pub fn new(geometry: Geometry2D, nx: usize, ny: usize, spacing: [f64; 3]) -> Result<Self> {
        ensure!(nx > 0 && ny > 0, Invalid, "image grid must be non-empty");
        ensure!(spacing.iter().all(|&s| s > 0.0), Invalid, "voxel spacing must be positive");
        let mut row_ptr = Vec::with_capacity(geometry.n_rays() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for &theta in &geometry.angles {
            for k in 0..geometry.n_bins {
                for (c, v) in trace_ray(theta, geometry.bin_offset(k), nx, ny, spacing[0], spacing[1]) {
                    cols.push(c);
                    vals.push(v);
                }
                row_ptr.push(cols.len());
            }
        }
        Ok(Projector {
            geometry,
            nx,
            ny,
            spacing,
            row_ptr,
            cols,
            vals,
        })
    }

    /// Projector for the axial grid of `vol`.
    pub fn for_volume(geometry: Geometry2D, vol: &Volume) -> Result<Self> {
        let [nx, ny, _] = vol.dims();
        Self::new(geometry, nx, ny, vol.spacing())
    }

    pub fn geometry(&self) -> &Geometry2D {
        &self.geometry
    }

    pub fn grid(&self) -> (usize, usize, [f64; 3]) {
        (self.nx, self.ny, self.spacing)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn check_volume(&self, vol: &Volume) -> Result<()> {
        let [nx, ny, _] = vol.dims();
        let sp = vol.spacing();
        ensure!(
            nx == self.nx && ny == self.ny && sp == self.spacing,
            Shape,
            "volume grid {nx}x{ny} @ {:?} mm does not match projector grid {}x{} @ {:?} mm",
            sp,
            self.nx,
            self.ny,
            self.spacing
        );
        Ok(())
    }

    pub fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        ensure!(
            sino.geometry == self.geometry,
            Shape,
            "sinogram geometry does not match projector geometry"
        );
        Ok(())
    }

    #[inline]
    fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// Forward projection of an x-fastest image stack, restricted to `angles`
    /// when given; rays outside the subset are left at zero.
    pub fn forward_raw(&self, image: &[f64], angles: Option<&AngleSubset>) -> Vec<f64> {
        let n_pix = self.nx * self.ny;
        let n_rays = self.geometry.n_rays();
        let nz = image.len() / n_pix;
        let nb = self.geometry.n_bins;
        let mut out = vec![0.0; n_rays * nz];
        out.par_chunks_mut(n_rays)
            .zip(image.par_chunks(n_pix))
            .for_each(|(sino, img)| {
                let mut project_angle = |a: usize| {
                    for r in a * nb..(a + 1) * nb {
                        let (cols, vals) = self.row(r);
                        sino[r] = cols.iter().zip(vals).map(|(&c, &v)| v * img[c as usize]).sum();
                    }
                };
                match angles {
                    Some(subset) => subset.iter().for_each(|&a| project_angle(a)),
                    None => (0..self.geometry.n_angles).for_each(&mut project_angle),
                }
            });
        out
    }

    /// Adjoint of [`Projector::forward_raw`].
    pub fn back_raw(&self, sino: &[f64], angles: Option<&AngleSubset>) -> Vec<f64> {
        let n_pix = self.nx * self.ny;
        let n_rays = self.geometry.n_rays();
        let nz = sino.len() / n_rays;
        let nb = self.geometry.n_bins;
        let mut out = vec![0.0; n_pix * nz];
        out.par_chunks_mut(n_pix)
            .zip(sino.par_chunks(n_rays))
            .for_each(|(img, s)| {
                let mut back_angle = |a: usize| {
                    for r in a * nb..(a + 1) * nb {
                        let y = s[r];
                        if y == 0.0 {
                            continue;
                        }
                        let (cols, vals) = self.row(r);
                        for (&c, &v) in cols.iter().zip(vals) {
                            img[c as usize] += v * y;
                        }
                    }
                };
                match angles {
                    Some(subset) => subset.iter().for_each(|&a| back_angle(a)),
                    None => (0..self.geometry.n_angles).for_each(&mut back_angle),
                }
            });
        out
    }

    pub fn forward(&self, vol: &Volume) -> Result<Sinogram> {
        self.check_volume(vol)?;
        let variant = match vol.kind() {
            VolumeKind::Generic => SinogramVariant::Generic,
            _ => SinogramVariant::Expected,
        };
        Sinogram::new(self.geometry.clone(), vol.dims()[2], variant, self.forward_raw(vol.data(), None))
    }

    pub fn back(&self, sino: &Sinogram) -> Result<Volume> {
        self.check_sinogram(sino)?;
        let kind = match sino.variant {
            SinogramVariant::Generic => VolumeKind::Generic,
            _ => VolumeKind::Activity,
        };
        Volume::new(
            [self.nx, self.ny, sino.n_slices],
            self.spacing,
            kind,
            self.back_raw(&sino.data, None),
        )
    }

    /// `sum_i g_ij w_i` for a per-ray weight sinogram (the sensitivity image
    /// when `w = n * a`).
    pub fn sensitivity(&self, weights: &Sinogram) -> Result<Volume> {
        self.back(weights)
    }

    /// Largest column sum `max_j sum_i g_ij` of the per-slice matrix.
    pub fn max_column_sum(&self) -> f64 {
        let mut sums = vec![0.0; self.nx * self.ny];
        for (&c, &v) in self.cols.iter().zip(&self.vals) {
            sums[c as usize] += v;
        }
        sums.into_iter().fold(0.0, f64::max)
    }
}

/// One-shot forward projection; builds the system matrix for `vol`.
pub fn forward_project(vol: &Volume, geom: &Geometry2D) -> Result<Sinogram> {
    Projector::for_volume(geom.clone(), vol)?.forward(vol)
}

/// One-shot back projection onto the grid `(nx, ny)` with `spacing`.
pub fn back_project(sino: &Sinogram, nx: usize, ny: usize, spacing: [f64; 3]) -> Result<Volume> {
    Projector::new(sino.geometry.clone(), nx, ny, spacing)?.back(sino)
}

/// Multiplicative normalisation, attenuation and additive background.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemFactors {
    pub attenuation: Sinogram,
    pub normalization: Sinogram,
    pub background: Sinogram,
}

impl SystemFactors {
    /// `a = n = 1`, `b = 0`.
    pub fn unit(geom: &Geometry2D, n_slices: usize) -> Result<Self> {
        Ok(SystemFactors {
            attenuation: Sinogram::filled(geom, n_slices, SinogramVariant::Expected, 1.0)?,
            normalization: Sinogram::filled(geom, n_slices, SinogramVariant::Expected, 1.0)?,
            background: Sinogram::filled(geom, n_slices, SinogramVariant::Expected, 0.0)?,
        })
    }

    /// Attenuation `exp(-G mu)` with water attenuation in every labelled
    /// voxel; unit normalisation and zero background.
    pub fn from_labels(labels: &Volume, projector: &Projector) -> Result<Self> {
        let mu = labels.like(
            VolumeKind::Activity,
            labels
                .data()
                .iter()
                .map(|&l| if l > 0.0 { WATER_MU_PER_MM } else { 0.0 })
                .collect(),
        )?;
        let line_integrals = projector.forward(&mu)?;
        let att = line_integrals.data().iter().map(|&v| (-v).exp()).collect();
        let mut f = Self::unit(projector.geometry(), labels.dims()[2])?;
        f.attenuation = f.attenuation.like(SinogramVariant::Expected, att)?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        self.attenuation.check_same_shape(&self.normalization, "normalization")?;
        self.attenuation.check_same_shape(&self.background, "background")?;
        ensure!(
            self.attenuation.data.iter().all(|&a| a > 0.0 && a <= 1.0),
            Invalid,
            "attenuation factors must lie in (0, 1]"
        );
        ensure!(
            self.normalization.data.iter().all(|&n| n > 0.0),
            Invalid,
            "normalization factors must be positive"
        );
        ensure!(
            self.background.data.iter().all(|&b| b >= 0.0),
            Invalid,
            "background must be non-negative"
        );
        Ok(())
    }

    pub fn check_matches(&self, sino: &Sinogram) -> Result<()> {
        self.attenuation.check_same_shape(sino, "system factors")
    }

    /// Per-ray multiplicative factor `n_i * a_i`.
    pub fn multiplicative(&self) -> Vec<f64> {
        self.normalization
            .data
            .iter()
            .zip(&self.attenuation.data)
            .map(|(n, a)| n * a)
            .collect()
    }

    pub fn multiplicative_sinogram(&self) -> Sinogram {
        self.attenuation
            .like(SinogramVariant::Expected, self.multiplicative())
            .expect("products of valid factors are valid")
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_sinogram(&self.attenuation, dir.join("attenuation.sino"))?;
        save_sinogram(&self.normalization, dir.join("normalization.sino"))?;
        save_sinogram(&self.background, dir.join("background.sino"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let f = SystemFactors {
            attenuation: load_sinogram(dir.join("attenuation.sino"))?,
            normalization: load_sinogram(dir.join("normalization.sino"))?,
            background: load_sinogram(dir.join("background.sino"))?,
        };
        f.validate()?;
        Ok(f)
    }
}

/// `n_i * a_i * y_i + b_i`.
pub fn apply_factors(expected: &Sinogram, f: &SystemFactors) -> Result<Sinogram> {
    f.check_matches(expected)?;
    let data = expected
        .data
        .iter()
        .zip(f.multiplicative())
        .zip(&f.background.data)
        .map(|((y, na), b)| na * y + b)
        .collect();
    let variant = match expected.variant {
        SinogramVariant::Generic => SinogramVariant::Generic,
        _ => SinogramVariant::Expected,
    };
    expected.like(variant, data)
}

/// Independent Poisson draws per bin.
pub fn sample_poisson(expected: &Sinogram, rng: &RngStream) -> Result<Sinogram> {
    ensure!(
        expected.variant == SinogramVariant::Expected,
        Invalid,
        "Poisson sampling needs an expected-count sinogram"
    );
    let mut g = rng.generator();
    let data = expected
        .data
        .iter()
        .map(|&lambda| {
            if lambda > 0.0 {
                Poisson::new(lambda).expect("finite positive mean").sample(&mut g)
            } else {
                0.0
            }
        })
        .collect();
    expected.like(SinogramVariant::Counts, data)
}

/// Binomial thinning of every bin, the sinogram-domain analogue of randomly
/// dropping list-mode events.
pub fn decimate(counts: &Sinogram, fraction: f64, rng: &RngStream) -> Result<Sinogram> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        Invalid,
        "decimation fraction must lie in (0, 1], got {fraction}"
    );
    ensure!(
        counts.variant == SinogramVariant::Counts,
        Invalid,
        "decimation needs a count sinogram"
    );
    if fraction == 1.0 {
        return Ok(counts.clone());
    }
    let mut g = rng.generator();
    let data = counts
        .data
        .iter()
        .map(|&n| {
            if n > 0.0 {
                Binomial::new(n as u64, fraction).expect("valid binomial").sample(&mut g) as f64
            } else {
                0.0
            }
        })
        .collect();
    counts.like(SinogramVariant::Counts, data)
}
