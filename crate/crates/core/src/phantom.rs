//! Paired synthetic head phantoms: tissue labels, a T1w-like anatomical
//! image, an FDG-like activity image and named VOI masks.
//!
//! The head is an ellipsoid with an outer CSF layer, a folded cortical GM
//! ribbon, WM interior, two ventricles and a set of compact subcortical GM
//! regions of graded size. Both images are class means modulated by smooth
//! correlated texture; the texture field is partly shared between the two
//! modalities so that they are positively correlated inside each class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Error, Result};
use crate::filter::gaussian_smooth;
use crate::rng::RngStream;
use crate::volume::{Volume, VolumeKind};

pub const LABEL_BACKGROUND: f64 = 0.0;
pub const LABEL_CSF: f64 = 1.0;
pub const LABEL_GM: f64 = 2.0;
pub const LABEL_WM: f64 = 3.0;
/// Subcortical region `k` (ascending volume) carries label `LABEL_SUBCORTICAL_BASE + k`.
pub const LABEL_SUBCORTICAL_BASE: f64 = 10.0;

/// CSF activity relative to WM.
pub const CSF_ACTIVITY_FRACTION: f64 = 0.05;

/// Share of the texture variance common to MRI and PET.
const SHARED_TEXTURE_WEIGHT: f64 = 0.8;
/// Smallest subcortical region as a fraction of brain volume.
const SMALLEST_REGION_FRACTION: f64 = 0.02;
/// Volume ratio between consecutive subcortical regions.
const REGION_GROWTH: f64 = 1.2;
const CSF_LAYER_MM: f64 = 4.0;
const CORTEX_MM: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TissueClass {
    Background,
    Csf,
    Gm,
    Wm,
}

pub fn tissue_class(label: f64) -> TissueClass {
    if label >= LABEL_SUBCORTICAL_BASE {
        TissueClass::Gm
    } else if label == LABEL_WM {
        TissueClass::Wm
    } else if label == LABEL_GM {
        TissueClass::Gm
    } else if label == LABEL_CSF {
        TissueClass::Csf
    } else {
        TissueClass::Background
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMeans {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// millimetres
    pub spacing: [f64; 3],
    pub gm_wm_activity_ratio: f64,
    pub mri_class_means: ClassMeans,
    /// Relative within-class texture amplitude of the MRI.
    pub mri_class_sd: f64,
    /// Relative within-class texture amplitude of the activity.
    pub activity_class_sd: f64,
    pub n_subcortical_regions: usize,
    /// Standard deviation of the texture smoothing kernel, millimetres.
    pub texture_correlation_length: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 32],
            spacing: [2.0, 2.0, 2.0],
            gm_wm_activity_ratio: 3.0,
            mri_class_means: ClassMeans {
                csf: 0.1,
                gm: 0.5,
                wm: 0.9,
            },
            mri_class_sd: 0.05,
            activity_class_sd: 0.1,
            n_subcortical_regions: 4,
            texture_correlation_length: 4.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (2.5..=4.1).contains(&self.gm_wm_activity_ratio),
            Invalid,
            "gm_wm_activity_ratio must lie in [2.5, 4.1], got {}",
            self.gm_wm_activity_ratio
        );
        let m = self.mri_class_means;
        ensure!(
            m.wm > m.gm && m.gm > m.csf && m.csf >= 0.0,
            Invalid,
            "MRI class means must satisfy WM > GM > CSF >= 0, got {m:?}"
        );
        ensure!(
            self.mri_class_sd >= 0.0 && self.activity_class_sd >= 0.0,
            Invalid,
            "texture amplitudes must be non-negative"
        );
        ensure!(self.texture_correlation_length >= 0.0, Invalid, "texture correlation length must be >= 0");
        ensure!(
            self.spacing.iter().all(|&s| s > 0.0),
            Invalid,
            "spacing must be positive"
        );
        ensure!(
            self.dims[0] >= 16 && self.dims[1] >= 16 && self.dims[2] >= 4,
            Invalid,
            "dims {:?} too small to place all regions (need at least 16x16x4)",
            self.dims
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub labels: Volume,
    pub mri: Volume,
    pub pet: Volume,
    /// VOI masks in emission order: GM, WM, CSF, then subcortical regions by
    /// increasing volume.
    pub vois: Vec<(String, Volume)>,
}

impl PhantomPair {
    pub fn voi(&self, name: &str) -> Option<&Volume> {
        self.vois.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Union of GM and WM (brain tissue).
    pub fn brain_mask(&self) -> Volume {
        let data = self
            .labels
            .data()
            .iter()
            .map(|&l| match tissue_class(l) {
                TissueClass::Gm | TissueClass::Wm => 1.0,
                _ => 0.0,
            })
            .collect();
        self.labels.like(VolumeKind::Mask, data).expect("same grid")
    }

    /// Every voxel inside the head.
    pub fn head_mask(&self) -> Volume {
        let data = self.labels.data().iter().map(|&l| if l > 0.0 { 1.0 } else { 0.0 }).collect();
        self.labels.like(VolumeKind::Mask, data).expect("same grid")
    }

    pub fn voi_map(&self) -> BTreeMap<String, Volume> {
        self.vois.iter().cloned().collect()
    }
}

pub fn subcortical_name(k: usize) -> String {
    format!("subcortical_{:02}", k + 1)
}

struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Grid {
    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel centre in millimetres relative to the grid centre.
    fn position(&self, i: usize) -> [f64; 3] {
        let [nx, ny, _] = self.dims;
        let idx = [i % nx, (i / nx) % ny, i / (nx * ny)];
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = (idx[a] as f64 + 0.5 - self.dims[a] as f64 / 2.0) * self.spacing[a];
        }
        p
    }
}

fn ellipsoid_radius(p: [f64; 3], centre: [f64; 3], semi: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| ((p[a] - centre[a]) / semi[a]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Unit-variance smooth Gaussian random field.
fn texture_field(grid: &Grid, corr_mm: f64, rng: RngStream) -> Vec<f64> {
    let mut g = rng.generator();
    let white: Vec<f64> = (0..grid.len()).map(|_| g.sample(StandardNormal)).collect();
    let sigma = [
        corr_mm / grid.spacing[0],
        corr_mm / grid.spacing[1],
        corr_mm / grid.spacing[2],
    ];
    let mut field = gaussian_smooth(&white, grid.dims, sigma);
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in field.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
    field
}

fn tissue_labels(grid: &Grid, rng: RngStream) -> Vec<f64> {
    let mut g = rng.generator();
    let half = [
        grid.dims[0] as f64 * grid.spacing[0] / 2.0,
        grid.dims[1] as f64 * grid.spacing[1] / 2.0,
        grid.dims[2] as f64 * grid.spacing[2] / 2.0,
    ];
    let mut jitter = || 1.0 + g.random_range(-0.04..0.04);
    let head = [0.80 * half[0] * jitter(), 0.90 * half[1] * jitter(), 1.25 * half[2] * jitter()];
    let brain = [
        head[0] - CSF_LAYER_MM,
        head[1] - CSF_LAYER_MM,
        head[2] - CSF_LAYER_MM,
    ];
    let ribbon = CORTEX_MM / ((brain[0] + brain[1]) / 2.0);
    let n_theta = g.random_range(6..10) as f64;
    let n_phi = g.random_range(2..4) as f64;
    let ph1 = g.random_range(0.0..std::f64::consts::TAU);
    let ph2 = g.random_range(0.0..std::f64::consts::TAU);
    let sulcus_depth = 0.10;

    let vent_semi = [
        (0.07 * brain[0]).max(0.6 * grid.spacing[0]),
        0.28 * brain[1],
        (0.40 * brain[2]).max(0.6 * grid.spacing[2]),
    ];
    let vent_x = 0.15 * brain[0];
    let vent_y = -0.05 * brain[1];

    (0..grid.len())
        .map(|i| {
            let p = grid.position(i);
            if ellipsoid_radius(p, [0.0; 3], head) > 1.0 {
                return LABEL_BACKGROUND;
            }
            let rho = ellipsoid_radius(p, [0.0; 3], brain);
            let (u, v, w) = (p[0] / brain[0], p[1] / brain[1], p[2] / brain[2]);
            let theta = v.atan2(u);
            let phi = w.atan2((u * u + v * v).sqrt());
            let fold = 0.5 + 0.5 * (n_theta * theta + ph1).sin() * (n_phi * phi + ph2).cos();
            let surface = 1.0 - sulcus_depth * fold.powi(3);
            if rho > surface {
                return LABEL_CSF;
            }
            for sx in [-1.0, 1.0] {
                if ellipsoid_radius(p, [sx * vent_x, vent_y, 0.0], vent_semi) <= 1.0 {
                    return LABEL_CSF;
                }
            }
            if rho > surface - ribbon {
                LABEL_GM
            } else {
                LABEL_WM
            }
        })
        .collect()
}

/// Places `n` compact regions of graded volume inside WM, largest first. Each
/// region is the exact number of voxels nearest its centre, so voxel counts
/// strictly increase. Returns the voxel count of each region in ascending order.
fn place_subcortical(grid: &Grid, labels: &mut [f64], n: usize, rng: RngStream) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let brain_voxels = labels
        .iter()
        .filter(|&&l| l == LABEL_GM || l == LABEL_WM)
        .count();
    let voxel_mm3: f64 = grid.spacing.iter().product();
    let brain_mm3 = brain_voxels as f64 * voxel_mm3;
    let [nx, ny, _] = grid.dims;

    let mut candidates: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == LABEL_WM).collect();
    let mut g = rng.generator();
    candidates.shuffle(&mut g);

    let mut targets = Vec::with_capacity(n);
    for k in 0..n {
        let volume = brain_mm3 * SMALLEST_REGION_FRACTION * REGION_GROWTH.powi(k as i32);
        let t = ((volume / voxel_mm3).round() as usize).max(1);
        let prev = targets.last().copied().unwrap_or(0);
        targets.push(t.max(prev + 1));
    }

    let margin = grid.spacing.iter().cloned().fold(0.0, f64::max);
    let mut counts = vec![0usize; n];
    for k in (0..n).rev() {
        let target = targets[k];
        let radius = (3.0 * target as f64 * voxel_mm3 / (4.0 * std::f64::consts::PI)).cbrt();
        let reach = [
            ((radius + margin) / grid.spacing[0]).ceil() as isize,
            ((radius + margin) / grid.spacing[1]).ceil() as isize,
            ((radius + margin) / grid.spacing[2]).ceil() as isize,
        ];
        let mut placed = None;
        'search: for &c in &candidates {
            if labels[c] != LABEL_WM {
                continue;
            }
            let ci = [(c % nx) as isize, ((c / nx) % ny) as isize, (c / (nx * ny)) as isize];
            let mut ball = Vec::new();
            for dz in -reach[2]..=reach[2] {
                for dy in -reach[1]..=reach[1] {
                    for dx in -reach[0]..=reach[0] {
                        let q = [ci[0] + dx, ci[1] + dy, ci[2] + dz];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= grid.dims[a] as isize) {
                            continue;
                        }
                        let d = ((dx as f64 * grid.spacing[0]).powi(2)
                            + (dy as f64 * grid.spacing[1]).powi(2)
                            + (dz as f64 * grid.spacing[2]).powi(2))
                        .sqrt();
                        ball.push((d, q));
                    }
                }
            }
            if ball.len() < target {
                continue;
            }
            ball.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            // the region and its face neighbours must all be WM
            let mut region = Vec::with_capacity(target);
            for &(_, q) in &ball[..target] {
                for (dx, dy, dz) in [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                    let r = [q[0] + dx, q[1] + dy, q[2] + dz];
                    if (0..3).any(|a| r[a] < 0 || r[a] >= grid.dims[a] as isize) {
                        continue 'search;
                    }
                    if labels[r[0] as usize + nx * (r[1] as usize + ny * r[2] as usize)] != LABEL_WM {
                        continue 'search;
                    }
                }
                region.push(q[0] as usize + nx * (q[1] as usize + ny * q[2] as usize));
            }
            placed = Some(region);
            break;
        }
        let inside = placed.ok_or_else(|| {
            Error::Invalid(format!(
                "dims {:?} too small to place subcortical region {} (radius {radius:.1} mm)",
                grid.dims,
                k + 1
            ))
        })?;
        for &qi in &inside {
            labels[qi] = LABEL_SUBCORTICAL_BASE + k as f64;
        }
        counts[k] = inside.len();
    }
    ensure!(
        counts.windows(2).all(|w| w[0] < w[1]),
        Invalid,
        "subcortical regions did not discretise to increasing volumes: {counts:?}"
    );
    Ok(counts)
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomPair> {
    cfg.validate()?;
    let grid = Grid {
        dims: cfg.dims,
        spacing: cfg.spacing,
    };
    let root = RngStream::new(cfg.seed);
    let mut labels = tissue_labels(&grid, root.split_named("shape"));
    place_subcortical(&grid, &mut labels, cfg.n_subcortical_regions, root.split_named("regions"))?;

    let shared = texture_field(&grid, cfg.texture_correlation_length, root.split_named("texture-shared"));
    let mri_own = texture_field(&grid, cfg.texture_correlation_length, root.split_named("texture-mri"));
    let pet_own = texture_field(&grid, cfg.texture_correlation_length, root.split_named("texture-pet"));
    let own_weight = (1.0 - SHARED_TEXTURE_WEIGHT * SHARED_TEXTURE_WEIGHT).sqrt();

    let wm_activity = 1.0;
    let m = cfg.mri_class_means;
    let mut mri = vec![0.0; grid.len()];
    let mut pet = vec![0.0; grid.len()];
    for i in 0..grid.len() {
        let (mri_mean, pet_mean) = match tissue_class(labels[i]) {
            TissueClass::Background => continue,
            TissueClass::Csf => (m.csf, CSF_ACTIVITY_FRACTION * wm_activity),
            TissueClass::Gm => (m.gm, cfg.gm_wm_activity_ratio * wm_activity),
            TissueClass::Wm => (m.wm, wm_activity),
        };
        let t_mri = SHARED_TEXTURE_WEIGHT * shared[i] + own_weight * mri_own[i];
        let t_pet = SHARED_TEXTURE_WEIGHT * shared[i] + own_weight * pet_own[i];
        mri[i] = mri_mean * (1.0 + cfg.mri_class_sd * t_mri);
        pet[i] = pet_mean * (1.0 + cfg.activity_class_sd * t_pet);
    }

    let labels = Volume::new(cfg.dims, cfg.spacing, VolumeKind::Label, labels)?;
    let mri = labels.like(VolumeKind::Anatomical, mri)?;
    let pet = labels.like(VolumeKind::Activity, pet)?;

    let class_mask = |class: TissueClass| -> Result<Volume> {
        labels.like(
            VolumeKind::Mask,
            labels
                .data()
                .iter()
                .map(|&l| if tissue_class(l) == class { 1.0 } else { 0.0 })
                .collect(),
        )
    };
    let mut vois = vec![
        ("GM".to_string(), class_mask(TissueClass::Gm)?),
        ("WM".to_string(), class_mask(TissueClass::Wm)?),
        ("CSF".to_string(), class_mask(TissueClass::Csf)?),
    ];
    for k in 0..cfg.n_subcortical_regions {
        vois.push((subcortical_name(k), labels.label_mask(LABEL_SUBCORTICAL_BASE + k as f64)?));
    }
    for (name, mask) in &vois {
        ensure!(mask.count_nonzero() > 0, Invalid, "VOI {name} is empty for dims {:?}", cfg.dims);
    }
    Ok(PhantomPair { labels, mri, pet, vois })
}

/// Splits `items` in order into train / validation / test lists.
pub fn split_dataset<T>(items: Vec<T>, n_train: usize, n_val: usize, n_test: usize) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    ensure!(
        n_train + n_val + n_test == items.len(),
        Invalid,
        "split {n_train} + {n_val} + {n_test} does not match {} items",
        items.len()
    );
    let mut items = items;
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    Ok((items, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig {
            dims: [40, 40, 16],
            spacing: [4.0, 4.0, 4.0],
            seed,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn split_sizes() {
        let (a, b, c) = split_dataset((0..20).collect(), 12, 3, 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (12, 3, 5));
        assert_eq!(a[0], 0);
        assert_eq!(b[0], 12);
        assert_eq!(c[0], 15);
        let (_, b, _) = split_dataset((0..5).collect::<Vec<_>>(), 3, 0, 2).unwrap();
        assert!(b.is_empty());
        assert!(split_dataset((0..5).collect::<Vec<_>>(), 3, 1, 2).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(0);
        cfg.gm_wm_activity_ratio = 4.5;
        assert!(generate_phantom(&cfg).is_err());
        let mut cfg = small(0);
        cfg.mri_class_means.gm = 0.95;
        assert!(generate_phantom(&cfg).is_err());
        let mut cfg = small(0);
        cfg.dims = [8, 8, 2];
        assert!(generate_phantom(&cfg).is_err());
    }

    #[test]
    fn too_many_regions_is_an_error() {
        let mut cfg = small(0);
        cfg.n_subcortical_regions = 14;
        assert!(generate_phantom(&cfg).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_phantom(&small(5)).unwrap();
        let b = generate_phantom(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&small(6)).unwrap();
        assert_ne!(a.mri, c.mri);
    }

    #[test]
    fn default_grid_activity_ratio() {
        let p = generate_phantom(&PhantomConfig::default()).unwrap();
        let gm = p.pet.masked_mean(p.voi("GM").unwrap()).unwrap();
        let wm = p.pet.masked_mean(p.voi("WM").unwrap()).unwrap();
        let r = gm / wm;
        assert!((2.9..=3.1).contains(&r), "ratio {r}");
    }

    #[test]
    fn mri_class_ordering() {
        let p = generate_phantom(&small(3)).unwrap();
        let mean = |n| p.mri.masked_mean(p.voi(n).unwrap()).unwrap();
        assert!(mean("WM") > mean("GM") && mean("GM") > mean("CSF"));
    }

    #[test]
    fn subcortical_volumes_increase() {
        let p = generate_phantom(&small(8)).unwrap();
        let counts: Vec<usize> = (0..4)
            .map(|k| p.voi(&subcortical_name(k)).unwrap().count_nonzero())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        let brain = p.brain_mask().count_nonzero() as f64;
        let smallest = counts[0] as f64 / brain;
        assert!((0.015..0.025).contains(&smallest), "smallest fraction {smallest}");
    }
}
