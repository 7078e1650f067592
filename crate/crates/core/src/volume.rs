//! Volume and slice containers shared by every stage of the pipeline.
//!
//! Volumes are stored x-fastest (`index = x + nx * (y + ny * z)`) in `f64`.
//! A volume's [`VolumeKind`] is validated when it is built: masks hold only
//! 0/1, labels only small non-negative integers, and activity or anatomical
//! volumes are clamped to be non-negative at creation.

use crate::error::{ensure, Error, Result};

/// What a volume represents. The discriminant is the on-disk tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum VolumeKind {
    Activity = 0,
    Anatomical = 1,
    Label = 2,
    Mask = 3,
    Generic = 4,
}

impl VolumeKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => VolumeKind::Activity,
            1 => VolumeKind::Anatomical,
            2 => VolumeKind::Label,
            3 => VolumeKind::Mask,
            4 => VolumeKind::Generic,
            _ => return None,
        })
    }

    pub fn tag(self) -> u8 {
        self as u8
    }
}

/// Largest value accepted in a label volume.
pub const MAX_LABEL: f64 = 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    kind: VolumeKind,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind, mut data: Vec<f64>) -> Result<Self> {
        ensure!(dims.iter().all(|&d| d > 0), Invalid, "dimensions must be positive, got {dims:?}");
        ensure!(
            spacing.iter().all(|&s| s.is_finite() && s > 0.0),
            Invalid,
            "spacing must be positive, got {spacing:?}"
        );
        let n = dims[0] * dims[1] * dims[2];
        ensure!(data.len() == n, Shape, "data holds {} values, dims {:?} need {n}", data.len(), dims);
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite value {} at index {i}", data[i])));
        }
        match kind {
            VolumeKind::Mask => {
                ensure!(
                    data.iter().all(|&v| v == 0.0 || v == 1.0),
                    Invalid,
                    "mask volumes may only contain 0 and 1"
                );
            }
            VolumeKind::Label => {
                ensure!(
                    data.iter().all(|&v| v >= 0.0 && v <= MAX_LABEL && v.fract() == 0.0),
                    Invalid,
                    "label volumes may only contain integers in [0, {MAX_LABEL}]"
                );
            }
            VolumeKind::Activity | VolumeKind::Anatomical => {
                for v in data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            VolumeKind::Generic => {}
        }
        Ok(Volume {
            dims,
            spacing,
            kind,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind) -> Result<Self> {
        Self::filled(dims, spacing, kind, 0.0)
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind, value: f64) -> Result<Self> {
        Self::new(dims, spacing, kind, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a volume from `f(x, y, z)`.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, kind, data)
    }

    /// A volume on the same grid as `self` with new contents.
    pub fn like(&self, kind: VolumeKind, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, kind, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Volume of one voxel in millilitres (spacing is in mm).
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn check_same_grid(&self, other: &Volume, what: &str) -> Result<()> {
        ensure!(
            self.same_grid(other),
            Shape,
            "{what}: grid {:?}/{:?} differs from {:?}/{:?}",
            other.dims,
            other.spacing,
            self.dims,
            self.spacing
        );
        Ok(())
    }

    /// Re-validates the contents under another kind.
    pub fn with_kind(self, kind: VolumeKind) -> Result<Self> {
        Self::new(self.dims, self.spacing, kind, self.data)
    }

    /// Axial slice `z` as a 2D image.
    pub fn slice(&self, z: usize) -> Slice2D {
        let n = self.slice_len();
        Slice2D {
            nx: self.dims[0],
            ny: self.dims[1],
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<Slice2D> {
        (0..self.dims[2]).map(|z| self.slice(z)).collect()
    }

    /// Stacks equally sized slices into a volume.
    pub fn from_slices(slices: &[Slice2D], spacing: [f64; 3], kind: VolumeKind) -> Result<Self> {
        ensure!(!slices.is_empty(), Invalid, "cannot stack zero slices");
        let (nx, ny) = (slices[0].nx, slices[0].ny);
        ensure!(
            slices.iter().all(|s| s.nx == nx && s.ny == ny),
            Shape,
            "slices differ in size"
        );
        let data = slices.iter().flat_map(|s| s.data.iter().copied()).collect();
        Self::new([nx, ny, slices.len()], spacing, kind, data)
    }

    /// Voxel indices where a mask volume is set.
    pub fn mask_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// Mean over the voxels where `mask` is non-zero.
    pub fn masked_mean(&self, mask: &Volume) -> Result<f64> {
        self.check_same_grid(mask, "masked_mean")?;
        let (mut s, mut n) = (0.0, 0usize);
        for (v, m) in self.data.iter().zip(mask.data()) {
            if *m != 0.0 {
                s += v;
                n += 1;
            }
        }
        ensure!(n > 0, Invalid, "mask is empty");
        Ok(s / n as f64)
    }

    /// Mask of voxels whose value equals `label`.
    pub fn label_mask(&self, label: f64) -> Result<Volume> {
        self.like(
            VolumeKind::Mask,
            self.data.iter().map(|&v| if v == label { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Per-voxel `100 * (a - b) / max(b, floor)` inside `mask`, zero elsewhere.
pub fn relative_difference(a: &Volume, b: &Volume, mask: &Volume, floor: f64) -> Result<Volume> {
    a.check_same_grid(b, "relative_difference b")?;
    a.check_same_grid(mask, "relative_difference mask")?;
    ensure!(floor > 0.0, Invalid, "floor must be positive, got {floor}");
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.data())
        .map(|((&x, &y), &m)| if m != 0.0 { 100.0 * (x - y) / y.max(floor) } else { 0.0 })
        .collect();
    a.like(VolumeKind::Generic, data)
}

/// A 2D image, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl Slice2D {
    pub fn new(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == nx * ny,
            Shape,
            "slice data holds {} values, {nx}x{ny} needs {}",
            data.len(),
            nx * ny
        );
        Ok(Slice2D { nx, ny, data })
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Slice2D {
            nx,
            ny,
            data: vec![0.0; nx * ny],
        }
    }

    pub fn filled(nx: usize, ny: usize, value: f64) -> Self {
        Slice2D {
            nx,
            ny,
            data: vec![value; nx * ny],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Slice2D) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }

    /// Element-wise combination of two equally shaped slices.
    pub fn zip_map(&self, other: &Slice2D, f: impl Fn(f64, f64) -> f64) -> Slice2D {
        debug_assert!(self.same_shape(other));
        Slice2D {
            nx: self.nx,
            ny: self.ny,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Slice2D {
        Slice2D {
            nx: self.nx,
            ny: self.ny,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }
}
