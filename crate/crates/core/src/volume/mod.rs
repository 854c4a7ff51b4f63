//! Volumetric data model, NIfTI I/O, the preprocessing chain and
//! subject-level split management.

mod manifest;
mod nifti;
mod preprocess;
mod slices;
mod transform;

pub use manifest::{split_subjects, Manifest, ManifestRecord, QaStatus, Split, SplitConfig};
pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_bytes};
pub use preprocess::{
    brain_mask_fallback, center_of_mass, clip_to_range, normalize_quantize, pad_crop, preprocess_volume,
    reorient_axial, resample_isotropic, PREPROCESSED_SHAPE,
};
pub use slices::{extract_slices, Plane, Slice2D};
pub use transform::{rigid_transform, RigidTransform};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U16,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            VoxelData::U16(_) => DType::U16,
            VoxelData::F32(_) => DType::F32,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            VoxelData::U16(v) => v[i] as f64,
            VoxelData::F32(v) => v[i] as f64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            VoxelData::U16(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Converts back to `dtype`, rounding and saturating for `U16`.
    pub fn from_f64(values: &[f64], dtype: DType) -> Self {
        match dtype {
            DType::U16 => VoxelData::U16(
                values
                    .iter()
                    .map(|&x| x.round().clamp(0.0, u16::MAX as f64) as u16)
                    .collect(),
            ),
            DType::F32 => VoxelData::F32(values.iter().map(|&x| x as f32).collect()),
        }
    }
}

/// A 3D scalar grid with its voxel-to-world geometry.
///
/// Data is stored x-fastest. `direction[r][a]` is the world component `r` of
/// voxel axis `a`; a voxel index `(i, j, k)` maps to
/// `origin + direction * diag(spacing) * (i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    direction: Mat3,
    origin: [f64; 3],
    data: VoxelData,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: VoxelData) -> Result<Self> {
        Self::with_geometry(dims, spacing, IDENTITY, [0.0; 3], data)
    }

    pub fn with_geometry(
        dims: [usize; 3],
        spacing: [f64; 3],
        direction: Mat3,
        origin: [f64; 3],
        data: VoxelData,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("zero-sized dims {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::shape(&[n], &[data.len()]));
        }
        if !spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateSpacing(spacing));
        }
        if !is_orthonormal(&direction, 1e-4) {
            return Err(Error::NonOrthonormal);
        }
        Ok(Self {
            dims,
            spacing,
            direction,
            origin,
            data,
        })
    }

    pub fn from_f32(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::F32(data))
    }

    pub fn from_f64(dims: [usize; 3], spacing: [f64; 3], data: &[f64]) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::from_f64(data, DType::F32))
    }

    /// Same geometry as `self`, new contents.
    pub fn with_data(&self, data: VoxelData) -> Result<Self> {
        Self::with_geometry(self.dims, self.spacing, self.direction, self.origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn direction(&self) -> Mat3 {
        self.direction
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data.get(self.index(i, j, k))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.to_f64()
    }

    /// World coordinate (mm) of a possibly fractional voxel index.
    pub fn world(&self, idx: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for (r, pr) in p.iter_mut().enumerate() {
            for a in 0..3 {
                *pr += self.direction[r][a] * self.spacing[a] * idx[a];
            }
        }
        p
    }

    /// Fractional voxel index of a world coordinate.
    pub fn voxel(&self, world: [f64; 3]) -> [f64; 3] {
        let d = [
            world[0] - self.origin[0],
            world[1] - self.origin[1],
            world[2] - self.origin[2],
        ];
        let mut idx = [0.0; 3];
        for a in 0..3 {
            let proj: f64 = (0..3).map(|r| self.direction[r][a] * d[r]).sum();
            idx[a] = proj / self.spacing[a];
        }
        idx
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.len() {
            let v = self.data.get(i);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        (0..self.len()).map(|i| self.data.get(i)).sum::<f64>() / self.len() as f64
    }
}

pub(crate) fn is_orthonormal(m: &Mat3, tol: f64) -> bool {
    for a in 0..3 {
        for b in 0..3 {
            let dot: f64 = (0..3).map(|r| m[r][a] * m[r][b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            if (dot - want).abs() > tol {
                return false;
            }
        }
    }
    true
}
