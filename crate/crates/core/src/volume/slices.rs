use serde::{Deserialize, Serialize};

use super::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Fixed z; rows run along y, columns along x.
    Axial,
    /// Fixed y; rows run along z, columns along x.
    Coronal,
    /// Fixed x; rows run along z, columns along y.
    Sagittal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub plane: Plane,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Slice2D {
    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[col + self.width * row]
    }
}

/// Every slice `spacing_mm` apart along each axis, starting at index 0:
/// all axial slices, then coronal, then sagittal, each in ascending index.
/// The step in voxels is `spacing_mm / voxel spacing`, rounded, at least 1.
pub fn extract_slices(v: &Volume, spacing_mm: f64) -> Vec<Slice2D> {
    let [nx, ny, nz] = v.dims();
    let sp = v.spacing();
    let step = |a: usize| ((spacing_mm / sp[a]).round() as usize).max(1);
    let mut out = Vec::new();
    for k in (0..nz).step_by(step(2)) {
        let mut data = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                data.push(v.get(i, j, k) as f32);
            }
        }
        out.push(Slice2D {
            plane: Plane::Axial,
            index: k,
            width: nx,
            height: ny,
            data,
        });
    }
    for j in (0..ny).step_by(step(1)) {
        let mut data = Vec::with_capacity(nx * nz);
        for k in 0..nz {
            for i in 0..nx {
                data.push(v.get(i, j, k) as f32);
            }
        }
        out.push(Slice2D {
            plane: Plane::Coronal,
            index: j,
            width: nx,
            height: nz,
            data,
        });
    }
    for i in (0..nx).step_by(step(0)) {
        let mut data = Vec::with_capacity(ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                data.push(v.get(i, j, k) as f32);
            }
        }
        out.push(Slice2D {
            plane: Plane::Sagittal,
            index: i,
            width: ny,
            height: nz,
            data,
        });
    }
    out
}
