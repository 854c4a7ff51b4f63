use super::{Volume, VoxelData};
use crate::error::Result;

/// Rigid motion about the grid center: per-axis rotations (degrees, applied
/// x then y then z) followed by a translation in mm.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RigidTransform {
    pub angles_deg: [f64; 3],
    pub shift_mm: [f64; 3],
}

impl RigidTransform {
    /// Rotation matrix `Rz * Ry * Rx`.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.angles_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    }
}

/// Applies `t` with trilinear interpolation; samples falling outside the
/// input grid read as zero.
pub fn rigid_transform(v: &Volume, t: &RigidTransform) -> Result<Volume> {
    let dims = v.dims();
    let spacing = v.spacing();
    let rot = t.rotation();
    let center: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let src = v.to_f64();
    let stride = [1, dims[0], dims[0] * dims[1]];

    let sample = |u: [f64; 3]| -> f64 {
        let base: [f64; 3] = u.map(f64::floor);
        let frac: [f64; 3] = std::array::from_fn(|a| u[a] - base[a]);
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut offset = 0usize;
            let mut inside = true;
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                let wa = if hi { frac[a] } else { 1.0 - frac[a] };
                if wa == 0.0 {
                    w = 0.0;
                    break;
                }
                let idx = base[a] as i64 + hi as i64;
                if idx < 0 || idx >= dims[a] as i64 {
                    inside = false;
                    break;
                }
                w *= wa;
                offset += idx as usize * stride[a];
            }
            if inside && w != 0.0 {
                acc += w * src[offset];
            }
        }
        acc
    };

    let mut out = Vec::with_capacity(src.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let o = [i as f64, j as f64, k as f64];
                // Output position in mm relative to the center, minus the shift.
                let p: [f64; 3] = std::array::from_fn(|a| (o[a] - center[a]) * spacing[a] - t.shift_mm[a]);
                // Inverse rotation is the transpose.
                let q: [f64; 3] = std::array::from_fn(|a| (0..3).map(|r| rot[r][a] * p[r]).sum::<f64>());
                let u: [f64; 3] = std::array::from_fn(|a| q[a] / spacing[a] + center[a]);
                out.push(sample(u));
            }
        }
    }
    v.with_data(VoxelData::from_f64(&out, v.dtype()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseRng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = NoiseRng::new(seed);
        let n = dims[0] * dims[1] * dims[2];
        Volume::from_f32(dims, [1.0; 3], (0..n).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn identity_transform() {
        let v = random_volume([6, 7, 8], 1);
        let out = rigid_transform(&v, &RigidTransform::default()).unwrap();
        let err = v
            .to_f64()
            .iter()
            .zip(out.to_f64())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn integer_shift_moves_voxels_exactly() {
        let v = random_volume([6, 6, 6], 2);
        let t = RigidTransform {
            angles_deg: [0.0; 3],
            shift_mm: [2.0, -1.0, 0.0],
        };
        let out = rigid_transform(&v, &t).unwrap();
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..6 {
                    let si = i as i64 - 2;
                    let sj = j as i64 + 1;
                    let want = if (0..6).contains(&si) && (0..6).contains(&sj) {
                        v.get(si as usize, sj as usize, k)
                    } else {
                        0.0
                    };
                    assert_eq!(out.get(i, j, k), want);
                }
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let t = RigidTransform {
            angles_deg: [7.0, -4.0, 9.5],
            shift_mm: [0.0; 3],
        };
        let r = t.rotation();
        assert!(crate::volume::is_orthonormal(&r, 1e-12));
    }

    #[test]
    fn quarter_turn_about_z() {
        // 90 degrees about z maps +x to +y.
        let mut data = vec![0.0f32; 27];
        data[2 + 3 * (1 + 3)] = 1.0; // (2,1,1)
        let v = Volume::from_f32([3, 3, 3], [1.0; 3], data).unwrap();
        let t = RigidTransform {
            angles_deg: [0.0, 0.0, 90.0],
            shift_mm: [0.0; 3],
        };
        let out = rigid_transform(&v, &t).unwrap();
        assert!((out.get(1, 2, 1) - 1.0).abs() < 1e-9);
        assert!(out.get(2, 1, 1).abs() < 1e-9);
    }
}
