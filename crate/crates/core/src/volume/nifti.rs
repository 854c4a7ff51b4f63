//! Uncompressed single-file NIfTI-1 (`.nii`, magic `n+1\0`).
//!
//! Supported datatypes are int16, uint16 and float32. Geometry comes from
//! the sform rows when `sform_code > 0`, else from the qform quaternion when
//! `qform_code > 0`, else from `pixdim` alone. `scl_slope`/`scl_inter` are
//! applied on read; a slope of 0 means "unscaled".

use std::fs;
use std::path::Path;

use super::{is_orthonormal, DType, Mat3, Volume, VoxelData, IDENTITY};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: [u8; 4] = *b"n+1\0";

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_UINT16: i16 = 512;

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes(off))
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_nifti_bytes(&bytes)
}

pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::TruncatedFile {
            needed: HEADER_SIZE,
            have: bytes.len(),
        });
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        other => {
            return Err(Error::Malformed {
                what: "NIfTI header",
                detail: format!("sizeof_hdr = {other}"),
            })
        }
    };
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let r = Reader { buf: bytes, big_endian };

    let ndim = r.i16(40);
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = r.i16(42 + 2 * a);
        if (a as i16) < ndim && v < 1 {
            return Err(Error::Malformed {
                what: "NIfTI header",
                detail: format!("dim[{}] = {v}", a + 1),
            });
        }
        if (a as i16) < ndim {
            *d = v as usize;
        }
    }
    if !(1..=7).contains(&ndim) || (4..=7).any(|i| i <= ndim as usize && r.i16(40 + 2 * i) > 1) {
        return Err(Error::Malformed {
            what: "NIfTI header",
            detail: format!("only 3D volumes are supported (dim[0] = {ndim})"),
        });
    }

    let datatype = r.i16(70);
    let bytes_per_voxel = match datatype {
        DT_INT16 | DT_UINT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };

    let pixdim: Vec<f32> = (0..8).map(|i| r.f32(76 + 4 * i)).collect();
    let vox_offset = r.f32(108).max(0.0) as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);

    let n = dims[0] * dims[1] * dims[2];
    let start = vox_offset.max(HEADER_SIZE);
    let needed = start + n * bytes_per_voxel;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            needed,
            have: bytes.len(),
        });
    }
    let raw = Reader {
        buf: &bytes[start..needed],
        big_endian,
    };
    let data = match datatype {
        DT_UINT16 if !scaled => VoxelData::U16((0..n).map(|i| u16::from_le_bytes(raw.bytes(2 * i))).collect()),
        DT_UINT16 => VoxelData::F32(
            (0..n)
                .map(|i| u16::from_le_bytes(raw.bytes(2 * i)) as f32 * slope + inter)
                .collect(),
        ),
        DT_INT16 => {
            let (s, b) = if scaled { (slope, inter) } else { (1.0, 0.0) };
            VoxelData::F32((0..n).map(|i| raw.i16(2 * i) as f32 * s + b).collect())
        }
        _ => {
            let (s, b) = if scaled { (slope, inter) } else { (1.0, 0.0) };
            VoxelData::F32(
                (0..n)
                    .map(|i| {
                        let v = raw.f32(4 * i);
                        if scaled {
                            v * s + b
                        } else {
                            v
                        }
                    })
                    .collect(),
            )
        }
    };

    let qform_code = r.i16(252);
    let sform_code = r.i16(254);
    let (spacing, direction, origin) = if sform_code > 0 {
        let rows: Vec<[f64; 4]> = [280, 296, 312]
            .iter()
            .map(|&off| {
                let mut row = [0.0; 4];
                for (c, v) in row.iter_mut().enumerate() {
                    *v = r.f32(off + 4 * c) as f64;
                }
                row
            })
            .collect();
        let mut spacing = [0.0; 3];
        let mut direction = IDENTITY;
        for a in 0..3 {
            let norm = (0..3).map(|row| rows[row][a].powi(2)).sum::<f64>().sqrt();
            if norm <= 0.0 {
                return Err(Error::DegenerateSpacing([
                    pixdim[1] as f64,
                    pixdim[2] as f64,
                    pixdim[3] as f64,
                ]));
            }
            spacing[a] = norm;
            for row in 0..3 {
                direction[row][a] = rows[row][a] / norm;
            }
        }
        (spacing, direction, [rows[0][3], rows[1][3], rows[2][3]])
    } else {
        let spacing = [
            (pixdim[1] as f64).abs(),
            (pixdim[2] as f64).abs(),
            (pixdim[3] as f64).abs(),
        ];
        if qform_code > 0 {
            let b = r.f32(256) as f64;
            let c = r.f32(260) as f64;
            let d = r.f32(264) as f64;
            let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let mut direction = quaternion_to_matrix(b, c, d);
            for row in direction.iter_mut() {
                row[2] *= qfac;
            }
            let origin = [r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64];
            (spacing, direction, origin)
        } else {
            (spacing, IDENTITY, [0.0; 3])
        }
    };
    if !is_orthonormal(&direction, 1e-4) {
        return Err(Error::NonOrthonormal);
    }
    Volume::with_geometry(dims, spacing, direction, origin, data)
}

fn quaternion_to_matrix(b: f64, c: f64, d: f64) -> Mat3 {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ]
}

/// Quaternion `(b, c, d)` and `qfac` for an orthonormal direction matrix.
fn matrix_to_quaternion(m: &Mat3) -> ([f64; 3], f64) {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let qfac = if det < 0.0 { -1.0 } else { 1.0 };
    let mut r = *m;
    for row in r.iter_mut() {
        row[2] *= qfac;
    }
    let trace = r[0][0] + r[1][1] + r[2][2] + 1.0;
    let (a, b, c, d);
    if trace > 0.5 {
        let a2 = 0.5 * trace.sqrt();
        a = a2;
        b = 0.25 * (r[2][1] - r[1][2]) / a2;
        c = 0.25 * (r[0][2] - r[2][0]) / a2;
        d = 0.25 * (r[1][0] - r[0][1]) / a2;
    } else {
        let xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
        let yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
        let zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r[0][1] + r[1][0]) / b;
            d = 0.25 * (r[0][2] + r[2][0]) / b;
            a = 0.25 * (r[2][1] - r[1][2]) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r[0][1] + r[1][0]) / c;
            d = 0.25 * (r[1][2] + r[2][1]) / c;
            a = 0.25 * (r[0][2] - r[2][0]) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r[0][2] + r[2][0]) / d;
            c = 0.25 * (r[1][2] + r[2][1]) / d;
            a = 0.25 * (r[1][0] - r[0][1]) / d;
        }
    }
    // The reader reconstructs `a` as a nonnegative root.
    let sign = if a < 0.0 { -1.0 } else { 1.0 };
    ([sign * b, sign * c, sign * d], qfac)
}

pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_nifti_bytes(v)).map_err(|e| Error::io(path, e))
}

pub fn write_nifti_bytes(v: &Volume) -> Vec<u8> {
    let (datatype, bitpix): (i16, i16) = match v.dtype() {
        DType::U16 => (DT_UINT16, 16),
        DType::F32 => (DT_FLOAT32, 32),
    };
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);

    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    put(&mut h, 38, b"r");
    let dims = v.dims();
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &datatype.to_le_bytes());
    put(&mut h, 72, &bitpix.to_le_bytes());

    let direction = v.direction();
    let (quat, qfac) = matrix_to_quaternion(&direction);
    let spacing = v.spacing();
    let pixdim: [f32; 8] = [
        qfac as f32,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    put(&mut h, 116, &0.0f32.to_le_bytes());
    // NIFTI_UNITS_MM
    put(&mut h, 123, &[2]);
    put(&mut h, 148, b"voxdiff");

    put(&mut h, 252, &1i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    for (i, q) in quat.iter().enumerate() {
        put(&mut h, 256 + 4 * i, &(*q as f32).to_le_bytes());
    }
    let origin = v.origin();
    for (i, o) in origin.iter().enumerate() {
        put(&mut h, 268 + 4 * i, &(*o as f32).to_le_bytes());
    }
    for row in 0..3 {
        let off = 280 + 16 * row;
        for a in 0..3 {
            let val = (direction[row][a] * spacing[a]) as f32;
            put(&mut h, off + 4 * a, &val.to_le_bytes());
        }
        put(&mut h, off + 12, &(origin[row] as f32).to_le_bytes());
    }
    put(&mut h, 344, &MAGIC);

    match v.data() {
        VoxelData::U16(d) => {
            h.reserve(2 * d.len());
            for x in d {
                h.extend_from_slice(&x.to_le_bytes());
            }
        }
        VoxelData::F32(d) => {
            h.reserve(4 * d.len());
            for x in d {
                h.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    h
}
