use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::volume::Slice2D;

/// Identifier of the built-in extractor.
pub const DEFAULT_EXTRACTOR: &str = "pool8-proj64";
/// Side of the average-pooling grid.
pub const POOL_GRID: usize = 8;
pub const FEATURE_DIM: usize = 64;

/// Row-major `n x d` feature matrix tagged with the extractor that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub extractor: String,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, extractor: impl Into<String>, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape(&[n, d], &[data.len()]));
        }
        Ok(Self {
            n,
            d,
            extractor: extractor.into(),
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d.max(1)).take(self.n)
    }

    /// Appends the rows of `other`, which must share `d` and extractor.
    pub fn extend(&mut self, other: &FeatureMatrix) -> Result<()> {
        if other.d != self.d {
            return Err(Error::DimensionMismatch(self.d, other.d));
        }
        if other.extractor != self.extractor {
            return Err(Error::Malformed {
                what: "feature matrix",
                detail: format!("mixing extractors {} and {}", self.extractor, other.extractor),
            });
        }
        self.data.extend_from_slice(&other.data);
        self.n += other.n;
        Ok(())
    }
}

/// The `FEATURE_DIM x POOL_GRID^2` projection used by the default
/// extractor, row-major. Entries are standard Gaussians scaled by
/// `1/sqrt(POOL_GRID^2)`, drawn in row order from `seed`.
pub fn projection_matrix(seed: u64) -> Vec<f64> {
    let k = POOL_GRID * POOL_GRID;
    let scale = 1.0 / (k as f64).sqrt();
    let mut rng = NoiseRng::new(seed);
    (0..FEATURE_DIM * k).map(|_| rng.gaussian() * scale).collect()
}

/// Adaptive average pooling to a `POOL_GRID x POOL_GRID` grid. Cell `p`
/// along an axis of length `n` covers `[floor(p*n/G), ceil((p+1)*n/G))`.
fn pool(slice: &Slice2D) -> Vec<f64> {
    let g = POOL_GRID;
    let span = |p: usize, n: usize| (p * n / g, ((p + 1) * n).div_ceil(g));
    let mut out = Vec::with_capacity(g * g);
    for q in 0..g {
        let (r0, r1) = span(q, slice.height);
        for p in 0..g {
            let (c0, c1) = span(p, slice.width);
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += slice.get(c, r) as f64;
                }
            }
            out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    out
}

/// Feature rows for `slices`, one per slice in order.
///
/// The default extractor pools each slice to an 8x8 grid of means and
/// multiplies by [`projection_matrix`]. It is linear and has no bias, so
/// a blank slice maps to the zero vector. Slices may differ in size but
/// must be at least 8x8.
pub fn extract_features(slices: &[Slice2D], extractor: &str, seed: u64) -> Result<FeatureMatrix> {
    if extractor != DEFAULT_EXTRACTOR {
        return Err(Error::UnknownExtractor(extractor.to_string()));
    }
    for s in slices {
        if s.width < POOL_GRID || s.height < POOL_GRID || s.data.len() != s.width * s.height {
            return Err(Error::shape(&[POOL_GRID, POOL_GRID], &[s.width, s.height]));
        }
    }
    let w = projection_matrix(seed);
    let k = POOL_GRID * POOL_GRID;
    let mut data = Vec::with_capacity(slices.len() * FEATURE_DIM);
    for s in slices {
        let pooled = pool(s);
        for row in w.chunks_exact(k) {
            data.push(row.iter().zip(&pooled).map(|(a, b)| a * b).sum());
        }
    }
    FeatureMatrix::new(slices.len(), FEATURE_DIM, extractor, data)
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    d: usize,
    n: usize,
    extractor: String,
}

/// Writes one JSON header line followed by `n*d` little-endian `f64`.
pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut out = serde_json::to_vec(&FeatureHeader {
        d: f.d,
        n: f.n,
        extractor: f.extractor.clone(),
    })?;
    out.push(b'\n');
    for x in &f.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Malformed {
        what: "feature file",
        detail: "missing header line".into(),
    })?;
    let h: FeatureHeader = serde_json::from_slice(&bytes[..nl])?;
    let blob = &bytes[nl + 1..];
    let needed = h.n * h.d * 8;
    if blob.len() != needed {
        return Err(Error::TruncatedFile {
            needed: nl + 1 + needed,
            have: bytes.len(),
        });
    }
    let data = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    FeatureMatrix::new(h.n, h.d, h.extractor, data)
}
