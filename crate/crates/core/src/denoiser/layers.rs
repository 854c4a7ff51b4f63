//! Forward and reverse-mode kernels for the U-Net building blocks.
//!
//! Feature maps are channels-first: `data[c * n + p]` with `p` the x-fastest
//! spatial index and `n = nx * ny * nz`.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Feat {
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, dims: [usize; 3]) -> Self {
        Self {
            c,
            dims,
            data: vec![0.0; c * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
#[inline]
fn valid(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

const OFFSETS: [isize; 3] = [-1, 0, 1];

/// 3x3x3 convolution with zero padding. `w` is `[cout][cin][27]` with the
/// kernel index `(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)`.
pub(crate) fn conv3_forward(x: &Feat, w: &[f64], b: Option<&[f64]>, cout: usize) -> Feat {
    let cin = x.c;
    let [nx, ny, nz] = x.dims;
    let n = x.spatial();
    let mut y = Feat::zeros(cout, x.dims);
    for o in 0..cout {
        let out = &mut y.data[o * n..(o + 1) * n];
        if let Some(b) = b {
            out.fill(b[o]);
        }
        for i in 0..cin {
            let inp = x.channel(i);
            let wk = &w[(o * cin + i) * 27..(o * cin + i + 1) * 27];
            for (kz, &dz) in OFFSETS.iter().enumerate() {
                let (z0, z1) = valid(nz, dz);
                for (ky, &dy) in OFFSETS.iter().enumerate() {
                    let (y0, y1) = valid(ny, dy);
                    for (kx, &dx) in OFFSETS.iter().enumerate() {
                        let (x0, x1) = valid(nx, dx);
                        let weight = wk[kz * 9 + ky * 3 + kx];
                        if weight == 0.0 {
                            continue;
                        }
                        for z in z0..z1 {
                            for yy in y0..y1 {
                                let row = (z * ny + yy) * nx;
                                let src = ((z as isize + dz) as usize * ny + (yy as isize + dy) as usize) * nx;
                                let src_start = (src as isize + x0 as isize + dx) as usize;
                                let dst = &mut out[row + x0..row + x1];
                                let s = &inp[src_start..src_start + (x1 - x0)];
                                for (d, v) in dst.iter_mut().zip(s) {
                                    *d += weight * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients into `dw`/`db` and returns the input
/// gradient.
pub(crate) fn conv3_backward(x: &Feat, w: &[f64], dy: &Feat, dw: &mut [f64], db: Option<&mut [f64]>) -> Feat {
    let cin = x.c;
    let cout = dy.c;
    let [nx, ny, nz] = x.dims;
    let n = x.spatial();
    let mut dx_feat = Feat::zeros(cin, x.dims);
    if let Some(db) = db {
        for o in 0..cout {
            db[o] += dy.channel(o).iter().sum::<f64>();
        }
    }
    for o in 0..cout {
        let g = dy.channel(o);
        for i in 0..cin {
            let inp = x.channel(i);
            let base = (o * cin + i) * 27;
            for (kz, &dz) in OFFSETS.iter().enumerate() {
                let (z0, z1) = valid(nz, dz);
                for (ky, &dyo) in OFFSETS.iter().enumerate() {
                    let (y0, y1) = valid(ny, dyo);
                    for (kx, &dxo) in OFFSETS.iter().enumerate() {
                        let (x0, x1) = valid(nx, dxo);
                        let k = kz * 9 + ky * 3 + kx;
                        let weight = w[base + k];
                        let mut acc = 0.0;
                        let gin = &mut dx_feat.data[i * n..(i + 1) * n];
                        for z in z0..z1 {
                            for yy in y0..y1 {
                                let row = (z * ny + yy) * nx;
                                let src = ((z as isize + dz) as usize * ny + (yy as isize + dyo) as usize) * nx;
                                let src_start = (src as isize + x0 as isize + dxo) as usize;
                                let len = x1 - x0;
                                let gs = &g[row + x0..row + x1];
                                let s = &inp[src_start..src_start + len];
                                acc += gs.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                                if weight != 0.0 {
                                    let d = &mut gin[src_start..src_start + len];
                                    for (dv, gv) in d.iter_mut().zip(gs) {
                                        *dv += weight * gv;
                                    }
                                }
                            }
                        }
                        dw[base + k] += acc;
                    }
                }
            }
        }
    }
    dx_feat
}

pub(crate) const GN_EPS: f64 = 1e-5;

/// Per-group normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GnCache {
    pub xhat: Feat,
    pub inv_std: Vec<f64>,
}

pub(crate) fn group_norm_forward(x: &Feat, groups: usize, gamma: &[f64], beta: &[f64]) -> (Feat, GnCache) {
    let n = x.spatial();
    let per = x.c / groups;
    let m = (per * n) as f64;
    let mut xhat = Feat::zeros(x.c, x.dims);
    let mut y = Feat::zeros(x.c, x.dims);
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let range = g * per * n..(g + 1) * per * n;
        let xs = &x.data[range.clone()];
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let is = 1.0 / (var + GN_EPS).sqrt();
        inv_std.push(is);
        for (h, v) in xhat.data[range].iter_mut().zip(xs) {
            *h = (v - mean) * is;
        }
    }
    for c in 0..x.c {
        let (ga, be) = (gamma[c], beta[c]);
        for (out, h) in y.data[c * n..(c + 1) * n].iter_mut().zip(xhat.channel(c)) {
            *out = ga * h + be;
        }
    }
    (y, GnCache { xhat, inv_std })
}

pub(crate) fn group_norm_backward(
    cache: &GnCache,
    groups: usize,
    gamma: &[f64],
    dy: &Feat,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Feat {
    let n = dy.spatial();
    let c_total = dy.c;
    let per = c_total / groups;
    let m = (per * n) as f64;
    let mut dx = Feat::zeros(c_total, dy.dims);
    for c in 0..c_total {
        let g = dy.channel(c);
        let h = cache.xhat.channel(c);
        dgamma[c] += g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        dbeta[c] += g.iter().sum::<f64>();
    }
    for grp in 0..groups {
        let mut sum_d = 0.0;
        let mut sum_dh = 0.0;
        for c in grp * per..(grp + 1) * per {
            let g = dy.channel(c);
            let h = cache.xhat.channel(c);
            for (gv, hv) in g.iter().zip(h) {
                let d = gv * gamma[c];
                sum_d += d;
                sum_dh += d * hv;
            }
        }
        let is = cache.inv_std[grp];
        for c in grp * per..(grp + 1) * per {
            let g = dy.channel(c);
            let h = cache.xhat.channel(c);
            let out = &mut dx.data[c * n..(c + 1) * n];
            for ((o, gv), hv) in out.iter_mut().zip(g).zip(h) {
                let d = gv * gamma[c];
                *o = is * (d - sum_d / m - hv * sum_dh / m);
            }
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu_forward(x: &Feat) -> Feat {
    Feat {
        c: x.c,
        dims: x.dims,
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

pub(crate) fn silu_backward(x: &Feat, dy: &Feat) -> Feat {
    Feat {
        c: x.c,
        dims: x.dims,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect(),
    }
}

/// `y = W e + b` with `W` stored `[cout][cin]`.
pub(crate) fn linear_forward(e: &[f64], w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let cin = e.len();
    (0..cout)
        .map(|o| b[o] + (0..cin).map(|i| w[o * cin + i] * e[i]).sum::<f64>())
        .collect()
}

pub(crate) fn linear_backward(e: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) {
    let cin = e.len();
    for (o, g) in dy.iter().enumerate() {
        db[o] += g;
        for i in 0..cin {
            dw[o * cin + i] += g * e[i];
        }
    }
}

/// Adds a per-channel bias vector to every voxel.
pub(crate) fn add_channel_bias(x: &mut Feat, bias: &[f64]) {
    let n = x.spatial();
    for (c, b) in bias.iter().enumerate() {
        for v in &mut x.data[c * n..(c + 1) * n] {
            *v += b;
        }
    }
}

pub(crate) fn channel_sums(dy: &Feat) -> Vec<f64> {
    (0..dy.c).map(|c| dy.channel(c).iter().sum()).collect()
}

/// 2x2x2 average pooling.
pub(crate) fn avg_pool_forward(x: &Feat) -> Feat {
    let [nx, ny, nz] = x.dims;
    let od = [nx / 2, ny / 2, nz / 2];
    let mut y = Feat::zeros(x.c, od);
    let on = y.spatial();
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut y.data[c * on..(c + 1) * on];
        for z in 0..od[2] {
            for yy in 0..od[1] {
                for xx in 0..od[0] {
                    let mut acc = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((2 * z + dz) * ny + 2 * yy + dy) * nx + 2 * xx;
                            acc += src[row] + src[row + 1];
                        }
                    }
                    dst[(z * od[1] + yy) * od[0] + xx] = acc * 0.125;
                }
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward(dims: [usize; 3], dy: &Feat) -> Feat {
    let [nx, ny, _] = dims;
    let od = dy.dims;
    let mut dx = Feat::zeros(dy.c, dims);
    let n = dx.spatial();
    for c in 0..dy.c {
        let g = dy.channel(c);
        let dst = &mut dx.data[c * n..(c + 1) * n];
        for z in 0..od[2] {
            for yy in 0..od[1] {
                for xx in 0..od[0] {
                    let v = g[(z * od[1] + yy) * od[0] + xx] * 0.125;
                    for dz in 0..2 {
                        for dyy in 0..2 {
                            let row = ((2 * z + dz) * ny + 2 * yy + dyy) * nx + 2 * xx;
                            dst[row] += v;
                            dst[row + 1] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub(crate) fn upsample_forward(x: &Feat) -> Feat {
    let [nx, ny, nz] = x.dims;
    let od = [2 * nx, 2 * ny, 2 * nz];
    let mut y = Feat::zeros(x.c, od);
    let on = y.spatial();
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut y.data[c * on..(c + 1) * on];
        for z in 0..od[2] {
            for yy in 0..od[1] {
                let srow = ((z / 2) * ny + yy / 2) * nx;
                let drow = (z * od[1] + yy) * od[0];
                for xx in 0..od[0] {
                    dst[drow + xx] = src[srow + xx / 2];
                }
            }
        }
    }
    y
}

pub(crate) fn upsample_backward(dims: [usize; 3], dy: &Feat) -> Feat {
    let [nx, ny, _] = dims;
    let od = dy.dims;
    let mut dx = Feat::zeros(dy.c, dims);
    let n = dx.spatial();
    for c in 0..dy.c {
        let g = dy.channel(c);
        let dst = &mut dx.data[c * n..(c + 1) * n];
        for z in 0..od[2] {
            for yy in 0..od[1] {
                let srow = ((z / 2) * ny + yy / 2) * nx;
                let drow = (z * od[1] + yy) * od[0];
                for xx in 0..od[0] {
                    dst[srow + xx / 2] += g[drow + xx];
                }
            }
        }
    }
    dx
}

pub(crate) fn concat(a: &Feat, b: &Feat) -> Feat {
    debug_assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat {
        c: a.c + b.c,
        dims: a.dims,
        data,
    }
}

pub(crate) fn split(x: &Feat, first: usize) -> (Feat, Feat) {
    let n = x.spatial();
    (
        Feat {
            c: first,
            dims: x.dims,
            data: x.data[..first * n].to_vec(),
        },
        Feat {
            c: x.c - first,
            dims: x.dims,
            data: x.data[first * n..].to_vec(),
        },
    )
}

/// Sinusoidal features of the raw step index.
pub(crate) fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[k] = arg.sin();
        e[k + half] = arg.cos();
    }
    e
}
