//! Small time-conditioned 3D U-Net with a flat parameter vector and
//! hand-written reverse-mode gradients.
//!
//! Each level is two `conv3 -> group norm -> SiLU` stages with the projected
//! time embedding added between them. The encoder downsamples by 2x2x2
//! average pooling; the decoder upsamples by nearest neighbor and
//! concatenates the skip connection. The output head is a bias-free
//! `conv3` to one channel.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::layers::{self, Feat, GnCache};
use super::Denoiser;
use crate::error::{Error, Result};
use crate::param::PredictionKind;
use crate::rng::NoiseRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels per level, shallowest first.
    pub widths: Vec<usize>,
    pub temb_dim: usize,
    /// Upper bound on group-norm groups; each layer uses `gcd(channels, norm_groups)`.
    pub norm_groups: usize,
}

impl UNetConfig {
    /// Desk-scale default.
    pub fn desk() -> Self {
        Self {
            widths: vec![8, 16],
            temb_dim: 16,
            norm_groups: 4,
        }
    }

    /// The five-level backbone used for full-scale brain volumes.
    pub fn full() -> Self {
        Self {
            widths: vec![16, 32, 64, 128, 256],
            temb_dim: 64,
            norm_groups: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial dims must be divisible by this factor.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "invalid U-Net widths {:?}",
                self.widths
            )));
        }
        if self.temb_dim == 0 || !self.temb_dim.is_multiple_of(2) || self.norm_groups == 0 {
            return Err(Error::InvalidParameter(
                "temb_dim must be even and positive; norm_groups positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    w: Range<usize>,
    b: Option<Range<usize>>,
}

#[derive(Debug, Clone)]
struct NormSpec {
    groups: usize,
    gamma: Range<usize>,
    beta: Range<usize>,
}

#[derive(Debug, Clone)]
struct LinearSpec {
    cout: usize,
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Debug, Clone)]
struct BlockSpec {
    conv1: ConvSpec,
    norm1: NormSpec,
    temb: LinearSpec,
    conv2: ConvSpec,
    norm2: NormSpec,
}

#[derive(Debug, Clone)]
enum Init {
    Conv { fan_in: usize },
    Linear { fan_in: usize },
    Zero,
    One,
}

struct Allocator {
    next: usize,
    init: Vec<(Range<usize>, Init)>,
}

impl Allocator {
    fn take(&mut self, n: usize, init: Init) -> Range<usize> {
        let r = self.next..self.next + n;
        self.next += n;
        self.init.push((r.clone(), init));
        r
    }

    fn conv(&mut self, cin: usize, cout: usize, bias: bool) -> ConvSpec {
        let w = self.take(cout * cin * 27, Init::Conv { fan_in: cin * 27 });
        let b = bias.then(|| self.take(cout, Init::Zero));
        ConvSpec { cin, cout, w, b }
    }

    fn norm(&mut self, c: usize, max_groups: usize) -> NormSpec {
        NormSpec {
            groups: gcd(c, max_groups),
            gamma: self.take(c, Init::One),
            beta: self.take(c, Init::Zero),
        }
    }

    fn linear(&mut self, cin: usize, cout: usize) -> LinearSpec {
        LinearSpec {
            cout,
            w: self.take(cout * cin, Init::Linear { fan_in: cin }),
            b: self.take(cout, Init::Zero),
        }
    }

    fn block(&mut self, cin: usize, cout: usize, temb_dim: usize, groups: usize) -> BlockSpec {
        BlockSpec {
            conv1: self.conv(cin, cout, true),
            norm1: self.norm(cout, groups),
            temb: self.linear(temb_dim, cout),
            conv2: self.conv(cout, cout, true),
            norm2: self.norm(cout, groups),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyUNet {
    config: UNetConfig,
    kind: PredictionKind,
    encoder: Vec<BlockSpec>,
    decoder: Vec<BlockSpec>,
    head: ConvSpec,
    init: Vec<(Range<usize>, Init)>,
    params: Vec<f64>,
}

struct BlockCache {
    input: Feat,
    norm1: GnCache,
    /// Group-norm outputs, i.e. the SiLU inputs.
    act1_in: Feat,
    act2_in: Feat,
    /// SiLU output plus time embedding.
    conv2_in: Feat,
    norm2: GnCache,
}

/// Intermediate activations of one forward pass.
pub struct ForwardCache {
    temb: Vec<f64>,
    encoder: Vec<BlockCache>,
    /// Output of each encoder block (the skip connections).
    skips: Vec<Feat>,
    decoder: Vec<BlockCache>,
    head_input: Feat,
}

impl TinyUNet {
    /// Builds the layout for `config` with every parameter zero.
    pub fn zeros(config: UNetConfig, kind: PredictionKind) -> Result<Self> {
        config.validate()?;
        let mut alloc = Allocator {
            next: 0,
            init: Vec::new(),
        };
        let mut encoder = Vec::new();
        let mut cin = 1;
        for &w in &config.widths {
            encoder.push(alloc.block(cin, w, config.temb_dim, config.norm_groups));
            cin = w;
        }
        let mut decoder = Vec::new();
        for level in (0..config.levels() - 1).rev() {
            let c = config.widths[level + 1] + config.widths[level];
            decoder.push(alloc.block(c, config.widths[level], config.temb_dim, config.norm_groups));
        }
        let head = alloc.conv(config.widths[0], 1, false);
        let params = vec![0.0; alloc.next];
        Ok(Self {
            config,
            kind,
            encoder,
            decoder,
            head,
            init: alloc.init,
            params,
        })
    }

    /// Seeded initialization: He-normal convolutions, unit norms, zero biases.
    pub fn new(config: UNetConfig, kind: PredictionKind, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config, kind)?;
        let mut rng = NoiseRng::new(seed);
        for (range, init) in &net.init {
            for p in &mut net.params[range.clone()] {
                *p = match init {
                    Init::Conv { fan_in } => rng.gaussian() * (2.0 / *fan_in as f64).sqrt(),
                    Init::Linear { fan_in } => rng.gaussian() * (1.0 / *fan_in as f64).sqrt(),
                    Init::Zero => 0.0,
                    Init::One => 1.0,
                };
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch(self.params.len(), params.len()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn with_params(mut self, params: &[f64]) -> Result<Self> {
        self.set_params(params)?;
        Ok(self)
    }

    fn check_dims(&self, x: &[f64], dims: [usize; 3]) -> Result<()> {
        let n: usize = dims.iter().product();
        if x.len() != n {
            return Err(Error::shape(&dims, &[x.len()]));
        }
        let f = self.config.divisor();
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::IndivisibleShape { dims, factor: f });
        }
        Ok(())
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn block_forward(&self, spec: &BlockSpec, input: Feat, temb: &[f64]) -> (Feat, BlockCache) {
        let pre1 = layers::conv3_forward(
            &input,
            self.p(&spec.conv1.w),
            spec.conv1.b.as_ref().map(|b| self.p(b)),
            spec.conv1.cout,
        );
        let (n1, norm1) = layers::group_norm_forward(
            &pre1,
            spec.norm1.groups,
            self.p(&spec.norm1.gamma),
            self.p(&spec.norm1.beta),
        );
        let act1_in = n1;
        let mut h = layers::silu_forward(&act1_in);
        let e = layers::linear_forward(temb, self.p(&spec.temb.w), self.p(&spec.temb.b), spec.temb.cout);
        layers::add_channel_bias(&mut h, &e);
        let pre2 = layers::conv3_forward(
            &h,
            self.p(&spec.conv2.w),
            spec.conv2.b.as_ref().map(|b| self.p(b)),
            spec.conv2.cout,
        );
        let (n2, norm2) = layers::group_norm_forward(
            &pre2,
            spec.norm2.groups,
            self.p(&spec.norm2.gamma),
            self.p(&spec.norm2.beta),
        );
        let out = layers::silu_forward(&n2);
        (
            out,
            BlockCache {
                input,
                norm1,
                act1_in,
                act2_in: n2,
                conv2_in: h,
                norm2,
            },
        )
    }

    /// Returns the gradient with respect to the block input and accumulates
    /// parameter gradients into `grad`.
    fn block_backward(
        &self,
        spec: &BlockSpec,
        cache: &BlockCache,
        temb: &[f64],
        dout: &Feat,
        grad: &mut [f64],
    ) -> Feat {
        let d = layers::silu_backward(&cache.act2_in, dout);
        let (dgamma, dbeta) = two_ranges(grad, &spec.norm2.gamma, &spec.norm2.beta);
        let d = layers::group_norm_backward(
            &cache.norm2,
            spec.norm2.groups,
            self.p(&spec.norm2.gamma),
            &d,
            dgamma,
            dbeta,
        );
        let d = conv_backward(self, &spec.conv2, &cache.conv2_in, &d, grad);
        let demb = layers::channel_sums(&d);
        let (dw, db) = two_ranges(grad, &spec.temb.w, &spec.temb.b);
        layers::linear_backward(temb, &demb, dw, db);
        let d = layers::silu_backward(&cache.act1_in, &d);
        let (dgamma, dbeta) = two_ranges(grad, &spec.norm1.gamma, &spec.norm1.beta);
        let d = layers::group_norm_backward(
            &cache.norm1,
            spec.norm1.groups,
            self.p(&spec.norm1.gamma),
            &d,
            dgamma,
            dbeta,
        );
        conv_backward(self, &spec.conv1, &cache.input, &d, grad)
    }

    pub fn forward_cached(&self, x: &[f64], dims: [usize; 3], t: usize) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_dims(x, dims)?;
        let temb = layers::timestep_embedding(t, self.config.temb_dim);
        let mut h = Feat {
            c: 1,
            dims,
            data: x.to_vec(),
        };
        let levels = self.config.levels();
        let mut enc_cache = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        for (level, spec) in self.encoder.iter().enumerate() {
            let (out, cache) = self.block_forward(spec, h, &temb);
            enc_cache.push(cache);
            h = if level + 1 < levels {
                layers::avg_pool_forward(&out)
            } else {
                out.clone()
            };
            skips.push(out);
        }
        let mut h = skips[levels - 1].clone();
        let mut dec_cache = Vec::with_capacity(levels - 1);
        for (i, spec) in self.decoder.iter().enumerate() {
            let level = levels - 2 - i;
            let up = layers::upsample_forward(&h);
            let input = layers::concat(&up, &skips[level]);
            let (out, cache) = self.block_forward(spec, input, &temb);
            dec_cache.push(cache);
            h = out;
        }
        let y = layers::conv3_forward(&h, self.p(&self.head.w), None, 1);
        Ok((
            y.data,
            ForwardCache {
                temb,
                encoder: enc_cache,
                skips,
                decoder: dec_cache,
                head_input: h,
            },
        ))
    }

    pub fn forward(&self, x: &[f64], dims: [usize; 3], t: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, dims, t)?.0)
    }

    /// Gradient of `<upstream, forward(x)>` with respect to the parameters,
    /// accumulated into `grad`.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch(self.params.len(), grad.len()));
        }
        let dims = cache.head_input.dims;
        if upstream.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(&dims, &[upstream.len()]));
        }
        let dy = Feat {
            c: 1,
            dims,
            data: upstream.to_vec(),
        };
        let levels = self.config.levels();
        let mut d = conv_backward(self, &self.head, &cache.head_input, &dy, grad);

        // Gradient flowing into each encoder output through its skip path.
        let mut dskip: Vec<Option<Feat>> = vec![None; levels];
        for (i, spec) in self.decoder.iter().enumerate().rev() {
            let level = levels - 2 - i;
            let din = self.block_backward(spec, &cache.decoder[i], &cache.temb, &d, grad);
            let up_c = self.config.widths[level + 1];
            let (dup, ds) = layers::split(&din, up_c);
            dskip[level] = Some(ds);
            d = layers::upsample_backward(cache.skips[level + 1].dims, &dup);
        }
        // `d` is now the gradient w.r.t. the deepest encoder output.
        let mut dout = d;
        for level in (0..levels).rev() {
            if let Some(ds) = dskip[level].take() {
                for (a, b) in dout.data.iter_mut().zip(&ds.data) {
                    *a += b;
                }
            }
            let din = self.block_backward(&self.encoder[level], &cache.encoder[level], &cache.temb, &dout, grad);
            if level > 0 {
                dout = layers::avg_pool_backward(cache.skips[level - 1].dims, &din);
            }
        }
        Ok(())
    }

    pub fn backward(&self, x: &[f64], dims: [usize; 3], t: usize, upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.forward_cached(x, dims, t)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(&cache, upstream, &mut grad)?;
        Ok(grad)
    }
}

fn two_ranges<'a>(grad: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.end - b.start])
}

fn conv_backward(net: &TinyUNet, spec: &ConvSpec, input: &Feat, dy: &Feat, grad: &mut [f64]) -> Feat {
    debug_assert_eq!(input.c, spec.cin);
    match &spec.b {
        Some(b) => {
            let (dw, db) = two_ranges(grad, &spec.w, b);
            layers::conv3_backward(input, net.p(&spec.w), dy, dw, Some(db))
        }
        None => layers::conv3_backward(input, net.p(&spec.w), dy, &mut grad[spec.w.clone()], None),
    }
}

impl Denoiser for TinyUNet {
    fn kind(&self) -> PredictionKind {
        self.kind
    }

    fn predict(&self, xt: &[f64], dims: [usize; 3], t: usize) -> Result<Vec<f64>> {
        self.forward(xt, dims, t)
    }
}

pub fn unet_forward(net: &TinyUNet, xt: &[f64], dims: [usize; 3], t: usize) -> Result<Vec<f64>> {
    net.forward(xt, dims, t)
}

pub fn unet_backward(net: &TinyUNet, xt: &[f64], dims: [usize; 3], t: usize, upstream: &[f64]) -> Result<Vec<f64>> {
    net.backward(xt, dims, t, upstream)
}
