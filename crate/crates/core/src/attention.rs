//! CBAM channel and spatial attention with explicit backward passes.
//!
//! A feature map `f` (C×H×W) is refined twice: `f' = Ac(f) ⊗ f`, then
//! `f'' = As(f') ⊗ f'`. Both attention maps are kept so they can be distilled.
//! Channel attention passes the global average- and max-pooled descriptors
//! through one shared two-layer MLP (ReLU between the layers, no biases);
//! spatial attention convolves the stacked channel-mean and channel-max maps
//! with a single 7×7 kernel, zero padding 3.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView4, ArrayViewMut2, ArrayViewMut4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type FeatureMap = Array3<f64>;

pub const SPATIAL_KERNEL: usize = 7;
pub const SPATIAL_PADDING: usize = 3;
const SIGMOID_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Channel,
    Spatial,
}

impl AttentionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionKind::Channel => "channel",
            AttentionKind::Spatial => "spatial",
        }
    }

    /// Single-letter tag used in block-level reports (`B1-S`, `B1-C`).
    pub fn letter(&self) -> char {
        match self {
            AttentionKind::Channel => 'C',
            AttentionKind::Spatial => 'S',
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A recorded attention map for one backbone site.
///
/// Channel maps have shape C×1×1 and spatial maps 1×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTap {
    pub site_id: String,
    pub kind: AttentionKind,
    pub map: Array3<f64>,
}

/// Reduction ratio used when none is configured: 16, or `max(1, C/4)` for narrow layers.
/// Falls back to the largest divisor of C below 16 when 16 does not divide C.
pub fn default_reduction_ratio(channels: usize) -> usize {
    if channels < 16 {
        (channels / 4).max(1)
    } else {
        (1..=16).rev().find(|&r| channels.is_multiple_of(r)).unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams {
    pub reduction_ratio: usize,
    /// (C/r)×C
    pub fc1: Array2<f64>,
    /// C×(C/r)
    pub fc2: Array2<f64>,
}

impl ChannelAttentionParams {
    pub fn zeros(channels: usize, reduction_ratio: usize) -> Result<Self> {
        if reduction_ratio == 0 || !channels.is_multiple_of(reduction_ratio) {
            return Err(Error::Dimension(format!(
                "reduction ratio {reduction_ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction_ratio;
        Ok(Self {
            reduction_ratio,
            fc1: Array2::zeros((hidden, channels)),
            fc2: Array2::zeros((channels, hidden)),
        })
    }

    /// Fan-in scaled uniform initialization.
    pub fn random<R: Rng>(channels: usize, reduction_ratio: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction_ratio)?;
        let hidden = channels / reduction_ratio;
        fill_uniform(p.fc1.as_slice_mut().unwrap(), channels, rng);
        fill_uniform(p.fc2.as_slice_mut().unwrap(), hidden, rng);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.fc1.ncols()
    }

    pub fn view(&self) -> ChannelWeights<'_> {
        ChannelWeights {
            fc1: self.fc1.view(),
            fc2: self.fc2.view(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams {
    /// 1×2×7×7; input channel 0 is the channel-mean map, 1 the channel-max map.
    pub conv: Array4<f64>,
}

impl SpatialAttentionParams {
    pub fn zeros() -> Self {
        Self {
            conv: Array4::zeros((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL)),
        }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        fill_uniform(p.conv.as_slice_mut().unwrap(), 2 * SPATIAL_KERNEL * SPATIAL_KERNEL, rng);
        p
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.conv.view()
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fill_uniform<R: Rng>(values: &mut [f64], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in values {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Borrowed channel-attention weights.
#[derive(Debug, Clone, Copy)]
pub struct ChannelWeights<'a> {
    pub fc1: ArrayView2<'a, f64>,
    pub fc2: ArrayView2<'a, f64>,
}

/// Gradient accumulators matching [`ChannelWeights`] and the spatial kernel.
pub struct AttentionGrads<'a> {
    pub fc1: ArrayViewMut2<'a, f64>,
    pub fc2: ArrayViewMut2<'a, f64>,
    pub conv: ArrayViewMut4<'a, f64>,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
}

#[derive(Debug, Clone)]
pub struct ChannelCache {
    avg: Vec<f64>,
    max: Vec<f64>,
    argmax: Vec<usize>,
    hidden_avg: Vec<f64>,
    hidden_max: Vec<f64>,
    /// Sigmoid output, length C.
    pub attention: Vec<f64>,
}

fn mlp_hidden(fc1: &ArrayView2<f64>, v: &[f64]) -> Vec<f64> {
    fc1.rows()
        .into_iter()
        .map(|row| row.iter().zip(v).map(|(w, x)| w * x).sum())
        .collect()
}

fn mlp_out(fc2: &ArrayView2<f64>, hidden: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(fc2.rows()) {
        *o += row
            .iter()
            .zip(hidden)
            .map(|(w, h)| w * h.max(0.0))
            .sum::<f64>();
    }
}

fn check_channels(f: &FeatureMap, w: &ChannelWeights) -> Result<()> {
    let c = f.dim().0;
    let hidden = w.fc1.nrows();
    if w.fc1.ncols() != c || w.fc2.dim() != (c, hidden) {
        return Err(Error::Dimension(format!(
            "channel attention weights {:?}/{:?} do not match {c} channels",
            w.fc1.dim(),
            w.fc2.dim()
        )));
    }
    Ok(())
}

/// Channel attention forward. Returns the C attention values and the cache.
pub fn channel_forward(f: &FeatureMap, w: &ChannelWeights) -> Result<ChannelCache> {
    check_channels(f, w)?;
    let (c, h, wd) = f.dim();
    let hw = h * wd;
    if hw == 0 {
        return Err(Error::Dimension("empty spatial extent".into()));
    }
    let data = f.as_slice().expect("standard layout");
    let mut avg = vec![0.0; c];
    let mut max = vec![0.0; c];
    let mut argmax = vec![0; c];
    for ch in 0..c {
        let plane = &data[ch * hw..(ch + 1) * hw];
        avg[ch] = plane.iter().sum::<f64>() / hw as f64;
        let (mut bi, mut bv) = (0, plane[0]);
        for (i, &v) in plane.iter().enumerate().skip(1) {
            if v > bv {
                bi = i;
                bv = v;
            }
        }
        max[ch] = bv;
        argmax[ch] = bi;
    }
    let hidden_avg = mlp_hidden(&w.fc1, &avg);
    let hidden_max = mlp_hidden(&w.fc1, &max);
    let mut z = vec![0.0; c];
    mlp_out(&w.fc2, &hidden_avg, &mut z);
    mlp_out(&w.fc2, &hidden_max, &mut z);
    let attention = z.into_iter().map(sigmoid).collect();
    Ok(ChannelCache {
        avg,
        max,
        argmax,
        hidden_avg,
        hidden_max,
        attention,
    })
}

/// Channel attention map `σ(MLP(AvgPool f) + MLP(MaxPool f))` as C×1×1.
pub fn channel_attention(f: &FeatureMap, params: &ChannelAttentionParams) -> Result<Array3<f64>> {
    let cache = channel_forward(f, &params.view())?;
    Ok(Array3::from_shape_vec((f.dim().0, 1, 1), cache.attention).unwrap())
}

#[derive(Debug, Clone)]
pub struct SpatialCache {
    /// 2×H×W stacked mean and max maps.
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    /// Sigmoid output, length H·W.
    pub attention: Vec<f64>,
}

fn check_spatial_kernel(conv: &ArrayView4<f64>) -> Result<()> {
    if conv.dim() != (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL) {
        return Err(Error::Dimension(format!(
            "spatial kernel must be 1x2x7x7, got {:?}",
            conv.dim()
        )));
    }
    Ok(())
}

pub fn spatial_forward(f: &FeatureMap, conv: &ArrayView4<f64>) -> Result<SpatialCache> {
    check_spatial_kernel(conv)?;
    let (c, h, w) = f.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("malformed feature map {:?}", f.dim())));
    }
    let hw = h * w;
    let data = f.as_slice().expect("standard layout");
    let mut pooled = vec![0.0; 2 * hw];
    let mut argmax = vec![0usize; hw];
    for p in 0..hw {
        let (mut s, mut bi, mut bv) = (data[p], 0, data[p]);
        for ch in 1..c {
            let v = data[ch * hw + p];
            s += v;
            if v > bv {
                bi = ch;
                bv = v;
            }
        }
        pooled[p] = s / c as f64;
        pooled[hw + p] = bv;
        argmax[p] = bi;
    }
    let k = conv.as_slice().expect("standard layout");
    let z = conv7_forward(&pooled, h, w, k);
    let attention = z.into_iter().map(sigmoid).collect();
    Ok(SpatialCache {
        pooled,
        argmax,
        attention,
    })
}

/// 2-in/1-out 7×7 convolution with zero padding 3.
fn conv7_forward(input: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let kk = SPATIAL_KERNEL * SPATIAL_KERNEL;
    let pad = SPATIAL_PADDING as isize;
    let mut out = vec![0.0; hw];
    for ci in 0..2 {
        let plane = &input[ci * hw..(ci + 1) * hw];
        let kern = &k[ci * kk..(ci + 1) * kk];
        for ky in 0..SPATIAL_KERNEL {
            for kx in 0..SPATIAL_KERNEL {
                let wv = kern[ky * SPATIAL_KERNEL + kx];
                if wv == 0.0 {
                    continue;
                }
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[y * w + x] += wv * plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel gradients and returns the gradient w.r.t. the 2×H×W input.
fn conv7_backward(input: &[f64], h: usize, w: usize, k: &[f64], dz: &[f64], dk: &mut [f64]) -> Vec<f64> {
    let hw = h * w;
    let kk = SPATIAL_KERNEL * SPATIAL_KERNEL;
    let pad = SPATIAL_PADDING as isize;
    let mut din = vec![0.0; 2 * hw];
    for ci in 0..2 {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..SPATIAL_KERNEL {
            for kx in 0..SPATIAL_KERNEL {
                let ki = ci * kk + ky * SPATIAL_KERNEL + kx;
                let wv = k[ki];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let mut acc = 0.0;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let si = sy as usize * w + sx as usize;
                        let g = dz[y * w + x];
                        acc += g * plane[si];
                        din[ci * hw + si] += g * wv;
                    }
                }
                dk[ki] += acc;
            }
        }
    }
    din
}

/// Spatial attention map `σ(conv7x7([mean_c f; max_c f]))` as 1×H×W.
pub fn spatial_attention(f: &FeatureMap, params: &SpatialAttentionParams) -> Result<Array3<f64>> {
    let (_, h, w) = f.dim();
    let cache = spatial_forward(f, &params.view())?;
    Ok(Array3::from_shape_vec((1, h, w), cache.attention).unwrap())
}

/// Everything the backward pass of [`refine_forward`] needs.
#[derive(Debug, Clone)]
pub struct RefineCache {
    input: FeatureMap,
    once: FeatureMap,
    pub channel: ChannelCache,
    pub spatial: SpatialCache,
}

impl RefineCache {
    pub fn channel_map(&self) -> Array3<f64> {
        Array3::from_shape_vec((self.channel.attention.len(), 1, 1), self.channel.attention.clone())
            .unwrap()
    }

    pub fn spatial_map(&self) -> Array3<f64> {
        let (_, h, w) = self.input.dim();
        Array3::from_shape_vec((1, h, w), self.spatial.attention.clone()).unwrap()
    }

    pub fn taps(&self, site_id: &str) -> [AttentionTap; 2] {
        [
            AttentionTap {
                site_id: site_id.to_string(),
                kind: AttentionKind::Channel,
                map: self.channel_map(),
            },
            AttentionTap {
                site_id: site_id.to_string(),
                kind: AttentionKind::Spatial,
                map: self.spatial_map(),
            },
        ]
    }
}

pub fn refine_forward(
    f: &FeatureMap,
    cw: &ChannelWeights,
    conv: &ArrayView4<f64>,
) -> Result<(FeatureMap, RefineCache)> {
    let (c, h, w) = f.dim();
    let hw = h * w;
    let channel = channel_forward(f, cw)?;
    let mut once = f.clone();
    {
        let d = once.as_slice_mut().unwrap();
        for ch in 0..c {
            let a = channel.attention[ch];
            d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v *= a);
        }
    }
    let spatial = spatial_forward(&once, conv)?;
    let mut twice = once.clone();
    {
        let d = twice.as_slice_mut().unwrap();
        for ch in 0..c {
            for (v, a) in d[ch * hw..(ch + 1) * hw].iter_mut().zip(&spatial.attention) {
                *v *= a;
            }
        }
    }
    Ok((
        twice,
        RefineCache {
            input: f.clone(),
            once,
            channel,
            spatial,
        },
    ))
}

/// Back-propagates through a refinement.
///
/// `grad_out` is dL/df''; `grad_channel` (length C) and `grad_spatial`
/// (length H·W) are extra gradients flowing directly into the attention maps.
/// Weight gradients are accumulated into `grads`; returns dL/df.
pub fn refine_backward(
    cache: &RefineCache,
    cw: &ChannelWeights,
    conv: &ArrayView4<f64>,
    grad_out: &FeatureMap,
    grad_channel: Option<&[f64]>,
    grad_spatial: Option<&[f64]>,
    grads: &mut AttentionGrads,
) -> FeatureMap {
    let (c, h, w) = cache.input.dim();
    let hw = h * w;
    let g2 = grad_out.as_slice().expect("standard layout");
    let once = cache.once.as_slice().unwrap();
    let input = cache.input.as_slice().unwrap();
    let a_s = &cache.spatial.attention;

    // f'' = a_s ⊗ f'
    let mut d_once = vec![0.0; c * hw];
    let mut d_as = match grad_spatial {
        Some(g) => g.to_vec(),
        None => vec![0.0; hw],
    };
    for ch in 0..c {
        for p in 0..hw {
            let i = ch * hw + p;
            d_as[p] += g2[i] * once[i];
            d_once[i] = g2[i] * a_s[p];
        }
    }
    let dz_s: Vec<f64> = d_as
        .iter()
        .zip(a_s)
        .map(|(g, a)| g * a * (1.0 - a))
        .collect();
    let dpooled = conv7_backward(
        &cache.spatial.pooled,
        h,
        w,
        conv.as_slice().unwrap(),
        &dz_s,
        grads.conv.as_slice_mut().unwrap(),
    );
    for p in 0..hw {
        let dm = dpooled[p] / c as f64;
        for ch in 0..c {
            d_once[ch * hw + p] += dm;
        }
        d_once[cache.spatial.argmax[p] * hw + p] += dpooled[hw + p];
    }

    // f' = a_c ⊗ f
    let a_c = &cache.channel.attention;
    let mut d_ac = match grad_channel {
        Some(g) => g.to_vec(),
        None => vec![0.0; c],
    };
    let mut d_in = vec![0.0; c * hw];
    for ch in 0..c {
        let mut acc = 0.0;
        for p in 0..hw {
            let i = ch * hw + p;
            acc += d_once[i] * input[i];
            d_in[i] = d_once[i] * a_c[ch];
        }
        d_ac[ch] += acc;
    }
    let dz_c: Vec<f64> = d_ac
        .iter()
        .zip(a_c)
        .map(|(g, a)| g * a * (1.0 - a))
        .collect();
    let ch_cache = &cache.channel;
    let d_avg = mlp_backward(cw, &ch_cache.avg, &ch_cache.hidden_avg, &dz_c, grads);
    let d_max = mlp_backward(cw, &ch_cache.max, &ch_cache.hidden_max, &dz_c, grads);
    for ch in 0..c {
        let da = d_avg[ch] / hw as f64;
        d_in[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += da);
        d_in[ch * hw + ch_cache.argmax[ch]] += d_max[ch];
    }
    Array3::from_shape_vec((c, h, w), d_in).unwrap()
}

fn mlp_backward(
    cw: &ChannelWeights,
    input: &[f64],
    hidden: &[f64],
    d_out: &[f64],
    grads: &mut AttentionGrads,
) -> Vec<f64> {
    let n_hidden = hidden.len();
    let mut d_hidden = vec![0.0; n_hidden];
    for (o, &g) in d_out.iter().enumerate() {
        for j in 0..n_hidden {
            let r = hidden[j].max(0.0);
            grads.fc2[[o, j]] += g * r;
            d_hidden[j] += cw.fc2[[o, j]] * g;
        }
    }
    for j in 0..n_hidden {
        if hidden[j] <= 0.0 {
            d_hidden[j] = 0.0;
        }
    }
    let mut d_in = vec![0.0; input.len()];
    for j in 0..n_hidden {
        let g = d_hidden[j];
        if g == 0.0 {
            continue;
        }
        for (i, &x) in input.iter().enumerate() {
            grads.fc1[[j, i]] += g * x;
            d_in[i] += cw.fc1[[j, i]] * g;
        }
    }
    d_in
}

/// Output of [`refine`].
#[derive(Debug, Clone)]
pub struct Refined {
    pub output: FeatureMap,
    pub channel_map: Array3<f64>,
    pub spatial_map: Array3<f64>,
}

impl Refined {
    pub fn taps(&self, site_id: &str) -> [AttentionTap; 2] {
        [
            AttentionTap {
                site_id: site_id.to_string(),
                kind: AttentionKind::Channel,
                map: self.channel_map.clone(),
            },
            AttentionTap {
                site_id: site_id.to_string(),
                kind: AttentionKind::Spatial,
                map: self.spatial_map.clone(),
            },
        ]
    }
}

/// Channel then spatial refinement. The spatial map is computed on the
/// channel-refined features.
pub fn refine(
    f: &FeatureMap,
    cp: &ChannelAttentionParams,
    sp: &SpatialAttentionParams,
) -> Result<Refined> {
    let (output, cache) = refine_forward(f, &cp.view(), &sp.view())?;
    Ok(Refined {
        output,
        channel_map: cache.channel_map(),
        spatial_map: cache.spatial_map(),
    })
}
