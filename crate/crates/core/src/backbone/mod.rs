//! Residual CNN feature extractor with CBAM refinement at configurable sites.
//!
//! The stem convolution and 1×1 convolutions never carry attention. With
//! [`SitePolicy::AllEligibleConvs`] every other convolution inside a residual
//! block is followed by a CBAM module; with [`SitePolicy::PerBlock`] only the
//! last convolution of each block is. Each site emits a channel tap followed
//! by a spatial tap, in [`enumerate_sites`] order.
//!
//! Parameters live in one flat vector (see [`params`]) so optimizers,
//! checkpoints and gradient checks work on plain slices.

pub mod conv;
pub mod params;

use ndarray::{Array1, Array3, ArrayView2, ArrayView4, ArrayViewMut2, ArrayViewMut4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    default_reduction_ratio, fill_uniform, refine_backward, refine_forward, AttentionGrads,
    AttentionKind, AttentionTap, ChannelWeights, FeatureMap, RefineCache, SPATIAL_KERNEL,
};
use crate::error::{Error, Result};
use conv::{conv_out_len, Conv2d, ConvCache};
use params::{hash_values, ParamLayout, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SitePolicy {
    AllEligibleConvs,
    PerBlock,
}

impl std::str::FromStr for SitePolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all_eligible_convs" => Ok(Self::AllEligibleConvs),
            "per_block" => Ok(Self::PerBlock),
            other => Err(format!("expected all_eligible_convs or per_block, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (×4).
    Bottleneck,
}

impl std::str::FromStr for BlockKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "basic" => Ok(Self::Basic),
            "bottleneck" => Ok(Self::Bottleneck),
            other => Err(format!("expected basic or bottleneck, got `{other}`")),
        }
    }
}

const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Expected input height and width.
    pub input_size: (usize, usize),
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub block_kind: BlockKind,
    pub embedding_dim: usize,
    pub attention_site_policy: SitePolicy,
    /// `None` picks [`default_reduction_ratio`] per site.
    pub reduction_ratio: Option<usize>,
}

impl BackboneConfig {
    /// Two-stage desk-scale network on 32×32 inputs.
    pub fn toy() -> Self {
        Self {
            input_size: (32, 32),
            stem_width: 8,
            stem_stride: 2,
            stage_widths: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            stage_strides: vec![1, 2],
            block_kind: BlockKind::Basic,
            embedding_dim: 64,
            attention_site_policy: SitePolicy::AllEligibleConvs,
            // the default rule leaves a single hidden unit at 16 channels,
            // which dies early in training at this scale
            reduction_ratio: Some(2),
        }
    }

    /// ResNet-50 layout (bottleneck blocks 3-4-6-3) on 112×112 face crops.
    pub fn resnet50() -> Self {
        Self {
            input_size: (112, 112),
            stem_width: 64,
            stem_stride: 1,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            stage_strides: vec![2, 2, 2, 2],
            block_kind: BlockKind::Bottleneck,
            embedding_dim: 512,
            attention_site_policy: SitePolicy::AllEligibleConvs,
            reduction_ratio: None,
        }
    }

    fn block_out_channels(&self, stage: usize) -> usize {
        match self.block_kind {
            BlockKind::Basic => self.stage_widths[stage],
            BlockKind::Bottleneck => self.stage_widths[stage] * BOTTLENECK_EXPANSION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        let n = self.stage_widths.len();
        if n == 0 {
            return bad("stage_widths", "at least one stage is required".into());
        }
        if self.blocks_per_stage.len() != n {
            return bad(
                "blocks_per_stage",
                format!("{} entries for {n} stages", self.blocks_per_stage.len()),
            );
        }
        if self.stage_strides.len() != n {
            return bad(
                "stage_strides",
                format!("{} entries for {n} stages", self.stage_strides.len()),
            );
        }
        if self.stage_widths.contains(&0) {
            return bad("stage_widths", "widths must be positive".into());
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("blocks_per_stage", "block counts must be positive".into());
        }
        if self.stage_strides.contains(&0) || self.stem_stride == 0 {
            return bad("stage_strides", "strides must be positive".into());
        }
        if self.stem_width == 0 {
            return bad("stem_width", "must be positive".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim", "must be positive".into());
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input_size", "must be positive".into());
        }
        if let Some(r) = self.reduction_ratio {
            for site in enumerate_sites(self) {
                if r == 0 || site.channels % r != 0 {
                    return bad(
                        "reduction_ratio",
                        format!("{r} does not divide {} channels at {}", site.channels, site.site_id),
                    );
                }
            }
        }
        Ok(())
    }
}

/// A CBAM site as enumerated from a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSpec {
    pub site_id: String,
    pub stage: usize,
    pub block: usize,
    /// 1-based index of the residual block across the whole network.
    pub global_block: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SiteSpec {
    pub fn tap_shape(&self, kind: AttentionKind) -> (usize, usize, usize) {
        match kind {
            AttentionKind::Channel => (self.channels, 1, 1),
            AttentionKind::Spatial => (1, self.height, self.width),
        }
    }

    /// Residual block this site belongs to, e.g. `stage0.block1`.
    pub fn block_id(&self) -> String {
        format!("stage{}.block{}", self.stage, self.block)
    }
}

/// One convolution inside a residual block, before optional attention and ReLU.
struct UnitPlan {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    relu: bool,
}

fn block_plan(cfg: &BackboneConfig, in_c: usize, stage: usize, stride: usize) -> Vec<UnitPlan> {
    let width = cfg.stage_widths[stage];
    match cfg.block_kind {
        BlockKind::Basic => vec![
            UnitPlan { in_c, out_c: width, kernel: 3, stride, relu: true },
            UnitPlan { in_c: width, out_c: width, kernel: 3, stride: 1, relu: false },
        ],
        BlockKind::Bottleneck => vec![
            UnitPlan { in_c, out_c: width, kernel: 1, stride: 1, relu: true },
            UnitPlan { in_c: width, out_c: width, kernel: 3, stride, relu: true },
            UnitPlan {
                in_c: width,
                out_c: width * BOTTLENECK_EXPANSION,
                kernel: 1,
                stride: 1,
                relu: false,
            },
        ],
    }
}

fn unit_has_site(policy: SitePolicy, plan: &[UnitPlan], idx: usize) -> bool {
    match policy {
        SitePolicy::AllEligibleConvs => plan[idx].kernel > 1,
        SitePolicy::PerBlock => idx + 1 == plan.len(),
    }
}

fn site_name(policy: SitePolicy, stage: usize, block: usize, unit: usize) -> String {
    match policy {
        SitePolicy::AllEligibleConvs => format!("stage{stage}.block{block}.conv{}", unit + 1),
        SitePolicy::PerBlock => format!("stage{stage}.block{block}"),
    }
}

/// Every attention site the network built from `cfg` will emit, in tap order.
pub fn enumerate_sites(cfg: &BackboneConfig) -> Vec<SiteSpec> {
    let mut sites = Vec::new();
    let (mut h, mut w) = (
        conv_out_len(cfg.input_size.0, 3, cfg.stem_stride),
        conv_out_len(cfg.input_size.1, 3, cfg.stem_stride),
    );
    let mut in_c = cfg.stem_width;
    let mut global = 0;
    for stage in 0..cfg.stage_widths.len() {
        for block in 0..cfg.blocks_per_stage[stage] {
            global += 1;
            let stride = if block == 0 { cfg.stage_strides[stage] } else { 1 };
            let plan = block_plan(cfg, in_c, stage, stride);
            for (u, p) in plan.iter().enumerate() {
                h = conv_out_len(h, p.kernel, p.stride);
                w = conv_out_len(w, p.kernel, p.stride);
                if unit_has_site(cfg.attention_site_policy, &plan, u) {
                    sites.push(SiteSpec {
                        site_id: site_name(cfg.attention_site_policy, stage, block, u),
                        stage,
                        block,
                        global_block: global,
                        channels: p.out_c,
                        height: h,
                        width: w,
                    });
                }
            }
            in_c = cfg.block_out_channels(stage);
        }
    }
    sites
}

#[derive(Debug, Clone, PartialEq)]
struct CbamLayer {
    site_id: String,
    channels: usize,
    hidden: usize,
    fc1: Slot,
    fc2: Slot,
    spatial: Slot,
}

impl CbamLayer {
    fn weights<'a>(&self, params: &'a [f64]) -> (ChannelWeights<'a>, ArrayView4<'a, f64>) {
        (
            ChannelWeights {
                fc1: ArrayView2::from_shape((self.hidden, self.channels), self.fc1.of(params)).unwrap(),
                fc2: ArrayView2::from_shape((self.channels, self.hidden), self.fc2.of(params)).unwrap(),
            },
            ArrayView4::from_shape((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), self.spatial.of(params))
                .unwrap(),
        )
    }

    fn grads<'a>(&self, grads: &'a mut [f64]) -> AttentionGrads<'a> {
        // fc1, fc2 and spatial are allocated back to back
        let all = &mut grads[self.fc1.offset..self.spatial.offset + self.spatial.len];
        let (fc1, rest) = all.split_at_mut(self.fc1.len);
        let (fc2, spatial) = rest.split_at_mut(self.fc2.len);
        AttentionGrads {
            fc1: ArrayViewMut2::from_shape((self.hidden, self.channels), fc1).unwrap(),
            fc2: ArrayViewMut2::from_shape((self.channels, self.hidden), fc2).unwrap(),
            conv: ArrayViewMut4::from_shape((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), spatial).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Unit {
    conv: Conv2d,
    cbam: Option<CbamLayer>,
    relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    units: Vec<Unit>,
    shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq)]
struct Embed {
    in_features: usize,
    out_features: usize,
    weight: Slot,
    bias: Slot,
}

/// Output of a forward pass for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub embedding: Array1<f64>,
    pub taps: Vec<AttentionTap>,
}

impl ForwardResult {
    /// The pre-normalization embedding the class head consumes.
    pub fn logits_features(&self) -> &Array1<f64> {
        &self.embedding
    }
}

struct UnitTrace {
    conv: ConvCache,
    cbam: Option<RefineCache>,
    /// Post-ReLU output, kept for the mask.
    out: Option<FeatureMap>,
}

struct BlockTrace {
    units: Vec<UnitTrace>,
    shortcut: Option<ConvCache>,
    out: FeatureMap,
}

/// Intermediate values of one forward pass, consumed by [`Backbone::backward`].
pub struct ForwardTrace {
    stem: ConvCache,
    stem_out: FeatureMap,
    blocks: Vec<BlockTrace>,
    final_hw: (usize, usize, usize),
    pooled: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    stem: Conv2d,
    blocks: Vec<Block>,
    embed: Embed,
    sites: Vec<SiteSpec>,
}

fn make_conv(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Conv2d {
    Conv2d {
        in_channels: in_c,
        out_channels: out_c,
        kernel,
        stride,
        weight: layout.alloc(format!("{name}.weight"), &[out_c, in_c, kernel, kernel]),
        bias: layout.alloc(format!("{name}.bias"), &[out_c]),
    }
}

impl Backbone {
    /// Builds the network with all parameters zero.
    pub fn zeroed(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let stem = make_conv(&mut layout, "stem.conv", 3, config.stem_width, 3, config.stem_stride);
        let mut in_c = config.stem_width;
        let mut blocks = Vec::new();
        for stage in 0..config.stage_widths.len() {
            for b in 0..config.blocks_per_stage[stage] {
                let stride = if b == 0 { config.stage_strides[stage] } else { 1 };
                let plan = block_plan(config, in_c, stage, stride);
                let prefix = format!("stage{stage}.block{b}");
                let mut units = Vec::new();
                for (u, p) in plan.iter().enumerate() {
                    let conv = make_conv(
                        &mut layout,
                        &format!("{prefix}.conv{}", u + 1),
                        p.in_c,
                        p.out_c,
                        p.kernel,
                        p.stride,
                    );
                    let cbam = unit_has_site(config.attention_site_policy, &plan, u).then(|| {
                        let site_id = site_name(config.attention_site_policy, stage, b, u);
                        let r = config
                            .reduction_ratio
                            .unwrap_or_else(|| default_reduction_ratio(p.out_c));
                        let hidden = p.out_c / r;
                        let base = format!("{prefix}.conv{}.cbam", u + 1);
                        CbamLayer {
                            fc1: layout.alloc(format!("{base}.fc1"), &[hidden, p.out_c]),
                            fc2: layout.alloc(format!("{base}.fc2"), &[p.out_c, hidden]),
                            spatial: layout.alloc(
                                format!("{base}.spatial"),
                                &[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL],
                            ),
                            site_id,
                            channels: p.out_c,
                            hidden,
                        }
                    });
                    units.push(Unit { conv, cbam, relu: p.relu });
                }
                let out_c = config.block_out_channels(stage);
                let shortcut = (stride != 1 || in_c != out_c)
                    .then(|| make_conv(&mut layout, &format!("{prefix}.shortcut"), in_c, out_c, 1, stride));
                blocks.push(Block { units, shortcut });
                in_c = out_c;
            }
        }
        let embed = Embed {
            in_features: in_c,
            out_features: config.embedding_dim,
            weight: layout.alloc("embed.weight", &[config.embedding_dim, in_c]),
            bias: layout.alloc("embed.bias", &[config.embedding_dim]),
        };
        let params = vec![0.0; layout.total];
        Ok(Self {
            config: config.clone(),
            layout,
            params,
            stem,
            blocks,
            embed,
            sites: enumerate_sites(config),
        })
    }

    /// Builds the network with seeded fan-in scaled uniform weights and zero biases.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs: Vec<Conv2d> = std::iter::once(net.stem.clone())
            .chain(net.blocks.iter().flat_map(|b| {
                b.units.iter().map(|u| u.conv.clone()).chain(b.shortcut.clone())
            }))
            .collect();
        for c in convs {
            // He-uniform for ReLU networks
            let bound = (6.0 / c.fan_in() as f64).sqrt();
            for v in c.weight.of_mut(&mut net.params) {
                *v = rng.gen_range(-bound..bound);
            }
        }
        let cbams: Vec<CbamLayer> = net
            .blocks
            .iter()
            .flat_map(|b| b.units.iter().filter_map(|u| u.cbam.clone()))
            .collect();
        for c in cbams {
            fill_uniform(c.fc1.of_mut(&mut net.params), c.channels, &mut rng);
            fill_uniform(c.fc2.of_mut(&mut net.params), c.hidden, &mut rng);
            fill_uniform(c.spatial.of_mut(&mut net.params), 2 * SPATIAL_KERNEL * SPATIAL_KERNEL, &mut rng);
        }
        let e = net.embed.clone();
        fill_uniform(e.weight.of_mut(&mut net.params), e.in_features, &mut rng);
        Ok(net)
    }

    /// Rebuilds a network around an existing parameter vector.
    pub fn from_params(config: &BackboneConfig, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sites(&self) -> &[SiteSpec] {
        &self.sites
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.sites.iter().map(|s| s.site_id.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_hash(&self) -> String {
        hash_values(&self.params)
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != 3 || (h, w) != self.config.input_size {
            return Err(Error::Dimension(format!(
                "expected 3x{}x{} input, got {c}x{h}x{w}",
                self.config.input_size.0, self.config.input_size.1
            )));
        }
        Ok(())
    }

    /// Forward pass keeping everything needed for [`Self::backward`].
    pub fn forward_trace(&self, x: &FeatureMap) -> Result<(ForwardResult, ForwardTrace)> {
        self.check_input(x)?;
        let p = &self.params;
        let (stem_pre, stem_cache) = self.stem.forward(p, x);
        let stem_out = stem_pre.mapv(|v| v.max(0.0));
        let mut cur = stem_out.clone();
        let mut taps = Vec::with_capacity(2 * self.sites.len());
        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = cur;
            let mut h = input.clone();
            let mut unit_traces = Vec::with_capacity(block.units.len());
            for unit in &block.units {
                let (mut y, conv_cache) = unit.conv.forward(p, &h);
                let mut refine = None;
                if let Some(cbam) = &unit.cbam {
                    let (cw, sk) = cbam.weights(p);
                    let (refined, cache) = refine_forward(&y, &cw, &sk)?;
                    taps.extend(cache.taps(&cbam.site_id));
                    refine = Some(cache);
                    y = refined;
                }
                let out = if unit.relu {
                    y.mapv_inplace(|v| v.max(0.0));
                    Some(y.clone())
                } else {
                    None
                };
                unit_traces.push(UnitTrace {
                    conv: conv_cache,
                    cbam: refine,
                    out,
                });
                h = y;
            }
            let shortcut_cache = match &block.shortcut {
                Some(sc) => {
                    let (s, cache) = sc.forward(p, &input);
                    h += &s;
                    Some(cache)
                }
                None => {
                    h += &input;
                    None
                }
            };
            h.mapv_inplace(|v| v.max(0.0));
            block_traces.push(BlockTrace {
                units: unit_traces,
                shortcut: shortcut_cache,
                out: h.clone(),
            });
            cur = h;
        }
        let (c, hh, ww) = cur.dim();
        let hw = (hh * ww) as f64;
        let data = cur.as_slice().unwrap();
        let pooled: Vec<f64> = (0..c)
            .map(|ch| data[ch * hh * ww..(ch + 1) * hh * ww].iter().sum::<f64>() / hw)
            .collect();
        let e = &self.embed;
        let wmat = ArrayView2::from_shape((e.out_features, e.in_features), e.weight.of(p)).unwrap();
        let mut embedding = wmat.dot(&Array1::from(pooled.clone()));
        embedding += &ndarray::ArrayView1::from(e.bias.of(p));
        Ok((
            ForwardResult { embedding, taps },
            ForwardTrace {
                stem: stem_cache,
                stem_out,
                blocks: block_traces,
                final_hw: (c, hh, ww),
                pooled,
            },
        ))
    }

    pub fn forward_one(&self, x: &FeatureMap) -> Result<ForwardResult> {
        self.forward_trace(x).map(|r| r.0)
    }

    /// Batched inference.
    pub fn forward(&self, batch: &[FeatureMap]) -> Result<Vec<ForwardResult>> {
        use rayon::prelude::*;
        batch.par_iter().map(|x| self.forward_one(x)).collect()
    }

    /// Back-propagates `d_embedding` and optional per-tap gradients (aligned
    /// with `ForwardResult::taps`) and accumulates parameter gradients into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_embedding: &[f64],
        d_taps: Option<&[ndarray::Array3<f64>]>,
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.params.len() || d_embedding.len() != self.embed.out_features {
            return Err(Error::Dimension("gradient buffer does not match backbone".into()));
        }
        if let Some(t) = d_taps {
            if t.len() != 2 * self.sites.len() {
                return Err(Error::Dimension(format!(
                    "{} tap gradients for {} taps",
                    t.len(),
                    2 * self.sites.len()
                )));
            }
        }
        let p = &self.params;
        let e = &self.embed;
        {
            let gw = e.weight.of_mut(grads);
            for (o, &g) in d_embedding.iter().enumerate() {
                for (i, &x) in trace.pooled.iter().enumerate() {
                    gw[o * e.in_features + i] += g * x;
                }
            }
        }
        for (g, d) in e.bias.of_mut(grads).iter_mut().zip(d_embedding) {
            *g += d;
        }
        let wmat = ArrayView2::from_shape((e.out_features, e.in_features), e.weight.of(p)).unwrap();
        let d_pooled = wmat.t().dot(&ndarray::ArrayView1::from(d_embedding));
        let (c, h, w) = trace.final_hw;
        let hw = (h * w) as f64;
        let mut d = Array3::from_shape_fn((c, h, w), |(ch, _, _)| d_pooled[ch] / hw);

        let mut tap_cursor = 2 * self.sites.len();
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let bt = &trace.blocks[bi];
            d.zip_mut_with(&bt.out, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0
                }
            });
            let mut d_in = match (&block.shortcut, &bt.shortcut) {
                (Some(sc), Some(cache)) => sc.backward(p, cache, &d, grads, true).unwrap(),
                _ => d.clone(),
            };
            let mut dm = d;
            for (unit, ut) in block.units.iter().zip(&bt.units).rev() {
                if let Some(out) = &ut.out {
                    dm.zip_mut_with(out, |g, &o| {
                        if o <= 0.0 {
                            *g = 0.0
                        }
                    });
                }
                if let (Some(cbam), Some(rc)) = (&unit.cbam, &ut.cbam) {
                    tap_cursor -= 2;
                    let (gc, gs) = match d_taps {
                        Some(t) => (
                            Some(t[tap_cursor].as_slice().unwrap()),
                            Some(t[tap_cursor + 1].as_slice().unwrap()),
                        ),
                        None => (None, None),
                    };
                    let (cw, sk) = cbam.weights(p);
                    let mut ag = cbam.grads(grads);
                    dm = refine_backward(rc, &cw, &sk, &dm, gc, gs, &mut ag);
                }
                dm = unit.conv.backward(p, &ut.conv, &dm, grads, true).unwrap();
            }
            d_in += &dm;
            d = d_in;
        }
        d.zip_mut_with(&trace.stem_out, |g, &o| {
            if o <= 0.0 {
                *g = 0.0
            }
        });
        self.stem.backward(p, &trace.stem, &d, grads, false);
        Ok(())
    }
}

/// Converts an 8-bit RGB image into a 3×H×W map scaled to [-1, 1].
pub fn image_to_tensor(img: &image::RgbImage) -> FeatureMap {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t[[c, y as usize, x as usize]] = px.0[c] as f64 / 127.5 - 1.0;
        }
    }
    t
}
