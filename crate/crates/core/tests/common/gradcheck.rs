//! Finite-difference checks of every analytic gradient used in training,
//! shared by the gradient tests and the acceptance suite.

use askd::attention::{refine_backward, refine_forward, AttentionGrads, ChannelWeights, SPATIAL_KERNEL};
use askd::attention::{AttentionKind, AttentionTap};
use askd::backbone::{Backbone, BackboneConfig, BlockKind, SitePolicy};
use askd::losses::{
    arcface_loss, arcface_loss_with_grad, distill_loss, distill_loss_with_grad, logit_kd_loss,
    logit_kd_loss_with_grad, ClassHead, MarginConfig,
};
use super::*;
use ndarray::{Array2, Array3, ArrayView2, ArrayView4, ArrayViewMut2, ArrayViewMut4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;

struct RefineProblem {
    shape: (usize, usize, usize),
    hidden: usize,
    c_out: Vec<f64>,
    c_chan: Vec<f64>,
    c_spat: Vec<f64>,
}

impl RefineProblem {
    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (c, h, w) = self.shape;
        let (f, rest) = x.split_at(c * h * w);
        let (fc1, rest) = rest.split_at(self.hidden * c);
        let (fc2, conv) = rest.split_at(c * self.hidden);
        (f, fc1, fc2, conv)
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let c = self.shape.0;
        let (f, fc1, fc2, conv) = self.split(x);
        let f = Array3::from_shape_vec(self.shape, f.to_vec()).unwrap();
        let cw = ChannelWeights {
            fc1: ArrayView2::from_shape((self.hidden, c), fc1).unwrap(),
            fc2: ArrayView2::from_shape((c, self.hidden), fc2).unwrap(),
        };
        let k = ArrayView4::from_shape((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), conv).unwrap();
        let (out, cache) = refine_forward(&f, &cw, &k).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(out.as_slice().unwrap(), &self.c_out)
            + dot(cache.channel_map().as_slice().unwrap(), &self.c_chan)
            + dot(cache.spatial_map().as_slice().unwrap(), &self.c_spat)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let (c, h, w) = self.shape;
        let (f, fc1, fc2, conv) = self.split(x);
        let f = Array3::from_shape_vec(self.shape, f.to_vec()).unwrap();
        let cw = ChannelWeights {
            fc1: ArrayView2::from_shape((self.hidden, c), fc1).unwrap(),
            fc2: ArrayView2::from_shape((c, self.hidden), fc2).unwrap(),
        };
        let k = ArrayView4::from_shape((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), conv).unwrap();
        let (_, cache) = refine_forward(&f, &cw, &k).unwrap();
        let mut g_fc1 = vec![0.0; fc1.len()];
        let mut g_fc2 = vec![0.0; fc2.len()];
        let mut g_conv = vec![0.0; conv.len()];
        let mut grads = AttentionGrads {
            fc1: ArrayViewMut2::from_shape((self.hidden, c), &mut g_fc1).unwrap(),
            fc2: ArrayViewMut2::from_shape((c, self.hidden), &mut g_fc2).unwrap(),
            conv: ArrayViewMut4::from_shape((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), &mut g_conv).unwrap(),
        };
        let g_out = Array3::from_shape_vec((c, h, w), self.c_out.clone()).unwrap();
        let g_f = refine_backward(
            &cache,
            &cw,
            &k,
            &g_out,
            Some(&self.c_chan),
            Some(&self.c_spat),
            &mut grads,
        );
        let mut all = g_f.into_raw_vec_and_offset().0;
        all.extend(g_fc1);
        all.extend(g_fc2);
        all.extend(g_conv);
        all
    }
}

pub fn refine_gradients_match_finite_differences() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(2..9);
        let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
        let hidden = rng.gen_range(1..=c);
        let p = RefineProblem {
            shape: (c, h, w),
            hidden,
            c_out: random_vec(c * h * w, -1.0, 1.0, &mut rng),
            c_chan: random_vec(c, -1.0, 1.0, &mut rng),
            c_spat: random_vec(h * w, -1.0, 1.0, &mut rng),
        };
        let n = c * h * w + 2 * c * hidden + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL;
        let x = random_vec(n, -1.0, 1.0, &mut rng);
        let analytic = p.grad(&x);
        let coords: Vec<usize> = (0..n).collect();
        check_grad(&format!("refine seed {seed}"), &mut |v| p.loss(v), &x, &analytic, &coords)?;
    }
    Ok(())
}

pub fn arcface_gradients_match_finite_differences() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (b, d, n) = (rng.gen_range(1..5), rng.gen_range(2..7), rng.gen_range(2..6));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let cfg = MarginConfig {
            scale: [1.0, 8.0, 64.0][seed as usize % 3],
            margin: [0.0, 0.2, 0.5][seed as usize % 3],
        };
        let x = random_vec(b * d + d * n, -1.0, 1.0, &mut rng);
        let split = |v: &[f64]| {
            (
                Array2::from_shape_vec((b, d), v[..b * d].to_vec()).unwrap(),
                ClassHead::new(Array2::from_shape_vec((d, n), v[b * d..].to_vec()).unwrap()),
            )
        };
        let (e, head) = split(&x);
        let ml = arcface_loss_with_grad(e.view(), &labels, &head, &cfg).unwrap();
        let mut analytic = ml.grad_embeddings.into_raw_vec_and_offset().0;
        analytic.extend(ml.grad_head.iter());
        let mut f = |v: &[f64]| {
            let (e, head) = split(v);
            arcface_loss(e.view(), &labels, &head, &cfg).unwrap()
        };
        let coords: Vec<usize> = (0..x.len()).collect();
        check_grad(&format!("arcface seed {seed}"), &mut f, &x, &analytic, &coords)?;
    }
    Ok(())
}

fn taps_from(values: &[f64], shapes: &[(String, AttentionKind, (usize, usize, usize))]) -> Vec<AttentionTap> {
    let mut off = 0;
    shapes
        .iter()
        .map(|(site, kind, shape)| {
            let len = shape.0 * shape.1 * shape.2;
            let map = Array3::from_shape_vec(*shape, values[off..off + len].to_vec()).unwrap();
            off += len;
            AttentionTap {
                site_id: site.clone(),
                kind: *kind,
                map,
            }
        })
        .collect()
}

pub fn distill_gradients_match_finite_differences() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n_sites = rng.gen_range(1..4);
        let batch = rng.gen_range(1..4);
        let mut shapes = Vec::new();
        for s in 0..n_sites {
            let c = rng.gen_range(1..6);
            let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
            shapes.push((format!("site{s}"), AttentionKind::Channel, (c, 1, 1)));
            shapes.push((format!("site{s}"), AttentionKind::Spatial, (1, h, w)));
        }
        let per_sample: usize = shapes.iter().map(|s| s.2 .0 * s.2 .1 * s.2 .2).sum();
        let sites: Vec<String> = (0..n_sites)
            .filter(|_| rng.gen_bool(0.7))
            .map(|s| format!("site{s}"))
            .collect();
        let sites = if sites.is_empty() { vec!["site0".to_string()] } else { sites };
        // teacher block then student block, each batch × per_sample
        let x = random_vec(2 * batch * per_sample, 0.01, 1.0, &mut rng);
        let unpack = |v: &[f64]| {
            let t: Vec<Vec<AttentionTap>> = (0..batch)
                .map(|k| taps_from(&v[k * per_sample..], &shapes))
                .collect();
            let s: Vec<Vec<AttentionTap>> = (0..batch)
                .map(|k| taps_from(&v[(batch + k) * per_sample..], &shapes))
                .collect();
            (t, s)
        };
        let (t, s) = unpack(&x);
        let out = distill_loss_with_grad(&t, &s, &sites).unwrap();
        let mut analytic = Vec::new();
        for g in out.grad_teacher.iter().chain(&out.grad_student) {
            for m in g {
                analytic.extend(m.iter());
            }
        }
        let mut f = |v: &[f64]| {
            let (t, s) = unpack(v);
            distill_loss(&t, &s, &sites).unwrap().0
        };
        let coords: Vec<usize> = (0..x.len()).collect();
        check_grad(&format!("distill seed {seed}"), &mut f, &x, &analytic, &coords)?;
    }
    Ok(())
}

pub fn logit_kd_gradients_match_finite_differences() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (b, n) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let temp = [1.0, 2.0, 4.0][seed as usize % 3];
        let x = random_vec(2 * b * n, -5.0, 5.0, &mut rng);
        let split = |v: &[f64]| {
            (
                Array2::from_shape_vec((b, n), v[..b * n].to_vec()).unwrap(),
                Array2::from_shape_vec((b, n), v[b * n..].to_vec()).unwrap(),
            )
        };
        let (lt, ls) = split(&x);
        let (_, gt, gs) = logit_kd_loss_with_grad(lt.view(), ls.view(), temp).unwrap();
        let mut analytic = gt.into_raw_vec_and_offset().0;
        analytic.extend(gs.iter());
        let mut f = |v: &[f64]| {
            let (lt, ls) = split(v);
            logit_kd_loss(lt.view(), ls.view(), temp).unwrap()
        };
        let coords: Vec<usize> = (0..x.len()).collect();
        check_grad(&format!("kd seed {seed}"), &mut f, &x, &analytic, &coords)?;
    }
    Ok(())
}

fn tiny_config(seed: u64) -> BackboneConfig {
    let mut cfg = BackboneConfig {
        input_size: (8, 8),
        stem_width: 4,
        stem_stride: 1,
        stage_widths: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        stage_strides: vec![1, 2],
        block_kind: BlockKind::Basic,
        embedding_dim: 6,
        attention_site_policy: SitePolicy::AllEligibleConvs,
        reduction_ratio: None,
    };
    if seed % 2 == 1 {
        cfg.block_kind = BlockKind::Bottleneck;
        cfg.stage_widths = vec![2, 4];
        cfg.attention_site_policy = SitePolicy::PerBlock;
    }
    cfg
}

pub fn backbone_gradients_match_finite_differences() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let cfg = tiny_config(seed);
        let mut net = Backbone::build(&cfg, seed).unwrap();
        // zero biases put all-zero receptive fields exactly on ReLU kinks and
        // max-pool ties; move to a generic point
        for e in net.layout.entries.clone() {
            if e.name.ends_with(".bias") {
                for v in &mut net.params[e.offset..e.offset + e.len()] {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
        }
        let input = random_map((3, 8, 8), -1.0, 1.0, &mut rng);
        let (out, trace) = net.forward_trace(&input).unwrap();
        let c_emb = random_vec(cfg.embedding_dim, -1.0, 1.0, &mut rng);
        let c_taps: Vec<Array3<f64>> = out
            .taps
            .iter()
            .map(|t| random_map(t.map.dim(), -1.0, 1.0, &mut rng))
            .collect();
        let objective = |o: &askd::backbone::ForwardResult| {
            let mut v: f64 = o.embedding.iter().zip(&c_emb).map(|(a, b)| a * b).sum();
            for (t, c) in o.taps.iter().zip(&c_taps) {
                v += (&t.map * c).sum();
            }
            v
        };
        let mut analytic = vec![0.0; net.num_params()];
        net.backward(&trace, &c_emb, Some(&c_taps), &mut analytic).unwrap();
        let mut probe = net.clone();
        let mut f = |p: &[f64]| {
            probe.params.copy_from_slice(p);
            objective(&probe.forward_one(&input).unwrap())
        };
        let coords = sample_coords(net.num_params(), 400, &mut rng);
        check_grad(
            &format!("backbone seed {seed}"),
            &mut f,
            &net.params.clone(),
            &analytic,
            &coords,
        )?;
    }
    Ok(())
}
