//! Teacher and student training loops.
//!
//! The teacher is trained on HR images with the ArcFace objective. The student
//! sees the paired LR images and adds the attention distillation term against
//! the frozen teacher's maps on the corresponding HR images.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTap, FeatureMap};
use crate::backbone::{image_to_tensor, Backbone, BackboneConfig, ForwardTrace};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::degrade::{load_rgb, ImagePairRecord};
use crate::error::{Error, Result};
use crate::evaluate::{make_pairs, verification_accuracy, FoldAssignment, LabelledImage};
use crate::losses::{
    arcface_loss_with_grad, distill_loss_with_grad, logit_kd_loss_with_grad, stack_rows, total_loss,
    ClassHead, CosineLogits, DistillConfig, LossBreakdown, MarginConfig,
};

const HEAD_SEED_SALT: u64 = 0x68656164;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub margin: MarginConfig,
    pub distill: DistillConfig,
    /// Fraction of identities held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            base_lr: 0.1,
            lr_decay_epochs: vec![6, 11, 15, 17],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            margin: MarginConfig::default(),
            distill: DistillConfig::default(),
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(k, m));
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor", format!("must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs", "must be strictly increasing".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", format!("must lie in [0, 1), got {}", self.val_fraction));
        }
        self.margin.validate()?;
        self.distill.validate()
    }
}

/// Step-decayed learning rate for a 0-based epoch.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Training(format!(
            "epoch {epoch} outside the {}-epoch schedule",
            cfg.epochs
        )));
    }
    let k = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
    let inv = 1.0 / cfg.lr_decay_factor;
    // dividing by an integral inverse keeps values like 0.1 / 100 == 0.001 exact
    Ok(if inv.fract() == 0.0 {
        cfg.base_lr / inv.powi(k)
    } else {
        cfg.base_lr * cfg.lr_decay_factor.powi(k)
    })
}

/// SGD with momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// One record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub wall_time: f64,
}

/// In-memory training data. `teacher_inputs` holds the HR counterparts for
/// student training.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: Vec<FeatureMap>,
    pub teacher_inputs: Option<Vec<FeatureMap>>,
    pub labels: Vec<usize>,
}

impl TrainingSet {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map(|m| m + 1).unwrap_or(0)
    }

    fn num_identities(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

fn load_tensors(paths: &[&PathBuf]) -> Result<Vec<FeatureMap>> {
    paths
        .par_iter()
        .map(|p| load_rgb(p).map(|img| image_to_tensor(&img)))
        .collect()
}

/// Loads HR images only (`lr == false`), or LR inputs paired with HR teacher inputs.
pub fn load_training_set(records: &[ImagePairRecord], lr: bool) -> Result<TrainingSet> {
    let hr: Vec<&PathBuf> = records.iter().map(|r| &r.hr_path).collect();
    let labels = records.iter().map(|r| r.identity_label).collect();
    if lr {
        let lr_paths: Vec<&PathBuf> = records.iter().map(|r| &r.lr_path).collect();
        Ok(TrainingSet {
            inputs: load_tensors(&lr_paths)?,
            teacher_inputs: Some(load_tensors(&hr)?),
            labels,
        })
    } else {
        Ok(TrainingSet {
            inputs: load_tensors(&hr)?,
            teacher_inputs: None,
            labels,
        })
    }
}

/// Splits sample indices into (train, validation) by identity. Identities are
/// ranked by a seeded hash so the split does not depend on label order.
pub fn split_by_identity(labels: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n_val = ((ids.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(ids.len().saturating_sub(2));
    ids.sort_by_key(|&l| (crate::evaluate::stable_hash(seed, &l.to_string()), l));
    let val: std::collections::BTreeSet<usize> = ids[..n_val].iter().copied().collect();
    (0..labels.len()).partition(|&i| !val.contains(&labels[i]))
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(epoch as u64))
}

fn init_model(cfg: &BackboneConfig, classes: usize, seed: u64) -> Result<(Backbone, ClassHead)> {
    let net = Backbone::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SEED_SALT);
    Ok((net, ClassHead::random(cfg.embedding_dim, classes, &mut rng)))
}

struct StepResult {
    loss: LossBreakdown,
    grad_backbone: Vec<f64>,
    grad_head: Array2<f64>,
}

fn sum_in_order(parts: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut total = vec![0.0; n];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Back-propagates per-sample embedding and tap gradients in parallel.
fn backbone_grads(
    net: &Backbone,
    traces: &[ForwardTrace],
    d_emb: ArrayView2<f64>,
    d_taps: Option<&[Vec<ndarray::Array3<f64>>]>,
) -> Result<Vec<f64>> {
    let n = net.num_params();
    let parts = traces
        .par_iter()
        .enumerate()
        .map(|(k, trace)| {
            let mut g = vec![0.0; n];
            let row = d_emb.row(k).to_vec();
            net.backward(trace, &row, d_taps.map(|t| t[k].as_slice()), &mut g)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_in_order(parts, n))
}

fn teacher_step(
    net: &Backbone,
    head: &ClassHead,
    set: &TrainingSet,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<StepResult> {
    let (outs, traces): (Vec<_>, Vec<_>) = batch
        .par_iter()
        .map(|&i| net.forward_trace(&set.inputs[i]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let emb = stack_rows(&outs.iter().map(|o| o.embedding.to_vec()).collect::<Vec<_>>());
    let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
    let ml = arcface_loss_with_grad(emb.view(), &labels, head, &cfg.margin)?;
    let grad_backbone = backbone_grads(net, &traces, ml.grad_embeddings.view(), None)?;
    let no_distill = DistillConfig {
        lambda_distill: 0.0,
        use_logit_kd: false,
        ..cfg.distill.clone()
    };
    Ok(StepResult {
        loss: total_loss(ml.loss, 0.0, 0.0, &no_distill)?,
        grad_backbone,
        grad_head: ml.grad_head,
    })
}

struct StudentContext<'a> {
    teacher: &'a Checkpoint,
    sites: Vec<String>,
}

fn student_step(
    net: &Backbone,
    head: &ClassHead,
    set: &TrainingSet,
    batch: &[usize],
    cfg: &TrainConfig,
    ctx: &StudentContext,
) -> Result<StepResult> {
    let hr = set
        .teacher_inputs
        .as_ref()
        .ok_or_else(|| Error::Training("student training needs HR teacher inputs".into()))?;
    let teacher_out = batch
        .par_iter()
        .map(|&i| ctx.teacher.backbone.forward_one(&hr[i]))
        .collect::<Result<Vec<_>>>()?;
    let (outs, traces): (Vec<_>, Vec<_>) = batch
        .par_iter()
        .map(|&i| net.forward_trace(&set.inputs[i]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let emb = stack_rows(&outs.iter().map(|o| o.embedding.to_vec()).collect::<Vec<_>>());
    let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
    let ml = arcface_loss_with_grad(emb.view(), &labels, head, &cfg.margin)?;
    let mut d_emb = ml.grad_embeddings;
    let mut grad_head = ml.grad_head;

    let taps_t: Vec<Vec<AttentionTap>> = teacher_out.iter().map(|o| o.taps.clone()).collect();
    let taps_s: Vec<Vec<AttentionTap>> = outs.iter().map(|o| o.taps.clone()).collect();
    let lambda = cfg.distill.lambda_distill;
    let dist = match distill_loss_with_grad(&taps_t, &taps_s, &ctx.sites) {
        Ok(d) => Some(d),
        // with λ = 0 the distance is only logged; a degenerate map must not stop training
        Err(e) if lambda == 0.0 => {
            log::debug!("distill distance not logged for this step: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    let (dist_loss, per_site, d_taps) = match dist {
        Some(d) => {
            let d_taps: Option<Vec<Vec<ndarray::Array3<f64>>>> = (lambda > 0.0).then(|| {
                d.grad_student
                    .into_iter()
                    .map(|v| v.into_iter().map(|g| g * lambda).collect())
                    .collect()
            });
            (d.loss, d.per_site, d_taps)
        }
        None => (f64::NAN, Default::default(), None),
    };

    let mut kd = 0.0;
    if cfg.distill.use_logit_kd {
        let s = cfg.margin.scale;
        let t_emb = stack_rows(&teacher_out.iter().map(|o| o.embedding.to_vec()).collect::<Vec<_>>());
        let t_logits = CosineLogits::new(t_emb.view(), &ctx.teacher.head)?.cos * s;
        let s_cos = CosineLogits::new(emb.view(), head)?;
        let s_logits = &s_cos.cos * s;
        let (loss, _, g_s) = logit_kd_loss_with_grad(t_logits.view(), s_logits.view(), cfg.distill.kd_temperature)?;
        kd = loss;
        let (dx, dw) = s_cos.backward(&(g_s * (s * cfg.distill.kd_weight)));
        d_emb += &dx;
        grad_head += &dw;
    }

    let grad_backbone = backbone_grads(net, &traces, d_emb.view(), d_taps.as_deref())?;
    let mut loss = total_loss(ml.loss, if dist_loss.is_nan() { 0.0 } else { dist_loss }, kd, &cfg.distill)?;
    loss.distill_loss = dist_loss;
    loss.per_site_rho = per_site;
    Ok(StepResult {
        loss,
        grad_backbone,
        grad_head,
    })
}

fn check_set(set: &TrainingSet) -> Result<()> {
    if set.inputs.len() != set.labels.len() {
        return Err(Error::Data("inputs and labels differ in length".into()));
    }
    if set.num_identities() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 identities, found {}",
            set.num_identities()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    backbone_cfg: &BackboneConfig,
    set: &TrainingSet,
    cfg: &TrainConfig,
    role: &str,
    student: Option<&StudentContext>,
    on_step: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    backbone_cfg.validate()?;
    check_set(set)?;
    let (train_idx, val_idx) = split_by_identity(&set.labels, cfg.val_fraction, cfg.seed);
    let (mut net, mut head) = init_model(backbone_cfg, set.num_classes(), cfg.seed)?;
    let mut opt_net = Sgd::new(net.num_params(), cfg.momentum, cfg.weight_decay);
    let mut opt_head = Sgd::new(head.weights.len(), cfg.momentum, cfg.weight_decay);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut last_epoch_totals = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        last_epoch_totals.clear();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let r = match student {
                Some(ctx) => student_step(&net, &head, set, batch, cfg, ctx)?,
                None => teacher_step(&net, &head, set, batch, cfg)?,
            };
            if !r.loss.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }
            opt_net.step(&mut net.params, &r.grad_backbone, lr);
            opt_head.step(head.weights.as_slice_mut().unwrap(), r.grad_head.as_slice().unwrap(), lr);
            last_epoch_totals.push(r.loss.total);
            let rec = TrainLogRecord {
                epoch,
                step,
                lr,
                loss: r.loss,
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_step(&rec);
            log.push(rec);
        }
    }
    let mut final_metrics = BTreeMap::new();
    final_metrics.insert(
        "final_epoch_mean_loss".to_string(),
        last_epoch_totals.iter().sum::<f64>() / last_epoch_totals.len().max(1) as f64,
    );
    if !val_idx.is_empty() {
        match validation_accuracy(&net, set, &val_idx, cfg.seed) {
            Ok(acc) => {
                final_metrics.insert("val_verification_accuracy".to_string(), acc);
            }
            Err(e) => log::warn!("validation skipped: {e}"),
        }
    }
    let checkpoint = Checkpoint {
        backbone: net,
        head,
        seed: cfg.seed,
        margin: cfg.margin,
        meta: CheckpointMeta {
            role: role.to_string(),
            epochs_completed: cfg.epochs,
            final_metrics,
            teacher_hash: student.map(|s| s.teacher.param_hash()),
            train_config: serde_json::to_value(cfg).ok(),
        },
    };
    Ok(TrainRun { checkpoint, log })
}

/// Verification accuracy on held-out samples, 10 round-robin folds.
pub fn validation_accuracy(net: &Backbone, set: &TrainingSet, idx: &[usize], seed: u64) -> Result<f64> {
    let images: Vec<LabelledImage> = idx
        .iter()
        .map(|&i| LabelledImage {
            path: PathBuf::from(i.to_string()),
            label: set.labels[i],
            identity: set.labels[i].to_string(),
        })
        .collect();
    let pairs = make_pairs(&images, 10, 300, FoldAssignment::RoundRobin, seed)?;
    let embed = |p: &std::path::Path| -> Result<Array1<f64>> {
        let i: usize = p.to_string_lossy().parse().expect("index path");
        net.forward_one(&set.inputs[i]).map(|o| o.embedding)
    };
    verification_accuracy(&pairs, embed).map(|r| r.accuracy)
}

/// Trains a teacher on `set.inputs` (HR images).
pub fn train_teacher(
    set: &TrainingSet,
    backbone_cfg: &BackboneConfig,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainRun> {
    run_loop(backbone_cfg, set, cfg, "teacher", None, on_step)
}

/// Trains a student on `set.inputs` (LR) against the frozen `teacher` on
/// `set.teacher_inputs` (HR).
pub fn train_student(
    set: &TrainingSet,
    teacher: &Checkpoint,
    backbone_cfg: &BackboneConfig,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainRun> {
    backbone_cfg.validate()?;
    let student_sites = crate::backbone::enumerate_sites(backbone_cfg);
    if teacher.backbone.sites() != student_sites.as_slice() {
        return Err(Error::Alignment(
            "teacher and student backbones enumerate different attention sites".into(),
        ));
    }
    if teacher.head.classes() != set.num_classes() {
        return Err(Error::Alignment(format!(
            "teacher head has {} classes, data has {}",
            teacher.head.classes(),
            set.num_classes()
        )));
    }
    let sites = cfg.distill.resolve_sites(&teacher.backbone.site_ids())?;
    let before = teacher.param_hash();
    let ctx = StudentContext { teacher, sites };
    let run = run_loop(backbone_cfg, set, cfg, "student", Some(&ctx), on_step)?;
    if teacher.param_hash() != before {
        return Err(Error::Training("teacher parameters changed during student training".into()));
    }
    Ok(run)
}
