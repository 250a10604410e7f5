//! Training objectives: normalized softmax, additive angular margin (ArcFace),
//! attention cosine distance, temperature-scaled logit distillation and the
//! weighted total. Every loss with trainable inputs has a `*_with_grad`
//! variant returning analytic gradients.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::FRAC_PI_2;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionTap};
use crate::error::{Error, Result};

/// Keeps `cos θ` this far from ±1 when forming the margin-logit slope.
pub const COS_EPS: f64 = 1e-7;
/// Attention vectors with a smaller L2 norm are rejected.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            scale: 64.0,
            margin: 0.5,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("margin_s", format!("scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::config(
                "margin_m",
                format!("margin must lie in [0, pi/2), got {}", self.margin),
            ));
        }
        Ok(())
    }
}

/// Bias-free classification layer; column `j` of the d×n weight matrix is
/// the proxy of class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    pub weights: Array2<f64>,
}

impl ClassHead {
    pub fn new(weights: Array2<f64>) -> Self {
        Self { weights }
    }

    pub fn random<R: Rng>(dim: usize, classes: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (dim + classes) as f64).sqrt();
        Self {
            weights: Array2::from_shape_fn((dim, classes), |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn classes(&self) -> usize {
        self.weights.ncols()
    }
}

/// Row-normalized embeddings against column-normalized class weights.
#[derive(Debug, Clone)]
pub struct CosineLogits {
    x_hat: Array2<f64>,
    x_norm: Vec<f64>,
    w_hat: Array2<f64>,
    w_norm: Vec<f64>,
    /// B×n cosine matrix.
    pub cos: Array2<f64>,
}

impl CosineLogits {
    pub fn new(embeddings: ArrayView2<f64>, head: &ClassHead) -> Result<Self> {
        if embeddings.ncols() != head.dim() {
            return Err(Error::Dimension(format!(
                "embedding dim {} does not match head dim {}",
                embeddings.ncols(),
                head.dim()
            )));
        }
        let mut x_hat = embeddings.to_owned();
        let mut x_norm = Vec::with_capacity(x_hat.nrows());
        for (i, mut row) in x_hat.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Normalization(format!("embedding {i} has norm {n}")));
            }
            row /= n;
            x_norm.push(n);
        }
        let mut w_hat = head.weights.clone();
        let mut w_norm = Vec::with_capacity(w_hat.ncols());
        for (j, mut col) in w_hat.columns_mut().into_iter().enumerate() {
            let n = col.dot(&col).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Normalization(format!("class weight {j} has norm {n}")));
            }
            col /= n;
            w_norm.push(n);
        }
        let cos = x_hat.dot(&w_hat);
        Ok(Self {
            x_hat,
            x_norm,
            w_hat,
            w_norm,
            cos,
        })
    }

    /// Maps dL/dcos (B×n) to (dL/dx, dL/dW).
    pub fn backward(&self, d_cos: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        // d cos_ij / d x̂_i = ŵ_j ; project through x̂ = x/‖x‖.
        let mut dx = d_cos.dot(&self.w_hat.t());
        for ((mut g, xh), n) in dx.rows_mut().into_iter().zip(self.x_hat.rows()).zip(&self.x_norm) {
            let radial = g.dot(&xh);
            g.scaled_add(-radial, &xh);
            g /= *n;
        }
        let mut dw = self.x_hat.t().dot(d_cos);
        for ((mut g, wh), n) in dw
            .columns_mut()
            .into_iter()
            .zip(self.w_hat.columns())
            .zip(&self.w_norm)
        {
            let radial = g.dot(&wh);
            g.scaled_add(-radial, &wh);
            g /= *n;
        }
        (dx, dw)
    }
}

/// Loss value with gradients w.r.t. the embeddings and head weights.
#[derive(Debug, Clone)]
pub struct MarginLoss {
    pub loss: f64,
    pub grad_embeddings: Array2<f64>,
    pub grad_head: Array2<f64>,
    /// Scaled logits fed to the softmax (with the margin applied to targets).
    pub logits: Array2<f64>,
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Dimension(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// ArcFace loss with gradients. With `margin == 0` the target logit is the
/// plain cosine, so the result is bit-identical to normalized softmax.
pub fn arcface_loss_with_grad(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    head: &ClassHead,
    cfg: &MarginConfig,
) -> Result<MarginLoss> {
    cfg.validate()?;
    let cl = CosineLogits::new(embeddings, head)?;
    let (b, n) = cl.cos.dim();
    check_labels(labels, b, n)?;
    let s = cfg.scale;
    let m = cfg.margin;

    let mut logits = cl.cos.mapv(|c| s * c);
    // d(target logit)/d(cos) per sample
    let mut target_slope = vec![s; b];
    if m != 0.0 {
        let (cm, sm) = (m.cos(), m.sin());
        for (i, &y) in labels.iter().enumerate() {
            // cos(θ + m) expanded, exact at |cos θ| = 1 where acos of a
            // clamped value would be off by sqrt(2ε)
            let c = cl.cos[[i, y]].clamp(-1.0, 1.0);
            logits[[i, y]] = s * (c * cm - (1.0 - c * c).sqrt() * sm);
            // the clamp only bounds the 1/sin θ factor of the slope
            let ce = c.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS);
            target_slope[i] = s * (cm + sm * ce / (1.0 - ce * ce).sqrt());
        }
    }

    let mut loss = 0.0;
    let mut d_cos = Array2::zeros((b, n));
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[y];
        for j in 0..n {
            let p = (row[j] - lse).exp();
            let g = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
            d_cos[[i, j]] = g * if j == y { target_slope[i] } else { s };
        }
    }
    let (grad_embeddings, grad_head) = cl.backward(&d_cos);
    Ok(MarginLoss {
        loss: loss / b as f64,
        grad_embeddings,
        grad_head,
        logits,
    })
}

pub fn arcface_loss(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    head: &ClassHead,
    cfg: &MarginConfig,
) -> Result<f64> {
    arcface_loss_with_grad(embeddings, labels, head, cfg).map(|l| l.loss)
}

/// Mean negative log-softmax of `s·cos θ_j` at the true class.
pub fn normalized_softmax_loss(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    head: &ClassHead,
    scale: f64,
) -> Result<f64> {
    arcface_loss(
        embeddings,
        labels,
        head,
        &MarginConfig { scale, margin: 0.0 },
    )
}

/// `s·cos θ_j` logits without margin, as used for logit distillation and inference.
pub fn cosine_logits(embeddings: ArrayView2<f64>, head: &ClassHead, scale: f64) -> Result<Array2<f64>> {
    Ok(CosineLogits::new(embeddings, head)?.cos.mapv(|c| c * scale))
}

/// Cosine distance `1 - <a/‖a‖, b/‖b‖>` with gradients w.r.t. both vectors.
pub fn cosine_distance_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "attention maps have {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na >= MIN_NORM) || !(nb >= MIN_NORM) {
        return Err(Error::Distance(format!(
            "attention map norm below {MIN_NORM} ({na}, {nb})"
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // rounding can push |cos| a hair past 1 for parallel maps
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(x / (na * nb) - cos * y / (nb * nb)))
        .collect();
    Ok((1.0 - cos, ga, gb))
}

/// Cosine distance between two flattened attention maps of identical shape.
pub fn attention_cosine_distance(map_t: &Array3<f64>, map_s: &Array3<f64>) -> Result<f64> {
    if map_t.dim() != map_s.dim() {
        return Err(Error::Dimension(format!(
            "attention shapes differ: {:?} vs {:?}",
            map_t.dim(),
            map_s.dim()
        )));
    }
    let t: Vec<f64> = map_t.iter().copied().collect();
    let s: Vec<f64> = map_s.iter().copied().collect();
    cosine_distance_with_grad(&t, &s).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda_distill: f64,
    /// Site ids to distill; empty means every enumerated site.
    pub sites: Vec<String>,
    pub use_logit_kd: bool,
    pub kd_temperature: f64,
    pub kd_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_distill: 5.0,
            sites: Vec::new(),
            use_logit_kd: false,
            kd_temperature: 4.0,
            kd_weight: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_distill >= 0.0 && self.lambda_distill.is_finite()) {
            return Err(Error::config(
                "lambda_distill",
                format!("must be non-negative, got {}", self.lambda_distill),
            ));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::config(
                "kd_temperature",
                format!("must be positive, got {}", self.kd_temperature),
            ));
        }
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::config(
                "kd_weight",
                format!("must be non-negative, got {}", self.kd_weight),
            ));
        }
        Ok(())
    }

    /// Resolves the configured sites against the backbone's enumerated sites.
    pub fn resolve_sites(&self, available: &[String]) -> Result<Vec<String>> {
        if self.sites.is_empty() {
            return Ok(available.to_vec());
        }
        for s in &self.sites {
            if !available.contains(s) {
                return Err(Error::Alignment(format!("distill site `{s}` is not a backbone site")));
            }
        }
        Ok(self.sites.clone())
    }
}

/// Batch-averaged `(rho_channel, rho_spatial)` per site.
pub type SiteRho = BTreeMap<String, (f64, f64)>;

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub loss: f64,
    pub per_site: SiteRho,
    /// Gradients aligned with the teacher taps, per batch element.
    pub grad_teacher: Vec<Vec<Array3<f64>>>,
    /// Gradients aligned with the student taps, per batch element.
    pub grad_student: Vec<Vec<Array3<f64>>>,
}

fn tap_index(taps: &[AttentionTap]) -> HashMap<(&str, AttentionKind), usize> {
    taps.iter()
        .enumerate()
        .map(|(i, t)| ((t.site_id.as_str(), t.kind), i))
        .collect()
}

/// Attention distillation loss `Σ_sites (ρ_s + ρ_c) / 2`, each ρ computed per
/// batch element and averaged over the batch.
pub fn distill_loss_with_grad(
    taps_t: &[Vec<AttentionTap>],
    taps_s: &[Vec<AttentionTap>],
    sites: &[String],
) -> Result<DistillOutput> {
    if taps_t.len() != taps_s.len() || taps_t.is_empty() {
        return Err(Error::Alignment(format!(
            "teacher batch {} vs student batch {}",
            taps_t.len(),
            taps_s.len()
        )));
    }
    let batch = taps_t.len() as f64;
    let mut per_site: SiteRho = sites.iter().map(|s| (s.clone(), (0.0, 0.0))).collect();
    let mut grad_teacher = Vec::with_capacity(taps_t.len());
    let mut grad_student = Vec::with_capacity(taps_s.len());
    let mut loss = 0.0;
    for (tt, ts) in taps_t.iter().zip(taps_s) {
        let it = tap_index(tt);
        let is = tap_index(ts);
        let mut gt: Vec<Array3<f64>> = tt.iter().map(|t| Array3::zeros(t.map.dim())).collect();
        let mut gs: Vec<Array3<f64>> = ts.iter().map(|t| Array3::zeros(t.map.dim())).collect();
        for site in sites {
            for kind in [AttentionKind::Channel, AttentionKind::Spatial] {
                let key = (site.as_str(), kind);
                let (Some(&a), Some(&b)) = (it.get(&key), is.get(&key)) else {
                    return Err(Error::Alignment(format!("missing {kind} tap for site `{site}`")));
                };
                let (mt, ms) = (&tt[a].map, &ts[b].map);
                if mt.dim() != ms.dim() {
                    return Err(Error::Alignment(format!(
                        "{kind} tap shapes differ at `{site}`: {:?} vs {:?}",
                        mt.dim(),
                        ms.dim()
                    )));
                }
                let vt: Vec<f64> = mt.iter().copied().collect();
                let vs: Vec<f64> = ms.iter().copied().collect();
                let (rho, dt, ds) = cosine_distance_with_grad(&vt, &vs)?;
                loss += rho / 2.0 / batch;
                let entry = per_site.get_mut(site).unwrap();
                match kind {
                    AttentionKind::Channel => entry.0 += rho / batch,
                    AttentionKind::Spatial => entry.1 += rho / batch,
                }
                let w = 0.5 / batch;
                for (g, d) in gt[a].iter_mut().zip(&dt) {
                    *g += w * d;
                }
                for (g, d) in gs[b].iter_mut().zip(&ds) {
                    *g += w * d;
                }
            }
        }
        grad_teacher.push(gt);
        grad_student.push(gs);
    }
    Ok(DistillOutput {
        loss,
        per_site,
        grad_teacher,
        grad_student,
    })
}

pub fn distill_loss(
    taps_t: &[Vec<AttentionTap>],
    taps_s: &[Vec<AttentionTap>],
    sites: &[String],
) -> Result<(f64, SiteRho)> {
    distill_loss_with_grad(taps_t, taps_s, sites).map(|o| (o.loss, o.per_site))
}

fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut p = logits.mapv(|v| v / temperature);
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// `T² · KL(softmax(t/T) ‖ softmax(s/T))`, batch-averaged, with gradients
/// w.r.t. teacher and student logits.
pub fn logit_kd_loss_with_grad(
    logits_t: ArrayView2<f64>,
    logits_s: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if logits_t.dim() != logits_s.dim() || logits_t.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "logit shapes {:?} vs {:?}",
            logits_t.dim(),
            logits_s.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("kd_temperature", "must be positive"));
    }
    let b = logits_t.nrows() as f64;
    let t2 = temperature * temperature;
    let pt = softmax_rows(&logits_t.to_owned(), temperature);
    let ps = softmax_rows(&logits_s.to_owned(), temperature);
    let mut loss = 0.0;
    let mut gt = Array2::zeros(pt.dim());
    for ((rt, rs), mut g) in pt.rows().into_iter().zip(ps.rows()).zip(gt.rows_mut()) {
        // dKL/dpt_k = ln pt_k - ln ps_k + 1
        let dp: Vec<f64> = rt
            .iter()
            .zip(rs.iter())
            .map(|(a, c)| if *a > 0.0 { a.ln() - c.ln() + 1.0 } else { 0.0 })
            .collect();
        loss += rt
            .iter()
            .zip(rs.iter())
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, c)| a * (a.ln() - c.ln()))
            .sum::<f64>();
        let mean: f64 = rt.iter().zip(&dp).map(|(a, d)| a * d).sum();
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = rt[k] * (dp[k] - mean) / temperature * t2 / b;
        }
    }
    let gs = (&ps - &pt) * (temperature / b);
    Ok((loss * t2 / b, gt, gs))
}

pub fn logit_kd_loss(logits_t: ArrayView2<f64>, logits_s: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    logit_kd_loss_with_grad(logits_t, logits_s, temperature).map(|r| r.0)
}

/// Per-step loss decomposition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub target_loss: f64,
    pub distill_loss: f64,
    pub logit_kd_loss: f64,
    pub total: f64,
    pub per_site_rho: SiteRho,
}

/// `target + λ·distill (+ kd_weight·kd when enabled)`.
pub fn total_loss(target: f64, distill: f64, kd: f64, cfg: &DistillConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let kd_term = if cfg.use_logit_kd { cfg.kd_weight * kd } else { 0.0 };
    Ok(LossBreakdown {
        target_loss: target,
        distill_loss: distill,
        logit_kd_loss: if cfg.use_logit_kd { kd } else { 0.0 },
        total: target + cfg.lambda_distill * distill + kd_term,
        per_site_rho: SiteRho::new(),
    })
}

/// Stacks per-sample vectors into a B×d matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src.as_slice()));
    }
    out
}
