//! Teacher/student attention agreement and attention-map visualisation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, FeatureMap};
use crate::backbone::Backbone;
use crate::error::{Error, Result};

/// Sample Pearson correlation; constant input is undefined.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCorrelation {
    pub site_id: String,
    pub kind: AttentionKind,
    /// 1-based residual block index.
    pub block: usize,
    /// Pearson r over all map entries of all images; `None` when either
    /// side is constant (e.g. a collapsed channel MLP).
    pub r: Option<f64>,
    pub per_image_mean: f64,
    pub per_image_std: f64,
    /// Images whose per-image r was defined.
    pub per_image_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCorrelation {
    /// `B{i}-S` or `B{i}-C`.
    pub label: String,
    pub block: usize,
    pub kind: AttentionKind,
    pub mean_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub samples: usize,
    pub sites: Vec<SiteCorrelation>,
    pub blocks: Vec<BlockCorrelation>,
}

impl CorrelationReport {
    pub fn site(&self, site_id: &str, kind: AttentionKind) -> Option<&SiteCorrelation> {
        self.sites.iter().find(|s| s.site_id == site_id && s.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("attention correlation over {} images\n\n", self.samples);
        let _ = writeln!(s, "{:<24} {:<8} {:>9} {:>9} {:>9}", "site", "kind", "pooled_r", "img_mean", "img_std");
        for c in &self.sites {
            let _ = writeln!(
                s,
                "{:<24} {:<8} {:>9} {:>9.5} {:>9.5}",
                c.site_id,
                c.kind.as_str(),
                fmt_r(c.r),
                c.per_image_mean,
                c.per_image_std
            );
        }
        s.push('\n');
        for b in &self.blocks {
            let _ = writeln!(s, "{:<8} {:>9.5}", b.label, b.mean_r);
        }
        s
    }

    /// `key=value` lines, one per site/kind and per block label.
    pub fn to_kv(&self) -> String {
        let mut s = format!("samples={}\n", self.samples);
        for c in &self.sites {
            let _ = writeln!(s, "r.{}.{}={}", c.site_id, c.kind.as_str(), fmt_r(c.r));
        }
        for b in &self.blocks {
            let _ = writeln!(s, "block.{}={}", b.label, b.mean_r);
        }
        s
    }
}

fn fmt_r(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".to_string(), |r| format!("{r:.5}"))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Correlates the teacher's maps on `hr[i]` with the student's maps on `lr[i]`.
pub fn attention_correlation(
    teacher: &Backbone,
    student: &Backbone,
    hr: &[FeatureMap],
    lr: &[FeatureMap],
) -> Result<CorrelationReport> {
    if hr.is_empty() {
        return Err(Error::Data("no images to correlate".into()));
    }
    if hr.len() != lr.len() {
        return Err(Error::Alignment(format!("{} HR vs {} LR images", hr.len(), lr.len())));
    }
    if teacher.sites() != student.sites() {
        return Err(Error::Alignment("teacher and student attention sites differ".into()));
    }
    let pairs: Vec<(Vec<_>, Vec<_>)> = hr
        .par_iter()
        .zip(lr.par_iter())
        .map(|(h, l)| Ok((teacher.forward_one(h)?.taps, student.forward_one(l)?.taps)))
        .collect::<Result<_>>()?;

    let mut sites = Vec::new();
    for (si, spec) in teacher.sites().iter().enumerate() {
        for (ki, kind) in [AttentionKind::Channel, AttentionKind::Spatial].into_iter().enumerate() {
            let tap = 2 * si + ki;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut per_image = Vec::new();
            for (t, s) in &pairs {
                let (a, b) = (&t[tap].map, &s[tap].map);
                xs.extend(a.iter());
                ys.extend(b.iter());
                if let Ok(r) = pearson_r(a.as_slice().unwrap(), b.as_slice().unwrap()) {
                    per_image.push(r);
                }
            }
            let r = match pearson_r(&xs, &ys) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            };
            let (m, sd) = mean_std(&per_image);
            sites.push(SiteCorrelation {
                site_id: spec.site_id.clone(),
                kind,
                block: spec.global_block,
                r,
                per_image_mean: m,
                per_image_std: sd,
                per_image_count: per_image.len(),
            });
        }
    }
    let mut grouped: BTreeMap<(usize, char), (AttentionKind, Vec<f64>)> = BTreeMap::new();
    for s in &sites {
        let Some(r) = s.r else { continue };
        grouped
            .entry((s.block, s.kind.letter()))
            .or_insert_with(|| (s.kind, Vec::new()))
            .1
            .push(r);
    }
    let blocks = grouped
        .into_iter()
        .map(|((block, letter), (kind, rs))| BlockCorrelation {
            label: format!("B{block}-{letter}"),
            block,
            kind,
            mean_r: rs.iter().sum::<f64>() / rs.len() as f64,
        })
        .collect();
    Ok(CorrelationReport {
        samples: hr.len(),
        sites,
        blocks,
    })
}

/// Min-max normalization to [0, 1]; a map with range below 1e-9 becomes 0.5 everywhere.
pub fn normalize_map(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo >= 1e-9) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Blue-cyan-yellow-red ramp.
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r * 255.0, g * 255.0, b * 255.0]
}

/// Bilinear sample of an `h×w` grid at image pixel centres of a `W×H` image.
fn upsample(norm: &[f64], h: usize, w: usize, out_w: u32, out_h: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity((out_w * out_h) as usize);
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy.fract());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx.fract());
            let x1 = (x0 + 1).min(w - 1);
            let top = norm[y0 * w + x0] * (1.0 - fx) + norm[y0 * w + x1] * fx;
            let bot = norm[y1 * w + x0] * (1.0 - fx) + norm[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Heat-map of a normalized spatial map blended over a grayscale copy of `image`.
pub fn overlay(image: &RgbImage, map: &FeatureMap) -> RgbImage {
    let (_, h, w) = map.dim();
    let norm = normalize_map(map.as_slice().expect("standard layout"));
    let (iw, ih) = image.dimensions();
    let up = upsample(&norm, h, w, iw, ih);
    let mut out = RgbImage::new(iw, ih);
    for (x, y, px) in image.enumerate_pixels() {
        let g = 0.299 * px.0[0] as f64 + 0.587 * px.0[1] as f64 + 0.114 * px.0[2] as f64;
        let c = jet(up[(y * iw + x) as usize]);
        let mix = |k: usize| (0.5 * g + 0.5 * c[k]).round().clamp(0.0, 255.0) as u8;
        out.put_pixel(x, y, Rgb([mix(0), mix(1), mix(2)]));
    }
    out
}

/// Writes `<image>_<site>.png` spatial-attention overlays for every image and site.
pub fn export_attention_overlays(
    net: &Backbone,
    images: &[(String, RgbImage)],
    sites: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let known = net.site_ids();
    if let Some(s) = sites.iter().find(|s| !known.contains(s)) {
        return Err(Error::Alignment(format!("unknown attention site `{s}`")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, img) in images {
        let out = net.forward_one(&crate::backbone::image_to_tensor(img))?;
        for site in sites {
            let tap = out
                .taps
                .iter()
                .find(|t| &t.site_id == site && t.kind == AttentionKind::Spatial)
                .expect("known site");
            let path = out_dir.join(format!("{name}_{site}.png"));
            overlay(img, &tap.map).save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            written.push(path);
        }
    }
    Ok(written)
}
