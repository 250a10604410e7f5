//! Procedural face-like identities for desk-scale experiments.
//!
//! Each identity owns a skin tone and four landmarks (two eyes, nose, mouth)
//! with its own placement, size, color and oriented fine texture. Images add
//! pose jitter, illumination changes, sensor noise and identity-independent
//! distractor blobs. The fine texture does not survive strong downsampling,
//! so low-resolution recognition has to fall back on coarse cues.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            images_per_identity: 40,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Landmark {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    /// Texture orientation and period in pixels.
    angle: f64,
    period: f64,
    texture: f64,
}

#[derive(Debug, Clone)]
pub struct Identity {
    skin: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    landmarks: Vec<Landmark>,
}

const CANONICAL: [(f64, f64, f64, f64); 4] = [
    // cx, cy, rx, ry as fractions of the image size
    (0.33, 0.38, 0.08, 0.05),
    (0.67, 0.38, 0.08, 0.05),
    (0.50, 0.56, 0.05, 0.09),
    (0.50, 0.76, 0.14, 0.05),
];

impl Identity {
    pub fn sample(seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d) ^ index as u64);
        let skin = [
            rng.gen_range(140.0..210.0),
            rng.gen_range(100.0..160.0),
            rng.gen_range(80.0..130.0),
        ];
        let landmarks = CANONICAL
            .iter()
            .map(|&(cx, cy, rx, ry)| Landmark {
                cx: cx + rng.gen_range(-0.04..0.04),
                cy: cy + rng.gen_range(-0.04..0.04),
                rx: rx * rng.gen_range(0.8..1.25),
                ry: ry * rng.gen_range(0.8..1.25),
                color: [
                    rng.gen_range(20.0..120.0),
                    rng.gen_range(20.0..120.0),
                    rng.gen_range(20.0..120.0),
                ],
                angle: rng.gen_range(0.0..PI),
                period: rng.gen_range(2.0..4.0),
                texture: rng.gen_range(40.0..80.0),
            })
            .collect();
        Self {
            skin,
            face_rx: rng.gen_range(0.36..0.44),
            face_ry: rng.gen_range(0.44..0.50),
            landmarks,
        }
    }

    /// Renders one image of this identity.
    pub fn render<R: Rng>(&self, size: u32, rng: &mut R) -> RgbImage {
        let n = size as f64;
        let (dx, dy) = (rng.gen_range(-0.05..0.05) * n, rng.gen_range(-0.05..0.05) * n);
        let gain = rng.gen_range(0.8..1.2);
        let bias = rng.gen_range(-15.0..15.0);
        let bg = [
            rng.gen_range(30.0..220.0),
            rng.gen_range(30.0..220.0),
            rng.gen_range(30.0..220.0),
        ];
        let bg_slope = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let distractors: Vec<Landmark> = (0..rng.gen_range(1..4))
            .map(|_| Landmark {
                cx: rng.gen_range(0.0..1.0),
                cy: rng.gen_range(0.0..1.0),
                rx: rng.gen_range(0.04..0.10),
                ry: rng.gen_range(0.04..0.10),
                color: [
                    rng.gen_range(0.0..255.0),
                    rng.gen_range(0.0..255.0),
                    rng.gen_range(0.0..255.0),
                ],
                angle: rng.gen_range(0.0..PI),
                period: rng.gen_range(2.0..4.0),
                texture: rng.gen_range(0.0..80.0),
            })
            .collect();
        let noise = Normal::new(0.0, 6.0).unwrap();
        let mut img = RgbImage::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - dx, y as f64 + 0.5 - dy);
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = bg[k] + bg_slope[0] * (px - n / 2.0) + bg_slope[1] * (py - n / 2.0);
                }
                let fx = (px / n - 0.5) / self.face_rx;
                let fy = (py / n - 0.52) / self.face_ry;
                if fx * fx + fy * fy <= 1.0 {
                    c = self.skin;
                }
                for lm in self.landmarks.iter().chain(&distractors) {
                    paint(&mut c, lm, px, py, n);
                }
                let mut out = [0u8; 3];
                for k in 0..3 {
                    let v = gain * c[k] + bias + noise.sample(rng);
                    out[k] = v.round().clamp(0.0, 255.0) as u8;
                }
                img.put_pixel(x, y, Rgb(out));
            }
        }
        img
    }
}

fn paint(c: &mut [f64; 3], lm: &Landmark, px: f64, py: f64, n: f64) {
    let u = (px - lm.cx * n) / (lm.rx * n);
    let v = (py - lm.cy * n) / (lm.ry * n);
    let r2 = u * u + v * v;
    if r2 > 1.0 {
        return;
    }
    let along = (px - lm.cx * n) * lm.angle.cos() + (py - lm.cy * n) * lm.angle.sin();
    let wave = (2.0 * PI * along / lm.period).sin() * lm.texture;
    // soft edge
    let alpha = (1.0 - r2).sqrt().min(1.0);
    for k in 0..3 {
        c[k] = (1.0 - alpha) * c[k] + alpha * (lm.color[k] + wave);
    }
}

/// Writes `out_dir/id###/img###.png` and returns the written paths.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if cfg.identities < 2 || cfg.images_per_identity == 0 || cfg.size < 8 {
        return Err(Error::config(
            "identities",
            "need at least 2 identities, 1 image each and size >= 8",
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.identities)
        .flat_map(|i| (0..cfg.images_per_identity).map(move |k| (i, k)))
        .collect();
    for i in 0..cfg.identities {
        let dir = out_dir.join(format!("id{i:03}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    jobs.par_iter()
        .map(|&(i, k)| {
            let ident = Identity::sample(cfg.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ ((i as u64) << 32 | k as u64).wrapping_mul(0x9e3779b97f4a7c15),
            );
            let img = ident.render(cfg.size, &mut rng);
            let path = out_dir.join(format!("id{i:03}")).join(format!("img{k:03}.png"));
            img.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}
