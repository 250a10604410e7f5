//! Resolution degradation: bicubic down-sampling, Gaussian blur at the low
//! resolution, and bicubic up-sampling back to the original size.
//!
//! The output of [`degrade_image`] always has the pixel dimensions of its
//! input, so HR and LR images of a pair can be fed to networks built from the
//! same configuration.

use std::fs;
use std::path::{Component, Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Parameters of the degradation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DegradeSpec {
    pub ratio: u32,
    pub blur_sigma: f64,
    pub blur_kernel_size: usize,
}

impl DegradeSpec {
    /// Spec with the default blur: `sigma = ratio / 2`, `kernel = 2 * ceil(2 * sigma) + 1`.
    pub fn new(ratio: u32) -> Self {
        let blur_sigma = ratio as f64 / 2.0;
        Self {
            ratio,
            blur_sigma,
            blur_kernel_size: default_kernel_size(blur_sigma),
        }
    }

    /// Overrides the blur parameters. A `None` kernel size derives it from `sigma`.
    pub fn with_blur(mut self, sigma: f64, kernel_size: Option<usize>) -> Self {
        self.blur_sigma = sigma;
        self.blur_kernel_size = kernel_size.unwrap_or_else(|| default_kernel_size(sigma));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 1 {
            return Err(Error::Spec(format!("ratio must be >= 1, got {}", self.ratio)));
        }
        if self.blur_kernel_size == 0 || self.blur_kernel_size.is_multiple_of(2) {
            return Err(Error::Spec(format!(
                "blur kernel size must be odd and >= 1, got {}",
                self.blur_kernel_size
            )));
        }
        if self.ratio > 1 && !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Spec(format!(
                "blur sigma must be positive when ratio > 1, got {}",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

pub fn default_kernel_size(sigma: f64) -> usize {
    2 * (2.0 * sigma).ceil().max(0.0) as usize + 1
}

/// Runs the degradation pipeline on an 8-bit RGB image.
pub fn degrade_image(image: &RgbImage, spec: &DegradeSpec) -> Result<RgbImage> {
    spec.validate()?;
    let (w, h) = image.dimensions();
    let r = spec.ratio;
    if w < r || h < r || w % r != 0 || h % r != 0 {
        return Err(Error::Dimension(format!(
            "image {w}x{h} is not divisible by ratio {r}"
        )));
    }
    if r == 1 {
        return Ok(image.clone());
    }
    let (w, h) = (w as usize, h as usize);
    let (lw, lh) = (w / r as usize, h / r as usize);

    let planes = to_planes(image);
    let out: Vec<Vec<f64>> = planes
        .iter()
        .map(|plane| {
            let low = resize_plane(plane, w, h, lw, lh);
            let blurred = gaussian_blur_plane(&low, lw, lh, spec.blur_sigma, spec.blur_kernel_size);
            resize_plane(&blurred, lw, lh, w, h)
        })
        .collect();
    Ok(from_planes(&out, w, h))
}

fn to_planes(image: &RgbImage) -> [Vec<f64>; 3] {
    let n = (image.width() * image.height()) as usize;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            planes[c][i] = px.0[c] as f64;
        }
    }
    planes
}

fn from_planes(planes: &[Vec<f64>], w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = planes[c][i].round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Catmull-Rom cubic (a = -0.5).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized filter taps for one output coordinate.
struct Taps {
    start: usize,
    weights: Vec<f64>,
}

/// Resampling taps along one axis. When shrinking, the kernel is stretched by
/// the scale factor so it also acts as the antialiasing filter.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor() as isize).max(0) as usize;
            let hi = ((center + support).ceil() as isize).min(in_len as isize - 1) as usize;
            let mut weights: Vec<f64> = (lo..=hi)
                .map(|j| cubic_kernel((j as f64 + 0.5 - center) / filter_scale))
                .collect();
            let sum: f64 = weights.iter().sum();
            if sum != 0.0 {
                weights.iter_mut().for_each(|w| *w /= sum);
            }
            Taps { start: lo, weights }
        })
        .collect()
}

/// Separable bicubic resize of a single row-major plane.
pub fn resize_plane(plane: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let xt = axis_taps(w, out_w);
    let yt = axis_taps(h, out_h);
    let mut tmp = vec![0.0; out_w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for (x, t) in xt.iter().enumerate() {
            tmp[y * out_w + x] = t
                .weights
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * row[t.start + k])
                .sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (y, t) in yt.iter().enumerate() {
        for (k, wt) in t.weights.iter().enumerate() {
            let src = &tmp[(t.start + k) * out_w..(t.start + k + 1) * out_w];
            let dst = &mut out[y * out_w..(y + 1) * out_w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    out
}

/// Reflect-101 border index (`d c b | a b c d | c b a`), periodic for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflect borders.
pub fn gaussian_blur_plane(plane: &[f64], w: usize, h: usize, sigma: f64, size: usize) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma, size);
    let r = (size / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + reflect_index(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect_index(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// One HR/LR training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePairRecord {
    pub hr_path: PathBuf,
    pub lr_path: PathBuf,
    pub identity_label: usize,
    pub ratio: u32,
}

#[derive(Debug, Clone)]
pub struct RecordError {
    pub path: PathBuf,
    pub message: String,
}

/// Result of [`build_pair_manifest`].
#[derive(Debug, Clone, Default)]
pub struct PairManifest {
    pub manifest_path: PathBuf,
    pub records: Vec<ImagePairRecord>,
    /// Identity names in label order.
    pub identities: Vec<String>,
    pub skipped_empty_identities: usize,
    pub errors: Vec<RecordError>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "ppm"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Degrades every image under `dataset_root/<identity>/` into `out_root/<identity>/`
/// and writes `out_root/manifest.tsv`.
pub fn build_pair_manifest(
    dataset_root: &Path,
    spec: &DegradeSpec,
    out_root: &Path,
) -> Result<PairManifest> {
    spec.validate()?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;

    let mut identity_dirs = Vec::new();
    let mut skipped = 0;
    for dir in sorted_entries(dataset_root)?.into_iter().filter(|p| p.is_dir()) {
        let images: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if images.is_empty() {
            log::warn!("skipping empty identity directory {}", dir.display());
            skipped += 1;
            continue;
        }
        identity_dirs.push((dir, images));
    }

    let mut records = Vec::new();
    let mut identities = Vec::new();
    let mut errors = Vec::new();
    for (dir, images) in identity_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let lr_dir = out_root.join(&name);
        fs::create_dir_all(&lr_dir).map_err(|e| Error::io(&lr_dir, e))?;

        let results: Vec<std::result::Result<(PathBuf, PathBuf), RecordError>> = images
            .par_iter()
            .map(|hr| {
                let stem = hr.file_stem().unwrap_or_default().to_string_lossy();
                let lr = lr_dir.join(format!("{stem}.png"));
                let fail = |e: Error| RecordError {
                    path: hr.clone(),
                    message: e.to_string(),
                };
                let img = load_rgb(hr).map_err(fail)?;
                let out = degrade_image(&img, spec).map_err(fail)?;
                out.save(&lr).map_err(|source| {
                    fail(Error::Image {
                        path: lr.clone(),
                        source,
                    })
                })?;
                Ok((hr.clone(), lr))
            })
            .collect();

        let label = identities.len();
        let mut any = false;
        for r in results {
            match r {
                Ok((hr_path, lr_path)) => {
                    any = true;
                    records.push(ImagePairRecord {
                        hr_path,
                        lr_path,
                        identity_label: label,
                        ratio: spec.ratio,
                    });
                }
                Err(e) => errors.push(e),
            }
        }
        if any {
            identities.push(name);
        }
    }

    let manifest_path = out_root.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &records)?;
    Ok(PairManifest {
        manifest_path,
        records,
        identities,
        skipped_empty_identities: skipped,
        errors,
    })
}

/// Path of `target` relative to `base`, using `..` where needed. Both are
/// made absolute against the current directory first.
pub fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| -> PathBuf {
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().unwrap_or_default().join(p)
        };
        let mut out = PathBuf::new();
        for c in p.components() {
            match c {
                Component::CurDir => {}
                Component::ParentDir => {
                    out.pop();
                }
                other => out.push(other),
            }
        }
        out
    };
    let target = abs(target);
    let base = abs(base);
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Writes `<hr>\t<lr>\t<label>\t<ratio>` lines with paths relative to the manifest.
pub fn write_manifest(path: &Path, records: &[ImagePairRecord]) -> Result<()> {
    let dir = manifest_dir(path);
    let mut text = String::new();
    for r in records {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            relative_path(&r.hr_path, &dir).display(),
            relative_path(&r.lr_path, &dir).display(),
            r.identity_label,
            r.ratio
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; returned paths are resolved against the manifest directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ImagePairRecord>> {
    let dir = manifest_dir(path);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| {
                Error::Data(format!("{}:{}: {what}", path.display(), n + 1))
            };
            if fields.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            Ok(ImagePairRecord {
                hr_path: dir.join(fields[0]),
                lr_path: dir.join(fields[1]),
                identity_label: fields[2].parse().map_err(|_| bad("bad label"))?,
                ratio: fields[3].parse().map_err(|_| bad("bad ratio"))?,
            })
        })
        .collect()
}
