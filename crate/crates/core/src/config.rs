//! Run configuration: a line-oriented `key = value` file with `#` comments,
//! merged with command-line overrides.
//!
//! Precedence, lowest to highest: built-in defaults, the config file, the
//! `ASKD_SEED` environment variable (seed only), command-line overrides.
//! Unknown keys are rejected. Every value is validated by building the typed
//! module configs before any work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, BlockKind, SitePolicy};
use crate::degrade::DegradeSpec;
use crate::error::{Error, Result};
use crate::evaluate::FoldAssignment;
use crate::losses::{DistillConfig, MarginConfig};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "ASKD_SEED";

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for initialization, shuffling and pair sampling"),
    ("run_id", "", "run directory name under output_root; empty uses the subcommand name"),
    ("output_root", "runs", "directory holding run directories"),
    ("workers", "0", "worker threads; 0 uses every core"),
    ("ratio", "4", "degradation ratio (1 disables degradation)"),
    ("blur_sigma", "auto", "Gaussian blur sigma at LR scale; auto is ratio/2"),
    ("blur_kernel_size", "auto", "odd blur kernel size; auto is 2*ceil(2*sigma)+1"),
    ("holdout_fraction", "0", "per-identity fraction of images degrade lists in test.tsv instead of train.tsv"),
    ("backbone", "resnet50", "architecture preset: toy or resnet50"),
    ("input_size", "preset", "input height and width, e.g. 32 or 32x32"),
    ("stem_width", "preset", "stem convolution width"),
    ("stem_stride", "preset", "stem convolution stride"),
    ("stage_widths", "preset", "comma-separated stage widths"),
    ("blocks_per_stage", "preset", "comma-separated residual block counts"),
    ("stage_strides", "preset", "comma-separated first-block strides"),
    ("block_kind", "preset", "basic or bottleneck"),
    ("embedding_dim", "preset", "embedding width d"),
    ("attention_site_policy", "preset", "all_eligible_convs or per_block"),
    ("reduction_ratio", "preset", "channel-MLP reduction ratio, or auto"),
    ("epochs", "20", "training epochs"),
    ("batch_size", "128", "mini-batch size"),
    ("base_lr", "0.1", "initial learning rate"),
    ("lr_decay_epochs", "6,11,15,17", "0-based epochs at which the learning rate decays"),
    ("lr_decay_factor", "0.1", "multiplicative learning-rate decay"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0005", "L2 weight decay"),
    ("val_fraction", "0.2", "fraction of training identities held out for validation"),
    ("margin_s", "64", "ArcFace scale s"),
    ("margin_m", "0.5", "ArcFace additive angular margin m (radians)"),
    ("lambda_distill", "5", "attention distillation weight"),
    ("distill_sites", "all", "comma-separated site ids, or all"),
    ("use_logit_kd", "false", "add temperature-scaled logit distillation"),
    ("kd_temperature", "4", "logit distillation temperature"),
    ("kd_weight", "1", "logit distillation weight"),
    ("eval_ratio", "1", "degradation applied to evaluation images on the fly"),
    ("eval_folds", "10", "verification folds"),
    ("eval_pairs_per_class", "300", "positive (and negative) pairs generated from a manifest"),
    ("eval_fold_assignment", "identity_hash", "identity_hash or round_robin"),
    ("eval_ks", "1,5,10,50", "identification ranks"),
    ("eval_clip_ranks", "false", "evaluate ranks above the gallery size at the gallery size"),
    ("overlay_sites", "first_block", "first_block, all, or comma-separated site ids"),
    ("overlay_images", "4", "images rendered as attention overlays"),
    ("synth_identities", "8", "identities generated by synth"),
    ("synth_images", "40", "images per identity generated by synth"),
    ("synth_size", "32", "synthetic image side length"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

fn split_kv(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim().to_string(), v.trim().to_string()))
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `text` in the config-file format on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_kv(line).ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse()
            .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::config(key, format!("cannot parse `{s}`: {e}")))
            })
            .collect()
    }

    fn auto_or<T: FromStr>(&self, key: &str, auto: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.get(key) == auto {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
        }
    }

    /// Reads a config file and applies the seed environment variable and overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Self::default(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", seed.trim())?;
        }
        for o in overrides {
            let (k, v) = split_kv(o)
                .ok_or_else(|| Error::config(o.as_str(), "override must look like key=value"))?;
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.degrade_spec()?;
        self.holdout_fraction()?;
        self.backbone_config()?;
        self.train_config()?;
        self.parse::<usize>("workers")?;
        self.eval_ratio()?;
        self.eval_folds()?;
        self.parse::<usize>("eval_pairs_per_class")?;
        self.fold_assignment()?;
        self.eval_ks()?;
        self.parse_bool("eval_clip_ranks")?;
        self.parse::<usize>("overlay_images")?;
        self.synth_config()?;
        let run_id = self.get("run_id");
        if run_id.contains('/') || run_id.contains('\\') || run_id == ".." || run_id == "." {
            return Err(Error::config("run_id", "must be a single path component"));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn workers(&self) -> usize {
        self.parse("workers").unwrap_or(0)
    }

    pub fn output_root(&self) -> PathBuf {
        PathBuf::from(self.get("output_root"))
    }

    /// The configured run id, or `fallback` when empty.
    pub fn run_id(&self, fallback: &str) -> String {
        match self.get("run_id") {
            "" => fallback.to_string(),
            id => id.to_string(),
        }
    }

    pub fn degrade_spec(&self) -> Result<DegradeSpec> {
        let ratio: u32 = self.parse("ratio")?;
        let mut spec = DegradeSpec::new(ratio);
        let sigma: Option<f64> = self.auto_or("blur_sigma", "auto")?;
        let kernel: Option<usize> = self.auto_or("blur_kernel_size", "auto")?;
        if let Some(s) = sigma {
            spec = spec.with_blur(s, kernel);
        } else if let Some(k) = kernel {
            spec.blur_kernel_size = k;
        }
        spec.validate().map_err(|e| Error::config("ratio", e.to_string()))?;
        Ok(spec)
    }

    pub fn holdout_fraction(&self) -> Result<f64> {
        let f: f64 = self.parse("holdout_fraction")?;
        if !(0.0..1.0).contains(&f) {
            return Err(Error::config("holdout_fraction", format!("must lie in [0, 1), got {f}")));
        }
        Ok(f)
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let mut cfg = match self.get("backbone") {
            "toy" => BackboneConfig::toy(),
            "resnet50" => BackboneConfig::resnet50(),
            other => return Err(Error::config("backbone", format!("expected toy or resnet50, got `{other}`"))),
        };
        let preset = |k: &str| self.get(k) == "preset";
        if !preset("input_size") {
            let v = self.get("input_size");
            let parts: Vec<&str> = v.split('x').collect();
            let n = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::config("input_size", format!("cannot parse `{v}`: {e}")))
            };
            cfg.input_size = match parts.as_slice() {
                [s] => (n(s)?, n(s)?),
                [h, w] => (n(h)?, n(w)?),
                _ => return Err(Error::config("input_size", format!("cannot parse `{v}`"))),
            };
        }
        if !preset("stem_width") {
            cfg.stem_width = self.parse("stem_width")?;
        }
        if !preset("stem_stride") {
            cfg.stem_stride = self.parse("stem_stride")?;
        }
        if !preset("stage_widths") {
            cfg.stage_widths = self.list("stage_widths")?;
        }
        if !preset("blocks_per_stage") {
            cfg.blocks_per_stage = self.list("blocks_per_stage")?;
        }
        if !preset("stage_strides") {
            cfg.stage_strides = self.list("stage_strides")?;
        }
        if !preset("block_kind") {
            cfg.block_kind = self.parse::<BlockKind>("block_kind")?;
        }
        if !preset("embedding_dim") {
            cfg.embedding_dim = self.parse("embedding_dim")?;
        }
        if !preset("attention_site_policy") {
            cfg.attention_site_policy = self.parse::<SitePolicy>("attention_site_policy")?;
        }
        if !preset("reduction_ratio") {
            cfg.reduction_ratio = self.auto_or("reduction_ratio", "auto")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let sites = match self.get("distill_sites") {
            "all" => Vec::new(),
            _ => self.list::<String>("distill_sites")?,
        };
        let cfg = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            base_lr: self.parse("base_lr")?,
            lr_decay_epochs: self.list("lr_decay_epochs")?,
            lr_decay_factor: self.parse("lr_decay_factor")?,
            momentum: self.parse("momentum")?,
            weight_decay: self.parse("weight_decay")?,
            seed: self.seed()?,
            margin: MarginConfig {
                scale: self.parse("margin_s")?,
                margin: self.parse("margin_m")?,
            },
            distill: DistillConfig {
                lambda_distill: self.parse("lambda_distill")?,
                sites,
                use_logit_kd: self.parse_bool("use_logit_kd")?,
                kd_temperature: self.parse("kd_temperature")?,
                kd_weight: self.parse("kd_weight")?,
            },
            val_fraction: self.parse("val_fraction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_ratio(&self) -> Result<DegradeSpec> {
        let ratio: u32 = self.parse("eval_ratio")?;
        let spec = DegradeSpec::new(ratio);
        spec.validate().map_err(|e| Error::config("eval_ratio", e.to_string()))?;
        Ok(spec)
    }

    pub fn eval_folds(&self) -> Result<usize> {
        let f: usize = self.parse("eval_folds")?;
        if f < 2 {
            return Err(Error::config("eval_folds", "need at least 2 folds"));
        }
        Ok(f)
    }

    pub fn eval_pairs_per_class(&self) -> usize {
        self.parse("eval_pairs_per_class").unwrap_or(300)
    }

    pub fn fold_assignment(&self) -> Result<FoldAssignment> {
        self.parse("eval_fold_assignment")
    }

    pub fn eval_ks(&self) -> Result<Vec<usize>> {
        let ks: Vec<usize> = self.list("eval_ks")?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::config("eval_ks", "ranks must be positive"));
        }
        Ok(ks)
    }

    pub fn eval_clip_ranks(&self) -> bool {
        self.parse_bool("eval_clip_ranks").unwrap_or(false)
    }

    pub fn overlay_images(&self) -> usize {
        self.parse("overlay_images").unwrap_or(4)
    }

    /// Resolves `overlay_sites` against the backbone's site ids.
    pub fn overlay_sites(&self, backbone: &crate::backbone::Backbone) -> Result<Vec<String>> {
        match self.get("overlay_sites") {
            "all" => Ok(backbone.site_ids()),
            "first_block" => {
                let first = backbone.sites().first().map(|s| s.global_block);
                Ok(backbone
                    .sites()
                    .iter()
                    .filter(|s| Some(s.global_block) == first)
                    .map(|s| s.site_id.clone())
                    .collect())
            }
            _ => {
                let sites: Vec<String> = self.list("overlay_sites")?;
                let known = backbone.site_ids();
                if let Some(s) = sites.iter().find(|s| !known.contains(s)) {
                    return Err(Error::config("overlay_sites", format!("unknown site `{s}`")));
                }
                Ok(sites)
            }
        }
    }

    pub fn synth_config(&self) -> Result<crate::synth::SynthConfig> {
        Ok(crate::synth::SynthConfig {
            identities: self.parse("synth_identities")?,
            images_per_identity: self.parse("synth_images")?,
            size: self.parse("synth_size")?,
            seed: self.seed()?,
        })
    }

    /// Every key with its effective value, in the documented order.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, _, help) in KEYS {
            let _ = writeln!(s, "# {help}\n{k} = {}", self.get(k));
        }
        s
    }
}
