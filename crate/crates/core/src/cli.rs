//! The `askd` command line: one binary, one subcommand per pipeline stage.
//!
//! Every subcommand writes only under `output_root/run_id`, echoes the
//! effective configuration there and finishes with a `MANIFEST.txt` listing
//! every produced file.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::analysis::{attention_correlation, export_attention_overlays};
use crate::backbone::{image_to_tensor, Backbone};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::degrade::{build_pair_manifest, degrade_image, load_rgb, read_manifest, write_manifest, DegradeSpec, ImagePairRecord};
use crate::error::{Error, Result};
use crate::evaluate::{
    make_pairs, rank_k_accuracy, rank_k_accuracy_clipped, read_pairs, verification_accuracy, write_pairs,
    IdentificationSet, LabelledImage,
};
use crate::plot::{bar_chart, line_chart};
use crate::trainer::{load_training_set, train_student, train_teacher, TrainLogRecord, TrainRun};

pub const CONFIG_ECHO: &str = "config.echo";
pub const RUN_MANIFEST: &str = "MANIFEST.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.askd";

#[derive(Debug, Parser)]
#[command(name = "askd", version, about = "Attention-similarity knowledge distillation for low-resolution face recognition")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run directory name (key `run_id`).
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Output root holding run directories (key `output_root`).
    #[arg(long, alias = "output-root", global = true)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads, 0 for all cores (key `workers`).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Seed (key `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Verify,
    Identify,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Degrade `<root>/<identity>/*` images and write the pair manifest.
    Degrade {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        ratio: Option<u32>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        kernel_size: Option<usize>,
    },
    /// Train the HR teacher.
    TrainTeacher {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train an LR student against a frozen teacher.
    TrainStudent {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Verification or identification accuracy of a checkpoint.
    Evaluate {
        #[arg(long, value_enum, default_value = "verify")]
        task: Task,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pair list `<a>\t<b>\t<0|1>\t<fold>` (verify).
        #[arg(long, conflicts_with_all = ["manifest", "probe", "gallery"])]
        pairs: Option<PathBuf>,
        /// Pair manifest; verify pairs or a probe/gallery split are built from it.
        #[arg(long, conflicts_with_all = ["probe", "gallery"])]
        manifest: Option<PathBuf>,
        /// Probe list: `<path>\t<label>` lines or a pair manifest (identify).
        #[arg(long, requires = "gallery")]
        probe: Option<PathBuf>,
        #[arg(long, requires = "probe")]
        gallery: Option<PathBuf>,
        /// Degradation ratio applied on the fly (key `eval_ratio`).
        #[arg(long)]
        ratio: Option<u32>,
    },
    /// Teacher/student attention correlation and overlays.
    Analyze {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a procedural identity dataset under `<run>/images`.
    Synth {
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        size: Option<u32>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Degrade { .. } => "degrade",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::TrainStudent { .. } => "train-student",
            Command::Evaluate { .. } => "evaluate",
            Command::Analyze { .. } => "analyze",
            Command::Synth { .. } => "synth",
        }
    }

    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        match self {
            Command::Degrade { ratio, sigma, kernel_size, .. } => {
                push("ratio", ratio.map(|v| v.to_string()));
                push("blur_sigma", sigma.map(|v| v.to_string()));
                push("blur_kernel_size", kernel_size.map(|v| v.to_string()));
            }
            Command::Evaluate { ratio, .. } => push("eval_ratio", ratio.map(|v| v.to_string())),
            Command::Synth { identities, images, size } => {
                push("synth_identities", identities.map(|v| v.to_string()));
                push("synth_images", images.map(|v| v.to_string()));
                push("synth_size", size.map(|v| v.to_string()));
            }
            _ => {}
        }
        o
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(dir) => {
            log::info!("done: {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Merges config file, environment and flags for `cli`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let mut overrides = g.set.clone();
    overrides.extend(cli.command.overrides());
    if let Some(v) = &g.run_id {
        overrides.push(format!("run_id={v}"));
    }
    if let Some(v) = &g.out {
        overrides.push(format!("output_root={}", v.display()));
    }
    if let Some(v) = g.workers {
        overrides.push(format!("workers={v}"));
    }
    if let Some(v) = g.seed {
        overrides.push(format!("seed={v}"));
    }
    RunConfig::load(g.config.as_deref(), &overrides)
}

/// Runs the parsed command and returns its run directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    if cfg.workers() > 0 {
        // fails only when a pool already exists, e.g. repeated in-process runs
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers()).build_global();
    }
    let dir = cfg.output_root().join(cfg.run_id(cli.command.name()));
    prepare_run_dir(&dir, cli.global.force)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.echo()).map_err(|e| Error::io(&dir, e))?;
    let result = match &cli.command {
        Command::Degrade { root, .. } => cmd_degrade(&cfg, root, &dir),
        Command::TrainTeacher { manifest } => cmd_train(&cfg, manifest, None, &dir),
        Command::TrainStudent { manifest, teacher } => cmd_train(&cfg, manifest, Some(teacher), &dir),
        Command::Evaluate {
            task,
            checkpoint,
            pairs,
            manifest,
            probe,
            gallery,
            ..
        } => {
            let source = match (pairs, manifest, probe, gallery) {
                (Some(p), _, _, _) => EvalSource::Pairs(p.clone()),
                (_, Some(m), _, _) => EvalSource::Manifest(m.clone()),
                (_, _, Some(p), Some(g)) => EvalSource::ProbeGallery(p.clone(), g.clone()),
                _ => return Err(Error::config("evaluate", "give --pairs, --manifest or --probe/--gallery")),
            };
            cmd_evaluate(&cfg, *task, checkpoint, &source, &dir)
        }
        Command::Analyze { teacher, student, manifest } => cmd_analyze(&cfg, teacher, student, manifest, &dir),
        Command::Synth { .. } => {
            crate::synth::generate(&cfg.synth_config()?, &dir.join("images")).map(|p| {
                log::info!("wrote {} images", p.len());
            })
        }
    };
    write_run_manifest(&dir)?;
    result.map(|_| dir)
}

fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(Error::config(
                "run_id",
                format!("run directory {} already exists; pass --force to replace it", dir.display()),
            ));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, base, out)?;
        } else if let Ok(rel) = path.strip_prefix(base) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Lists every file in the run directory except the listing itself.
pub fn write_run_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.retain(|f| f != RUN_MANIFEST);
    files.sort();
    let mut text = files.join("\n");
    text.push('\n');
    let path = dir.join(RUN_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_degrade(cfg: &RunConfig, root: &Path, dir: &Path) -> Result<()> {
    let spec = cfg.degrade_spec()?;
    let m = build_pair_manifest(root, &spec, dir)?;
    let mut r = String::new();
    let _ = writeln!(r, "ratio = {}", spec.ratio);
    let _ = writeln!(r, "blur_sigma = {}", spec.blur_sigma);
    let _ = writeln!(r, "blur_kernel_size = {}", spec.blur_kernel_size);
    let _ = writeln!(r, "records = {}", m.records.len());
    let _ = writeln!(r, "identities = {}", m.identities.len());
    let _ = writeln!(r, "skipped_empty_identities = {}", m.skipped_empty_identities);
    let _ = writeln!(r, "errors = {}", m.errors.len());
    for e in &m.errors {
        let _ = writeln!(r, "# {}: {}", e.path.display(), e.message);
        log::warn!("skipped {}: {}", e.path.display(), e.message);
    }
    let holdout = cfg.holdout_fraction()?;
    if holdout > 0.0 {
        let (train, test) = split_holdout(&m.records, holdout);
        let _ = writeln!(r, "train_records = {}", train.len());
        let _ = writeln!(r, "test_records = {}", test.len());
        write_manifest(&dir.join("train.tsv"), &train)?;
        write_manifest(&dir.join("test.tsv"), &test)?;
    }
    write_text(&dir.join("degrade_report.txt"), &r)?;
    log::info!("{} pairs from {} identities", m.records.len(), m.identities.len());
    if m.records.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    Ok(())
}

/// Moves the last `round(fraction * n)` images (by path) of every identity to
/// the test list, keeping at least one training image per identity.
pub fn split_holdout(records: &[ImagePairRecord], fraction: f64) -> (Vec<ImagePairRecord>, Vec<ImagePairRecord>) {
    let mut by_label: BTreeMap<usize, Vec<&ImagePairRecord>> = BTreeMap::new();
    for r in records {
        by_label.entry(r.identity_label).or_default().push(r);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in by_label.into_values() {
        group.sort_by(|a, b| a.hr_path.cmp(&b.hr_path));
        let n_test = ((group.len() as f64 * fraction).round() as usize).min(group.len() - 1);
        let cut = group.len() - n_test;
        train.extend(group[..cut].iter().map(|r| (*r).clone()));
        test.extend(group[cut..].iter().map(|r| (*r).clone()));
    }
    (train, test)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn cmd_train(cfg: &RunConfig, manifest: &Path, teacher: Option<&PathBuf>, dir: &Path) -> Result<()> {
    let backbone_cfg = cfg.backbone_config()?;
    let train_cfg = cfg.train_config()?;
    let records = read_manifest(manifest)?;
    let set = load_training_set(&records, teacher.is_some())?;
    log::info!("{} samples, {} classes", set.labels.len(), set.num_classes());

    let log_path = dir.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut write_err = None;
    let mut last_epoch = usize::MAX;
    let mut on_step = |rec: &TrainLogRecord| {
        if rec.epoch != last_epoch {
            last_epoch = rec.epoch;
            log::info!("epoch {} lr {} loss {:.4}", rec.epoch, rec.lr, rec.loss.total);
        }
        let line = serde_json::to_string(rec).expect("log record serializes");
        if let Err(e) = writeln!(writer, "{line}") {
            write_err.get_or_insert(e);
        }
    };
    let run: TrainRun = match teacher {
        None => train_teacher(&set, &backbone_cfg, &train_cfg, &mut on_step)?,
        Some(p) => {
            let t = Checkpoint::load(p)?;
            train_student(&set, &t, &backbone_cfg, &train_cfg, &mut on_step)?
        }
    };
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    run.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;

    let pick = |f: fn(&TrainLogRecord) -> f64| run.log.iter().map(f).collect::<Vec<f64>>();
    let mut series = vec![("total".to_string(), pick(|r| r.loss.total)), ("target".to_string(), pick(|r| r.loss.target_loss))];
    if teacher.is_some() {
        series.push(("distill".to_string(), pick(|r| r.loss.distill_loss)));
        if train_cfg.distill.use_logit_kd {
            series.push(("kd".to_string(), pick(|r| r.loss.logit_kd_loss)));
        }
    }
    line_chart("training loss", "step", &series, &dir.join("loss_curve.png"))?;

    if teacher.is_some() {
        // per-epoch mean rho per site and kind
        let epochs = run.log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        let mut by_key: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for r in &run.log {
            for (site, (c, s)) in &r.loss.per_site_rho {
                for (kind, v) in [("C", *c), ("S", *s)] {
                    let e = by_key
                        .entry(format!("{site}-{kind}"))
                        .or_insert_with(|| vec![Vec::new(); epochs]);
                    e[r.epoch].push(v);
                }
            }
        }
        let series: Vec<(String, Vec<f64>)> = by_key
            .into_iter()
            .map(|(k, per_epoch)| (k, per_epoch.iter().map(|v| mean(v)).collect()))
            .collect();
        line_chart("attention distance per site", "epoch", &series, &dir.join("rho_curve.png"))?;
    }

    let ck = &run.checkpoint;
    let mut r = String::new();
    let _ = writeln!(r, "role = {}", ck.meta.role);
    let _ = writeln!(r, "epochs_completed = {}", ck.meta.epochs_completed);
    let _ = writeln!(r, "steps = {}", run.log.len());
    let _ = writeln!(r, "param_hash = {}", ck.param_hash());
    if let Some(h) = &ck.meta.teacher_hash {
        let _ = writeln!(r, "teacher_hash = {h}");
    }
    for (k, v) in &ck.meta.final_metrics {
        let _ = writeln!(r, "{k} = {v}");
    }
    write_text(&dir.join("train_report.txt"), &r)
}

#[derive(Debug, Clone)]
pub enum EvalSource {
    Pairs(PathBuf),
    Manifest(PathBuf),
    ProbeGallery(PathBuf, PathBuf),
}

fn identity_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn embed_all(net: &Backbone, spec: &DegradeSpec, paths: &[PathBuf]) -> Result<HashMap<PathBuf, Array1<f64>>> {
    paths
        .par_iter()
        .map(|p| {
            let img = load_rgb(p)?;
            let img = if spec.ratio > 1 { degrade_image(&img, spec)? } else { img };
            let e = net.forward_one(&image_to_tensor(&img))?.embedding;
            Ok((p.clone(), e))
        })
        .collect()
}

fn unique_paths<'a>(paths: impl Iterator<Item = &'a PathBuf>) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = paths.cloned().collect();
    v.sort();
    v.dedup();
    v
}

/// Reads `<path>\t<label>` lines, or a pair manifest (HR path and label).
/// Relative paths resolve against the list's directory.
pub fn read_labelled_list(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let label_field = match f.len() {
            2 => f[1],
            4 => f[2],
            _ => return Err(Error::Data(format!("{}:{}: expected 2 or 4 fields", path.display(), n + 1))),
        };
        let label = label_field
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad label", path.display(), n + 1)))?;
        out.push((dir.join(f[0]), label));
    }
    Ok(out)
}

fn stack(rows: &[&Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

fn cmd_evaluate(cfg: &RunConfig, task: Task, checkpoint: &Path, source: &EvalSource, dir: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let spec = cfg.eval_ratio()?;
    let mut text = String::new();
    let mut kv = String::new();
    let _ = writeln!(text, "checkpoint: {}", checkpoint.display());
    let _ = writeln!(text, "role: {}", ck.meta.role);
    let _ = writeln!(text, "eval_ratio: {}", spec.ratio);
    let _ = writeln!(kv, "eval_ratio = {}", spec.ratio);
    match task {
        Task::Verify => {
            let pairs = match source {
                EvalSource::Pairs(p) => read_pairs(p)?,
                EvalSource::Manifest(m) => {
                    let images: Vec<LabelledImage> = read_manifest(m)?
                        .into_iter()
                        .map(|r| LabelledImage {
                            identity: identity_name(&r.hr_path),
                            path: r.hr_path,
                            label: r.identity_label,
                        })
                        .collect();
                    let pairs = make_pairs(
                        &images,
                        cfg.eval_folds()?,
                        cfg.eval_pairs_per_class(),
                        cfg.fold_assignment()?,
                        cfg.seed()?,
                    )?;
                    write_pairs(&dir.join("pairs.tsv"), &pairs)?;
                    pairs
                }
                EvalSource::ProbeGallery(..) => {
                    return Err(Error::config("evaluate", "verification needs --pairs or --manifest"))
                }
            };
            let paths = unique_paths(pairs.iter().flat_map(|p| [&p.path_a, &p.path_b]));
            let emb = embed_all(&ck.backbone, &spec, &paths)?;
            let res = verification_accuracy(&pairs, |p| Ok(emb[p].clone()))?;
            let _ = writeln!(text, "task: verify");
            let _ = writeln!(text, "pairs: {}", pairs.len());
            let _ = writeln!(text, "accuracy: {:.6}", res.accuracy);
            let _ = writeln!(kv, "task = verify");
            let _ = writeln!(kv, "pairs = {}", pairs.len());
            let _ = writeln!(kv, "verification.accuracy = {}", res.accuracy);
            for f in &res.per_fold {
                let _ = writeln!(text, "fold {}: threshold {:.6} accuracy {:.6}", f.fold_id, f.threshold, f.accuracy);
                let _ = writeln!(kv, "verification.fold.{}.threshold = {}", f.fold_id, f.threshold);
                let _ = writeln!(kv, "verification.fold.{}.accuracy = {}", f.fold_id, f.accuracy);
            }
            log::info!("verification accuracy {:.4}", res.accuracy);
        }
        Task::Identify => {
            let (probe, gallery) = match source {
                EvalSource::ProbeGallery(p, g) => (read_labelled_list(p)?, read_labelled_list(g)?),
                EvalSource::Manifest(m) => split_probe_gallery(&read_manifest(m)?),
                EvalSource::Pairs(_) => {
                    return Err(Error::config("evaluate", "identification needs --probe/--gallery or --manifest"))
                }
            };
            if probe.is_empty() || gallery.is_empty() {
                return Err(Error::Data("empty probe or gallery".into()));
            }
            let paths = unique_paths(probe.iter().chain(&gallery).map(|(p, _)| p));
            let emb = embed_all(&ck.backbone, &spec, &paths)?;
            let ids = IdentificationSet {
                probe_embeddings: stack(&probe.iter().map(|(p, _)| &emb[p]).collect::<Vec<_>>()),
                gallery_embeddings: stack(&gallery.iter().map(|(p, _)| &emb[p]).collect::<Vec<_>>()),
                probe_labels: probe.iter().map(|x| x.1).collect(),
                gallery_labels: gallery.iter().map(|x| x.1).collect(),
            };
            let ks = cfg.eval_ks()?;
            let acc = if cfg.eval_clip_ranks() {
                rank_k_accuracy_clipped(&ids, &ks)?
            } else {
                rank_k_accuracy(&ids, &ks)?
            };
            let _ = writeln!(text, "task: identify");
            let _ = writeln!(text, "probes: {}", probe.len());
            let _ = writeln!(text, "gallery: {}", gallery.len());
            let _ = writeln!(kv, "task = identify");
            let _ = writeln!(kv, "probes = {}", probe.len());
            let _ = writeln!(kv, "gallery = {}", gallery.len());
            for (k, a) in &acc {
                let _ = writeln!(text, "rank-{k}: {a:.6}");
                let _ = writeln!(kv, "identification.rank{k} = {a}");
            }
            log::info!("rank-1 accuracy {:.4}", acc.values().next().copied().unwrap_or(f64::NAN));
        }
    }
    write_text(&dir.join("eval_report.txt"), &text)?;
    write_text(&dir.join("eval_report.kv"), &kv)
}

type Labelled = (PathBuf, usize);

/// First image (by path) of every identity forms the gallery; the rest are probes.
pub fn split_probe_gallery(records: &[ImagePairRecord]) -> (Vec<Labelled>, Vec<Labelled>) {
    let mut sorted: Vec<(PathBuf, usize)> = records.iter().map(|r| (r.hr_path.clone(), r.identity_label)).collect();
    sorted.sort();
    let mut seen = std::collections::BTreeSet::new();
    let (mut probe, mut gallery) = (Vec::new(), Vec::new());
    for item in sorted {
        if seen.insert(item.1) {
            gallery.push(item);
        } else {
            probe.push(item);
        }
    }
    (probe, gallery)
}

fn cmd_analyze(cfg: &RunConfig, teacher: &Path, student: &Path, manifest: &Path, dir: &Path) -> Result<()> {
    let t = Checkpoint::load(teacher)?;
    let s = Checkpoint::load(student)?;
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} lists no images", manifest.display())));
    }
    let set = load_training_set(&records, true)?;
    let hr = set.teacher_inputs.as_ref().expect("paired set");
    let report = attention_correlation(&t.backbone, &s.backbone, hr, &set.inputs)?;
    write_text(&dir.join("correlation_report.txt"), &report.to_text())?;
    write_text(&dir.join("correlation_report.kv"), &report.to_kv())?;
    let bars: Vec<(String, f64)> = report.blocks.iter().map(|b| (b.label.clone(), b.mean_r)).collect();
    bar_chart("teacher-student pearson r", &bars, &dir.join("correlation_bars.png"))?;

    let n = cfg.overlay_images().min(records.len());
    if n > 0 {
        let sites = cfg.overlay_sites(&t.backbone)?;
        let step = records.len() / n;
        let (mut hr_imgs, mut lr_imgs) = (Vec::new(), Vec::new());
        for r in records.iter().step_by(step.max(1)).take(n) {
            let stem = r.hr_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = format!("{}_{stem}", identity_name(&r.hr_path));
            hr_imgs.push((name.clone(), load_rgb(&r.hr_path)?));
            lr_imgs.push((name, load_rgb(&r.lr_path)?));
        }
        export_attention_overlays(&t.backbone, &hr_imgs, &sites, &dir.join("overlays/teacher"))?;
        export_attention_overlays(&s.backbone, &lr_imgs, &sites, &dir.join("overlays/student"))?;
    }
    log::info!("correlation over {} images, {} sites", report.samples, report.sites.len());
    Ok(())
}
