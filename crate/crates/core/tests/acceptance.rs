//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when all
//! criteria pass. Optional positional arguments filter criteria by substring.
//! `ASKD_BLESS=1` regenerates the degradation golden corpus and hashes.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::{E, PI};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use askd::analysis::attention_correlation;
use askd::attention::{refine, ChannelAttentionParams, FeatureMap, SpatialAttentionParams, SPATIAL_KERNEL};
use askd::backbone::{image_to_tensor, Backbone, BackboneConfig};
use askd::cli::split_holdout;
use askd::config::RunConfig;
use askd::degrade::{build_pair_manifest, degrade_image, load_rgb, DegradeSpec};
use askd::evaluate::{
    make_pairs, rank_k_accuracy, verification_accuracy, verification_from_scores, IdentificationSet, LabelledImage,
};
use askd::losses::{
    arcface_loss, attention_cosine_distance, logit_kd_loss, normalized_softmax_loss, ClassHead, MarginConfig,
};
use askd::synth::Identity;
use askd::trainer::{load_training_set, lr_at_epoch, train_student, train_teacher, TrainConfig, TrainingSet};
use common::gradcheck;
use image::RgbImage;
use ndarray::{array, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

const TOY_CONF: &str = include_str!("../../../configs/toy.conf");

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("loss oracles", loss_oracles),
        ("gradient suite", gradient_suite),
        ("reduction identity", reduction_identity),
        ("attention bounds and structure", attention_structure),
        ("eval oracles", eval_oracles),
        ("degradation golden files", degradation_golden),
        ("schedule check", schedule_check),
        ("directional toy reproduction", toy_reproduction),
        ("end-to-end cli pipeline", cli_pipeline),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn unit_head() -> ClassHead {
    ClassHead::new(array![[1.0, 0.0], [0.0, 1.0]])
}

fn loss_oracles() -> Outcome {
    let x = array![[1.0, 0.0]];
    let head = unit_head();
    let mut lines = Vec::new();
    let mut check = |name: &str, got: f64, oracle: f64, literal: f64| -> Result<(), String> {
        ensure((got - oracle).abs() <= 1e-5, || format!("{name}: {got} vs oracle {oracle}"))?;
        let gap = (oracle - literal).abs();
        if gap <= 1e-5 {
            lines.push(format!("{name} {got:.6}"));
        } else {
            lines.push(format!("{name} {got:.6} (listed value {literal} is off the oracle by {gap:.5})"));
        }
        Ok(())
    };

    // -log(e / (e + 1))
    let ns = normalized_softmax_loss(x.view(), &[0], &head, 1.0).map_err(err)?;
    check("normalized softmax", ns, -(E / (E + 1.0)).ln(), 0.31326)?;

    // target logit cos(0 + pi/3) = 0.5, other logit cos(pi/2) = 0
    let cfg = MarginConfig { scale: 1.0, margin: PI / 3.0 };
    let af = arcface_loss(x.view(), &[0], &head, &cfg).map_err(err)?;
    let e5 = 0.5f64.exp();
    check("arcface m=pi/3", af, -(e5 / (e5 + 1.0)).ln(), 0.47408)?;

    let rho = attention_cosine_distance(&Array3::from_elem((2, 1, 1), 1.0), &array![[[1.0]], [[0.0]]])
        .map_err(err)?;
    check("rho", rho, 1.0 - 1.0 / 2f64.sqrt(), 0.29289)?;

    // p = softmax(1, 0), q = softmax(0, 1); KL = sum p log(p / q)
    let p = [E / (E + 1.0), 1.0 / (E + 1.0)];
    let q = [p[1], p[0]];
    let kl_oracle: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    let kl = logit_kd_loss(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view(), 1.0).map_err(err)?;
    check("kl T=1", kl, kl_oracle, 0.45186)?;
    Ok(lines.join("; "))
}

fn gradient_suite() -> Outcome {
    gradcheck::refine_gradients_match_finite_differences()?;
    gradcheck::arcface_gradients_match_finite_differences()?;
    gradcheck::distill_gradients_match_finite_differences()?;
    gradcheck::logit_kd_gradients_match_finite_differences()?;
    gradcheck::backbone_gradients_match_finite_differences()?;
    Ok("refine, arcface, distill, logit kd and backbone: 20 instances each within rtol 1e-4".into())
}

/// Normalized softmax from scratch: explicit norms, logits and log-sum-exp.
fn softmax_oracle(e: &Array2<f64>, labels: &[usize], w: &Array2<f64>, s: f64) -> f64 {
    let (b, d) = e.dim();
    let n = w.ncols();
    let mut total = 0.0;
    for i in 0..b {
        let xn = (0..d).map(|k| e[[i, k]] * e[[i, k]]).sum::<f64>().sqrt();
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let wn = (0..d).map(|k| w[[k, j]] * w[[k, j]]).sum::<f64>().sqrt();
                let dot: f64 = (0..d).map(|k| e[[i, k]] * w[[k, j]]).sum();
                s * dot / (xn * wn)
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[labels[i]];
    }
    total / b as f64
}

fn reduction_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let (b, d, n) = (rng.gen_range(1..9), rng.gen_range(2..17), rng.gen_range(2..11));
        let e = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((d, n), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let s = rng.gen_range(1.0..64.0);
        let head = ClassHead::new(w.clone());
        let af = arcface_loss(e.view(), &labels, &head, &MarginConfig { scale: s, margin: 0.0 }).map_err(err)?;
        let ns = normalized_softmax_loss(e.view(), &labels, &head, s).map_err(err)?;
        let oracle = softmax_oracle(&e, &labels, &w, s);
        worst = worst.max((af - ns).abs()).max((af - oracle).abs());
        ensure(worst <= 1e-6, || format!("batch {seed}: arcface {af}, softmax {ns}, oracle {oracle}"))?;
    }
    Ok(format!("100 batches, max |diff| {worst:.2e} against library and scratch softmax"))
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Channel then spatial refinement written as plain nested loops.
fn refine_oracle(f: &FeatureMap, cp: &ChannelAttentionParams, sp: &SpatialAttentionParams) -> FeatureMap {
    let (c, h, w) = f.dim();
    let hidden = cp.fc1.nrows();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = (0..hidden)
            .map(|j| (0..c).map(|k| cp.fc1[[j, k]] * v[k]).sum::<f64>().max(0.0))
            .collect();
        (0..c).map(|k| (0..hidden).map(|j| cp.fc2[[k, j]] * z[j]).sum()).collect()
    };
    let mut avg = vec![0.0; c];
    let mut mx = vec![f64::NEG_INFINITY; c];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                avg[k] += f[[k, y, x]] / (h * w) as f64;
                mx[k] = mx[k].max(f[[k, y, x]]);
            }
        }
    }
    let (ma, mm) = (mlp(&avg), mlp(&mx));
    let mut f1 = f.clone();
    for k in 0..c {
        let a = sig(ma[k] + mm[k]);
        for y in 0..h {
            for x in 0..w {
                f1[[k, y, x]] = a * f[[k, y, x]];
            }
        }
    }
    let mut pooled = Array3::<f64>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                pooled[[0, y, x]] += f1[[k, y, x]] / c as f64;
                m = m.max(f1[[k, y, x]]);
            }
            pooled[[1, y, x]] = m;
        }
    }
    let half = (SPATIAL_KERNEL / 2) as isize;
    let mut out = f1.clone();
    for y in 0..h {
        for x in 0..w {
            let mut z = 0.0;
            for ch in 0..2 {
                for ky in 0..SPATIAL_KERNEL {
                    for kx in 0..SPATIAL_KERNEL {
                        let (yy, xx) = (y as isize + ky as isize - half, x as isize + kx as isize - half);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            z += sp.conv[[0, ch, ky, kx]] * pooled[[ch, yy as usize, xx as usize]];
                        }
                    }
                }
            }
            let a = sig(z);
            for k in 0..c {
                out[[k, y, x]] = a * f1[[k, y, x]];
            }
        }
    }
    out
}

fn attention_structure() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut taps = 0usize;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let (c, h, w) = if seed == 0 { (3, 4, 5) } else { (rng.gen_range(1..9), rng.gen_range(1..10), rng.gen_range(1..10)) };
        let r = [1, c][seed as usize % 2];
        let scale = [1.0, 10.0, 40.0][seed as usize % 3];
        let f = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-scale..scale));
        let mut cp = ChannelAttentionParams::random(c, r, &mut rng).map_err(err)?;
        cp.fc1.mapv_inplace(|v| v * scale);
        let mut sp = SpatialAttentionParams::random(&mut rng);
        sp.conv.mapv_inplace(|v| v * scale);
        let out = refine(&f, &cp, &sp).map_err(err)?;
        for v in out.channel_map.iter().chain(out.spatial_map.iter()) {
            ensure(*v > 0.0 && *v < 1.0, || format!("instance {seed}: tap value {v} outside (0,1)"))?;
            taps += 1;
        }
        if scale == 1.0 {
            let oracle = refine_oracle(&f, &cp, &sp);
            worst = worst.max((&out.output - &oracle).iter().fold(0.0, |m, d| m.max(d.abs())));
            ensure(worst <= 1e-6, || format!("instance {seed}: refine differs from loop oracle by {worst}"))?;
        }

        let zero = refine(&f, &ChannelAttentionParams::zeros(c, r).map_err(err)?, &SpatialAttentionParams::zeros())
            .map_err(err)?;
        ensure(zero.output == f.mapv(|v| 0.25 * v), || format!("instance {seed}: zero params do not give 0.25 f"))?;
    }
    Ok(format!("{taps} tap values in (0,1); zero params give 0.25 f exactly; loop oracle max |diff| {worst:.2e}"))
}

fn random_ids(rng: &mut ChaCha8Rng) -> IdentificationSet {
    let (p, g, d) = (rng.gen_range(1..=20), rng.gen_range(1..=20), rng.gen_range(2..6));
    let classes = rng.gen_range(1..=g);
    // every class appears in the gallery at least once
    let gallery_labels: Vec<usize> = (0..g).map(|i| if i < classes { i } else { rng.gen_range(0..classes) }).collect();
    let mut gallery_labels = gallery_labels;
    for i in (1..g).rev() {
        gallery_labels.swap(i, rng.gen_range(0..=i));
    }
    IdentificationSet {
        probe_embeddings: Array2::from_shape_fn((p, d), |_| rng.gen_range(-1.0..1.0)),
        gallery_embeddings: Array2::from_shape_fn((g, d), |_| rng.gen_range(-1.0..1.0)),
        probe_labels: (0..p).map(|_| rng.gen_range(0..classes)).collect(),
        gallery_labels,
    }
}

/// Hit at k iff some same-label gallery item has fewer than k items ranked
/// before it, where ranking is by similarity and then gallery index.
fn rank_oracle(ids: &IdentificationSet, k: usize) -> f64 {
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    };
    let g = ids.gallery_labels.len();
    let mut hits = 0;
    for (i, &label) in ids.probe_labels.iter().enumerate() {
        let p = ids.probe_embeddings.row(i);
        let sims: Vec<f64> = (0..g).map(|j| cos(p, ids.gallery_embeddings.row(j))).collect();
        let hit = (0..g).filter(|&j| ids.gallery_labels[j] == label).any(|j| {
            let before = (0..g).filter(|&o| sims[o] > sims[j] || (sims[o] == sims[j] && o < j)).count();
            before < k
        });
        hits += hit as usize;
    }
    hits as f64 / ids.probe_labels.len() as f64
}

/// Brute-force sweep: every candidate threshold on the training folds,
/// first maximum in ascending order, counted pair by pair.
fn verification_oracle(scores: &[f64], same: &[bool], folds: &[usize]) -> f64 {
    let mut ids: Vec<usize> = folds.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut total = 0.0;
    for &f in &ids {
        let train: Vec<usize> = (0..scores.len()).filter(|&i| folds[i] != f).collect();
        let mut sorted: Vec<f64> = train.iter().map(|&i| scores[i]).collect();
        sorted.sort_by(f64::total_cmp);
        let mut cands = vec![f64::NEG_INFINITY];
        for w in sorted.windows(2) {
            cands.push((w[0] + w[1]) / 2.0);
        }
        cands.push(f64::INFINITY);
        let count = |t: f64, idx: &[usize]| idx.iter().filter(|&&i| (scores[i] > t) == same[i]).count();
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (n, &t) in cands.iter().enumerate() {
            let c = count(t, &train);
            if n == 0 || c > best.1 {
                best = (t, c);
            }
        }
        let test: Vec<usize> = (0..scores.len()).filter(|&i| folds[i] == f).collect();
        total += count(best.0, &test) as f64 / test.len() as f64;
    }
    total / ids.len() as f64
}

fn eval_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7000);
    for inst in 0..200 {
        let ids = random_ids(&mut rng);
        let g = ids.gallery_labels.len();
        let ks: Vec<usize> = (1..=g).collect();
        let acc = rank_k_accuracy(&ids, &ks).map_err(err)?;
        let mut prev = 0.0;
        for &k in &ks {
            let o = rank_oracle(&ids, k);
            ensure(acc[&k] == o, || format!("rank instance {inst}, k={k}: {} vs oracle {o}", acc[&k]))?;
            ensure(acc[&k] >= prev, || format!("rank instance {inst}: Acc@{k} decreases"))?;
            prev = acc[&k];
        }
        ensure(acc[&g] == 1.0, || format!("rank instance {inst}: Acc@G = {}", acc[&g]))?;
    }
    for inst in 0..100 {
        let n = rng.gen_range(4..=50);
        let folds_n = rng.gen_range(2..=5);
        // round-robin folds, each guaranteed both classes
        let folds: Vec<usize> = (0..n).map(|i| (i / 2) % folds_n).collect();
        let same: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let valid = (0..folds_n).all(|f| folds.iter().zip(&same).any(|(&g, &s)| g == f && s) && folds.iter().zip(&same).any(|(&g, &s)| g == f && !s));
        if !valid {
            continue;
        }
        // coarse grid so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-4..=4) as f64 / 4.0).collect();
        let got = verification_from_scores(&scores, &same, &folds).map_err(err)?.accuracy;
        let o = verification_oracle(&scores, &same, &folds);
        ensure(got == o, || format!("verification instance {inst}: {got} vs oracle {o}"))?;
    }
    Ok("200 rank instances exact for every k with monotone Acc@k; 100 verification instances exact".into())
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/degrade")
}

fn corpus_image(i: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(900 + i as u64);
    Identity::sample(77, i).render(64, &mut rng)
}

fn pixel_hash(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn degradation_golden() -> Outcome {
    let dir = golden_dir();
    let corpus = dir.join("corpus");
    let golden = dir.join("golden.txt");
    if std::env::var("ASKD_BLESS").is_ok() {
        fs::create_dir_all(&corpus).map_err(err)?;
        let mut text = String::new();
        for i in 0..8 {
            let img = corpus_image(i);
            img.save(corpus.join(format!("face{i}.png"))).map_err(err)?;
            for r in [2, 4, 8] {
                let out = degrade_image(&img, &DegradeSpec::new(r)).map_err(err)?;
                text.push_str(&format!("face{i}.png\t{r}\t{}\n", pixel_hash(&out)));
            }
        }
        fs::write(&golden, text).map_err(err)?;
    }
    let text = fs::read_to_string(&golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    let mut checked = 0;
    for line in text.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        let img = load_rgb(&corpus.join(f[0])).map_err(err)?;
        let ratio: u32 = f[1].parse().map_err(err)?;
        let spec = DegradeSpec::new(ratio);
        let a = degrade_image(&img, &spec).map_err(err)?;
        let b = degrade_image(&img, &spec).map_err(err)?;
        ensure(a == b, || format!("{} ratio {ratio}: two runs differ", f[0]))?;
        ensure(a.dimensions() == img.dimensions(), || format!("{} ratio {ratio}: shape changed", f[0]))?;
        ensure(pixel_hash(&a) == f[2], || format!("{} ratio {ratio}: output differs from golden hash", f[0]))?;
        let id = degrade_image(&img, &DegradeSpec::new(1)).map_err(err)?;
        ensure(id == img, || format!("{}: ratio 1 is not the identity", f[0]))?;
        checked += 1;
    }
    ensure(checked == 24, || format!("golden file lists {checked} outputs, expected 24"))?;
    Ok("8 images x ratios {2,4,8} match golden hashes and repeat exactly; ratio 1 identity; shapes kept".into())
}

fn tiny_set(identities: usize, per_identity: usize, size: u32) -> TrainingSet {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..identities {
        let ident = Identity::sample(3, i);
        for k in 0..per_identity {
            let mut rng = ChaCha8Rng::seed_from_u64((i * 100 + k) as u64);
            inputs.push(image_to_tensor(&ident.render(size, &mut rng)));
            labels.push(i);
        }
    }
    TrainingSet {
        inputs,
        teacher_inputs: None,
        labels,
    }
}

fn schedule_check() -> Outcome {
    let cfg = TrainConfig::default();
    ensure(cfg.epochs == 20 && cfg.base_lr == 0.1 && cfg.lr_decay_epochs == vec![6, 11, 15, 17], || {
        format!("default config changed: {cfg:?}")
    })?;
    let set = tiny_set(2, 2, 32);
    let run = train_teacher(&set, &BackboneConfig::toy(), &cfg, &mut |_| {}).map_err(err)?;
    let mut logged: BTreeMap<usize, f64> = BTreeMap::new();
    for r in &run.log {
        let want = lr_at_epoch(&cfg, r.epoch).map_err(err)?;
        ensure(r.lr == want, || format!("epoch {} step {}: logged lr {} vs {want}", r.epoch, r.step, r.lr))?;
        logged.entry(r.epoch).or_insert(r.lr);
    }
    let expected = [(0, 0.1), (6, 0.01), (11, 0.001), (15, 1e-4), (17, 1e-5)];
    for (e, lr) in expected {
        ensure(logged.get(&e) == Some(&lr), || format!("epoch {e}: logged {:?}, expected {lr}", logged.get(&e)))?;
    }
    Ok(format!("logged lr at epochs 0/6/11/15/17 = {:?}", expected.iter().map(|x| logged[&x.0]).collect::<Vec<_>>()))
}

struct StudentResult {
    accuracy: f64,
    r: BTreeMap<String, Option<f64>>,
}

fn toy_reproduction() -> Outcome {
    let cfg = RunConfig::from_text(TOY_CONF).map_err(err)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    askd::synth::generate(&cfg.synth_config().map_err(err)?, &tmp.path().join("hr")).map_err(err)?;
    let m = build_pair_manifest(&tmp.path().join("hr"), &cfg.degrade_spec().map_err(err)?, &tmp.path().join("lr"))
        .map_err(err)?;
    let (train, test) = split_holdout(&m.records, cfg.holdout_fraction().map_err(err)?);
    let bcfg = cfg.backbone_config().map_err(err)?;
    let hr_set = load_training_set(&train, false).map_err(err)?;
    let lr_set = load_training_set(&train, true).map_err(err)?;
    let test_set = load_training_set(&test, true).map_err(err)?;
    let test_hr = test_set.teacher_inputs.clone().expect("paired");
    let images: Vec<LabelledImage> = test
        .iter()
        .enumerate()
        .map(|(i, r)| LabelledImage {
            path: i.to_string().into(),
            label: r.identity_label,
            identity: r.identity_label.to_string(),
        })
        .collect();
    let pairs = make_pairs(
        &images,
        cfg.eval_folds().map_err(err)?,
        cfg.eval_pairs_per_class(),
        cfg.fold_assignment().map_err(err)?,
        0,
    )
    .map_err(err)?;
    let accuracy = |net: &Backbone, xs: &[FeatureMap]| -> Result<f64, String> {
        verification_accuracy(&pairs, |p| {
            let i: usize = p.to_string_lossy().parse().expect("index path");
            Ok(net.forward_one(&xs[i])?.embedding)
        })
        .map(|r| r.accuracy)
        .map_err(err)
    };

    let mut results: BTreeMap<u64, [StudentResult; 2]> = BTreeMap::new();
    let mut teacher_acc = Vec::new();
    for seed in 0..3u64 {
        let mut tc = cfg.train_config().map_err(err)?;
        tc.seed = seed;
        let teacher = train_teacher(&hr_set, &bcfg, &tc, &mut |_| {}).map_err(err)?.checkpoint;
        teacher_acc.push(accuracy(&teacher.backbone, &test_hr)?);
        let run = |lambda: f64| -> Result<StudentResult, String> {
            let mut sc = tc.clone();
            sc.distill.lambda_distill = lambda;
            let st = train_student(&lr_set, &teacher, &bcfg, &sc, &mut |_| {}).map_err(|e| format!("seed {seed} lambda {lambda}: {e}"))?.checkpoint;
            let rep = attention_correlation(&teacher.backbone, &st.backbone, &test_hr, &test_set.inputs).map_err(err)?;
            Ok(StudentResult {
                accuracy: accuracy(&st.backbone, &test_set.inputs)?,
                r: rep.sites.iter().map(|s| (format!("{}.{}", s.site_id, s.kind), s.r)).collect(),
            })
        };
        results.insert(seed, [run(0.0)?, run(5.0)?]);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let acc0: Vec<f64> = results.values().map(|r| r[0].accuracy).collect();
    let acc5: Vec<f64> = results.values().map(|r| r[1].accuracy).collect();
    let mut lines = vec![format!(
        "teacher HR acc {:?}; lambda=0 acc {:?} mean {:.4}; lambda=5 acc {:?} mean {:.4}",
        round4(&teacher_acc),
        round4(&acc0),
        mean(&acc0),
        round4(&acc5),
        mean(&acc5)
    )];
    let mut failures = Vec::new();
    let any_strict = acc0.iter().zip(&acc5).any(|(a, b)| b > a);
    if !(mean(&acc5) >= mean(&acc0) && any_strict) {
        failures.push("(a) lambda=5 mean accuracy does not improve on lambda=0".to_string());
    }
    let keys: Vec<String> = results[&0][0].r.keys().cloned().collect();
    for key in keys {
        let collect = |k: usize| -> Option<Vec<f64>> { results.values().map(|r| r[k].r[&key]).collect() };
        match (collect(0), collect(1)) {
            (Some(r0), Some(r5)) => {
                let (m0, m5) = (mean(&r0), mean(&r5));
                lines.push(format!("    {key:<34} r lambda=0 {m0:.4}  lambda=5 {m5:.4}"));
                if m5 <= m0 {
                    failures.push(format!("(b) {key}: mean r {m5:.4} not above baseline {m0:.4}"));
                }
            }
            _ => failures.push(format!("(b) {key}: correlation undefined for some seed")),
        }
    }
    let detail = lines.join("\n");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}\n{detail}", failures.join("; ")))
    }
}

fn round4(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn askd(args: &[&str], cwd: &Path) -> Result<(i32, String), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_askd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ASKD_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    Ok((out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned()))
}

fn parse_kv(path: &Path) -> Result<BTreeMap<String, String>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("{}: bad line `{l}`", path.display()))
        })
        .collect()
}

fn cli_pipeline() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf");
    let conf = conf.to_str().unwrap();
    let base = ["--config", conf, "--out", "runs", "--set", "epochs=3", "--set", "lr_decay_epochs=2"];
    let step = |extra: &[&str]| -> Result<(), String> {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let (code, stderr) = askd(&args, root)?;
        ensure(code == 0, || format!("askd {} exited {code}: {stderr}", extra.join(" ")))
    };
    step(&["synth", "--images", "20"])?;
    step(&["degrade", "--root", "runs/synth/images"])?;
    step(&["train-teacher", "--manifest", "runs/degrade/train.tsv"])?;
    step(&["train-student", "--manifest", "runs/degrade/train.tsv", "--teacher", "runs/train-teacher/checkpoint.askd"])?;
    step(&[
        "evaluate",
        "--checkpoint",
        "runs/train-student/checkpoint.askd",
        "--manifest",
        "runs/degrade/test.tsv",
        "--ratio",
        "4",
    ])?;
    step(&[
        "--run-id",
        "identify",
        "evaluate",
        "--task",
        "identify",
        "--checkpoint",
        "runs/train-student/checkpoint.askd",
        "--manifest",
        "runs/degrade/test.tsv",
        "--ratio",
        "4",
    ])?;
    step(&[
        "analyze",
        "--teacher",
        "runs/train-teacher/checkpoint.askd",
        "--student",
        "runs/train-student/checkpoint.askd",
        "--manifest",
        "runs/degrade/test.tsv",
    ])?;

    let runs = root.join("runs");
    let verify = parse_kv(&runs.join("evaluate/eval_report.kv"))?;
    let acc: f64 = verify.get("verification.accuracy").ok_or("no verification.accuracy")?.parse().map_err(err)?;
    ensure((0.0..=1.0).contains(&acc), || format!("accuracy {acc}"))?;
    let ident = parse_kv(&runs.join("identify/eval_report.kv"))?;
    let rank1: f64 = ident.get("identification.rank1").ok_or("no identification.rank1")?.parse().map_err(err)?;
    let corr = parse_kv(&runs.join("analyze/correlation_report.kv"))?;
    let sites = corr.keys().filter(|k| k.starts_with("r.")).count();
    ensure(sites == 8, || format!("correlation report lists {sites} site values, expected 8"))?;
    for (k, v) in &corr {
        if k.starts_with("r.") && v != "undefined" {
            let r: f64 = v.parse().map_err(err)?;
            ensure((-1.0..=1.0).contains(&r), || format!("{k} = {r}"))?;
        }
    }
    let mut plots = 0;
    for p in [
        "train-teacher/loss_curve.png",
        "train-student/loss_curve.png",
        "train-student/rho_curve.png",
        "analyze/correlation_bars.png",
    ] {
        image::open(runs.join(p)).map_err(|e| format!("{p}: {e}"))?;
        plots += 1;
    }
    for run in ["synth", "degrade", "train-teacher", "train-student", "evaluate", "identify", "analyze"] {
        let listing = fs::read_to_string(runs.join(run).join("MANIFEST.txt")).map_err(|e| format!("{run}: {e}"))?;
        for f in listing.lines() {
            ensure(runs.join(run).join(f).is_file(), || format!("{run}/MANIFEST.txt lists missing {f}"))?;
        }
    }
    Ok(format!(
        "7 runs exit 0; verification acc {acc:.3}, rank-1 {rank1:.3}, 8 site correlations, {plots} plots decode, manifests complete"
    ))
}
