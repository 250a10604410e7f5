//! Verification (1:1) and identification (1:N) metrics over embeddings.
//!
//! Similarity is the cosine of L2-normalized embeddings in both tasks.
//! Verification follows the k-fold protocol: for each held-out fold the
//! threshold that maximizes accuracy on the remaining folds is applied to it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationPair {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub is_same: bool,
    pub fold_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub accuracy: f64,
    pub per_fold: Vec<FoldResult>,
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::Normalization("zero-norm embedding".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// L2-normalizes every row; zero rows are an error.
pub fn normalize_rows(m: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) {
            return Err(Error::Normalization(format!("embedding row {i} has zero norm")));
        }
        row /= n;
    }
    Ok(out)
}

/// Candidate thresholds: -inf, midpoints of consecutive sorted scores, +inf.
/// A pair is predicted "same" when its score is strictly above the threshold.
pub fn candidate_thresholds(sorted: &[f64]) -> Vec<f64> {
    let mut c = Vec::with_capacity(sorted.len() + 1);
    c.push(f64::NEG_INFINITY);
    c.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    c.push(f64::INFINITY);
    c
}

/// Threshold with the best accuracy on `(scores, is_same)`; the smallest one wins ties.
pub fn best_threshold(scores: &[f64], is_same: &[bool]) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    // positives among sorted[..k]
    let mut pos_prefix = vec![0usize; sorted.len() + 1];
    for (k, &i) in order.iter().enumerate() {
        pos_prefix[k + 1] = pos_prefix[k] + is_same[i] as usize;
    }
    let n = sorted.len();
    let total_pos = pos_prefix[n];
    let mut best = (f64::NEG_INFINITY, -1.0);
    for t in candidate_thresholds(&sorted) {
        let k = sorted.partition_point(|&s| s <= t);
        let true_neg = k - pos_prefix[k];
        let true_pos = total_pos - pos_prefix[k];
        let acc = (true_pos + true_neg) as f64 / n.max(1) as f64;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    best
}

pub fn accuracy_at(scores: &[f64], is_same: &[bool], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(is_same)
        .filter(|(&s, &y)| (s > threshold) == y)
        .count();
    correct as f64 / scores.len().max(1) as f64
}

/// Cross-validated verification accuracy from precomputed similarities.
pub fn verification_from_scores(
    scores: &[f64],
    is_same: &[bool],
    folds: &[usize],
) -> Result<VerificationResult> {
    if scores.len() != is_same.len() || scores.len() != folds.len() {
        return Err(Error::Dimension("scores, labels and folds differ in length".into()));
    }
    let fold_ids: BTreeSet<usize> = folds.iter().copied().collect();
    if fold_ids.len() < 2 {
        return Err(Error::Protocol(format!(
            "need at least 2 folds, found {}",
            fold_ids.len()
        )));
    }
    for &f in &fold_ids {
        let labels: BTreeSet<bool> = folds
            .iter()
            .zip(is_same)
            .filter(|(&g, _)| g == f)
            .map(|(_, &y)| y)
            .collect();
        if labels.len() != 2 {
            return Err(Error::Protocol(format!(
                "fold {f} does not contain both positive and negative pairs"
            )));
        }
    }
    let mut per_fold = Vec::with_capacity(fold_ids.len());
    for &f in &fold_ids {
        let (mut tr_s, mut tr_y, mut te_s, mut te_y) = (vec![], vec![], vec![], vec![]);
        for ((&s, &y), &g) in scores.iter().zip(is_same).zip(folds) {
            if g == f {
                te_s.push(s);
                te_y.push(y);
            } else {
                tr_s.push(s);
                tr_y.push(y);
            }
        }
        let (threshold, _) = best_threshold(&tr_s, &tr_y);
        per_fold.push(FoldResult {
            fold_id: f,
            threshold,
            accuracy: accuracy_at(&te_s, &te_y, threshold),
        });
    }
    let accuracy = per_fold.iter().map(|f| f.accuracy).sum::<f64>() / per_fold.len() as f64;
    Ok(VerificationResult { accuracy, per_fold })
}

/// Verification accuracy over image pairs, embedding each distinct path once.
pub fn verification_accuracy<E>(pairs: &[VerificationPair], mut embedder: E) -> Result<VerificationResult>
where
    E: FnMut(&Path) -> Result<Array1<f64>>,
{
    let mut cache: HashMap<PathBuf, Array1<f64>> = HashMap::new();
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        for path in [&p.path_a, &p.path_b] {
            if !cache.contains_key(path) {
                let e = embedder(path)?;
                cache.insert(path.clone(), e);
            }
        }
        scores.push(cosine_similarity(cache[&p.path_a].view(), cache[&p.path_b].view())?);
    }
    let is_same: Vec<bool> = pairs.iter().map(|p| p.is_same).collect();
    let folds: Vec<usize> = pairs.iter().map(|p| p.fold_id).collect();
    verification_from_scores(&scores, &is_same, &folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationSet {
    pub probe_embeddings: Array2<f64>,
    pub gallery_embeddings: Array2<f64>,
    pub probe_labels: Vec<usize>,
    pub gallery_labels: Vec<usize>,
}

impl IdentificationSet {
    fn validate(&self) -> Result<()> {
        if self.probe_embeddings.nrows() != self.probe_labels.len()
            || self.gallery_embeddings.nrows() != self.gallery_labels.len()
            || self.probe_embeddings.ncols() != self.gallery_embeddings.ncols()
        {
            return Err(Error::Dimension("identification set shapes disagree".into()));
        }
        if self.gallery_labels.is_empty() {
            return Err(Error::Evaluation("empty gallery".into()));
        }
        let gallery: BTreeSet<usize> = self.gallery_labels.iter().copied().collect();
        if let Some(l) = self.probe_labels.iter().find(|l| !gallery.contains(l)) {
            return Err(Error::Evaluation(format!("probe label {l} is absent from the gallery")));
        }
        Ok(())
    }

    /// 0-based rank of the first gallery item sharing each probe's label.
    /// Ties in similarity keep gallery index order.
    pub fn first_hit_ranks(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let probes = normalize_rows(&self.probe_embeddings)?;
        let gallery = normalize_rows(&self.gallery_embeddings)?;
        let sims = probes.dot(&gallery.t());
        Ok(sims
            .rows()
            .into_iter()
            .zip(&self.probe_labels)
            .map(|(row, &label)| {
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
                order
                    .iter()
                    .position(|&g| self.gallery_labels[g] == label)
                    .expect("validated")
            })
            .collect())
    }
}

/// Rank-k accuracy for each requested k; `k` must lie in `1..=G`.
pub fn rank_k_accuracy(ids: &IdentificationSet, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let g = ids.gallery_labels.len();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > g) {
        return Err(Error::Evaluation(format!("rank {k} outside 1..={g}")));
    }
    let ranks = ids.first_hit_ranks()?;
    let p = ranks.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / p))
        .collect())
}

/// Like [`rank_k_accuracy`], but every `k > G` is evaluated at `G` (keys keep the requested k).
pub fn rank_k_accuracy_clipped(ids: &IdentificationSet, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let g = ids.gallery_labels.len();
    let clipped: Vec<usize> = ks.iter().map(|&k| k.min(g)).collect();
    let acc = rank_k_accuracy(ids, &clipped)?;
    Ok(ks.iter().zip(&clipped).map(|(&k, c)| (k, acc[c])).collect())
}

/// FNV-1a, stable across platforms and releases.
pub fn stable_hash(seed: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed.to_le_bytes().iter().chain(text.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldAssignment {
    /// Identity-disjoint folds from a seeded hash of the identity name.
    IdentityHash,
    /// Pairs dealt round-robin into folds, positives and negatives separately.
    RoundRobin,
}

impl std::str::FromStr for FoldAssignment {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity_hash" => Ok(Self::IdentityHash),
            "round_robin" => Ok(Self::RoundRobin),
            other => Err(format!("expected identity_hash or round_robin, got `{other}`")),
        }
    }
}

/// A labelled image for pair construction.
#[derive(Debug, Clone)]
pub struct LabelledImage {
    pub path: PathBuf,
    pub label: usize,
    pub identity: String,
}

/// Builds up to `pairs_per_class` positive and as many negative pairs per fold
/// (identity-hash) or overall (round-robin), deterministically from `seed`.
pub fn make_pairs(
    images: &[LabelledImage],
    folds: usize,
    pairs_per_class: usize,
    assignment: FoldAssignment,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    if folds < 2 {
        return Err(Error::Protocol("need at least 2 folds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Pairs<'a> = Vec<(&'a LabelledImage, &'a LabelledImage)>;
    fn all_pairs<'a>(subset: &[&'a LabelledImage]) -> (Pairs<'a>, Pairs<'a>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..subset.len() {
            for j in i + 1..subset.len() {
                let p = (subset[i], subset[j]);
                if subset[i].label == subset[j].label {
                    pos.push(p);
                } else {
                    neg.push(p);
                }
            }
        }
        (pos, neg)
    }
    fn to_pair((a, b): (&LabelledImage, &LabelledImage), is_same: bool, fold_id: usize) -> VerificationPair {
        VerificationPair {
            path_a: a.path.clone(),
            path_b: b.path.clone(),
            is_same,
            fold_id,
        }
    }
    let mut out = Vec::new();
    match assignment {
        FoldAssignment::RoundRobin => {
            let refs: Vec<&LabelledImage> = images.iter().collect();
            let (mut pos, mut neg) = all_pairs(&refs);
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let n = pairs_per_class.min(pos.len()).min(neg.len());
            if n < folds {
                return Err(Error::Protocol(format!(
                    "only {n} pairs per class for {folds} folds"
                )));
            }
            for (i, p) in pos.into_iter().take(n).enumerate() {
                out.push(to_pair(p, true, i % folds));
            }
            for (i, p) in neg.into_iter().take(n).enumerate() {
                out.push(to_pair(p, false, i % folds));
            }
        }
        FoldAssignment::IdentityHash => {
            for f in 0..folds {
                let members: Vec<&LabelledImage> = images
                    .iter()
                    .filter(|im| (stable_hash(seed, &im.identity) % folds as u64) as usize == f)
                    .collect();
                let (mut pos, mut neg) = all_pairs(&members);
                if pos.is_empty() || neg.is_empty() {
                    return Err(Error::Protocol(format!(
                        "fold {f} cannot hold both positive and negative pairs"
                    )));
                }
                pos.shuffle(&mut rng);
                neg.shuffle(&mut rng);
                let n = pairs_per_class.min(pos.len()).min(neg.len());
                for p in pos.into_iter().take(n) {
                    out.push(to_pair(p, true, f));
                }
                for p in neg.into_iter().take(n) {
                    out.push(to_pair(p, false, f));
                }
            }
        }
    }
    Ok(out)
}

/// Writes `<path_a>\t<path_b>\t<0|1>\t<fold>` lines.
pub fn write_pairs(path: &Path, pairs: &[VerificationPair]) -> Result<()> {
    let text: String = pairs
        .iter()
        .map(|p| {
            format!(
                "{}\t{}\t{}\t{}\n",
                p.path_a.display(),
                p.path_b.display(),
                p.is_same as u8,
                p.fold_id
            )
        })
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a pair list; relative paths resolve against the file's directory.
pub fn read_pairs(path: &Path) -> Result<Vec<VerificationPair>> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::Data(format!("{}:{}: {m}", path.display(), n + 1));
            if f.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let is_same = match f[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("same flag must be 0 or 1")),
            };
            Ok(VerificationPair {
                path_a: dir.join(f[0]),
                path_b: dir.join(f[1]),
                is_same,
                fold_id: f[3].parse().map_err(|_| bad("bad fold id"))?,
            })
        })
        .collect()
}
