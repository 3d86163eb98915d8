//! Singer similarity (EER, MNR) and identification (linear probe) metrics
//! over tables of frozen embeddings.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("embedding rows lack singer labels")]
    MissingLabels,
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("trial set has no {0} trials")]
    SingleClass(&'static str),
    #[error("singer {singer:?} has {files} files, fewer than {folds} folds")]
    TooFewFiles { singer: String, files: usize, folds: usize },
    #[error("test label {0:?} does not occur in the training split")]
    UnseenLabel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One embedding vector and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub clip_id: String,
    pub segment: usize,
    pub singer_id: Option<String>,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, rows: Vec<EmbeddingRow>) -> Self {
        debug_assert!(rows.iter().all(|r| r.vector.len() == dim));
        Self { dim, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.singer_id.is_some())
    }

    /// Row indices per singer, ordered by singer id.
    pub fn by_singer(&self) -> Result<BTreeMap<&str, Vec<usize>>, MetricsError> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            let s = r.singer_id.as_deref().ok_or(MetricsError::MissingLabels)?;
            out.entry(s).or_default().push(i);
        }
        Ok(out)
    }

    /// Row indices per recording, ordered by clip id.
    pub fn by_recording(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            out.entry(r.clip_id.as_str()).or_default().push(i);
        }
        out
    }

    /// Unit-normalized `f64` copies of every row; zero rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| unit(&r.vector)).collect()
    }
}

fn unit(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| f64::from(x) / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    dot(&unit(a), &unit(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub a: usize,
    pub b: usize,
    pub same_singer: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn scores(&self, same: bool) -> Vec<f64> {
        self.trials.iter().filter(|t| t.same_singer == same).map(|t| t.score).collect()
    }

    pub fn same_fraction(&self) -> f64 {
        self.trials.iter().filter(|t| t.same_singer).count() as f64 / self.trials.len().max(1) as f64
    }
}

/// Balanced same/different singer trials scored by cosine similarity.
///
/// Each trial is a same-singer pair with probability 1/2: a singer with at
/// least two segments and two distinct segments of it. Otherwise two distinct
/// singers and one segment of each.
pub fn sample_trials(table: &EmbeddingTable, n_pairs: usize, rng: &mut Rng) -> Result<TrialSet, MetricsError> {
    let groups: Vec<Vec<usize>> = table.by_singer()?.into_values().collect();
    if groups.len() < 2 {
        return Err(MetricsError::Insufficient(format!("{} singers, need at least 2", groups.len())));
    }
    let multi: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].len() >= 2).collect();
    if multi.is_empty() {
        return Err(MetricsError::Insufficient("no singer has two segments".into()));
    }
    let unit_rows = table.normalized();
    let mut trials = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let same = rng.gen_bool(0.5);
        let (a, b) = if same {
            let g = &groups[multi[rng.gen_range(0..multi.len())]];
            let pick = index::sample(rng, g.len(), 2);
            (g[pick.index(0)], g[pick.index(1)])
        } else {
            let pick = index::sample(rng, groups.len(), 2);
            let (ga, gb) = (&groups[pick.index(0)], &groups[pick.index(1)]);
            (ga[rng.gen_range(0..ga.len())], gb[rng.gen_range(0..gb.len())])
        };
        trials.push(Trial {
            a,
            b,
            same_singer: same,
            score: dot(&unit_rows[a], &unit_rows[b]),
        });
    }
    Ok(TrialSet { trials })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub det: Vec<DetPoint>,
}

/// Equal error rate of a trial set.
pub fn eer(trials: &TrialSet) -> Result<EerResult, MetricsError> {
    eer_from_scores(&trials.scores(true), &trials.scores(false))
}

/// Equal error rate from raw same-singer and different-singer scores.
///
/// Thresholds sweep every distinct score in ascending order followed by
/// `+inf`. At threshold `t`, FPR is the fraction of different-singer scores
/// `>= t` and FNR the fraction of same-singer scores `< t`. The EER is
/// linearly interpolated between the last sweep point with `FPR > FNR` and the
/// first with `FPR <= FNR`.
pub fn eer_from_scores(same: &[f64], different: &[f64]) -> Result<EerResult, MetricsError> {
    if same.is_empty() {
        return Err(MetricsError::SingleClass("same-singer"));
    }
    if different.is_empty() {
        return Err(MetricsError::SingleClass("different-singer"));
    }
    if same.iter().chain(different).any(|s| s.is_nan()) {
        return Err(MetricsError::InvalidParameter("NaN score".into()));
    }
    let mut s = same.to_vec();
    let mut d = different.to_vec();
    s.sort_by(f64::total_cmp);
    d.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = s.iter().chain(&d).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (ns, nd) = (s.len() as f64, d.len() as f64);
    let (mut below_same, mut below_diff) = (0usize, 0usize);
    let det: Vec<DetPoint> = thresholds
        .iter()
        .map(|&t| {
            while below_same < s.len() && s[below_same] < t {
                below_same += 1;
            }
            while below_diff < d.len() && d[below_diff] < t {
                below_diff += 1;
            }
            DetPoint {
                threshold: t,
                false_positive_rate: (d.len() - below_diff) as f64 / nd,
                false_negative_rate: below_same as f64 / ns,
            }
        })
        .collect();

    let gap = |p: &DetPoint| p.false_positive_rate - p.false_negative_rate;
    let k = det.iter().position(|p| gap(p) <= 0.0).expect("the +inf threshold has FPR 0 and FNR 1");
    let (eer, threshold) = if gap(&det[k]) == 0.0 || k == 0 {
        (det[k].false_positive_rate, det[k].threshold)
    } else {
        let (p, q) = (&det[k - 1], &det[k]);
        let w = gap(p) / (gap(p) - gap(q));
        let rate = p.false_positive_rate + w * (q.false_positive_rate - p.false_positive_rate);
        let thr = if q.threshold.is_finite() {
            p.threshold + w * (q.threshold - p.threshold)
        } else {
            p.threshold
        };
        (rate, thr)
    };
    Ok(EerResult { eer, threshold, det })
}

/// Normalized rank of one query: zero-based position of `q2` among the
/// candidates sorted by descending similarity to `q1`, ties resolved by
/// candidate order.
pub fn query_rank(q1: &[f64], candidates: &[&[f64]], target: usize) -> usize {
    let st = dot(q1, candidates[target]);
    candidates
        .iter()
        .enumerate()
        .filter(|&(i, c)| {
            let sc = dot(q1, c);
            sc > st || (sc == st && i < target)
        })
        .count()
}

/// Mean normalized rank over `k` queries with `n` candidates each.
///
/// A query picks a recording with at least two segments, draws distinct
/// `q1` and `q2` from it, draws `n - 1` distractors without replacement from
/// the other recordings and inserts `q2` at a uniformly random position.
pub fn mnr(table: &EmbeddingTable, k: usize, n: usize, rng: &mut Rng) -> Result<f64, MetricsError> {
    if k == 0 || n == 0 {
        return Err(MetricsError::InvalidParameter("K and N must be positive".into()));
    }
    let recordings: Vec<Vec<usize>> = table.by_recording().into_values().collect();
    let eligible: Vec<usize> = (0..recordings.len()).filter(|&r| recordings[r].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(MetricsError::Insufficient("no recording has two segments".into()));
    }
    if let Some(&r) = eligible.iter().find(|&&r| table.len() - recordings[r].len() < n - 1) {
        return Err(MetricsError::Insufficient(format!(
            "{} segments outside recording {r}, need {} distractors",
            table.len() - recordings[r].len(),
            n - 1
        )));
    }
    let unit_rows = table.normalized();
    let mut owner = vec![0usize; table.len()];
    for (r, rows) in recordings.iter().enumerate() {
        rows.iter().for_each(|&i| owner[i] = r);
    }
    let mut total = 0.0;
    let mut others = Vec::with_capacity(table.len());
    for _ in 0..k {
        let r = eligible[rng.gen_range(0..eligible.len())];
        let rows = &recordings[r];
        let pick = index::sample(rng, rows.len(), 2);
        let (q1, q2) = (rows[pick.index(0)], rows[pick.index(1)]);
        others.clear();
        others.extend((0..table.len()).filter(|&i| owner[i] != r));
        let mut set: Vec<usize> = index::sample(rng, others.len(), n - 1).into_iter().map(|j| others[j]).collect();
        let pos = rng.gen_range(0..n);
        set.insert(pos, q2);
        let cands: Vec<&[f64]> = set.iter().map(|&i| unit_rows[i].as_slice()).collect();
        total += query_rank(&unit_rows[q1], &cands, pos) as f64 / n as f64;
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// File-level k-fold partition per singer.
///
/// Each singer's files are shuffled and dealt round-robin into `folds` groups.
/// Fold `f` tests on group `f`, validates on group `f + 1 (mod folds)` and
/// trains on the rest. All segments of a file follow the file.
pub fn kfold_splits(table: &EmbeddingTable, folds: usize, rng: &mut Rng) -> Result<Vec<Fold>, MetricsError> {
    if folds < 3 {
        return Err(MetricsError::InvalidParameter("need at least 3 folds".into()));
    }
    let mut files: BTreeMap<&str, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        let s = r.singer_id.as_deref().ok_or(MetricsError::MissingLabels)?;
        files.entry(s).or_default().entry(r.clip_id.as_str()).or_default().push(i);
    }
    let mut group_of_row = vec![0usize; table.len()];
    for (singer, clips) in &files {
        if clips.len() < folds {
            return Err(MetricsError::TooFewFiles {
                singer: singer.to_string(),
                files: clips.len(),
                folds,
            });
        }
        let mut order: Vec<&Vec<usize>> = clips.values().collect();
        order.shuffle(rng);
        for (j, rows) in order.into_iter().enumerate() {
            rows.iter().for_each(|&i| group_of_row[i] = j % folds);
        }
    }
    Ok((0..folds)
        .map(|f| {
            let val_group = (f + 1) % folds;
            let mut fold = Fold {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for (i, &g) in group_of_row.iter().enumerate() {
                if g == f {
                    fold.test.push(i);
                } else if g == val_group {
                    fold.val.push(i);
                } else {
                    fold.train.push(i);
                }
            }
            fold
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.5,
        }
    }
}

/// Linear classifier over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `classes x (dim + 1)`, bias last.
    pub weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    fn standardize(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| (f64::from(v) - m) * s)
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| dot(&w[..x.len()], x) + w[x.len()])
            .collect()
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(&self.standardize(x)))
    }
}

/// Mean cross-entropy over the examples whose label is a known class.
fn cross_entropy(probe: &LinearProbe, data: &Labeled<'_>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in data {
        let Ok(k) = probe.classes.binary_search_by(|c| c.as_str().cmp(y)) else {
            continue;
        };
        let logits = probe.logits(&probe.standardize(x));
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        total += lse - logits[k];
        count += 1;
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub probe: LinearProbe,
}

/// Labeled vectors for one probe split.
pub type Labeled<'a> = [(&'a [f32], &'a str)];

fn accuracy(probe: &LinearProbe, data: &Labeled<'_>) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|(x, y)| probe.classes.get(probe.predict(x)).map(String::as_str) == Some(*y))
        .count();
    hits as f64 / data.len() as f64
}

/// Full-batch gradient descent on mean softmax cross-entropy from zero
/// initialization. Returns the test accuracy of the epoch with the best
/// validation accuracy; ties go to the lower validation cross-entropy, then
/// to the earlier epoch.
pub fn train_linear_probe(
    train: &Labeled<'_>,
    val: &Labeled<'_>,
    test: &Labeled<'_>,
    cfg: &ProbeConfig,
) -> Result<ProbeResult, MetricsError> {
    if train.is_empty() {
        return Err(MetricsError::Insufficient("empty probe training split".into()));
    }
    let dim = train[0].0.len();
    let mut classes: Vec<String> = train.iter().map(|(_, y)| y.to_string()).collect();
    classes.sort();
    classes.dedup();
    if let Some((_, y)) = test.iter().find(|(_, y)| classes.binary_search_by(|c| c.as_str().cmp(y)).is_err()) {
        return Err(MetricsError::UnseenLabel(y.to_string()));
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for (x, _) in train {
        mean.iter_mut().zip(x.iter()).for_each(|(m, &v)| *m += f64::from(v) / n);
    }
    let mut var = vec![0.0; dim];
    for (x, _) in train {
        var.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (&v, m))| *s += (f64::from(v) - m).powi(2) / n);
    }
    let scale = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    let mut probe = LinearProbe {
        classes,
        mean,
        scale,
        weights: Vec::new(),
    };
    let c = probe.classes.len();
    probe.weights = vec![vec![0.0; dim + 1]; c];

    let xs: Vec<Vec<f64>> = train.iter().map(|(x, _)| probe.standardize(x)).collect();
    let ys: Vec<usize> = train
        .iter()
        .map(|(_, y)| probe.classes.binary_search_by(|c| c.as_str().cmp(y)).unwrap())
        .collect();

    let score = |p: &LinearProbe| (accuracy(p, val), cross_entropy(p, val));
    let mut best = (score(&probe), 0usize, probe.weights.clone());
    let mut grad = vec![vec![0.0; dim + 1]; c];
    for epoch in 1..=cfg.epochs {
        grad.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        for (x, &y) in xs.iter().zip(&ys) {
            let logits = probe.logits(x);
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (k, g) in grad.iter_mut().enumerate() {
                let coef = (exps[k] / z - if k == y { 1.0 } else { 0.0 }) / n;
                g[..dim].iter_mut().zip(x).for_each(|(gv, &xv)| *gv += coef * xv);
                g[dim] += coef;
            }
        }
        for (w, g) in probe.weights.iter_mut().zip(&grad) {
            w.iter_mut().zip(g).for_each(|(wv, gv)| *wv -= cfg.learning_rate * gv);
        }
        let (acc, loss) = score(&probe);
        if acc > best.0 .0 || (acc == best.0 .0 && loss < best.0 .1) {
            best = ((acc, loss), epoch, probe.weights.clone());
        }
    }
    probe.weights = best.2;
    Ok(ProbeResult {
        accuracy: accuracy(&probe, test),
        val_accuracy: best.0 .0,
        best_epoch: best.1,
        probe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub classes: usize,
}

/// k-fold linear-probe accuracy averaged over folds.
pub fn probe_kfold(
    table: &EmbeddingTable,
    folds: usize,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<ProbeReport, MetricsError> {
    let splits = kfold_splits(table, folds, rng)?;
    let pick = |idx: &[usize]| -> Vec<(&[f32], &str)> {
        idx.iter()
            .map(|&i| {
                let r = &table.rows[i];
                (r.vector.as_slice(), r.singer_id.as_deref().unwrap_or_default())
            })
            .collect()
    };
    let mut fold_accuracies = Vec::with_capacity(folds);
    for f in &splits {
        let res = train_linear_probe(&pick(&f.train), &pick(&f.val), &pick(&f.test), cfg)?;
        fold_accuracies.push(res.accuracy);
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64;
    Ok(ProbeReport {
        fold_accuracies,
        mean_accuracy,
        classes: table.by_singer()?.len(),
    })
}

#[cfg(test)]
mod tests;
