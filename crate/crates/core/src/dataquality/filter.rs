use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Corruption, SceneRecord};
use crate::toymodel::{ModelError, ModelSnapshot};

/// Otsu split of a score sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub threshold: f64,
    /// Between-class share of the total variance, in `[0, 1]`.
    pub separability: f64,
    /// Mean score below and above the threshold.
    pub low_mean: f64,
    pub high_mean: f64,
}

const OTSU_BINS: usize = 64;

/// Threshold maximizing the between-class variance of a 64-bin histogram.
/// `None` when the scores do not span a range.
pub fn otsu_split(scores: &[f64]) -> Option<OtsuSplit> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 || hi.is_nan() || lo.is_nan() {
        return None;
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut count = [0usize; OTSU_BINS];
    let mut sum = [0.0f64; OTSU_BINS];
    for &s in scores {
        let b = (((s - lo) / width) as usize).min(OTSU_BINS - 1);
        count[b] += 1;
        sum[b] += s;
    }
    let n = scores.len() as f64;
    let total_sum: f64 = scores.iter().sum();
    let mean = total_sum / n;
    let total_var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let (mut n0, mut s0) = (0usize, 0.0);
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for t in 1..OTSU_BINS {
        n0 += count[t - 1];
        s0 += sum[t - 1];
        let n1 = scores.len() - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / n, n1 as f64 / n);
        let m0 = s0 / n0 as f64;
        let m1 = (total_sum - s0) / n1 as f64;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(b, ..)| between > b) {
            best = Some((between, t, m0, m1));
        }
    }
    let (between, t, low_mean, high_mean) = best?;
    Some(OtsuSplit {
        threshold: lo + t as f64 * width,
        separability: if total_var > 0.0 { (between / total_var).min(1.0) } else { 0.0 },
        low_mean,
        high_mean,
    })
}

/// Largest ratio of the low to the high Otsu class mean for which the
/// automatic threshold cuts. A unimodal clean score distribution splits into
/// two halves of similar alignment and is left intact.
pub const MAX_MEAN_RATIO: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Threshold {
    #[default]
    Auto,
    Fixed(f64),
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Auto => f.write_str("auto"),
            Threshold::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Threshold::Auto);
        }
        s.parse::<f64>()
            .map(Threshold::Fixed)
            .map_err(|_| format!("threshold must be `auto` or a number, got `{s}`"))
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Threshold::Auto => s.serialize_str("auto"),
            Threshold::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold::Fixed(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Resolves a threshold for one party's scores. `Auto` cuts at the Otsu
/// split only when the low side's mean is at most [`MAX_MEAN_RATIO`] of the
/// (positive) high side's mean, and
/// keeps everything (threshold −1) otherwise. Returns the threshold and the
/// Otsu separability.
pub fn select_threshold(scores: &[f64], threshold: Threshold) -> (f64, Option<f64>) {
    match threshold {
        Threshold::Fixed(t) => (t, None),
        Threshold::Auto => match otsu_split(scores) {
            Some(split) if split.high_mean > 0.0 && split.low_mean <= MAX_MEAN_RATIO * split.high_mean => {
                (split.threshold, Some(split.separability))
            }
            Some(split) => (-1.0, Some(split.separability)),
            None => (-1.0, None),
        },
    }
}

fn scores(model: &ModelSnapshot, corpus: &[SceneRecord]) -> Result<Vec<f64>, ModelError> {
    let enc = model.encoder();
    corpus
        .iter()
        .map(|r| {
            if r.caption.is_empty() {
                Ok(-1.0)
            } else {
                enc.alignment_score(&r.image, &r.caption)
            }
        })
        .collect()
}

/// Scores every record by image/caption alignment and splits at
/// `threshold`: `score ≥ threshold` is kept. Caption-less records score −1.
pub fn score_and_filter(
    model: &ModelSnapshot,
    corpus: Vec<SceneRecord>,
    threshold: f64,
) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>), ModelError> {
    let s = scores(model, &corpus)?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (mut r, score) in corpus.into_iter().zip(s) {
        r.quality_score = Some(score);
        if score >= threshold {
            kept.push(r);
        } else {
            dropped.push(r);
        }
    }
    Ok((kept, dropped))
}

/// Federated training backend driven by the quality loop.
pub trait FederatedTrainer {
    type Error: std::error::Error + Send + Sync + 'static;

    /// Continues federated training from the current model on the given
    /// per-party data and returns the new global model.
    fn train(&mut self, corpora: &BTreeMap<String, Vec<SceneRecord>>) -> Result<ModelSnapshot, Self::Error>;

    /// Value of the stopping metric for `model`; higher is better.
    fn evaluate(&mut self, model: &ModelSnapshot) -> Result<f64, Self::Error>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityLoopConfig {
    pub enabled: bool,
    pub max_iters: usize,
    /// Stop once the metric reaches this value.
    pub target_metric: Option<f64>,
    /// Minimum records a party must keep.
    pub floor: usize,
    pub threshold: Threshold,
    /// Target length for caption expansion during repair.
    pub min_caption_len: usize,
}

impl Default for QualityLoopConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            max_iters: 2,
            target_metric: None,
            floor: 10,
            threshold: Threshold::Auto,
            min_caption_len: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartyFilterStats {
    pub party: String,
    pub threshold: f64,
    pub separability: Option<f64>,
    pub kept: usize,
    pub dropped: usize,
    /// Cumulative share of planted mismatches dropped so far (truth oracle).
    pub mismatch_recall: Option<f64>,
    /// Cumulative share of clean records dropped so far (truth oracle).
    pub clean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub metric: f64,
    pub parties: Vec<PartyFilterStats>,
}

#[derive(Debug, Clone)]
pub struct QualityOutcome {
    pub model: ModelSnapshot,
    pub corpora: BTreeMap<String, Vec<SceneRecord>>,
    pub reports: Vec<IterationReport>,
}

#[derive(Debug, thiserror::Error)]
pub enum QualityLoopError {
    #[error("quality loop needs at least one party")]
    NoParties,
    #[error("party `{party}` would keep only {kept} records (floor {floor})")]
    Starvation { party: String, kept: usize, floor: usize },
    #[error("training failed: {0}")]
    Trainer(Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn share(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Truth-oracle bookkeeping against the original corpora.
fn oracle_stats(original: &[SceneRecord], kept: &[SceneRecord]) -> (Option<f64>, Option<f64>) {
    if original.iter().any(|r| r.truth.is_none()) {
        return (None, None);
    }
    let kept_ids: std::collections::BTreeSet<&str> = kept.iter().map(|r| r.id.as_str()).collect();
    let count = |tag: Corruption| {
        let all: Vec<_> = original.iter().filter(|r| r.planted() == Some(tag)).collect();
        let gone = all.iter().filter(|r| !kept_ids.contains(r.id.as_str())).count();
        (gone, all.len())
    };
    let (mis_gone, mis_all) = count(Corruption::Mismatched);
    let (clean_gone, clean_all) = count(Corruption::Clean);
    (share(mis_gone, mis_all), share(clean_gone, clean_all))
}

/// Iterative data/model loop: train on everything, then repeatedly filter
/// each party's data with the current model and retrain on what is kept,
/// until the metric reaches the target or `max_iters` filter rounds ran.
/// Kept sets only shrink.
pub fn quality_loop<T: FederatedTrainer>(
    trainer: &mut T,
    parties: BTreeMap<String, Vec<SceneRecord>>,
    cfg: &QualityLoopConfig,
) -> Result<QualityOutcome, QualityLoopError> {
    if parties.is_empty() {
        return Err(QualityLoopError::NoParties);
    }
    let boxed = |e: T::Error| QualityLoopError::Trainer(Box::new(e));
    let original = parties.clone();
    let mut corpora = parties;
    let mut model = trainer.train(&corpora).map_err(boxed)?;
    let mut metric = trainer.evaluate(&model).map_err(boxed)?;
    let initial = corpora
        .iter()
        .map(|(p, recs)| {
            let (mismatch_recall, clean_loss) = oracle_stats(&original[p], recs);
            PartyFilterStats {
                party: p.clone(),
                threshold: -1.0,
                separability: None,
                kept: recs.len(),
                dropped: 0,
                mismatch_recall,
                clean_loss,
            }
        })
        .collect();
    let mut reports = vec![IterationReport {
        iteration: 0,
        metric,
        parties: initial,
    }];
    for iteration in 1..=cfg.max_iters {
        if cfg.target_metric.is_some_and(|t| metric >= t) {
            log::info!("quality loop reached target {metric:.4} after {} iterations", iteration - 1);
            break;
        }
        let mut next = BTreeMap::new();
        let mut stats = Vec::new();
        for (party, recs) in corpora {
            let s = scores(&model, &recs)?;
            let (threshold, separability) = select_threshold(&s, cfg.threshold);
            let (kept, dropped) = score_and_filter(&model, recs, threshold)?;
            if kept.len() < cfg.floor {
                return Err(QualityLoopError::Starvation {
                    party,
                    kept: kept.len(),
                    floor: cfg.floor,
                });
            }
            let (mismatch_recall, clean_loss) = oracle_stats(&original[&party], &kept);
            log::info!(
                "iteration {iteration}: party {party} threshold {threshold:.4} kept {} dropped {}",
                kept.len(),
                dropped.len()
            );
            stats.push(PartyFilterStats {
                party: party.clone(),
                threshold,
                separability,
                kept: kept.len(),
                dropped: dropped.len(),
                mismatch_recall,
                clean_loss,
            });
            next.insert(party, kept);
        }
        corpora = next;
        model = trainer.train(&corpora).map_err(boxed)?;
        metric = trainer.evaluate(&model).map_err(boxed)?;
        reports.push(IterationReport {
            iteration,
            metric,
            parties: stats,
        });
    }
    Ok(QualityOutcome { model, corpora, reports })
}
