//! Participant contribution measurement.
//!
//! Coalition values come from a [`CoalitionValueFn`], usually
//! [`fl_value_function`]: the logged per-party updates are re-aggregated
//! for the coalition alone and the resulting model is scored, so no
//! coalition needs to be retrained.
//!
//! [`wtdp_shapley`] is weighted, truncated permutation sampling: sampled
//! orderings are walked accumulating marginal contributions, each walk
//! stops once the prefix value is within `tolerance` of the grand-coalition
//! value, mean marginals are scaled by the party weights and the result is
//! renormalized so that the values sum to `v(N) − v(∅)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::dataquality::SceneRecord;
use crate::metrics::{recall_at_k, MetricError};
use crate::orchestrator::{replay, ReplayError, RoundRecord};
use crate::rng::SplitMix64;
use crate::toymodel::{contrastive_loss_and_grads, BlockName, ModelSnapshot, PairRef};

/// Largest party count [`exact_shapley`] enumerates.
pub const MAX_EXACT_PARTIES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum ContributionError {
    #[error("{n} parties exceed the exact enumeration limit of {MAX_EXACT_PARTIES}; use wtdp_shapley")]
    TooManyParties { n: usize },
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error("snapshot and baseline differ structurally")]
    Identity,
    #[error("unknown block {0}")]
    Block(BlockName),
    #[error("parties: {0}")]
    Parties(String),
    #[error(transparent)]
    History(#[from] ReplayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("value function: {0}")]
    Value(String),
}

type Evaluate<'a> = dyn Fn(&BTreeSet<String>) -> Result<f64, ContributionError> + Send + Sync + 'a;

/// A cooperative game over named parties with a memo of evaluated
/// coalitions. Safe to evaluate from several threads.
pub struct CoalitionValueFn<'a> {
    parties: Vec<String>,
    evaluate: Box<Evaluate<'a>>,
    cache: Mutex<HashMap<u32, f64>>,
    evaluations: AtomicUsize,
}

impl fmt::Debug for CoalitionValueFn<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoalitionValueFn")
            .field("parties", &self.parties)
            .field("evaluations", &self.evaluations())
            .finish()
    }
}

impl<'a> CoalitionValueFn<'a> {
    pub fn new(
        parties: Vec<String>,
        evaluate: impl Fn(&BTreeSet<String>) -> Result<f64, ContributionError> + Send + Sync + 'a,
    ) -> Result<Self, ContributionError> {
        if parties.iter().collect::<BTreeSet<_>>().len() != parties.len() {
            return Err(ContributionError::Parties("party ids must be unique".into()));
        }
        if parties.len() >= 32 {
            return Err(ContributionError::Parties(format!("{} parties exceed the coalition bitmask", parties.len())));
        }
        Ok(Self {
            parties,
            evaluate: Box::new(evaluate),
            cache: Mutex::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        })
    }

    /// Infallible game, mostly for constructed examples.
    pub fn from_fn(parties: &[&str], v: impl Fn(&BTreeSet<String>) -> f64 + Send + Sync + 'a) -> Result<Self, ContributionError> {
        Self::new(parties.iter().map(|p| p.to_string()).collect(), move |s| Ok(v(s)))
    }

    pub fn parties(&self) -> &[String] {
        &self.parties
    }

    /// Number of underlying evaluations (cache misses) so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::SeqCst)
    }

    fn members(&self, mask: u32) -> BTreeSet<String> {
        self.parties
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, p)| p.clone())
            .collect()
    }

    fn value_mask(&self, mask: u32) -> Result<f64, ContributionError> {
        if let Some(&v) = self.cache.lock().expect("cache").get(&mask) {
            return Ok(v);
        }
        let v = (self.evaluate)(&self.members(mask))?;
        self.evaluations.fetch_add(1, Ordering::SeqCst);
        self.cache.lock().expect("cache").insert(mask, v);
        Ok(v)
    }

    /// Value of a coalition given by party ids.
    pub fn value(&self, coalition: &BTreeSet<String>) -> Result<f64, ContributionError> {
        let mut mask = 0u32;
        for p in coalition {
            let i = self
                .parties
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| ContributionError::Parties(format!("unknown party `{p}`")))?;
            mask |= 1 << i;
        }
        self.value_mask(mask)
    }

    fn grand_mask(&self) -> u32 {
        ((1u64 << self.parties.len()) - 1) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    Wtdp,
}

impl fmt::Display for ShapleyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapleyMethod::Exact => "exact",
            ShapleyMethod::Wtdp => "wtdp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyResult {
    /// Values in the game's party order.
    pub values: Vec<(String, f64)>,
    pub method: ShapleyMethod,
    /// Sampled permutations (0 for the exact method).
    pub samples_used: usize,
    /// Walks cut short by the truncation rule.
    pub truncated_walks: usize,
    pub truncation_tolerance: f64,
    pub party_weights: BTreeMap<String, f64>,
    pub empty_value: f64,
    pub grand_value: f64,
    /// Coalition evaluations spent by this call.
    pub evaluations: usize,
}

impl ShapleyResult {
    pub fn value(&self, party: &str) -> Option<f64> {
        self.values.iter().find(|(p, _)| p == party).map(|(_, v)| *v)
    }

    /// `Σφ − (v(N) − v(∅))`.
    pub fn efficiency_residual(&self) -> f64 {
        self.values.iter().map(|(_, v)| v).sum::<f64>() - (self.grand_value - self.empty_value)
    }
}

impl fmt::Display for ShapleyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method={}", self.method)?;
        writeln!(f, "parties={}", self.values.len())?;
        writeln!(f, "samples={}", self.samples_used)?;
        writeln!(f, "truncated_walks={}", self.truncated_walks)?;
        writeln!(f, "truncation_tolerance={}", self.truncation_tolerance)?;
        writeln!(f, "evaluations={}", self.evaluations)?;
        writeln!(f, "v_empty={:.9}", self.empty_value)?;
        writeln!(f, "v_grand={:.9}", self.grand_value)?;
        writeln!(f, "efficiency_residual={:.3e}", self.efficiency_residual())?;
        for (i, (party, v)) in self.values.iter().enumerate() {
            let w = self.party_weights.get(party).copied().unwrap_or(1.0);
            write!(f, "value.{party}={v:.9} weight={w}")?;
            if i + 1 < self.values.len() {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// `|S|! (n − |S| − 1)! / n!` for every `|S| = 0..n`.
fn shapley_weights(n: usize) -> Vec<f64> {
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect()
}

/// Exact Shapley values by enumerating all `2ⁿ` coalitions, each evaluated
/// once; evaluations run on scoped worker threads.
pub fn exact_shapley(game: &CoalitionValueFn<'_>) -> Result<ShapleyResult, ContributionError> {
    let n = game.parties.len();
    if n > MAX_EXACT_PARTIES {
        return Err(ContributionError::TooManyParties { n });
    }
    let before = game.evaluations();
    let total = 1usize << n;
    let workers = thread::available_parallelism().map_or(1, |p| p.get()).clamp(1, total);
    let mut values = vec![0.0; total];
    thread::scope(|scope| -> Result<(), ContributionError> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..total)
                        .step_by(workers)
                        .map(|mask| game.value_mask(mask as u32).map(|v| (mask, v)))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        for h in handles {
            for (mask, v) in h.join().expect("value worker panicked")? {
                values[mask] = v;
            }
        }
        Ok(())
    })?;
    let weights = shapley_weights(n);
    let phi = (0..n)
        .map(|i| {
            let bit = 1usize << i;
            let mut sum = 0.0;
            for s in (0..total).filter(|s| s & bit == 0) {
                sum += weights[s.count_ones() as usize] * (values[s | bit] - values[s]);
            }
            (game.parties[i].clone(), sum)
        })
        .collect();
    Ok(ShapleyResult {
        values: phi,
        method: ShapleyMethod::Exact,
        samples_used: 0,
        truncated_walks: 0,
        truncation_tolerance: 0.0,
        party_weights: game.parties.iter().map(|p| (p.clone(), 1.0)).collect(),
        empty_value: values[0],
        grand_value: values[total - 1],
        evaluations: game.evaluations() - before,
    })
}

/// Weighted, truncated permutation-sampling Shapley approximation.
///
/// `weights` must name every party with a positive finite weight; an empty
/// map means unit weights. Truncation uses a strict comparison, so a zero
/// tolerance walks every permutation to the end.
pub fn wtdp_shapley(
    game: &CoalitionValueFn<'_>,
    weights: &BTreeMap<String, f64>,
    budget: usize,
    tolerance: f64,
    seed: u64,
) -> Result<ShapleyResult, ContributionError> {
    let n = game.parties.len();
    if n == 0 {
        return Err(ContributionError::Parties("the game has no parties".into()));
    }
    if budget == 0 {
        return Err(ContributionError::Sampling("budget of 0 permutations completes no sample".into()));
    }
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        return Err(ContributionError::Sampling(format!("tolerance must be ≥ 0, got {tolerance}")));
    }
    let weights: BTreeMap<String, f64> = if weights.is_empty() {
        game.parties.iter().map(|p| (p.clone(), 1.0)).collect()
    } else {
        if let Some(p) = weights.keys().find(|p| !game.parties.contains(p)) {
            return Err(ContributionError::Weights(format!("weight for unknown party `{p}`")));
        }
        for p in &game.parties {
            match weights.get(p) {
                Some(&w) if w > 0.0 && w.is_finite() => {}
                Some(&w) => return Err(ContributionError::Weights(format!("weight of `{p}` must be positive, got {w}"))),
                None => return Err(ContributionError::Weights(format!("no weight for `{p}`"))),
            }
        }
        weights.clone()
    };
    let before = game.evaluations();
    let empty = game.value_mask(0)?;
    let grand = game.value_mask(game.grand_mask())?;
    let mut rng = SplitMix64::derive(seed, &["contribution", "wtdp"]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut marginal = vec![0.0; n];
    let mut truncated_walks = 0;
    for _ in 0..budget {
        rng.shuffle(&mut order);
        let mut mask = 0u32;
        let mut prev = empty;
        for &i in &order {
            if (prev - grand).abs() < tolerance {
                truncated_walks += 1;
                break;
            }
            mask |= 1 << i;
            let v = game.value_mask(mask)?;
            marginal[i] += v - prev;
            prev = v;
        }
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| weights[&game.parties[i]] * marginal[i] / budget as f64)
        .collect();
    let target = grand - empty;
    let sum: f64 = raw.iter().sum();
    let phi: Vec<f64> = if sum.abs() > 1e-12 * target.abs().max(1.0) {
        raw.iter().map(|r| r * target / sum).collect()
    } else {
        // Weighted marginals cancel: spread the gap evenly instead.
        raw.iter().map(|r| r + (target - sum) / n as f64).collect()
    };
    Ok(ShapleyResult {
        values: game.parties.iter().cloned().zip(phi).collect(),
        method: ShapleyMethod::Wtdp,
        samples_used: budget,
        truncated_walks,
        truncation_tolerance: tolerance,
        party_weights: weights,
        empty_value: empty,
        grand_value: grand,
        evaluations: game.evaluations() - before,
    })
}

/// Importance of each block: `metric(snapshot) − metric(snapshot with that
/// block reset to the baseline)`.
pub fn block_mask_attribution(
    snapshot: &ModelSnapshot,
    baseline: &ModelSnapshot,
    eval_fn: &dyn Fn(&ModelSnapshot) -> Result<f64, ContributionError>,
    blocks: &[BlockName],
) -> Result<BTreeMap<BlockName, f64>, ContributionError> {
    if !snapshot.structurally_matches(baseline) {
        return Err(ContributionError::Identity);
    }
    let full = eval_fn(snapshot)?;
    let mut out = BTreeMap::new();
    for &b in blocks {
        let base = baseline.block(b).ok_or(ContributionError::Block(b))?;
        let mut masked = snapshot.clone();
        *masked.block_mut(b).ok_or(ContributionError::Block(b))? = base.clone();
        out.insert(b, full - eval_fn(&masked)?);
    }
    Ok(out)
}

/// Model quality used as a coalition value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoalitionMetric {
    /// Retrieval recall@1 on the eval set.
    #[default]
    #[serde(rename = "recall_at_1")]
    RecallAt1,
    /// Negative symmetric contrastive loss over the whole eval set.
    NegEvalLoss,
}

pub fn score(model: &ModelSnapshot, eval_set: &[SceneRecord], metric: CoalitionMetric) -> Result<f64, ContributionError> {
    match metric {
        CoalitionMetric::RecallAt1 => Ok(recall_at_k(model, eval_set, 1)?),
        CoalitionMetric::NegEvalLoss => {
            let pairs: Vec<PairRef<'_>> = eval_set
                .iter()
                .filter(|r| !r.caption.is_empty())
                .map(|r| (r.image.as_slice(), r.caption.as_slice()))
                .collect();
            if pairs.is_empty() {
                return Err(MetricError::EmptyEvalSet.into());
            }
            let (loss, _) = contrastive_loss_and_grads(model, &pairs).map_err(|e| ContributionError::Value(e.to_string()))?;
            Ok(-loss)
        }
    }
}

/// Recall@1 of the model obtained by replaying only `coalition`'s logged
/// updates from `initial`. The empty coalition scores the base model.
pub fn fl_value_function(
    initial: &ModelSnapshot,
    records: &[RoundRecord],
    coalition: &BTreeSet<String>,
    eval_set: &[SceneRecord],
) -> Result<f64, ContributionError> {
    fl_value_with(initial, records, coalition, eval_set, CoalitionMetric::RecallAt1)
}

pub fn fl_value_with(
    initial: &ModelSnapshot,
    records: &[RoundRecord],
    coalition: &BTreeSet<String>,
    eval_set: &[SceneRecord],
    metric: CoalitionMetric,
) -> Result<f64, ContributionError> {
    let model = replay(initial, records, Some(coalition))?;
    score(&model, eval_set, metric)
}

/// The coalition game of a logged run, over every party that contributed
/// to at least one successful round.
pub fn fl_game<'a>(
    initial: &'a ModelSnapshot,
    records: &'a [RoundRecord],
    eval_set: &'a [SceneRecord],
    metric: CoalitionMetric,
) -> Result<CoalitionValueFn<'a>, ContributionError> {
    let parties: BTreeSet<String> = records
        .iter()
        .flat_map(|r| r.contributor_ids())
        .map(str::to_string)
        .collect();
    if parties.is_empty() {
        return Err(ContributionError::Parties("the log has no contributors".into()));
    }
    CoalitionValueFn::new(parties.into_iter().collect(), move |c| {
        fl_value_with(initial, records, c, eval_set, metric)
    })
}
