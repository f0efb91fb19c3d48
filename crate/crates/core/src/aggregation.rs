//! Server-side fusion of adapter-only client updates.
//!
//! Results are maps from block name to matrix. [`fedavg_adapters`] returns
//! averaged *deltas* (turn them into values with [`deltas_to_values`]);
//! [`product_refactor`] and [`async_mix`] return new block *values*, ready
//! for [`apply_block_mask`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{orthonormalize_columns, symmetric_eigen, Matrix, ShapeError};
use crate::rng::SplitMix64;
use crate::toymodel::{AdapterPair, BlockMap, BlockName, ModelError, ModelSnapshot};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AggregationError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("updates trained from different base versions ({0:?}); route them through async_mix")]
    MixedBase(Vec<u64>),
    #[error("update from `{client}` is based on version {base}, ahead of the server's {current}")]
    FutureVersion { client: String, base: u64, current: u64 },
    #[error("update from `{client}` is {staleness} versions stale, beyond the history window of {window}")]
    TooStale { client: String, staleness: u64, window: usize },
    #[error("no server state recorded for version {0}")]
    History(u64),
    #[error("truncated factorization did not converge (residual {residual:e})")]
    Factorization { residual: f64 },
    #[error("invalid aggregation plan: {0}")]
    Plan(String),
    #[error("invalid update from `{client}`: {msg}")]
    Update { client: String, msg: String },
    #[error("strategy {got} cannot be used with {op}")]
    Strategy { op: &'static str, got: Strategy },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    SyncAvg,
    ProductRefactor,
    AsyncMix,
    Chained,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SyncAvg => "sync_avg",
            Strategy::ProductRefactor => "product_refactor",
            Strategy::AsyncMix => "async_mix",
            Strategy::Chained => "chained",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = AggregationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Strategy::SyncAvg, Strategy::ProductRefactor, Strategy::AsyncMix, Strategy::Chained]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AggregationError::Plan(format!("unknown strategy `{s}`")))
    }
}

/// One party's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub base_version: u64,
    pub deltas: BlockMap,
    pub sample_count: u64,
    pub submitted_round: u64,
}

impl ClientUpdate {
    pub fn validate(&self) -> Result<(), AggregationError> {
        let err = |msg: String| AggregationError::Update {
            client: self.client_id.clone(),
            msg,
        };
        if self.sample_count == 0 {
            return Err(err("sample_count must be at least 1".into()));
        }
        if let Some((name, _)) = self.deltas.iter().find(|(_, m)| !m.is_finite()) {
            return Err(err(format!("non-finite values in {name}")));
        }
        Ok(())
    }
}

/// Which blocks to aggregate and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationPlan {
    pub strategy: Strategy,
    pub block_mask: BTreeSet<BlockName>,
    /// Exponent `a` of the staleness decay `(1 + τ)^(−a)`.
    pub staleness_exponent: f64,
    /// Base mixing rate `β` for asynchronous updates.
    pub mixing_rate: f64,
    /// Number of past versions kept for asynchronous reconstruction.
    pub history_window: usize,
    /// Party order for chained rounds.
    pub chain_order: Vec<String>,
}

impl Default for AggregationPlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::SyncAvg,
            block_mask: BlockName::ALL.into_iter().collect(),
            staleness_exponent: 0.5,
            mixing_rate: 0.5,
            history_window: 16,
            chain_order: Vec::new(),
        }
    }
}

impl AggregationPlan {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        let bad = |m: String| Err(AggregationError::Plan(m));
        if self.block_mask.is_empty() {
            return bad("block_mask must not be empty".into());
        }
        if !(self.staleness_exponent >= 0.0 && self.staleness_exponent.is_finite()) {
            return bad(format!("staleness_exponent must be ≥ 0, got {}", self.staleness_exponent));
        }
        if !(self.mixing_rate > 0.0 && self.mixing_rate <= 1.0) {
            return bad(format!("mixing_rate must be in (0, 1], got {}", self.mixing_rate));
        }
        if self.history_window == 0 {
            return bad("history_window must be at least 1".into());
        }
        if self.strategy == Strategy::Chained {
            if self.chain_order.is_empty() {
                return bad("chained strategy needs a chain_order".into());
            }
            let unique: BTreeSet<_> = self.chain_order.iter().collect();
            if unique.len() != self.chain_order.len() {
                return bad("chain_order lists a party twice".into());
            }
        }
        Ok(())
    }

    /// `β_t = β · (1 + τ)^(−a)`.
    pub fn staleness_weight(&self, staleness: u64) -> f64 {
        self.mixing_rate * (1.0 + staleness as f64).powf(-self.staleness_exponent)
    }
}

/// Updates sorted by client id, validated, sharing one base version.
fn canonical_sync(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>, AggregationError> {
    if updates.is_empty() {
        return Err(AggregationError::Empty);
    }
    let bases: BTreeSet<u64> = updates.iter().map(|u| u.base_version).collect();
    if bases.len() > 1 {
        return Err(AggregationError::MixedBase(bases.into_iter().collect()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(AggregationError::Update {
                client: pair[0].client_id.clone(),
                msg: "submitted twice in one round".into(),
            });
        }
    }
    for u in &sorted {
        u.validate()?;
    }
    Ok(sorted)
}

/// Sample-weighted running mean `m += (n_k / S_k)(x_k − m)`. Identical
/// inputs come back bit-exact.
fn weighted_mean<'a>(items: impl IntoIterator<Item = (u64, &'a Matrix)>) -> Result<Option<Matrix>, ShapeError> {
    let mut mean: Option<Matrix> = None;
    let mut total = 0u64;
    for (n, x) in items {
        total += n;
        let w = n as f64 / total as f64;
        match &mut mean {
            None => mean = Some(x.clone()),
            Some(m) => {
                if !m.same_shape(x) {
                    return Err(ShapeError::Mismatch {
                        op: "weighted mean",
                        left: m.shape(),
                        right: x.shape(),
                    });
                }
                for (mi, xi) in m.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *mi += w * (xi - *mi);
                }
            }
        }
    }
    Ok(mean)
}

/// Masked blocks present in every update, or an error if only some have it.
fn shared_blocks(updates: &[&ClientUpdate], mask: &BTreeSet<BlockName>) -> Result<Vec<BlockName>, AggregationError> {
    let mut out = Vec::new();
    for &name in mask {
        let present = updates.iter().filter(|u| u.deltas.contains_key(&name)).count();
        if present == updates.len() {
            out.push(name);
        } else if present > 0 {
            let missing = updates.iter().find(|u| !u.deltas.contains_key(&name)).expect("some update lacks the block");
            return Err(AggregationError::Update {
                client: missing.client_id.clone(),
                msg: format!("block {name} missing while other parties sent it"),
            });
        }
    }
    Ok(out)
}

/// Sample-weighted average of the masked deltas. Blocks outside the mask
/// are absent from the result. Also used for chained rounds, where the single
/// update is handed on unchanged.
pub fn fedavg_adapters(updates: &[ClientUpdate], plan: &AggregationPlan) -> Result<BlockMap, AggregationError> {
    plan.validate()?;
    if !matches!(plan.strategy, Strategy::SyncAvg | Strategy::Chained) {
        return Err(AggregationError::Strategy {
            op: "fedavg_adapters",
            got: plan.strategy,
        });
    }
    let sorted = canonical_sync(updates)?;
    let mut out = BlockMap::new();
    for name in shared_blocks(&sorted, &plan.block_mask)? {
        let mean = weighted_mean(sorted.iter().map(|u| (u.sample_count, &u.deltas[&name])))?;
        out.insert(name, mean.expect("at least one update"));
    }
    Ok(out)
}

/// `current + delta` for every block in `deltas`.
pub fn deltas_to_values(snapshot: &ModelSnapshot, deltas: &BlockMap) -> Result<BlockMap, AggregationError> {
    deltas
        .iter()
        .map(|(&name, d)| {
            let cur = snapshot
                .block(name)
                .ok_or_else(|| AggregationError::Plan(format!("model has no block {name}")))?;
            Ok((name, cur.add(d)?))
        })
        .collect()
}

const REFACTOR_TOL: f64 = 1e-10;
const REFACTOR_MAX_ITER: usize = 500;

fn projection_residual(m: &Matrix, q: &Matrix) -> Result<f64, ShapeError> {
    let proj = m.matmul(q)?.matmul(&q.transpose())?;
    Ok(m.sub(&proj)?.frobenius_norm())
}

/// Best rank-`rank` factorization of `m` as an adapter with the given
/// `alpha`: `(alpha / rank) · b · a` reconstructs the truncation of `m`.
/// The right singular subspace is found by orthogonal iteration and the
/// factors are balanced (`b` and `aᵀ` carry `√σ` each). Directions with zero
/// singular value keep a unit row in `a` and a zero column in `b`.
pub fn truncated_factorization(m: &Matrix, rank: usize, alpha: f64) -> Result<AdapterPair, AggregationError> {
    let (d_out, d_in) = m.shape();
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(AggregationError::Plan(format!("rank {rank} invalid for a {d_out}×{d_in} matrix")));
    }
    if !m.is_finite() {
        return Err(AggregationError::Factorization { residual: f64::NAN });
    }
    let s = alpha / rank as f64;
    let mut rng = SplitMix64::derive(0, &["aggregation", "refactor"]);
    let mut q = Matrix::gaussian(d_in, rank, 1.0, &mut rng);
    orthonormalize_columns(&mut q);
    let m_norm = m.frobenius_norm();
    if m_norm > 0.0 {
        let mt = m.transpose();
        let mut prev = projection_residual(m, &q)?;
        let mut converged = false;
        for _ in 0..REFACTOR_MAX_ITER {
            let mut z = mt.matmul(&m.matmul(&q)?)?;
            orthonormalize_columns(&mut z);
            q = z;
            let res = projection_residual(m, &q)?;
            if (res - prev).abs() <= REFACTOR_TOL * res || res <= 64.0 * f64::EPSILON * m_norm {
                converged = true;
                break;
            }
            prev = res;
        }
        if !converged {
            return Err(AggregationError::Factorization { residual: prev });
        }
    }
    // Rotate inside the subspace so the columns are singular directions.
    let p = m.matmul(&q)?;
    let (lambda, w) = symmetric_eigen(&p.transpose().matmul(&p)?);
    let sigma: Vec<f64> = lambda.iter().map(|l| l.max(0.0).sqrt()).collect();
    let v = q.matmul(&w)?;
    let u_scaled = p.matmul(&w)?;
    let sigma_max = sigma[0];
    let fallback = if sigma_max > 0.0 { (sigma_max / s).sqrt() } else { 1.0 };
    let mut a = Matrix::zeros(rank, d_in);
    let mut b = Matrix::zeros(d_out, rank);
    for k in 0..rank {
        if sigma[k] > 1e-12 * sigma_max {
            let ra = (sigma[k] / s).sqrt();
            let rb = 1.0 / (sigma[k] * s).sqrt();
            for c in 0..d_in {
                a[(k, c)] = ra * v[(c, k)];
            }
            for r in 0..d_out {
                b[(r, k)] = rb * u_scaled[(r, k)];
            }
        } else {
            for c in 0..d_in {
                a[(k, c)] = fallback * v[(c, k)];
            }
        }
    }
    Ok(AdapterPair::new(a, b, alpha)?)
}

/// Averages the adapters in product space and re-factorizes: the server
/// rebuilds each party's factors from its own current values plus the
/// deltas, takes the sample-weighted mean of `(alpha/r)·Bᵢ·Aᵢ` and keeps the
/// best rank-`r` part. A tower is refactored when both of its blocks are in
/// the mask; a masked bridge is averaged directly. Returns block values.
pub fn product_refactor(
    updates: &[ClientUpdate],
    server: &ModelSnapshot,
    plan: &AggregationPlan,
) -> Result<BlockMap, AggregationError> {
    plan.validate()?;
    if plan.strategy != Strategy::ProductRefactor {
        return Err(AggregationError::Strategy {
            op: "product_refactor",
            got: plan.strategy,
        });
    }
    let sorted = canonical_sync(updates)?;
    let blocks = shared_blocks(&sorted, &plan.block_mask)?;
    let mut out = BlockMap::new();
    let towers = [
        (BlockName::VisionA, BlockName::VisionB, &server.vision.adapter),
        (BlockName::TextA, BlockName::TextB, &server.text.adapter),
    ];
    for (a_name, b_name, current) in towers {
        match (blocks.contains(&a_name), blocks.contains(&b_name)) {
            (false, false) => continue,
            (true, true) => {}
            _ => {
                return Err(AggregationError::Plan(format!(
                    "product_refactor needs both {a_name} and {b_name} in the mask"
                )))
            }
        }
        let products = sorted
            .iter()
            .map(|u| {
                let a = current.a.add(&u.deltas[&a_name])?;
                let b = current.b.add(&u.deltas[&b_name])?;
                Ok((u.sample_count, b.matmul(&a)?.scale(current.scaling())))
            })
            .collect::<Result<Vec<_>, ShapeError>>()?;
        let m = weighted_mean(products.iter().map(|(n, p)| (*n, p)))?.expect("non-empty");
        let pair = truncated_factorization(&m, current.rank(), current.alpha)?;
        out.insert(a_name, pair.a);
        out.insert(b_name, pair.b);
    }
    if blocks.contains(&BlockName::Bridge) {
        let mean = weighted_mean(sorted.iter().map(|u| (u.sample_count, &u.deltas[&BlockName::Bridge])))?.expect("non-empty");
        let deltas = BlockMap::from([(BlockName::Bridge, mean)]);
        out.extend(deltas_to_values(server, &deltas)?);
    }
    Ok(out)
}

/// Past server states, looked up by version.
pub trait VersionHistory {
    fn blocks_at(&self, version: u64) -> Option<BlockMap>;
}

impl VersionHistory for BTreeMap<u64, BlockMap> {
    fn blocks_at(&self, version: u64) -> Option<BlockMap> {
        self.get(&version).cloned()
    }
}

/// Staleness-weighted mixing of one update into the server state:
/// `new = (1 − β_t)·server + β_t·(server_at_base + Δ)`. Returns the new
/// values of the masked blocks the update carries.
pub fn async_mix(
    server_blocks: &BlockMap,
    update: &ClientUpdate,
    current_version: u64,
    plan: &AggregationPlan,
    history: &dyn VersionHistory,
) -> Result<BlockMap, AggregationError> {
    plan.validate()?;
    if plan.strategy != Strategy::AsyncMix {
        return Err(AggregationError::Strategy {
            op: "async_mix",
            got: plan.strategy,
        });
    }
    update.validate()?;
    if update.base_version > current_version {
        return Err(AggregationError::FutureVersion {
            client: update.client_id.clone(),
            base: update.base_version,
            current: current_version,
        });
    }
    let staleness = current_version - update.base_version;
    if staleness > plan.history_window as u64 {
        return Err(AggregationError::TooStale {
            client: update.client_id.clone(),
            staleness,
            window: plan.history_window,
        });
    }
    let at_base = if staleness == 0 {
        server_blocks.clone()
    } else {
        history
            .blocks_at(update.base_version)
            .ok_or(AggregationError::History(update.base_version))?
    };
    let beta = plan.staleness_weight(staleness);
    let mut out = BlockMap::new();
    for (&name, delta) in update.deltas.iter().filter(|(n, _)| plan.block_mask.contains(n)) {
        let missing = || AggregationError::Plan(format!("server has no block {name}"));
        let server = server_blocks.get(&name).ok_or_else(missing)?;
        let base = at_base.get(&name).ok_or(AggregationError::History(update.base_version))?;
        let trained = base.add(delta)?;
        let mixed = if beta == 1.0 {
            trained
        } else {
            let mut m = server.scale(1.0 - beta);
            m.add_scaled(beta, &trained)?;
            m
        };
        out.insert(name, mixed);
    }
    Ok(out)
}

/// Round-robin hand-off: one active party per round, `clients × passes`
/// steps in total.
pub fn chained_schedule(clients: &[String], passes: usize) -> Result<Vec<(u64, String)>, AggregationError> {
    if clients.is_empty() {
        return Err(AggregationError::Plan("chained schedule needs at least one party".into()));
    }
    Ok((0..clients.len() * passes)
        .map(|r| (r as u64, clients[r % clients.len()].clone()))
        .collect())
}

/// Writes block values into a copy of `snapshot` and bumps its version.
pub fn apply_block_mask(result: &BlockMap, snapshot: &ModelSnapshot) -> Result<ModelSnapshot, AggregationError> {
    let mut next = snapshot.clone();
    for (&name, value) in result {
        if !value.is_finite() {
            return Err(AggregationError::Plan(format!("non-finite values for {name}")));
        }
        let slot = next
            .block_mut(name)
            .ok_or_else(|| AggregationError::Plan(format!("model has no block {name}")))?;
        if !slot.same_shape(value) {
            return Err(ShapeError::Mismatch {
                op: "apply_block_mask",
                left: slot.shape(),
                right: value.shape(),
            }
            .into());
        }
        *slot = value.clone();
    }
    next.version += 1;
    Ok(next)
}

#[cfg(test)]
mod tests;
