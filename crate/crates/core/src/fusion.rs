//! Heterogeneous fusion as loss augmentations.
//!
//! * feature-map distillation: parties embed a public probe set, the server
//!   averages the embeddings into a consensus, and each party is pulled
//!   towards it on the next round;
//! * text-anchored alignment: image embeddings are regressed onto the
//!   (stop-gradient) text embeddings of the same pair;
//! * adapter fine-tuning and bridge training need no extra loss, the bridge
//!   simply travels with the adapter blocks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::ShapeError;
use crate::toymodel::{GradAccumulator, GradientSet, ModelError, ModelSnapshot, PairRef, TokenId};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FusionError {
    #[error("probe set is empty")]
    EmptyProbe,
    #[error("probe item `{0}` is covered by no client")]
    Coverage(String),
    #[error("consensus was built for probe `{consensus}` ({consensus_len} items), not `{probe}` ({probe_len} items)")]
    Identity {
        probe: String,
        probe_len: usize,
        consensus: String,
        consensus_len: usize,
    },
    #[error("client `{client}` submitted {got} embeddings for {expected} covered items")]
    Submission { client: String, expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{weights} weights for {parts} loss parts")]
    WeightCount { weights: usize, parts: usize },
    #[error("probe file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeItem {
    Image { id: String, features: Vec<f64> },
    Text { id: String, tokens: Vec<TokenId> },
}

impl ProbeItem {
    pub fn id(&self) -> &str {
        match self {
            ProbeItem::Image { id, .. } | ProbeItem::Text { id, .. } => id,
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            ProbeItem::Image { .. } => Modality::Image,
            ProbeItem::Text { .. } => Modality::Text,
        }
    }
}

/// Public dataset shared verbatim by every participant.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    id: String,
    items: Vec<ProbeItem>,
}

impl ProbeSet {
    pub fn new(id: impl Into<String>, items: Vec<ProbeItem>) -> Result<Self, FusionError> {
        if items.is_empty() {
            return Err(FusionError::EmptyProbe);
        }
        Ok(Self { id: id.into(), items })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn items(&self) -> &[ProbeItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `IMG <id> <comma-separated floats>` / `TXT <id> <space-separated ids>`,
    /// one item per line. Blank lines and `#` comments are skipped.
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self, FusionError> {
        let mut items = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| FusionError::Parse { line: n + 1, msg };
            let mut parts = line.splitn(3, ' ');
            let kind = parts.next().unwrap_or_default();
            let item_id = parts.next().ok_or_else(|| err("missing item id".into()))?.to_string();
            let payload = parts.next().unwrap_or("").trim();
            let item = match kind {
                "IMG" => {
                    let features = payload
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| err(e.to_string()))?;
                    ProbeItem::Image { id: item_id, features }
                }
                "TXT" => {
                    let tokens = payload
                        .split_whitespace()
                        .map(str::parse::<TokenId>)
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| err(e.to_string()))?;
                    if tokens.is_empty() {
                        return Err(err("text item without tokens".into()));
                    }
                    ProbeItem::Text { id: item_id, tokens }
                }
                other => return Err(err(format!("unknown item kind `{other}`"))),
            };
            items.push(item);
        }
        Self::new(id, items)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            match item {
                ProbeItem::Image { id, features } => {
                    let vals: Vec<String> = features.iter().map(|v| v.to_string()).collect();
                    out.push_str(&format!("IMG {id} {}\n", vals.join(",")));
                }
                ProbeItem::Text { id, tokens } => {
                    let vals: Vec<String> = tokens.iter().map(|v| v.to_string()).collect();
                    out.push_str(&format!("TXT {id} {}\n", vals.join(" ")));
                }
            }
        }
        out
    }
}

/// One client's probe embeddings: vectors for the covered items in probe
/// order, plus the skip mask (`true` = not covered).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientProbeEmbeddings {
    pub embeddings: Vec<Vec<f64>>,
    pub skipped: Vec<bool>,
}

impl ClientProbeEmbeddings {
    pub fn covered(&self) -> usize {
        self.skipped.iter().filter(|s| !**s).count()
    }

    /// Embedding for probe item `index`, if covered.
    pub fn get(&self, index: usize) -> Option<&[f64]> {
        if self.skipped.get(index).copied().unwrap_or(true) {
            return None;
        }
        let pos = self.skipped[..index].iter().filter(|s| !**s).count();
        self.embeddings.get(pos).map(Vec::as_slice)
    }
}

pub fn client_probe_embeddings(
    snapshot: &ModelSnapshot,
    probe: &ProbeSet,
    modalities: &[Modality],
) -> Result<ClientProbeEmbeddings, FusionError> {
    if probe.is_empty() {
        return Err(FusionError::EmptyProbe);
    }
    let enc = snapshot.encoder();
    let mut embeddings = Vec::new();
    let mut skipped = Vec::with_capacity(probe.len());
    for item in probe.items() {
        if !modalities.contains(&item.modality()) {
            skipped.push(true);
            continue;
        }
        let z = match item {
            ProbeItem::Image { features, .. } => enc.encode_image(features)?,
            ProbeItem::Text { tokens, .. } => enc.encode_text(tokens)?,
        };
        embeddings.push(z);
        skipped.push(false);
    }
    Ok(ClientProbeEmbeddings { embeddings, skipped })
}

/// Per-item renormalized mean of the covering clients' embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMap {
    pub probe_id: String,
    pub round: u64,
    /// `None` marks an item excluded this round (degenerate mean).
    pub items: Vec<Option<Vec<f64>>>,
}

/// Raised when the covering clients' embeddings cancel out.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusWarning {
    pub item_id: String,
    pub mean_norm: f64,
}

const DEGENERATE_MEAN: f64 = 1e-12;

pub fn build_consensus(
    probe: &ProbeSet,
    submissions: &BTreeMap<String, ClientProbeEmbeddings>,
    round: u64,
) -> Result<(ConsensusMap, Vec<ConsensusWarning>), FusionError> {
    for (client, sub) in submissions {
        if sub.skipped.len() != probe.len() || sub.covered() != sub.embeddings.len() {
            return Err(FusionError::Submission {
                client: client.clone(),
                expected: sub.covered(),
                got: sub.embeddings.len(),
            });
        }
    }
    let mut items = Vec::with_capacity(probe.len());
    let mut warnings = Vec::new();
    for (idx, item) in probe.items().iter().enumerate() {
        // Running mean in client-id order: exact for identical inputs.
        let mut mean: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for sub in submissions.values() {
            let Some(v) = sub.get(idx) else { continue };
            count += 1;
            let m = mean.get_or_insert_with(|| vec![0.0; v.len()]);
            if m.len() != v.len() {
                return Err(ShapeError::Mismatch {
                    op: "consensus",
                    left: (m.len(), 1),
                    right: (v.len(), 1),
                }
                .into());
            }
            let k = count as f64;
            for (mi, vi) in m.iter_mut().zip(v) {
                *mi += (vi - *mi) / k;
            }
        }
        let Some(mean) = mean else {
            return Err(FusionError::Coverage(item.id().to_string()));
        };
        let n = crate::linalg::norm(&mean);
        if n < DEGENERATE_MEAN {
            log::warn!("consensus for probe item {} degenerate (|mean| = {n:e}); excluded", item.id());
            warnings.push(ConsensusWarning {
                item_id: item.id().to_string(),
                mean_norm: n,
            });
            items.push(None);
        } else {
            items.push(Some(mean.iter().map(|x| x / n).collect()));
        }
    }
    Ok((
        ConsensusMap {
            probe_id: probe.id().to_string(),
            round,
            items,
        },
        warnings,
    ))
}

/// `lambda · mean ‖z − c‖²` over items the client covers and the consensus
/// kept; the consensus is a constant.
pub fn distillation_loss_and_grads(
    snapshot: &ModelSnapshot,
    probe: &ProbeSet,
    consensus: &ConsensusMap,
    modalities: &[Modality],
    lambda: f64,
) -> Result<(f64, GradientSet), FusionError> {
    if consensus.probe_id != probe.id() || consensus.items.len() != probe.len() {
        return Err(FusionError::Identity {
            probe: probe.id().to_string(),
            probe_len: probe.len(),
            consensus: consensus.probe_id.clone(),
            consensus_len: consensus.items.len(),
        });
    }
    if lambda == 0.0 {
        return Ok((0.0, GradientSet::zeros_for(snapshot)));
    }
    let enc = snapshot.encoder();
    let active: Vec<(&ProbeItem, &Vec<f64>)> = probe
        .items()
        .iter()
        .zip(&consensus.items)
        .filter(|(item, _)| modalities.contains(&item.modality()))
        .filter_map(|(item, c)| c.as_ref().map(|c| (item, c)))
        .collect();
    let mut acc = GradAccumulator::new(&enc);
    if active.is_empty() {
        return Ok((0.0, acc.finish()));
    }
    let n = active.len() as f64;
    let mut loss = 0.0;
    for (item, target) in active {
        let trace = match item {
            ProbeItem::Image { features, .. } => enc.trace_image(features)?,
            ProbeItem::Text { tokens, .. } => enc.trace_text(tokens)?,
        };
        let diff: Vec<f64> = trace.z.iter().zip(target).map(|(z, c)| z - c).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        let grad_z: Vec<f64> = diff.iter().map(|d| lambda * 2.0 * d / n).collect();
        match item {
            ProbeItem::Image { .. } => acc.add_image(&trace, &grad_z),
            ProbeItem::Text { .. } => acc.add_text(&trace, &grad_z),
        }
    }
    Ok((lambda * loss / n, acc.finish()))
}

/// `mu · mean ‖z_v − stopgrad(z_t)‖²`: text embeddings are the targets, so
/// the text adapter receives no gradient.
pub fn text_anchor_loss_and_grads(
    snapshot: &ModelSnapshot,
    batch: &[PairRef<'_>],
    mu: f64,
) -> Result<(f64, GradientSet), FusionError> {
    if batch.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    if mu == 0.0 {
        return Ok((0.0, GradientSet::zeros_for(snapshot)));
    }
    let enc = snapshot.encoder();
    let n = batch.len() as f64;
    let mut acc = GradAccumulator::new(&enc);
    let mut loss = 0.0;
    for (x, tokens) in batch {
        let img = enc.trace_image(x)?;
        let target = enc.encode_text(tokens)?;
        let diff: Vec<f64> = img.z.iter().zip(&target).map(|(z, t)| z - t).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        let grad_z: Vec<f64> = diff.iter().map(|d| mu * 2.0 * d / n).collect();
        acc.add_image(&img, &grad_z);
    }
    Ok((mu * loss / n, acc.finish()))
}

/// Weighted sum of losses and gradients.
pub fn compose_losses(weights: &[f64], parts: &[(f64, GradientSet)]) -> Result<(f64, GradientSet), FusionError> {
    if weights.len() != parts.len() {
        return Err(FusionError::WeightCount {
            weights: weights.len(),
            parts: parts.len(),
        });
    }
    let Some((_, first)) = parts.first() else {
        return Err(FusionError::EmptyBatch);
    };
    let mut grads = first.clone();
    grads.add_scaled(-1.0, first)?;
    let mut loss = 0.0;
    for (w, (l, g)) in weights.iter().zip(parts) {
        loss += w * l;
        grads.add_scaled(*w, g)?;
    }
    Ok((loss, grads))
}
