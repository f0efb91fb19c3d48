//! Two-tower vision-language model with frozen base weights and low-rank
//! adapters.
//!
//! The image tower maps a feature vector `x ∈ R^{d_v}` through
//! `W_v + ΔW_v` (and an optional square bridge) onto the unit sphere in
//! `R^{d_emb}`. The text tower averages the token-embedding rows of a caption
//! and maps the mean through `W_t + ΔW_t`. Adapters contribute
//! `ΔW = (alpha / r) · B · A`; only `A`, `B` and the bridge are trainable.

mod checkpoint;
mod grad;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::linalg::{norm, Matrix, ShapeError};
use crate::rng::SplitMix64;

pub use checkpoint::{CheckpointError, CHECKPOINT_MAGIC};
pub use grad::{contrastive_loss_and_grads, sgd_step, GradAccumulator, GradientSet, TowerTrace};

/// Token id in the toy vocabulary.
pub type TokenId = u32;

/// Borrowed (image features, caption tokens) training pair.
pub type PairRef<'a> = (&'a [f64], &'a [TokenId]);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: TokenId, vocab: usize },
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    Batch(usize),
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("caption bank is empty")]
    EmptyBank,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Names of the trainable (and therefore transmittable) parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockName {
    #[serde(rename = "vision.a")]
    VisionA,
    #[serde(rename = "vision.b")]
    VisionB,
    #[serde(rename = "text.a")]
    TextA,
    #[serde(rename = "text.b")]
    TextB,
    #[serde(rename = "bridge")]
    Bridge,
}

impl BlockName {
    pub const ALL: [BlockName; 5] = [
        BlockName::VisionA,
        BlockName::VisionB,
        BlockName::TextA,
        BlockName::TextB,
        BlockName::Bridge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockName::VisionA => "vision.a",
            BlockName::VisionB => "vision.b",
            BlockName::TextA => "text.a",
            BlockName::TextB => "text.b",
            BlockName::Bridge => "bridge",
        }
    }
}

impl fmt::Display for BlockName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("unknown block name `{0}`")]
pub struct UnknownBlock(pub String);

impl FromStr for BlockName {
    type Err = UnknownBlock;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BlockName::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| UnknownBlock(s.to_string()))
    }
}

/// Map from block name to matrix, iterated in canonical block order.
pub type BlockMap = BTreeMap<BlockName, Matrix>;

/// Low-rank adapter `(A, B)` with `A: r×d_in`, `B: d_out×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

impl AdapterPair {
    /// Fresh adapter: Gaussian `A` (std 0.02), zero `B`, so `ΔW = 0`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut SplitMix64) -> Result<Self, ModelError> {
        let pair = Self {
            a: Matrix::gaussian(rank, d_in, 0.02, rng),
            b: Matrix::zeros(d_out, rank),
            alpha,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self, ModelError> {
        let pair = Self { a, b, alpha };
        pair.validate()?;
        Ok(pair)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let r = self.a.rows();
        if r == 0 || r > self.d_in().min(self.d_out()) {
            return Err(ModelError::Config(format!(
                "adapter rank {r} must be in 1..={}",
                self.d_in().min(self.d_out())
            )));
        }
        if self.b.cols() != r {
            return Err(ModelError::Config(format!(
                "B has {} columns but A has rank {r}",
                self.b.cols()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `ΔW = (alpha / r) · B · A`, shape `d_out × d_in`.
    pub fn delta(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter shapes validated at construction")
            .scale(self.scaling())
    }
}

/// Frozen base weight plus its adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    w_base: Arc<Matrix>,
    pub adapter: AdapterPair,
}

impl TowerParams {
    pub fn new(w_base: Matrix, adapter: AdapterPair) -> Result<Self, ModelError> {
        if w_base.rows() != adapter.d_out() || w_base.cols() != adapter.d_in() {
            return Err(ShapeError::Mismatch {
                op: "tower",
                left: w_base.shape(),
                right: (adapter.d_out(), adapter.d_in()),
            }
            .into());
        }
        Ok(Self {
            w_base: Arc::new(w_base),
            adapter,
        })
    }

    pub fn w_base(&self) -> &Matrix {
        &self.w_base
    }

    pub fn d_in(&self) -> usize {
        self.w_base.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_base.rows()
    }

    pub fn effective_weight(&self) -> Matrix {
        self.w_base
            .add(&self.adapter.delta())
            .expect("shapes validated at construction")
    }
}

/// Model dimensions and hyperparameters; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub d_emb: usize,
    pub rank: usize,
    /// Adapter scaling numerator; `None` means `2 · rank`.
    pub alpha: Option<f64>,
    pub vocab: usize,
    pub temperature: f64,
    pub bridge: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_t: 16,
            d_emb: 8,
            rank: 2,
            alpha: None,
            vocab: 64,
            temperature: 0.1,
            bridge: true,
            seed: 0x5EED,
        }
    }
}

impl ModelConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }
}

/// Immutable model state. Operations return new snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub vision: TowerParams,
    pub text: TowerParams,
    token_embed: Arc<Matrix>,
    pub bridge: Option<Matrix>,
    pub temperature: f64,
    pub version: u64,
}

impl ModelSnapshot {
    /// Seeded initialization: Gaussian base weights, fresh adapters (ΔW = 0),
    /// identity bridge when enabled.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let mut rng = SplitMix64::derive(cfg.seed, &["toymodel", "init"]);
        let w_v = Matrix::gaussian(cfg.d_emb, cfg.d_v, 1.0 / (cfg.d_v as f64).sqrt(), &mut rng);
        let w_t = Matrix::gaussian(cfg.d_emb, cfg.d_t, 1.0 / (cfg.d_t as f64).sqrt(), &mut rng);
        let token_embed = Matrix::gaussian(cfg.vocab, cfg.d_t, 1.0, &mut rng);
        let ad_v = AdapterPair::init(cfg.d_v, cfg.d_emb, cfg.rank, cfg.alpha(), &mut rng)?;
        let ad_t = AdapterPair::init(cfg.d_t, cfg.d_emb, cfg.rank, cfg.alpha(), &mut rng)?;
        let bridge = cfg.bridge.then(|| Matrix::identity(cfg.d_emb));
        Self::from_parts(
            TowerParams::new(w_v, ad_v)?,
            TowerParams::new(w_t, ad_t)?,
            token_embed,
            bridge,
            cfg.temperature,
            0,
        )
    }

    pub fn from_parts(
        vision: TowerParams,
        text: TowerParams,
        token_embed: Matrix,
        bridge: Option<Matrix>,
        temperature: f64,
        version: u64,
    ) -> Result<Self, ModelError> {
        if vision.d_out() != text.d_out() {
            return Err(ModelError::Dimension {
                what: "tower output",
                expected: vision.d_out(),
                got: text.d_out(),
            });
        }
        if token_embed.cols() != text.d_in() {
            return Err(ModelError::Dimension {
                what: "token embedding width",
                expected: text.d_in(),
                got: token_embed.cols(),
            });
        }
        if token_embed.rows() == 0 {
            return Err(ModelError::Config("empty vocabulary".into()));
        }
        if let Some(b) = &bridge {
            if b.shape() != (vision.d_out(), vision.d_out()) {
                return Err(ModelError::Dimension {
                    what: "bridge",
                    expected: vision.d_out(),
                    got: b.rows(),
                });
            }
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ModelError::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            vision,
            text,
            token_embed: Arc::new(token_embed),
            bridge,
            temperature,
            version,
        })
    }

    pub fn d_v(&self) -> usize {
        self.vision.d_in()
    }

    pub fn d_t(&self) -> usize {
        self.text.d_in()
    }

    pub fn d_emb(&self) -> usize {
        self.vision.d_out()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embed.rows()
    }

    pub fn token_embed(&self) -> &Matrix {
        &self.token_embed
    }

    /// Trainable blocks present in this snapshot, in canonical order.
    pub fn block_names(&self) -> Vec<BlockName> {
        BlockName::ALL
            .into_iter()
            .filter(|b| *b != BlockName::Bridge || self.bridge.is_some())
            .collect()
    }

    pub fn block(&self, name: BlockName) -> Option<&Matrix> {
        match name {
            BlockName::VisionA => Some(&self.vision.adapter.a),
            BlockName::VisionB => Some(&self.vision.adapter.b),
            BlockName::TextA => Some(&self.text.adapter.a),
            BlockName::TextB => Some(&self.text.adapter.b),
            BlockName::Bridge => self.bridge.as_ref(),
        }
    }

    pub fn block_mut(&mut self, name: BlockName) -> Option<&mut Matrix> {
        match name {
            BlockName::VisionA => Some(&mut self.vision.adapter.a),
            BlockName::VisionB => Some(&mut self.vision.adapter.b),
            BlockName::TextA => Some(&mut self.text.adapter.a),
            BlockName::TextB => Some(&mut self.text.adapter.b),
            BlockName::Bridge => self.bridge.as_mut(),
        }
    }

    /// All trainable blocks as an owned map.
    pub fn blocks(&self) -> BlockMap {
        self.block_names()
            .into_iter()
            .map(|b| (b, self.block(b).expect("listed block").clone()))
            .collect()
    }

    /// CRC32 over the frozen weights (both base matrices and the token table).
    pub fn frozen_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.vision.w_base().to_le_bytes());
        h.update(&self.text.w_base().to_le_bytes());
        h.update(&self.token_embed.to_le_bytes());
        h.finalize()
    }

    /// True when both snapshots share dimensions, frozen weights and bridge presence.
    pub fn structurally_matches(&self, other: &ModelSnapshot) -> bool {
        self.vision.w_base() == other.vision.w_base()
            && self.text.w_base() == other.text.w_base()
            && self.token_embed == other.token_embed
            && self.vision.adapter.rank() == other.vision.adapter.rank()
            && self.text.adapter.rank() == other.text.adapter.rank()
            && self.bridge.is_some() == other.bridge.is_some()
    }

    /// Copy with every trainable block redrawn as seeded Gaussian noise
    /// (the bridge is redrawn around the identity). Frozen weights are kept.
    pub fn with_random_adapters(&self, seed: u64, std: f64) -> Self {
        let mut rng = SplitMix64::derive(seed, &["toymodel", "random-adapters"]);
        let mut out = self.clone();
        for name in self.block_names() {
            let m = out.block_mut(name).expect("listed block");
            let mut fresh = Matrix::gaussian(m.rows(), m.cols(), std, &mut rng);
            if name == BlockName::Bridge {
                fresh = fresh.add(&Matrix::identity(m.rows())).expect("square bridge");
            }
            *m = fresh;
        }
        out
    }

    /// Precomputes effective weights for repeated encoding.
    pub fn encoder(&self) -> Encoder<'_> {
        Encoder {
            snapshot: self,
            w_v: self.vision.effective_weight(),
            w_t: self.text.effective_weight(),
        }
    }

    pub fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.encoder().encode_image(x)
    }

    pub fn encode_text(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.encoder().encode_text(tokens)
    }

    pub fn alignment_score(&self, x: &[f64], tokens: &[TokenId]) -> Result<f64, ModelError> {
        self.encoder().alignment_score(x, tokens)
    }

    pub fn retrieve_caption<'b>(&self, x: &[f64], bank: &'b [Vec<TokenId>]) -> Result<(usize, &'b [TokenId]), ModelError> {
        self.encoder().retrieve_caption(x, bank)
    }
}

/// A snapshot with its effective weights materialized.
pub struct Encoder<'a> {
    snapshot: &'a ModelSnapshot,
    w_v: Matrix,
    w_t: Matrix,
}

impl<'a> Encoder<'a> {
    pub fn snapshot(&self) -> &'a ModelSnapshot {
        self.snapshot
    }

    pub fn effective_vision(&self) -> &Matrix {
        &self.w_v
    }

    pub fn effective_text(&self) -> &Matrix {
        &self.w_t
    }

    /// Forward pass of the image tower, keeping intermediates for backprop.
    pub fn trace_image(&self, x: &[f64]) -> Result<TowerTrace, ModelError> {
        if x.len() != self.snapshot.d_v() {
            return Err(ModelError::Dimension {
                what: "image features",
                expected: self.snapshot.d_v(),
                got: x.len(),
            });
        }
        let hidden = self.w_v.matvec(x)?;
        let pre = match &self.snapshot.bridge {
            Some(b) => b.matvec(&hidden)?,
            None => hidden.clone(),
        };
        TowerTrace::finish(x.to_vec(), hidden, pre)
    }

    /// Mean of the token-embedding rows.
    pub fn text_input(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Degenerate("empty token list"));
        }
        let table = &self.snapshot.token_embed;
        // Bag-of-tokens: weight each distinct id by its frequency, so the mean
        // is independent of token order and exact under repetition.
        let mut counts = std::collections::BTreeMap::new();
        for &id in tokens {
            if id as usize >= table.rows() {
                return Err(ModelError::Vocabulary {
                    id,
                    vocab: table.rows(),
                });
            }
            *counts.entry(id).or_insert(0usize) += 1;
        }
        let n = tokens.len() as f64;
        let mut t = vec![0.0; table.cols()];
        for (id, count) in counts {
            let w = count as f64 / n;
            for (ti, &e) in t.iter_mut().zip(table.row(id as usize)) {
                *ti += w * e;
            }
        }
        Ok(t)
    }

    pub fn trace_text(&self, tokens: &[TokenId]) -> Result<TowerTrace, ModelError> {
        let t = self.text_input(tokens)?;
        let hidden = self.w_t.matvec(&t)?;
        TowerTrace::finish(t, hidden.clone(), hidden)
    }

    pub fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.trace_image(x)?.z)
    }

    pub fn encode_text(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        Ok(self.trace_text(tokens)?.z)
    }

    pub fn alignment_score(&self, x: &[f64], tokens: &[TokenId]) -> Result<f64, ModelError> {
        let zi = self.encode_image(x)?;
        let zt = self.encode_text(tokens)?;
        Ok(crate::linalg::dot(&zi, &zt))
    }

    /// Bank entry with the highest alignment; the lowest index wins ties.
    pub fn retrieve_caption<'b>(&self, x: &[f64], bank: &'b [Vec<TokenId>]) -> Result<(usize, &'b [TokenId]), ModelError> {
        if bank.is_empty() {
            return Err(ModelError::EmptyBank);
        }
        let zi = self.encode_image(x)?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, caption) in bank.iter().enumerate() {
            let s = crate::linalg::dot(&zi, &self.encode_text(caption)?);
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok((best.0, &bank[best.0]))
    }
}

pub(crate) fn normalize(v: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(ModelError::Numeric("embedding".into()));
    }
    if n == 0.0 {
        return Err(ModelError::Degenerate("zero vector before normalization"));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

#[cfg(test)]
mod tests;
