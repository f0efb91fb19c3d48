//! Privacy mechanisms applied around training and aggregation.
//!
//! Gaussian noise is added to clipped uploads on the client. Secure
//! aggregation is simulated with pairwise additive masks in a fixed-point
//! ring, so the masks cancel bit-exactly and the server only learns the sum.
//! Text hygiene strips sensitive tokens from training captions and replaces
//! generated captions that contain blacklisted tokens.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregation::ClientUpdate;
use crate::dataquality::vocab;
use crate::linalg::Matrix;
use crate::rng::SplitMix64;
use crate::toymodel::{BlockMap, BlockName, TokenId};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy configuration: {0}")]
    Config(String),
    #[error("non-finite values in block {0}")]
    Numeric(BlockName),
    #[error("value {value} in block {block} is outside the fixed-point range")]
    Range { block: BlockName, value: f64 },
    #[error("masking error: {0}")]
    Masking(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub dp_enabled: bool,
    pub clip_norm: f64,
    pub noise_std: f64,
    pub masking_enabled: bool,
    pub blacklist: BTreeSet<TokenId>,
    pub sensitive_patterns: BTreeSet<TokenId>,
    pub refusal_sequence: Vec<TokenId>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            dp_enabled: false,
            clip_norm: 1.0,
            noise_std: 0.0,
            masking_enabled: false,
            blacklist: vocab::SENSITIVE.collect(),
            sensitive_patterns: vocab::SENSITIVE.collect(),
            refusal_sequence: vec![vocab::REFUSAL],
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        if self.dp_enabled && !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(PrivacyError::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(PrivacyError::Config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        if let Some(t) = self.refusal_sequence.iter().find(|t| self.blacklist.contains(t)) {
            return Err(PrivacyError::Config(format!("refusal sequence contains blacklisted token {t}")));
        }
        Ok(())
    }
}

/// Clips the flattened deltas (canonical block order) to norm `clip_norm`
/// and adds i.i.d. `N(0, noise_std²)` noise drawn from `seed`.
pub fn gaussian_mechanism(update: &ClientUpdate, cfg: &PrivacyConfig, seed: u64) -> Result<ClientUpdate, PrivacyError> {
    if !cfg.dp_enabled {
        return Err(PrivacyError::Config("gaussian_mechanism called with dp disabled".into()));
    }
    cfg.validate()?;
    if let Some((name, _)) = update.deltas.iter().find(|(_, m)| !m.is_finite()) {
        return Err(PrivacyError::Numeric(*name));
    }
    let norm = update
        .deltas
        .values()
        .flat_map(|m| m.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    let mut rng = SplitMix64::new(seed);
    let mut out = update.clone();
    for m in out.deltas.values_mut() {
        for v in m.as_mut_slice() {
            *v *= scale;
            if cfg.noise_std > 0.0 {
                *v += cfg.noise_std * rng.next_gaussian();
            }
        }
    }
    Ok(out)
}

/// Fractional bits of the masking ring encoding.
pub const FIXED_POINT_BITS: u32 = 40;
const FIXED_POINT_SCALE: f64 = (1u64 << FIXED_POINT_BITS) as f64;
const FIXED_POINT_LIMIT: f64 = (1u64 << 62) as f64;

/// Matrix of ring elements in `Z / 2^64`, read as two's-complement fixed
/// point with [`FIXED_POINT_BITS`] fractional bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u64>,
}

impl RingMatrix {
    pub fn encode(block: BlockName, m: &Matrix, weight: f64) -> Result<Self, PrivacyError> {
        let data = m
            .as_slice()
            .iter()
            .map(|&v| {
                let x = (v * weight * FIXED_POINT_SCALE).round();
                if !x.is_finite() || x.abs() >= FIXED_POINT_LIMIT {
                    return Err(PrivacyError::Range { block, value: v });
                }
                Ok(x as i64 as u64)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            rows: m.rows(),
            cols: m.cols(),
            data,
        })
    }

    pub fn decode(&self) -> Matrix {
        let data = self.data.iter().map(|&v| v as i64 as f64 / FIXED_POINT_SCALE).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("ring matrix keeps its shape")
    }

    pub fn wrapping_add_assign(&mut self, other: &RingMatrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = a.wrapping_add(*b);
        }
    }
}

/// One party's masked upload. The payload is `sample_count · Δ` so the sum
/// over parties yields the numerator of the sample-weighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedUpdate {
    pub client_id: String,
    pub sample_count: u64,
    pub mask_round: u64,
    pub blocks: BTreeMap<BlockName, RingMatrix>,
}

fn pair_mask_rng(round_seed: u64, low: &str, high: &str) -> SplitMix64 {
    SplitMix64::derive(round_seed, &["privacy", "pairwise-mask", low, high])
}

/// Masks a single party's update given the full participant list. For each
/// pair `i < j` (by id) the shared mask is added by `i` and subtracted by `j`.
pub fn mask_update(update: &ClientUpdate, participants: &[String], round_seed: u64) -> Result<MaskedUpdate, PrivacyError> {
    if !participants.contains(&update.client_id) {
        return Err(PrivacyError::Masking(format!("`{}` is not a participant", update.client_id)));
    }
    let weight = update.sample_count as f64;
    let mut blocks = update
        .deltas
        .iter()
        .map(|(&name, m)| Ok((name, RingMatrix::encode(name, m, weight)?)))
        .collect::<Result<BTreeMap<_, _>, PrivacyError>>()?;
    let me = update.client_id.as_str();
    for other in participants.iter().map(String::as_str).filter(|o| *o != me) {
        let (low, high, add) = if me < other { (me, other, true) } else { (other, me, false) };
        let mut rng = pair_mask_rng(round_seed, low, high);
        for ring in blocks.values_mut() {
            for v in &mut ring.data {
                let m = rng.next_u64();
                *v = if add { v.wrapping_add(m) } else { v.wrapping_sub(m) };
            }
        }
    }
    Ok(MaskedUpdate {
        client_id: update.client_id.clone(),
        sample_count: update.sample_count,
        mask_round: round_seed,
        blocks,
    })
}

/// Masks every update of a round against all the others.
pub fn pairwise_mask(updates: &[ClientUpdate], round_seed: u64) -> Result<Vec<MaskedUpdate>, PrivacyError> {
    if updates.len() < 2 {
        return Err(PrivacyError::Masking(format!(
            "pairwise masking needs at least 2 parties, got {}",
            updates.len()
        )));
    }
    let participants: Vec<String> = updates.iter().map(|u| u.client_id.clone()).collect();
    let unique: BTreeSet<&String> = participants.iter().collect();
    if unique.len() != participants.len() {
        return Err(PrivacyError::Masking("duplicate party in masking round".into()));
    }
    let shape = |u: &ClientUpdate| u.deltas.iter().map(|(k, m)| (*k, m.shape())).collect::<Vec<_>>();
    if updates.iter().any(|u| shape(u) != shape(&updates[0])) {
        return Err(PrivacyError::Masking("parties disagree on block structure".into()));
    }
    updates.iter().map(|u| mask_update(u, &participants, round_seed)).collect()
}

/// Ring sum of the masked uploads: equals the sum of the unmasked encodings.
pub fn masked_sum(masked: &[MaskedUpdate]) -> Result<BTreeMap<BlockName, RingMatrix>, PrivacyError> {
    let first = masked.first().ok_or_else(|| PrivacyError::Masking("nothing to sum".into()))?;
    let mut sum = first.blocks.clone();
    for m in &masked[1..] {
        if m.blocks.len() != sum.len() {
            return Err(PrivacyError::Masking("parties disagree on block structure".into()));
        }
        for (name, ring) in &m.blocks {
            let acc = sum
                .get_mut(name)
                .filter(|acc| acc.data.len() == ring.data.len())
                .ok_or_else(|| PrivacyError::Masking(format!("block {name} does not line up")))?;
            acc.wrapping_add_assign(ring);
        }
    }
    Ok(sum)
}

/// Sample-weighted mean of the deltas, recovered from masked uploads only.
pub fn unmask_mean(masked: &[MaskedUpdate]) -> Result<BlockMap, PrivacyError> {
    let total: u64 = masked.iter().map(|m| m.sample_count).sum();
    if total == 0 {
        return Err(PrivacyError::Masking("total sample count is zero".into()));
    }
    Ok(masked_sum(masked)?
        .into_iter()
        .map(|(name, ring)| (name, ring.decode().scale(1.0 / total as f64)))
        .collect())
}

/// Drops every sensitive token, keeping the order of the rest.
pub fn sanitize_text(tokens: &[TokenId], cfg: &PrivacyConfig) -> Vec<TokenId> {
    tokens.iter().copied().filter(|t| !cfg.sensitive_patterns.contains(t)).collect()
}

/// Replaces a caption containing any blacklisted token by the refusal
/// sequence. Returns the emitted caption and whether it was blocked.
pub fn output_filter(caption: &[TokenId], cfg: &PrivacyConfig) -> (Vec<TokenId>, bool) {
    if caption.iter().any(|t| cfg.blacklist.contains(t)) {
        (cfg.refusal_sequence.clone(), true)
    } else {
        (caption.to_vec(), false)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::testutil::small_snapshot;

    fn deltas(seed: u64, std: f64) -> BlockMap {
        let s = small_snapshot(1, true);
        let mut rng = SplitMix64::new(seed);
        s.blocks()
            .into_iter()
            .map(|(k, m)| (k, Matrix::gaussian(m.rows(), m.cols(), std, &mut rng)))
            .collect()
    }

    fn update(id: &str, d: BlockMap, n: u64) -> ClientUpdate {
        ClientUpdate {
            client_id: id.into(),
            base_version: 0,
            deltas: d,
            sample_count: n,
            submitted_round: 0,
        }
    }

    fn dp(clip: f64, sigma: f64) -> PrivacyConfig {
        PrivacyConfig {
            dp_enabled: true,
            clip_norm: clip,
            noise_std: sigma,
            ..PrivacyConfig::default()
        }
    }

    fn flat_norm(u: &ClientUpdate) -> f64 {
        u.deltas.values().flat_map(|m| m.as_slice()).map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn dp_without_noise_inside_ball_is_identity() {
        let u = update("a", deltas(1, 0.01), 3);
        let out = gaussian_mechanism(&u, &dp(100.0, 0.0), 9).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn dp_clip_halves_at_twice_the_norm() {
        let u = update("a", deltas(2, 1.0), 3);
        let c = flat_norm(&u) / 2.0;
        let out = gaussian_mechanism(&u, &dp(c, 0.0), 9).unwrap();
        for (name, m) in &out.deltas {
            for (x, y) in m.as_slice().iter().zip(u.deltas[name].as_slice()) {
                assert!((x - y / 2.0).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dp_noise_std_is_calibrated() {
        // 10^5 scalars: many small updates with zero deltas.
        let zero: BlockMap = deltas(3, 0.0);
        let per = zero.values().map(|m| m.as_slice().len()).sum::<usize>();
        let u = update("a", zero, 1);
        let mut samples = Vec::new();
        let mut seed = 0;
        while samples.len() < 100_000 {
            let out = gaussian_mechanism(&u, &dp(1.0, 0.1), seed).unwrap();
            samples.extend(out.deltas.values().flat_map(|m| m.as_slice().to_vec()));
            seed += 1;
        }
        assert!(samples.len() >= 100_000 && per > 0);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.1).abs() < 0.001, "std {std}");
    }

    #[test]
    fn dp_errors() {
        let mut u = update("a", deltas(4, 1.0), 1);
        assert!(matches!(gaussian_mechanism(&u, &PrivacyConfig::default(), 0), Err(PrivacyError::Config(_))));
        assert!(matches!(gaussian_mechanism(&u, &dp(0.0, 0.1), 0), Err(PrivacyError::Config(_))));
        u.deltas.get_mut(&BlockName::TextB).unwrap()[(0, 0)] = f64::INFINITY;
        assert_eq!(gaussian_mechanism(&u, &dp(1.0, 0.1), 0).unwrap_err(), PrivacyError::Numeric(BlockName::TextB));
    }

    #[test]
    fn dp_is_unbiased_under_fedavg() {
        use crate::aggregation::{fedavg_adapters, AggregationPlan};
        let raw = vec![update("a", deltas(5, 0.02), 2), update("b", deltas(6, 0.02), 5)];
        let expected = fedavg_adapters(&raw, &AggregationPlan::default()).unwrap();
        let sigma = 0.05;
        let trials = 1000;
        let mut sum: BlockMap = expected.iter().map(|(k, m)| (*k, Matrix::zeros(m.rows(), m.cols()))).collect();
        for t in 0..trials {
            let noisy: Vec<_> = raw
                .iter()
                .enumerate()
                .map(|(i, u)| gaussian_mechanism(u, &dp(100.0, sigma), t * 2 + i as u64).unwrap())
                .collect();
            for (k, m) in fedavg_adapters(&noisy, &AggregationPlan::default()).unwrap() {
                sum.get_mut(&k).unwrap().add_scaled(1.0, &m).unwrap();
            }
        }
        // std of one fedavg entry: sigma·sqrt(Σ n_i²)/Σ n_i.
        let se = sigma * (4.0f64 + 25.0).sqrt() / 7.0 / (trials as f64).sqrt();
        let z: Vec<f64> = sum
            .iter()
            .flat_map(|(k, m)| m.as_slice().iter().zip(expected[k].as_slice()).map(|(got, want)| (got / trials as f64 - want) / se))
            .collect();
        let max = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mean_sq = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        assert!(max < 5.0, "max |z| {max}");
        assert!((mean_sq - 1.0).abs() < 0.25, "mean z² {mean_sq}");
    }

    fn ring_sum_of_raw(updates: &[ClientUpdate]) -> BTreeMap<BlockName, RingMatrix> {
        let mut acc: Option<BTreeMap<BlockName, RingMatrix>> = None;
        for u in updates {
            let enc: BTreeMap<_, _> = u
                .deltas
                .iter()
                .map(|(k, m)| (*k, RingMatrix::encode(*k, m, u.sample_count as f64).unwrap()))
                .collect();
            match &mut acc {
                None => acc = Some(enc),
                Some(a) => {
                    for (k, r) in &enc {
                        a.get_mut(k).unwrap().wrapping_add_assign(r);
                    }
                }
            }
        }
        acc.unwrap()
    }

    #[test]
    fn two_party_masks_hide_and_cancel() {
        let d = deltas(7, 1.0);
        let zero: BlockMap = d.iter().map(|(k, m)| (*k, Matrix::zeros(m.rows(), m.cols()))).collect();
        let raw = vec![update("a", d.clone(), 1), update("b", zero, 1)];
        let masked = pairwise_mask(&raw, 11).unwrap();
        for (m, u) in masked.iter().zip(&raw) {
            let plain: BTreeMap<_, _> = u.deltas.iter().map(|(k, x)| (*k, RingMatrix::encode(*k, x, 1.0).unwrap())).collect();
            assert_ne!(m.blocks, plain);
        }
        let sum = masked_sum(&masked).unwrap();
        assert_eq!(sum, ring_sum_of_raw(&raw));
        let mean = unmask_mean(&masked).unwrap();
        for (k, m) in &mean {
            assert!(m.max_abs_diff(&d[k].scale(0.5)) <= 1.0 / FIXED_POINT_SCALE);
        }
    }

    #[test]
    fn masks_are_deterministic_and_need_two_parties() {
        let raw = vec![update("a", deltas(8, 1.0), 1), update("b", deltas(9, 1.0), 4)];
        assert_eq!(pairwise_mask(&raw, 5).unwrap(), pairwise_mask(&raw, 5).unwrap());
        assert_ne!(pairwise_mask(&raw, 5).unwrap(), pairwise_mask(&raw, 6).unwrap());
        assert!(matches!(pairwise_mask(&raw[..1], 5), Err(PrivacyError::Masking(_))));
        let dup = vec![raw[0].clone(), raw[0].clone()];
        assert!(matches!(pairwise_mask(&dup, 5), Err(PrivacyError::Masking(_))));
    }

    #[test]
    fn masked_mean_matches_fedavg() {
        use crate::aggregation::{fedavg_adapters, AggregationPlan};
        let raw = vec![update("a", deltas(10, 0.3), 3), update("b", deltas(11, 0.3), 5), update("c", deltas(12, 0.3), 2)];
        let clear = fedavg_adapters(&raw, &AggregationPlan::default()).unwrap();
        let hidden = unmask_mean(&pairwise_mask(&raw, 99).unwrap()).unwrap();
        for (k, m) in &clear {
            assert!(m.max_abs_diff(&hidden[k]) < 1e-11);
        }
    }

    #[test]
    fn sanitize_and_filter_examples() {
        let cfg = PrivacyConfig {
            sensitive_patterns: BTreeSet::from([60, 61]),
            blacklist: BTreeSet::from([61]),
            refusal_sequence: vec![0],
            ..PrivacyConfig::default()
        };
        assert_eq!(sanitize_text(&[1, 2, 3], &cfg), vec![1, 2, 3]);
        assert_eq!(sanitize_text(&[60, 61, 60], &cfg), Vec::<TokenId>::new());
        assert_eq!(sanitize_text(&[5, 60, 6, 61, 7], &cfg), vec![5, 6, 7]);
        assert_eq!(output_filter(&[1, 2], &cfg), (vec![1, 2], false));
        assert_eq!(output_filter(&[1, 61, 2], &cfg), (vec![0], true));
        let bad = PrivacyConfig {
            refusal_sequence: vec![61],
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn three_party_cancellation_is_bit_exact(seed in any::<u64>(), round in any::<u64>(), n in proptest::array::uniform3(1u64..5000)) {
            let raw: Vec<_> = ["p", "q", "r"].iter().enumerate()
                .map(|(i, id)| update(id, deltas(seed.wrapping_add(i as u64), 1.0), n[i]))
                .collect();
            let masked = pairwise_mask(&raw, round).unwrap();
            prop_assert_eq!(masked_sum(&masked).unwrap(), ring_sum_of_raw(&raw));
        }

        #[test]
        fn clipped_norm_is_bounded(seed in any::<u64>(), clip in 1e-3f64..10.0, std in 1e-3f64..10.0) {
            let u = update("a", deltas(seed, std), 1);
            let out = gaussian_mechanism(&u, &dp(clip, 0.0), seed).unwrap();
            prop_assert!(flat_norm(&out) <= clip + 1e-12);
        }

        #[test]
        fn sanitize_and_filter_properties(tokens in proptest::collection::vec(0u32..64, 0..20)) {
            let cfg = PrivacyConfig::default();
            let once = sanitize_text(&tokens, &cfg);
            prop_assert!(once.iter().all(|t| !cfg.sensitive_patterns.contains(t)));
            let kept: Vec<_> = tokens.iter().copied().filter(|t| !cfg.sensitive_patterns.contains(t)).collect();
            prop_assert_eq!(&once, &kept);
            prop_assert_eq!(sanitize_text(&once, &cfg), once.clone());
            let (f1, _) = output_filter(&tokens, &cfg);
            let (f2, blocked_again) = output_filter(&f1, &cfg);
            prop_assert_eq!(f1, f2);
            prop_assert!(!blocked_again);
        }
    }
}
