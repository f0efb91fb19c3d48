//! Shared helpers for unit tests: small fixtures and the central
//! finite-difference oracle.

use crate::linalg::Matrix;
use crate::toymodel::{BlockName, GradientSet, ModelConfig, ModelSnapshot, TokenId};
use crate::rng::SplitMix64;

pub fn small_config(seed: u64, bridge: bool) -> ModelConfig {
    ModelConfig {
        d_v: 8,
        d_t: 8,
        d_emb: 4,
        rank: 2,
        alpha: None,
        vocab: 16,
        temperature: 0.5,
        bridge,
        seed,
    }
}

/// Small snapshot with non-trivial adapters so every gradient block is live.
pub fn small_snapshot(seed: u64, bridge: bool) -> ModelSnapshot {
    ModelSnapshot::init(&small_config(seed, bridge))
        .unwrap()
        .with_random_adapters(seed ^ 0xA5A5, 0.3)
}

pub fn random_pairs(snapshot: &ModelSnapshot, n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<TokenId>)> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let x = (0..snapshot.d_v()).map(|_| rng.next_gaussian()).collect();
            let len = 1 + rng.below(5) as usize;
            let toks = (0..len)
                .map(|_| rng.below(snapshot.vocab_size() as u64) as TokenId)
                .collect();
            (x, toks)
        })
        .collect()
}

/// Central differences of `loss` with respect to every trainable entry.
pub fn finite_difference(snapshot: &ModelSnapshot, step: f64, loss: impl Fn(&ModelSnapshot) -> f64) -> GradientSet {
    let mut out = GradientSet::zeros_for(snapshot);
    for name in snapshot.block_names() {
        let (rows, cols) = snapshot.block(name).unwrap().shape();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = snapshot.clone();
                plus.block_mut(name).unwrap()[(r, c)] += step;
                let mut minus = snapshot.clone();
                minus.block_mut(name).unwrap()[(r, c)] -= step;
                out.get_mut(name).unwrap()[(r, c)] = (loss(&plus) - loss(&minus)) / (2.0 * step);
            }
        }
    }
    out
}

/// Largest relative error `|a − n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &GradientSet, numeric: &GradientSet, floor: f64) -> (f64, Option<(BlockName, usize)>) {
    let mut worst = (0.0, None);
    for (name, a) in analytic.blocks() {
        let n = numeric.get(name).unwrap();
        for (i, (x, y)) in a.as_slice().iter().zip(n.as_slice()).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, Some((name, i)));
            }
        }
    }
    worst
}

pub fn assert_unit(v: &[f64]) {
    let n = crate::linalg::norm(v);
    assert!((n - 1.0).abs() <= 1e-12, "norm {n}");
}

pub fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

/// Plain minibatch contrastive training on a record list.
pub fn train_contrastive(
    model: &ModelSnapshot,
    records: &[crate::dataquality::SceneRecord],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> ModelSnapshot {
    let usable: Vec<&crate::dataquality::SceneRecord> = records.iter().filter(|r| !r.caption.is_empty()).collect();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut rng = SplitMix64::new(seed);
    let mut m = model.clone();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let pairs: Vec<crate::toymodel::PairRef> = chunk.iter().map(|&i| (usable[i].image.as_slice(), usable[i].caption.as_slice())).collect();
            let (_, g) = crate::toymodel::contrastive_loss_and_grads(&m, &pairs).unwrap();
            m = crate::toymodel::sgd_step(&m, &g, lr).unwrap();
        }
    }
    m
}

/// Default-dimension model for the synthetic world.
pub fn world_model(seed: u64) -> ModelSnapshot {
    ModelSnapshot::init(&ModelConfig {
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}
