use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

use super::*;
use crate::testutil::small_snapshot;

fn random_deltas(snapshot: &ModelSnapshot, seed: u64, std: f64) -> BlockMap {
    let mut rng = SplitMix64::new(seed);
    snapshot
        .blocks()
        .into_iter()
        .map(|(name, m)| (name, Matrix::gaussian(m.rows(), m.cols(), std, &mut rng)))
        .collect()
}

fn update(id: &str, deltas: BlockMap, n: u64) -> ClientUpdate {
    ClientUpdate {
        client_id: id.into(),
        base_version: 0,
        deltas,
        sample_count: n,
        submitted_round: 0,
    }
}

fn sync_plan() -> AggregationPlan {
    AggregationPlan::default()
}

#[test]
fn plan_validation() {
    assert!(sync_plan().validate().is_ok());
    let mut p = sync_plan();
    p.block_mask.clear();
    assert!(matches!(p.validate(), Err(AggregationError::Plan(_))));
    let mut p = AggregationPlan::with_strategy(Strategy::Chained);
    assert!(p.validate().is_err());
    p.chain_order = vec!["x".into(), "x".into()];
    assert!(p.validate().is_err());
    p.chain_order = vec!["x".into(), "y".into()];
    assert!(p.validate().is_ok());
    let mut p = sync_plan();
    p.mixing_rate = 0.0;
    assert!(p.validate().is_err());
    assert_eq!("async_mix".parse::<Strategy>().unwrap(), Strategy::AsyncMix);
    assert!("continual".parse::<Strategy>().is_err());
}

#[test]
fn plan_from_toml() {
    let p: AggregationPlan = toml::from_str(
        "strategy = \"product_refactor\"\nblock_mask = [\"vision.a\", \"vision.b\"]\nstaleness_exponent = 1.0\nmixing_rate = 0.25\nhistory_window = 4\n",
    )
    .unwrap();
    assert_eq!(p.strategy, Strategy::ProductRefactor);
    assert_eq!(p.block_mask, BTreeSet::from([BlockName::VisionA, BlockName::VisionB]));
    assert_eq!((p.staleness_exponent, p.mixing_rate, p.history_window), (1.0, 0.25, 4));
    assert!(toml::from_str::<AggregationPlan>("bogus = 1").is_err());
}

#[test]
fn fedavg_weighted_example() {
    let s = small_snapshot(1, true);
    let d = random_deltas(&s, 1, 1.0);
    let zero: BlockMap = d.iter().map(|(k, m)| (*k, Matrix::zeros(m.rows(), m.cols()))).collect();
    for (first, second) in [("a", "b"), ("b", "a")] {
        let out = fedavg_adapters(&[update(first, d.clone(), 1), update(second, zero.clone(), 3)], &sync_plan()).unwrap();
        for (name, m) in &out {
            let expected = d[name].scale(0.25);
            assert!(m.max_abs_diff(&expected) <= 1e-15, "{name}");
        }
    }
}

#[test]
fn fedavg_matches_naive_oracle() {
    let s = small_snapshot(2, true);
    let updates: Vec<ClientUpdate> = (0..5)
        .map(|i| update(&format!("c{i}"), random_deltas(&s, 10 + i, 1.0), 1 + 7 * i))
        .collect();
    let out = fedavg_adapters(&updates, &sync_plan()).unwrap();
    assert_eq!(out.len(), 5);
    let total: u64 = updates.iter().map(|u| u.sample_count).sum();
    for (name, got) in &out {
        let (rows, cols) = got.shape();
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for u in &updates {
                    acc += u.sample_count as f64 * u.deltas[name][(r, c)];
                }
                assert!((got[(r, c)] - acc / total as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fedavg_respects_mask_and_errors() {
    let s = small_snapshot(3, true);
    let mut plan = sync_plan();
    plan.block_mask = BTreeSet::from([BlockName::VisionA, BlockName::VisionB]);
    let updates = vec![update("a", random_deltas(&s, 1, 1.0), 2), update("b", random_deltas(&s, 2, 1.0), 2)];
    let out = fedavg_adapters(&updates, &plan).unwrap();
    assert_eq!(out.keys().copied().collect::<Vec<_>>(), vec![BlockName::VisionA, BlockName::VisionB]);

    assert_eq!(fedavg_adapters(&[], &sync_plan()).unwrap_err(), AggregationError::Empty);
    let mut stale = updates.clone();
    stale[1].base_version = 4;
    assert_eq!(fedavg_adapters(&stale, &sync_plan()).unwrap_err(), AggregationError::MixedBase(vec![0, 4]));
    let mut zero = updates.clone();
    zero[0].sample_count = 0;
    assert!(matches!(fedavg_adapters(&zero, &sync_plan()), Err(AggregationError::Update { .. })));
    let mut nan = updates.clone();
    nan[0].deltas.get_mut(&BlockName::TextA).unwrap()[(0, 0)] = f64::NAN;
    assert!(matches!(fedavg_adapters(&nan, &sync_plan()), Err(AggregationError::Update { .. })));
    let mut dup = updates.clone();
    dup[1].client_id = "a".into();
    assert!(matches!(fedavg_adapters(&dup, &sync_plan()), Err(AggregationError::Update { .. })));
    let mut partial = updates.clone();
    partial[1].deltas.remove(&BlockName::Bridge);
    assert!(matches!(fedavg_adapters(&partial, &sync_plan()), Err(AggregationError::Update { .. })));
    assert!(matches!(
        fedavg_adapters(&updates, &AggregationPlan::with_strategy(Strategy::AsyncMix)),
        Err(AggregationError::Strategy { .. })
    ));
}

#[test]
fn fedavg_skips_blocks_nobody_sent() {
    let s = small_snapshot(3, false);
    let updates = vec![update("a", random_deltas(&s, 1, 1.0), 2)];
    let out = fedavg_adapters(&updates, &sync_plan()).unwrap();
    assert!(!out.contains_key(&BlockName::Bridge));
    assert_eq!(out, updates[0].deltas);
}

fn residual(m: &Matrix, pair: &AdapterPair) -> f64 {
    m.sub(&pair.delta()).unwrap().frobenius_norm()
}

/// Best rank-`r` residual `sqrt(Σ_{k>r} σ_k²)` from a dense SVD.
fn oracle_residual(m: &Matrix, r: usize) -> f64 {
    let dm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let sv = dm.svd(false, false).singular_values;
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[r..].iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn factorization_of_rank_r_input_is_exact() {
    let mut rng = SplitMix64::new(5);
    for _ in 0..5 {
        let pair = AdapterPair::new(Matrix::gaussian(2, 16, 1.0, &mut rng), Matrix::gaussian(8, 2, 1.0, &mut rng), 4.0).unwrap();
        let m = pair.delta();
        let got = truncated_factorization(&m, 2, 4.0).unwrap();
        assert!(got.delta().max_abs_diff(&m) < 1e-9);
    }
}

#[test]
fn factorization_matches_svd_oracle() {
    let mut rng = SplitMix64::new(6);
    for trial in 0..10 {
        let p1 = AdapterPair::new(Matrix::gaussian(2, 16, 1.0, &mut rng), Matrix::gaussian(8, 2, 1.0, &mut rng), 4.0).unwrap();
        let p2 = AdapterPair::new(Matrix::gaussian(2, 16, 1.0, &mut rng), Matrix::gaussian(8, 2, 1.0, &mut rng), 4.0).unwrap();
        let m = p1.delta().add(&p2.delta()).unwrap().scale(0.5);
        let got = truncated_factorization(&m, 2, 4.0).unwrap();
        let want = oracle_residual(&m, 2);
        assert!((residual(&m, &got) - want).abs() < 1e-8, "trial {trial}");
        for candidate in [&p1, &p2] {
            assert!(residual(&m, &got) <= residual(&m, candidate) + 1e-9);
        }
    }
}

#[test]
fn factorization_handles_rank_deficiency() {
    let zero = truncated_factorization(&Matrix::zeros(4, 6), 2, 4.0).unwrap();
    assert_eq!(zero.delta(), Matrix::zeros(4, 6));
    let gram = zero.a.matmul(&zero.a.transpose()).unwrap();
    assert!(gram.max_abs_diff(&Matrix::identity(2)) < 1e-12);
    let mut rng = SplitMix64::new(7);
    let rank1 = Matrix::gaussian(4, 1, 1.0, &mut rng).matmul(&Matrix::gaussian(1, 6, 1.0, &mut rng)).unwrap();
    let got = truncated_factorization(&rank1, 2, 4.0).unwrap();
    assert!(got.delta().max_abs_diff(&rank1) < 1e-9);
    assert!(got.a.as_slice().iter().all(|v| v.is_finite()));
    assert!(matches!(truncated_factorization(&rank1, 5, 1.0), Err(AggregationError::Plan(_))));
}

fn refactor_plan() -> AggregationPlan {
    AggregationPlan::with_strategy(Strategy::ProductRefactor)
}

/// Deltas moving the server's adapters onto `(a, b)` for every tower.
fn deltas_to(server: &ModelSnapshot, vision: &AdapterPair, text: &AdapterPair) -> BlockMap {
    BlockMap::from([
        (BlockName::VisionA, vision.a.sub(&server.vision.adapter.a).unwrap()),
        (BlockName::VisionB, vision.b.sub(&server.vision.adapter.b).unwrap()),
        (BlockName::TextA, text.a.sub(&server.text.adapter.a).unwrap()),
        (BlockName::TextB, text.b.sub(&server.text.adapter.b).unwrap()),
    ])
}

#[test]
fn product_refactor_single_and_identical_clients() {
    let server = small_snapshot(8, false);
    let client = server.with_random_adapters(80, 0.5);
    let d = deltas_to(&server, &client.vision.adapter, &client.text.adapter);
    for n in 1..=3 {
        let updates: Vec<_> = (0..n).map(|i| update(&format!("c{i}"), d.clone(), 5)).collect();
        let out = product_refactor(&updates, &server, &refactor_plan()).unwrap();
        let got = apply_block_mask(&out, &server).unwrap();
        assert!(got.vision.adapter.delta().max_abs_diff(&client.vision.adapter.delta()) < 1e-9);
        assert!(got.text.adapter.delta().max_abs_diff(&client.text.adapter.delta()) < 1e-9);
    }
}

#[test]
fn separate_factor_averaging_is_biased_and_refactor_closes_the_gap() {
    let server = small_snapshot(9, false);
    let x = server.with_random_adapters(90, 0.5);
    let mut doubled = x.clone();
    for name in [BlockName::VisionA, BlockName::VisionB, BlockName::TextA, BlockName::TextB] {
        *doubled.block_mut(name).unwrap() = x.block(name).unwrap().scale(2.0);
    }
    let updates = vec![
        update("p", deltas_to(&server, &x.vision.adapter, &x.text.adapter), 1),
        update("q", deltas_to(&server, &doubled.vision.adapter, &doubled.text.adapter), 1),
    ];
    let target = x.vision.adapter.delta().add(&doubled.vision.adapter.delta()).unwrap().scale(0.5);

    let separate = apply_block_mask(&deltas_to_values(&server, &fedavg_adapters(&updates, &sync_plan()).unwrap()).unwrap(), &server).unwrap();
    let gap = separate.vision.adapter.delta().max_abs_diff(&target);
    assert!(gap > 1e-3, "separate averaging gap {gap}");

    let refactored = apply_block_mask(&product_refactor(&updates, &server, &refactor_plan()).unwrap(), &server).unwrap();
    assert!(refactored.vision.adapter.delta().max_abs_diff(&target) < 1e-9);
}

#[test]
fn product_refactor_mask_rules() {
    let server = small_snapshot(10, true);
    let updates = vec![update("a", random_deltas(&server, 1, 0.1), 1), update("b", random_deltas(&server, 2, 0.1), 1)];
    let mut plan = refactor_plan();
    plan.block_mask = BTreeSet::from([BlockName::VisionA]);
    assert!(matches!(product_refactor(&updates, &server, &plan), Err(AggregationError::Plan(_))));
    plan.block_mask = BTreeSet::from([BlockName::TextA, BlockName::TextB, BlockName::Bridge]);
    let out = product_refactor(&updates, &server, &plan).unwrap();
    assert_eq!(out.keys().copied().collect::<Vec<_>>(), vec![BlockName::TextA, BlockName::TextB, BlockName::Bridge]);
    let mean_bridge = updates[0].deltas[&BlockName::Bridge].add(&updates[1].deltas[&BlockName::Bridge]).unwrap().scale(0.5);
    let want = server.bridge.as_ref().unwrap().add(&mean_bridge).unwrap();
    assert!(out[&BlockName::Bridge].max_abs_diff(&want) < 1e-15);
}

fn async_plan(beta: f64, a: f64) -> AggregationPlan {
    AggregationPlan {
        mixing_rate: beta,
        staleness_exponent: a,
        ..AggregationPlan::with_strategy(Strategy::AsyncMix)
    }
}

#[test]
fn async_mix_fresh_full_rate_replaces() {
    let server = small_snapshot(11, true);
    let d = random_deltas(&server, 3, 0.2);
    let u = update("a", d.clone(), 1);
    let history = BTreeMap::new();
    let out = async_mix(&server.blocks(), &u, 0, &async_plan(1.0, 0.5), &history).unwrap();
    for (name, m) in &out {
        assert_eq!(m, &server.block(*name).unwrap().add(&d[name]).unwrap());
    }
}

#[test]
fn async_mix_hand_formula() {
    let server = BlockMap::from([(BlockName::Bridge, Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]))]);
    let old = BlockMap::from([(BlockName::Bridge, Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]))]);
    let delta = Matrix::from_rows(&[&[8.0, 0.0], &[0.0, -8.0]]);
    let u = ClientUpdate {
        base_version: 2,
        ..update("a", BlockMap::from([(BlockName::Bridge, delta)]), 1)
    };
    let history = BTreeMap::from([(2u64, old)]);
    let out = async_mix(&server, &u, 5, &async_plan(0.5, 1.0), &history).unwrap();
    // β_t = 0.5 / 4 = 0.125; trained = [[8,0],[1,-7]].
    let want = Matrix::from_rows(&[&[0.875 + 1.0, 1.75], &[2.625 + 0.125, 3.5 - 0.875]]);
    assert!(out[&BlockName::Bridge].max_abs_diff(&want) < 1e-15);
    assert_eq!(async_plan(0.5, 1.0).staleness_weight(3), 0.125);
    assert_eq!(async_plan(0.3, 0.0).staleness_weight(7), 0.3);
}

#[test]
fn async_mix_errors() {
    let server = small_snapshot(12, false);
    let u = ClientUpdate {
        base_version: 3,
        ..update("a", random_deltas(&server, 1, 0.1), 1)
    };
    let history: BTreeMap<u64, BlockMap> = BTreeMap::new();
    let plan = async_plan(0.5, 0.5);
    assert!(matches!(async_mix(&server.blocks(), &u, 2, &plan, &history), Err(AggregationError::FutureVersion { .. })));
    assert_eq!(async_mix(&server.blocks(), &u, 5, &plan, &history).unwrap_err(), AggregationError::History(3));
    let mut narrow = plan.clone();
    narrow.history_window = 1;
    assert!(matches!(async_mix(&server.blocks(), &u, 5, &narrow, &history), Err(AggregationError::TooStale { staleness: 2, .. })));
}

#[test]
fn chained_schedule_examples() {
    let x = vec!["X".to_string()];
    assert_eq!(chained_schedule(&x, 3).unwrap(), vec![(0, "X".into()), (1, "X".into()), (2, "X".into())]);
    let xyz: Vec<String> = ["X", "Y", "Z"].map(String::from).to_vec();
    let order: Vec<String> = chained_schedule(&xyz, 2).unwrap().into_iter().map(|(_, c)| c).collect();
    assert_eq!(order, ["X", "Y", "Z", "X", "Y", "Z"]);
    assert!(chained_schedule(&[], 2).is_err());
}

#[test]
fn apply_block_mask_behaviour() {
    let s = small_snapshot(13, true);
    let empty = apply_block_mask(&BlockMap::new(), &s).unwrap();
    assert_eq!(empty.version, s.version + 1);
    assert_eq!(empty.blocks(), s.blocks());

    let d = random_deltas(&s, 4, 1.0);
    let vision_only: BlockMap = d.iter().filter(|(k, _)| matches!(k, BlockName::VisionA | BlockName::VisionB)).map(|(k, v)| (*k, v.clone())).collect();
    let out = apply_block_mask(&vision_only, &s).unwrap();
    assert_eq!(out.text, s.text);
    assert_eq!(out.vision.adapter.a, d[&BlockName::VisionA]);
    assert_eq!(out.frozen_checksum(), s.frozen_checksum());

    let full = apply_block_mask(&d, &s).unwrap();
    assert_eq!(full.blocks(), d);

    let no_bridge = small_snapshot(13, false);
    assert!(matches!(apply_block_mask(&d, &no_bridge), Err(AggregationError::Plan(_))));
    let wrong = BlockMap::from([(BlockName::VisionA, Matrix::zeros(1, 1))]);
    assert!(matches!(apply_block_mask(&wrong, &s), Err(AggregationError::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fedavg_idempotent(n in 1usize..=16, seed in any::<u64>(), count in 1u64..1000) {
        let s = small_snapshot(1, true);
        let d = random_deltas(&s, seed, 3.0);
        let updates: Vec<_> = (0..n).map(|i| update(&format!("c{i:02}"), d.clone(), count + i as u64)).collect();
        prop_assert_eq!(fedavg_adapters(&updates, &sync_plan()).unwrap(), d);
    }

    #[test]
    fn fedavg_permutation_invariant(n in 2usize..8, seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let s = small_snapshot(2, true);
        let mut updates: Vec<_> = (0..n)
            .map(|i| update(&format!("c{i}"), random_deltas(&s, seed.wrapping_add(i as u64), 1.0), 1 + (seed >> (i * 3)) % 50))
            .collect();
        let reference = fedavg_adapters(&updates, &sync_plan()).unwrap();
        SplitMix64::new(shuffle_seed).shuffle(&mut updates);
        prop_assert_eq!(fedavg_adapters(&updates, &sync_plan()).unwrap(), reference);
    }

    #[test]
    fn fedavg_within_convex_hull(n in 1usize..10, seed in any::<u64>()) {
        let s = small_snapshot(3, true);
        let updates: Vec<_> = (0..n)
            .map(|i| update(&format!("c{i}"), random_deltas(&s, seed ^ (i as u64 * 7919), 2.0), 1 + (seed >> i) % 97))
            .collect();
        let out = fedavg_adapters(&updates, &sync_plan()).unwrap();
        for (name, m) in &out {
            for (idx, v) in m.as_slice().iter().enumerate() {
                let vals = updates.iter().map(|u| u.deltas[name].as_slice()[idx]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= *v && *v <= hi, "{} not in [{}, {}]", v, lo, hi);
            }
        }
    }

    #[test]
    fn async_full_rate_reproduces_client_state(seed in any::<u64>()) {
        let s = small_snapshot(4, true);
        let d = random_deltas(&s, seed, 0.5);
        let u = update("a", d.clone(), 3);
        let out = async_mix(&s.blocks(), &u, 0, &async_plan(1.0, 0.5), &BTreeMap::new()).unwrap();
        let applied = apply_block_mask(&out, &s).unwrap();
        for (name, delta) in &d {
            prop_assert_eq!(applied.block(*name).unwrap(), &s.block(*name).unwrap().add(delta).unwrap());
        }
    }
}
