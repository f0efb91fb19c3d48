use std::convert::Infallible;

use proptest::prelude::*;

use super::*;
use crate::testutil::*;
use crate::toymodel::ModelSnapshot;

fn spec(size: usize, rates: &[(Corruption, f64)], seed: u64) -> CorpusSpec {
    CorpusSpec {
        party: "p".into(),
        size,
        seed,
        corruption_rates: rates.iter().copied().collect(),
        ..CorpusSpec::default()
    }
}

fn sensitive() -> BTreeSet<TokenId> {
    vocab::SENSITIVE.collect()
}

/// Independent restatement of the caption template.
fn template_oracle(class: usize, hazard: bool) -> Vec<TokenId> {
    let c = class as TokenId;
    vec![1, 4 + c, 12 + 2 * c, 2, 13 + 2 * c, if hazard { 28 } else { 29 }]
}

fn is_contiguous_subsequence(hay: &[TokenId], needle: &[TokenId]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn empty_and_clean_corpora() {
    assert!(generate_corpus(&spec(0, &[], 1)).unwrap().is_empty());
    let corpus = generate_corpus(&spec(300, &[], 2)).unwrap();
    for r in &corpus {
        let t = r.truth.as_ref().unwrap();
        assert_eq!(r.corruption, BTreeSet::from([Corruption::Clean]));
        assert_eq!(r.caption, template_oracle(t.class, t.hazard));
        assert_eq!(r.object_labels, vec![12 + 2 * t.class as TokenId, 13 + 2 * t.class as TokenId]);
    }
    let classes: BTreeSet<usize> = corpus.iter().map(|r| r.truth.as_ref().unwrap().class).collect();
    assert_eq!(classes.len(), vocab::NUM_CLASSES);
}

#[test]
fn generation_is_deterministic() {
    let rates = [(Corruption::Mismatched, 0.2), (Corruption::SensitiveNoise, 0.2)];
    let a = generate_corpus(&spec(200, &rates, 7)).unwrap();
    assert_eq!(a, generate_corpus(&spec(200, &rates, 7)).unwrap());
    assert_eq!(write_corpus(&a), write_corpus(&generate_corpus(&spec(200, &rates, 7)).unwrap()));
    assert_ne!(a, generate_corpus(&spec(200, &rates, 8)).unwrap());
}

#[test]
fn spec_validation() {
    let over = spec(10, &[(Corruption::Mismatched, 0.6), (Corruption::TooShort, 0.5)], 0);
    assert!(matches!(generate_corpus(&over), Err(CorpusError::Spec(_))));
    assert!(generate_corpus(&spec(10, &[(Corruption::Clean, 0.1)], 0)).is_err());
    let mut bad = spec(10, &[], 0);
    bad.scene_class_pool = vec![8];
    assert!(generate_corpus(&bad).is_err());
    bad.scene_class_pool.clear();
    assert!(generate_corpus(&bad).is_err());
    let parsed: CorpusSpec = toml::from_str(
        "party = \"enn\"\nsize = 5\nseed = 3\nscene_class_pool = [0, 1]\n[corruption_rates]\nmismatched = 0.25\nlabels_only = 0.1\n",
    )
    .unwrap();
    assert_eq!(parsed.corruption_rates[&Corruption::Mismatched], 0.25);
    assert_eq!(parsed.corruption_rates[&Corruption::LabelsOnly], 0.1);
    assert!(toml::from_str::<CorpusSpec>("[corruption_rates]\nbogus = 0.1\n").is_err());
}

#[test]
fn planted_corruptions_follow_their_definitions() {
    let rates = [
        (Corruption::Mismatched, 0.2),
        (Corruption::SensitiveNoise, 0.2),
        (Corruption::LabelsOnly, 0.2),
        (Corruption::TooShort, 0.2),
    ];
    let corpus = generate_corpus(&spec(5000, &rates, 11)).unwrap();
    let mut counts: BTreeMap<Corruption, usize> = BTreeMap::new();
    for r in &corpus {
        let t = r.truth.as_ref().unwrap();
        *counts.entry(t.planted).or_default() += 1;
        assert_eq!(r.corruption, BTreeSet::from([t.planted]));
        let pristine = template_oracle(t.class, t.hazard);
        assert_eq!(t.pristine_caption, pristine);
        match t.planted {
            Corruption::Clean => assert_eq!(r.caption, pristine),
            Corruption::Mismatched => {
                let other = (r.caption[1] - 4) as usize;
                assert_ne!(other, t.class);
                assert_eq!(r.caption[..5], template_oracle(other, false)[..5]);
            }
            Corruption::SensitiveNoise => {
                assert!(r.caption.iter().any(|&x| vocab::is_sensitive(x)));
                let stripped: Vec<_> = r.caption.iter().copied().filter(|&x| !vocab::is_sensitive(x)).collect();
                assert_eq!(stripped, pristine);
            }
            Corruption::LabelsOnly => {
                assert!(r.caption.is_empty());
                assert!(!r.object_labels.is_empty());
            }
            Corruption::TooShort => assert_eq!(r.caption, pristine[..2]),
        }
    }
    for tag in Corruption::PLANTABLE.into_iter().chain([Corruption::Clean]) {
        let share = counts[&tag] as f64 / 5000.0;
        assert!((share - 0.2).abs() < 0.03, "{tag}: {share}");
    }
}

#[test]
fn mismatch_stays_within_party_pool() {
    let mut s = spec(400, &[(Corruption::Mismatched, 1.0)], 3);
    s.scene_class_pool = vec![2, 3, 4];
    for r in generate_corpus(&s).unwrap() {
        let other = (r.caption[1] - 4) as usize;
        assert!([2, 3, 4].contains(&other));
    }
    s.scene_class_pool = vec![5];
    for r in generate_corpus(&s).unwrap() {
        assert_ne!(r.caption[1], vocab::scene(5));
    }
}

#[test]
fn images_are_prototype_plus_noise() {
    let s = spec(3000, &[], 5);
    let world = World::for_spec(&s);
    for (i, p) in world.prototypes.iter().enumerate() {
        assert_unit(p);
        assert!(crate::linalg::dot(p, &world.hazard_dir).abs() < 1e-12);
        for q in &world.prototypes[i + 1..] {
            assert!(crate::linalg::dot(p, q).abs() < 1e-12);
        }
    }
    let mut resid = Vec::new();
    for r in generate_corpus(&s).unwrap() {
        let t = r.truth.unwrap();
        let sign = if t.hazard { 0.5 } else { -0.5 };
        for ((x, p), h) in r.image.iter().zip(&world.prototypes[t.class]).zip(&world.hazard_dir) {
            resid.push(x - p - sign * h);
        }
    }
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let std = (resid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.002 && (std - 0.1).abs() < 0.002, "mean {mean} std {std}");
    // Fewer dimensions than directions: unit vectors without orthogonality.
    let small = World::new(1, 4);
    small.prototypes.iter().for_each(|p| assert_unit(p));
}

#[test]
fn corpus_file_roundtrip() {
    let rates = [(Corruption::LabelsOnly, 0.3), (Corruption::SensitiveNoise, 0.3)];
    let corpus = generate_corpus(&spec(50, &rates, 9)).unwrap();
    let text = write_corpus(&corpus);
    assert_eq!(text.lines().count(), 50);
    assert!(text.lines().all(|l| l.split('\t').count() == 6));
    let back = read_corpus(&text).unwrap();
    for (a, b) in corpus.iter().zip(&back) {
        assert_eq!(b.truth, None);
        assert_eq!((&a.id, &a.party, &a.image, &a.caption, &a.object_labels, &a.corruption), (&b.id, &b.party, &b.image, &b.caption, &b.object_labels, &b.corruption));
    }
    assert!(!text.contains("pristine"));
    assert!(matches!(read_corpus("a\tb\n"), Err(CorpusError::Parse { line: 1, .. })));
    assert!(matches!(read_corpus("a\tp\t!!\t1\t2\tclean\n"), Err(CorpusError::Parse { .. })));
    assert!(matches!(read_corpus("a\tp\tAAAAAAAAAAA=\t1\t2\tclean,mismatched\n"), Err(CorpusError::Parse { .. })));
    assert!(matches!(read_corpus("a\tp\tAAAAAAAAAAA=\tx\t2\tclean\n"), Err(CorpusError::Parse { .. })));
}

fn record(caption: Vec<TokenId>, labels: Vec<TokenId>, tags: &[Corruption]) -> SceneRecord {
    SceneRecord {
        id: "r".into(),
        image: vec![0.0; 16],
        caption,
        object_labels: labels,
        party: "p".into(),
        truth: None,
        corruption: tags.iter().copied().collect(),
        quality_score: None,
    }
}

#[test]
fn rule_clean_examples() {
    let r = record(vec![1, 4, 12], vec![12, 13], &[Corruption::Clean]);
    assert_eq!(rule_clean(&r, &sensitive()), r);
    let all = record(vec![56, 60], vec![12, 13], &[Corruption::SensitiveNoise]);
    let out = rule_clean(&all, &sensitive());
    assert!(out.caption.is_empty());
    assert_eq!(out.corruption, BTreeSet::from([Corruption::LabelsOnly]));
    let fixed = label_to_caption(&out, &label_templates()).unwrap();
    assert_eq!(fixed.caption, vec![12, 30, 13, 31]);
    assert!(fixed.is_clean());
    for r in generate_corpus(&spec(300, &[(Corruption::SensitiveNoise, 1.0)], 4)).unwrap() {
        let cleaned = rule_clean(&r, &sensitive());
        assert_eq!(cleaned.caption, r.truth.as_ref().unwrap().pristine_caption);
        assert!(cleaned.is_clean());
    }
}

#[test]
fn label_to_caption_examples() {
    let t = label_templates();
    let one = label_to_caption(&record(vec![], vec![14], &[Corruption::LabelsOnly]), &t).unwrap();
    assert_eq!(one.caption, t[&14]);
    let ab = label_to_caption(&record(vec![], vec![14, 20], &[Corruption::LabelsOnly]), &t).unwrap();
    let ba = label_to_caption(&record(vec![], vec![20, 14], &[Corruption::LabelsOnly]), &t).unwrap();
    assert_ne!(ab.caption, ba.caption);
    for r in generate_corpus(&spec(100, &[(Corruption::LabelsOnly, 1.0)], 6)).unwrap() {
        let out = label_to_caption(&r, &t).unwrap();
        for l in &r.object_labels {
            assert!(is_contiguous_subsequence(&out.caption, &t[l]));
        }
        assert!(out.is_clean());
    }
    let gap = label_to_caption(&record(vec![], vec![3], &[Corruption::LabelsOnly]), &t).unwrap_err();
    assert_eq!(gap.label, 3);
}

#[test]
fn expand_caption_examples() {
    let t = label_templates();
    let long = record(template_oracle(1, true), vec![14, 15], &[Corruption::Clean]);
    assert_eq!(expand_caption(&long, 6, &t), long);
    let short = record(vec![1, 5], vec![14, 15], &[Corruption::TooShort]);
    let out = expand_caption(&short, 6, &t);
    assert!(out.caption.len() >= 6);
    assert_eq!(out.caption[..2], [1, 5]);
    assert!(out.is_clean());
    // Mentioned labels are not repeated; templates run out before min_len.
    let mentioned = record(vec![1, 14], vec![14], &[Corruption::TooShort]);
    let out = expand_caption(&mentioned, 6, &t);
    assert_eq!(out.caption, vec![1, 14]);
    assert!(out.corruption.contains(&Corruption::TooShort));
}

#[test]
fn expanded_captions_align_better_on_trained_model() {
    let train = generate_corpus(&spec(2000, &[], 21)).unwrap();
    let model = train_contrastive(&world_model(3), &train, 3, 0.05, 32, 1);
    let t = label_templates();
    let short = generate_corpus(&spec(200, &[(Corruption::TooShort, 1.0)], 22)).unwrap();
    let (mut better, mut gain) = (0, 0.0);
    for r in &short {
        let before = model.alignment_score(&r.image, &r.caption).unwrap();
        let expanded = expand_caption(r, 6, &t);
        let after = model.alignment_score(&expanded.image, &expanded.caption).unwrap();
        gain += after - before;
        if after > before {
            better += 1;
        }
    }
    assert!(gain > 0.0, "mean gain {}", gain / short.len() as f64);
    assert!(better as f64 >= 0.75 * short.len() as f64, "{better}/{} improved", short.len());
}

fn repair(r: &SceneRecord) -> SceneRecord {
    repair_record(r, &sensitive(), &label_templates(), 6)
}

#[test]
fn repairs_restore_planted_captions() {
    let rates = [(Corruption::SensitiveNoise, 0.3), (Corruption::LabelsOnly, 0.3), (Corruption::TooShort, 0.3)];
    for r in generate_corpus(&spec(500, &rates, 13)).unwrap() {
        let fixed = repair(&r);
        assert!(fixed.is_clean(), "{:?}", fixed.corruption);
        assert!(fixed.caption.len() >= 4);
        assert!(fixed.caption.iter().all(|&t| !vocab::is_sensitive(t)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn repairs_are_idempotent(seed in any::<u64>(), caption in proptest::collection::vec(0u32..64, 0..9), labels in proptest::collection::vec(12u32..28, 0..3)) {
        let t = label_templates();
        let s = sensitive();
        let tag = [Corruption::Clean, Corruption::SensitiveNoise, Corruption::TooShort, Corruption::LabelsOnly][(seed % 4) as usize];
        let r = record(caption, labels, &[tag]);
        let once = rule_clean(&r, &s);
        prop_assert_eq!(rule_clean(&once, &s), once.clone());
        if !r.object_labels.is_empty() {
            let l1 = label_to_caption(&r, &t).unwrap();
            prop_assert_eq!(label_to_caption(&l1, &t).unwrap(), l1);
        }
        let e1 = expand_caption(&r, 6, &t);
        prop_assert_eq!(expand_caption(&e1, 6, &t), e1);
        let full = repair(&r);
        prop_assert_eq!(repair(&full), full);
    }
}

#[test]
fn score_and_filter_extremes_and_partition() {
    let corpus = generate_corpus(&spec(100, &[(Corruption::Mismatched, 0.5)], 30)).unwrap();
    let model = world_model(4);
    let (kept, dropped) = score_and_filter(&model, corpus.clone(), -1.0).unwrap();
    assert_eq!((kept.len(), dropped.len()), (100, 0));
    let (kept, dropped) = score_and_filter(&model, corpus.clone(), 1.0 + 1e-9).unwrap();
    assert_eq!((kept.len(), dropped.len()), (0, 100));
    let (kept, dropped) = score_and_filter(&model, corpus.clone(), 0.1).unwrap();
    assert_eq!(kept.len() + dropped.len(), corpus.len());
    let kept_ids: BTreeSet<_> = kept.iter().map(|r| &r.id).collect();
    assert!(dropped.iter().all(|r| !kept_ids.contains(&r.id)));
    assert!(kept.iter().all(|r| r.quality_score.unwrap() >= 0.1));
    assert!(dropped.iter().all(|r| r.quality_score.unwrap() < 0.1));
}

#[test]
fn otsu_on_trained_fixture_drops_mismatches() {
    let corpus = generate_corpus(&spec(2000, &[(Corruption::Mismatched, 0.3)], 31)).unwrap();
    let model = train_contrastive(&world_model(5), &corpus, 3, 0.05, 32, 2);
    let scores: Vec<f64> = corpus.iter().map(|r| model.alignment_score(&r.image, &r.caption).unwrap()).collect();
    let (threshold, _) = select_threshold(&scores, Threshold::Auto);
    assert!(threshold > -1.0);
    let (_, dropped) = score_and_filter(&model, corpus.clone(), threshold).unwrap();
    let count = |recs: &[SceneRecord], tag| recs.iter().filter(|r| r.planted() == Some(tag)).count();
    let mis_recall = count(&dropped, Corruption::Mismatched) as f64 / count(&corpus, Corruption::Mismatched) as f64;
    let clean_loss = count(&dropped, Corruption::Clean) as f64 / count(&corpus, Corruption::Clean) as f64;
    assert!(mis_recall >= 0.8, "mismatch recall {mis_recall}");
    assert!(clean_loss <= 0.2, "clean loss {clean_loss}");
}

#[test]
fn otsu_split_basics() {
    assert!(otsu_split(&[0.5; 10]).is_none());
    let mut bimodal = vec![0.0; 30];
    bimodal.extend(vec![0.9; 70]);
    let s = otsu_split(&bimodal).unwrap();
    assert!(s.threshold > 0.0 && s.threshold <= 0.9);
    assert!((s.separability - 1.0).abs() < 1e-12);
    assert_eq!(select_threshold(&bimodal, Threshold::Fixed(0.3)), (0.3, None));
    // Close halves of one mode do not trigger a cut.
    let unimodal: Vec<f64> = (0..200).map(|i| 0.7 + 0.001 * i as f64).collect();
    assert_eq!(select_threshold(&unimodal, Threshold::Auto).0, -1.0);
    assert_eq!("auto".parse::<Threshold>().unwrap(), Threshold::Auto);
    assert_eq!("0.25".parse::<Threshold>().unwrap(), Threshold::Fixed(0.25));
    assert!("high".parse::<Threshold>().is_err());
}

/// Centralized stand-in for federated training.
struct PooledTrainer {
    model: ModelSnapshot,
    eval: Vec<SceneRecord>,
    calls: usize,
}

impl FederatedTrainer for PooledTrainer {
    type Error = Infallible;

    fn train(&mut self, corpora: &BTreeMap<String, Vec<SceneRecord>>) -> Result<ModelSnapshot, Infallible> {
        let all: Vec<SceneRecord> = corpora.values().flatten().cloned().collect();
        self.model = train_contrastive(&self.model, &all, 2, 0.05, 32, self.calls as u64);
        self.calls += 1;
        Ok(self.model.clone())
    }

    fn evaluate(&mut self, model: &ModelSnapshot) -> Result<f64, Infallible> {
        Ok(crate::metrics::recall_at_k(model, &self.eval, 1).unwrap())
    }
}

fn pooled(seed: u64) -> PooledTrainer {
    PooledTrainer {
        model: world_model(seed),
        eval: clean_eval_set(200, 77, 16, CorpusSpec::default().world_seed),
        calls: 0,
    }
}

fn parties(rate: f64, seed: u64) -> BTreeMap<String, Vec<SceneRecord>> {
    [("a", vec![0, 1, 2, 3]), ("b", vec![4, 5, 6, 7])]
        .into_iter()
        .map(|(p, pool)| {
            let s = CorpusSpec {
                party: p.into(),
                size: 800,
                seed,
                scene_class_pool: pool,
                corruption_rates: BTreeMap::from([(Corruption::Mismatched, rate)]),
                ..CorpusSpec::default()
            };
            (p.to_string(), generate_corpus(&s).unwrap())
        })
        .collect()
}

#[test]
fn quality_loop_zero_iterations_returns_initial_model() {
    let mut trainer = pooled(1);
    let cfg = QualityLoopConfig {
        max_iters: 0,
        ..QualityLoopConfig::default()
    };
    let data = parties(0.3, 1);
    let out = quality_loop(&mut trainer, data.clone(), &cfg).unwrap();
    assert_eq!(trainer.calls, 1);
    assert_eq!(out.model, trainer.model);
    assert_eq!(out.corpora, data);
    assert_eq!(out.reports.len(), 1);
}

#[test]
fn quality_loop_filters_monotonically_and_helps() {
    let mut trainer = pooled(2);
    let cfg = QualityLoopConfig {
        max_iters: 3,
        ..QualityLoopConfig::default()
    };
    let out = quality_loop(&mut trainer, parties(0.3, 2), &cfg).unwrap();
    assert_eq!(out.reports.len(), 4);
    for w in out.reports.windows(2) {
        for (before, after) in w[0].parties.iter().zip(&w[1].parties) {
            assert!(after.kept <= before.kept);
            assert!(after.mismatch_recall.unwrap() >= before.mismatch_recall.unwrap());
        }
    }
    for stats in &out.reports.last().unwrap().parties {
        assert!(stats.mismatch_recall.unwrap() >= 0.8, "{stats:?}");
        assert!(stats.clean_loss.unwrap() <= 0.2, "{stats:?}");
    }
    assert!(out.reports.last().unwrap().metric >= out.reports[0].metric);
    for (p, recs) in &out.corpora {
        assert!(recs.iter().all(|r| &r.party == p));
    }
}

#[test]
fn quality_loop_on_clean_data_keeps_almost_everything() {
    let mut trainer = pooled(3);
    let cfg = QualityLoopConfig {
        max_iters: 2,
        ..QualityLoopConfig::default()
    };
    let out = quality_loop(&mut trainer, parties(0.0, 3), &cfg).unwrap();
    for report in &out.reports[1..] {
        for stats in &report.parties {
            let before = stats.kept + stats.dropped;
            assert!(stats.dropped as f64 <= 0.05 * before as f64, "{stats:?}");
        }
    }
    let metrics: Vec<f64> = out.reports.iter().map(|r| r.metric).collect();
    assert!(metrics[1..].iter().all(|m| (m - metrics[1]).abs() <= 0.1), "{metrics:?}");
}

#[test]
fn quality_loop_stops_at_target_and_guards_floor() {
    let mut trainer = pooled(4);
    let cfg = QualityLoopConfig {
        max_iters: 5,
        target_metric: Some(0.0),
        ..QualityLoopConfig::default()
    };
    let out = quality_loop(&mut trainer, parties(0.3, 4), &cfg).unwrap();
    assert_eq!(out.reports.len(), 1);

    let mut trainer = pooled(5);
    let cfg = QualityLoopConfig {
        max_iters: 1,
        threshold: Threshold::Fixed(2.0),
        ..QualityLoopConfig::default()
    };
    match quality_loop(&mut trainer, parties(0.3, 5), &cfg) {
        Err(QualityLoopError::Starvation { party, kept: 0, floor: 10 }) => assert_eq!(party, "a"),
        other => panic!("expected starvation, got {other:?}"),
    }
    assert!(matches!(quality_loop(&mut pooled(6), BTreeMap::new(), &cfg), Err(QualityLoopError::NoParties)));
}

#[test]
fn probe_set_is_shared_and_mixed() {
    let w = World::new(1, 16);
    let p = w.probe_set(32, 5);
    assert_eq!(p, World::new(1, 16).probe_set(32, 5));
    assert_eq!(p.len(), 32);
    let images = p.items().iter().filter(|i| matches!(i, crate::fusion::ProbeItem::Image { .. })).count();
    assert_eq!(images, 16);
}

