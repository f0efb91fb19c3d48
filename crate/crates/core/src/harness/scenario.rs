//! Scenario files.
//!
//! A scenario is a TOML document. Every key is optional and falls back to
//! the default shown here:
//!
//! ```toml
//! seed = 42              # master seed; FLMM_SEED overrides it
//! rounds = 10
//! local_epochs = 2
//! lr = 0.01
//! batch_size = 32
//! deadline_ms = 60000    # per-round submission deadline
//! masking = false        # pairwise-mask secure aggregation
//! token = "flmm-token"   # shared registration token
//!
//! [model]                # d_v = 16, d_t = 16, d_emb = 8, rank = 2, vocab = 64,
//!                        # temperature = 0.1, bridge = true, seed = 24301
//! [aggregation]          # strategy = "sync_avg", staleness_exponent = 0.5,
//!                        # mixing_rate = 0.5, history_window = 16,
//!                        # block_mask = all blocks, chain_order = []
//! [eval]                 # size = 400, seed = 7
//! [probe]                # enabled = false, size = 32, seed = 11
//! [quality]              # enabled = false, max_iters = 2, floor = 10,
//!                        # threshold = "auto", min_caption_len = 6
//! [shapley]              # enabled = false, method = "exact", budget = 200,
//!                        # tolerance = 0.0, metric = "recall_at_1", weights = {}
//!
//! [[parties]]
//! id = "enn"
//! modalities = ["image", "text"]
//! repair = true          # rule cleaning, label captioning, caption expansion
//! [parties.corpus]       # size, corruption_rates, scene_class_pool,
//!                        # hazard_rate, d_v, world_seed, seed
//! [parties.fusion]       # contrastive = 1.0, distill = 0.0, anchor = 0.0
//! [parties.privacy]      # dp_enabled = false, clip_norm = 1.0, noise_std = 0.0, ...
//! ```
//!
//! Corpus, model, eval, probe and client seeds are all derived from the
//! master seed, so `(file, seed)` fixes the whole run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationPlan, Strategy};
use crate::contribution::{CoalitionMetric, ShapleyMethod};
use crate::dataquality::{self, clean_eval_set, generate_corpus, label_templates, repair_record, Corruption, CorpusSpec, QualityLoopConfig, SceneRecord, World};
use crate::fusion::{Modality, ProbeSet};
use crate::orchestrator::{wire::valid_party_id, ServerConfig, TrainingParams};
use crate::privacy::PrivacyConfig;
use crate::rng::SplitMix64;
use crate::toymodel::{ModelConfig, ModelSnapshot};

use super::HarnessError;

/// Environment variable that replaces the scenario seed.
pub const SEED_ENV: &str = "FLMM_SEED";

/// Loss weights of one party's local objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWeights {
    pub contrastive: f64,
    pub distill: f64,
    pub anchor: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            distill: 0.0,
            anchor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartyConfig {
    pub id: String,
    pub modalities: Vec<Modality>,
    /// Run the local repair pipeline before training.
    pub repair: bool,
    /// `party` is taken from `id`; `seed` is mixed into the derived seed.
    pub corpus: CorpusSpec,
    pub fusion: FusionWeights,
    pub privacy: PrivacyConfig,
}

impl Default for PartyConfig {
    fn default() -> Self {
        Self {
            id: String::new(),
            modalities: vec![Modality::Image, Modality::Text],
            repair: true,
            corpus: CorpusSpec::default(),
            fusion: FusionWeights::default(),
            privacy: PrivacyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { size: 400, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub enabled: bool,
    pub size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            size: 32,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapleyConfig {
    pub enabled: bool,
    pub method: ShapleyMethod,
    pub budget: usize,
    pub tolerance: f64,
    pub metric: CoalitionMetric,
    /// Party weights for sampling; empty means unit weights.
    pub weights: BTreeMap<String, f64>,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            method: ShapleyMethod::Exact,
            budget: 200,
            tolerance: 0.0,
            metric: CoalitionMetric::RecallAt1,
            weights: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub rounds: u64,
    pub local_epochs: u32,
    pub lr: f64,
    pub batch_size: u32,
    pub deadline_ms: u64,
    pub masking: bool,
    pub token: String,
    pub model: ModelConfig,
    pub aggregation: AggregationPlan,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub quality: QualityLoopConfig,
    pub shapley: ShapleyConfig,
    pub parties: Vec<PartyConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            rounds: 10,
            local_epochs: 2,
            lr: 1e-2,
            batch_size: 32,
            deadline_ms: 60_000,
            masking: false,
            token: "flmm-token".into(),
            model: ModelConfig::default(),
            aggregation: AggregationPlan::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            quality: QualityLoopConfig::default(),
            shapley: ShapleyConfig::default(),
            parties: Vec::new(),
        }
    }
}

fn corpus(size: usize, rates: &[(Corruption, f64)], pool: &[usize], hazard_rate: f64) -> CorpusSpec {
    CorpusSpec {
        size,
        corruption_rates: rates.iter().copied().collect(),
        scene_class_pool: pool.to_vec(),
        hazard_rate,
        ..CorpusSpec::default()
    }
}

impl ScenarioConfig {
    /// Three parties shaped like the energy / urban-management /
    /// community-security collaboration, scaled 1:100 with 30% planted
    /// corruption each. The first party holds annotated energy-hazard
    /// scenes, the second partially annotated street scenes (short and
    /// label-only captions), the third images with labels only.
    pub fn three_party() -> Self {
        use Corruption::{LabelsOnly, Mismatched, SensitiveNoise, TooShort};
        let party = |id: &str, modalities: Vec<Modality>, corpus: CorpusSpec| PartyConfig {
            id: id.into(),
            modalities,
            corpus,
            ..PartyConfig::default()
        };
        let both = vec![Modality::Image, Modality::Text];
        Self {
            parties: vec![
                party(
                    "enn",
                    both.clone(),
                    corpus(2600, &[(Mismatched, 0.15), (SensitiveNoise, 0.05), (LabelsOnly, 0.05), (TooShort, 0.05)], &[0, 1, 2, 3], 0.6),
                ),
                party(
                    "unicom",
                    both,
                    corpus(1500, &[(Mismatched, 0.10), (SensitiveNoise, 0.04), (LabelsOnly, 0.08), (TooShort, 0.08)], &[2, 3, 4, 5], 0.2),
                ),
                party(
                    "windaka",
                    vec![Modality::Image],
                    corpus(1100, &[(Mismatched, 0.10), (LabelsOnly, 0.20)], &[5, 6, 7, 0], 0.1),
                ),
            ],
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Reads a scenario file and applies [`SEED_ENV`].
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_seed_env()?;
        Ok(cfg)
    }

    pub fn apply_seed_env(&mut self) -> Result<(), HarnessError> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.parties.is_empty() {
            return bad("at least one party is required".into());
        }
        let mut seen = BTreeSet::new();
        for p in &self.parties {
            if !valid_party_id(&p.id) {
                return bad(format!("invalid party id `{}`", p.id));
            }
            if !seen.insert(p.id.as_str()) {
                return bad(format!("duplicate party `{}`", p.id));
            }
            if p.modalities.is_empty() {
                return bad(format!("party `{}` covers no modality", p.id));
            }
            if p.corpus.d_v != self.model.d_v {
                return bad(format!("party `{}` corpus d_v {} but model d_v {}", p.id, p.corpus.d_v, self.model.d_v));
            }
            if p.corpus.world_seed != self.parties[0].corpus.world_seed {
                return bad("all parties must share one world_seed".into());
            }
            let w = p.fusion;
            if [w.contrastive, w.distill, w.anchor].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad(format!("party `{}` fusion weights must be finite and ≥ 0", p.id));
            }
            if w.distill > 0.0 && !self.probe.enabled {
                return bad(format!("party `{}` distills but [probe] is disabled", p.id));
            }
            if p.privacy.masking_enabled && !self.masking {
                return bad(format!("party `{}` asks for masking but the scenario has masking = false", p.id));
            }
            p.privacy.validate().map_err(|e| HarnessError::Config(format!("party `{}`: {e}", p.id)))?;
            self.party_corpus_spec(p).validate().map_err(|e| HarnessError::Config(format!("party `{}`: {e}", p.id)))?;
        }
        if self.model.vocab < dataquality::vocab::VOCAB_SIZE {
            return bad(format!("model vocab {} is smaller than the corpus vocabulary {}", self.model.vocab, dataquality::vocab::VOCAB_SIZE));
        }
        if self.eval.size == 0 {
            return bad("eval size must be positive".into());
        }
        if self.probe.enabled && self.probe.size == 0 {
            return bad("probe size must be positive".into());
        }
        if self.shapley.enabled && self.shapley.method == ShapleyMethod::Wtdp && self.shapley.budget == 0 {
            return bad("shapley budget must be positive".into());
        }
        ModelSnapshot::init(&self.model_config()).map_err(|e| HarnessError::Config(format!("model: {e}")))?;
        self.server_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    fn derived(&self, labels: &[&str]) -> u64 {
        let mut full = vec!["harness"];
        full.extend_from_slice(labels);
        SplitMix64::derive(self.seed, &full).next_u64()
    }

    pub fn party(&self, id: &str) -> Option<&PartyConfig> {
        self.parties.iter().find(|p| p.id == id)
    }

    pub fn party_ids(&self) -> Vec<String> {
        self.parties.iter().map(|p| p.id.clone()).collect()
    }

    pub fn party_corpus_spec(&self, p: &PartyConfig) -> CorpusSpec {
        CorpusSpec {
            party: p.id.clone(),
            seed: self.derived(&["corpus", &p.id, &p.corpus.seed.to_string()]),
            ..p.corpus.clone()
        }
    }

    /// The party's raw corpus, as generated.
    pub fn raw_corpus(&self, p: &PartyConfig) -> Result<Vec<SceneRecord>, HarnessError> {
        generate_corpus(&self.party_corpus_spec(p)).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// The corpus the party trains on: raw, then repaired when configured.
    pub fn local_corpus(&self, p: &PartyConfig) -> Result<Vec<SceneRecord>, HarnessError> {
        let raw = self.raw_corpus(p)?;
        if !p.repair {
            return Ok(raw);
        }
        let templates = label_templates();
        Ok(raw
            .iter()
            .map(|r| repair_record(r, &p.privacy.sensitive_patterns, &templates, self.quality.min_caption_len))
            .collect())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.derived(&["model", &self.model.seed.to_string()]),
            ..self.model.clone()
        }
    }

    pub fn initial_model(&self) -> Result<ModelSnapshot, HarnessError> {
        ModelSnapshot::init(&self.model_config()).map_err(|e| HarnessError::Config(format!("model: {e}")))
    }

    pub fn world_seed(&self) -> u64 {
        self.parties.first().map_or(CorpusSpec::default().world_seed, |p| p.corpus.world_seed)
    }

    /// Clean held-out set over every scene class.
    pub fn eval_set(&self) -> Vec<SceneRecord> {
        clean_eval_set(self.eval.size, self.derived(&["eval", &self.eval.seed.to_string()]), self.model.d_v, self.world_seed())
    }

    pub fn probe_set(&self) -> Option<ProbeSet> {
        self.probe.enabled.then(|| {
            World::new(self.world_seed(), self.model.d_v).probe_set(self.probe.size, self.derived(&["probe", &self.probe.seed.to_string()]))
        })
    }

    /// Seed of a party's local training; rounds and epochs are mixed in
    /// by the client.
    pub fn client_seed(&self, party: &str) -> u64 {
        self.derived(&["client", party])
    }

    pub fn deadline(&self) -> Duration {
        Duration::from_millis(self.deadline_ms)
    }

    pub fn server_config(&self) -> ServerConfig {
        let mut plan = self.aggregation.clone();
        if plan.strategy == Strategy::Chained && plan.chain_order.is_empty() {
            plan.chain_order = self.party_ids();
        }
        ServerConfig {
            tokens: BTreeSet::from([self.token.clone()]),
            parties: self.party_ids(),
            rounds: self.rounds,
            plan,
            training: TrainingParams {
                epochs: self.local_epochs,
                lr: self.lr,
                batch_size: self.batch_size,
            },
            deadline: self.deadline(),
            masking: self.masking,
            seed: self.derived(&["server"]),
            probe: self.probe_set(),
        }
    }

    pub fn shared_eval_set(&self) -> Arc<Vec<SceneRecord>> {
        Arc::new(self.eval_set())
    }
}
