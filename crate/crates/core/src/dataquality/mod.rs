//! Synthetic multimodal corpora with planted corruptions, deterministic
//! repairs and the model-in-the-loop quality filter.
//!
//! The toy world has [`vocab::NUM_CLASSES`] scene classes. Each class has a
//! unit prototype image; hazardous scenes are shifted along a shared hazard
//! direction. A clean caption is the class template
//! `the <scene> <object0> with <object1> <hazard|safe>`.

mod filter;
mod repair;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::fusion::{ProbeItem, ProbeSet};
use crate::linalg::{orthonormalize_columns, Matrix};
use crate::rng::SplitMix64;
use crate::toymodel::TokenId;

pub use filter::{
    otsu_split, quality_loop, score_and_filter, select_threshold, FederatedTrainer, IterationReport, OtsuSplit, PartyFilterStats,
    QualityLoopConfig, QualityLoopError, QualityOutcome, Threshold, MAX_MEAN_RATIO,
};
pub use repair::{expand_caption, label_to_caption, repair_record, rule_clean, TemplateGap};

/// Token layout of the toy vocabulary.
pub mod vocab {
    use crate::toymodel::TokenId;

    pub const NUM_CLASSES: usize = 8;
    pub const VOCAB_SIZE: usize = 64;

    pub const REFUSAL: TokenId = 0;
    pub const THE: TokenId = 1;
    pub const WITH: TokenId = 2;
    pub const NEAR: TokenId = 3;
    pub const HAZARD: TokenId = 28;
    pub const SAFE: TokenId = 29;
    /// Reserved ids standing in for addresses, user ids and similar.
    pub const SENSITIVE: std::ops::RangeInclusive<TokenId> = 56..=63;

    pub fn scene(class: usize) -> TokenId {
        4 + class as TokenId
    }

    /// The two object labels of a class, `12 + 2c` and `13 + 2c`.
    pub fn objects(class: usize) -> [TokenId; 2] {
        let base = 12 + 2 * class as TokenId;
        [base, base + 1]
    }

    /// Descriptor word paired with an object label.
    pub fn descriptor(label: TokenId) -> TokenId {
        30 + (label - 12)
    }

    pub fn is_label(t: TokenId) -> bool {
        (12..28).contains(&t)
    }

    pub fn is_sensitive(t: TokenId) -> bool {
        SENSITIVE.contains(&t)
    }
}

/// Clean caption of a scene: `[the, scene, obj0, with, obj1, hazard|safe]`.
pub fn caption_template(class: usize, hazard: bool) -> Vec<TokenId> {
    let [o0, o1] = vocab::objects(class);
    vec![
        vocab::THE,
        vocab::scene(class),
        o0,
        vocab::WITH,
        o1,
        if hazard { vocab::HAZARD } else { vocab::SAFE },
    ]
}

/// `label → [label, descriptor]` for every object label.
pub fn label_templates() -> BTreeMap<TokenId, Vec<TokenId>> {
    (0..vocab::NUM_CLASSES)
        .flat_map(vocab::objects)
        .map(|l| (l, vec![l, vocab::descriptor(l)]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Mismatched,
    SensitiveNoise,
    LabelsOnly,
    TooShort,
    Clean,
}

impl Corruption {
    /// The plantable tags, in the order rates are consumed.
    pub const PLANTABLE: [Corruption; 4] = [
        Corruption::Mismatched,
        Corruption::SensitiveNoise,
        Corruption::LabelsOnly,
        Corruption::TooShort,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::Mismatched => "mismatched",
            Corruption::SensitiveNoise => "sensitive_noise",
            Corruption::LabelsOnly => "labels_only",
            Corruption::TooShort => "too_short",
            Corruption::Clean => "clean",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Corruption {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Corruption::PLANTABLE
            .into_iter()
            .chain([Corruption::Clean])
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CorpusError::Spec(format!("unknown corruption tag `{s}`")))
    }
}

/// Hidden ground truth, used only by tests and reports. Never part of a
/// training batch or a wire message.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub class: usize,
    pub hazard: bool,
    pub planted: Corruption,
    pub pristine_caption: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: Vec<f64>,
    pub caption: Vec<TokenId>,
    pub object_labels: Vec<TokenId>,
    pub party: String,
    pub truth: Option<Truth>,
    pub corruption: BTreeSet<Corruption>,
    pub quality_score: Option<f64>,
}

impl SceneRecord {
    pub fn is_clean(&self) -> bool {
        self.corruption.contains(&Corruption::Clean)
    }

    pub fn planted(&self) -> Option<Corruption> {
        self.truth.as_ref().map(|t| t.planted)
    }

    /// Removes a tag, restoring `clean` when no corruption is left.
    pub(crate) fn clear_tag(&mut self, tag: Corruption) {
        self.corruption.remove(&tag);
        if self.corruption.is_empty() {
            self.corruption.insert(Corruption::Clean);
        }
    }

    pub(crate) fn add_tag(&mut self, tag: Corruption) {
        self.corruption.remove(&Corruption::Clean);
        self.corruption.insert(tag);
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("corpus line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn default_world_seed() -> u64 {
    0xF1EE7
}

/// Recipe for one party's corpus. Generation is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub party: String,
    pub size: usize,
    pub corruption_rates: BTreeMap<Corruption, f64>,
    pub seed: u64,
    pub scene_class_pool: Vec<usize>,
    /// Fraction of hazardous scenes.
    pub hazard_rate: f64,
    pub d_v: usize,
    /// Seed of the shared world (class prototypes), common to all parties.
    pub world_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            party: "party".into(),
            size: 0,
            corruption_rates: BTreeMap::new(),
            seed: 0,
            scene_class_pool: (0..vocab::NUM_CLASSES).collect(),
            hazard_rate: 0.3,
            d_v: 16,
            world_seed: default_world_seed(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        let mut total = 0.0;
        for (tag, &rate) in &self.corruption_rates {
            if *tag == Corruption::Clean {
                return bad("`clean` is not a plantable corruption".into());
            }
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("rate for {tag} must be in [0, 1], got {rate}"));
            }
            total += rate;
        }
        if total > 1.0 + 1e-12 {
            return bad(format!("corruption rates sum to {total} > 1"));
        }
        if self.scene_class_pool.is_empty() {
            return bad("scene_class_pool is empty".into());
        }
        if let Some(c) = self.scene_class_pool.iter().find(|&&c| c >= vocab::NUM_CLASSES) {
            return bad(format!("class {c} outside 0..{}", vocab::NUM_CLASSES));
        }
        if !(0.0..=1.0).contains(&self.hazard_rate) {
            return bad(format!("hazard_rate must be in [0, 1], got {}", self.hazard_rate));
        }
        if self.d_v == 0 {
            return bad("d_v must be positive".into());
        }
        if self.party.is_empty() || self.party.contains(char::is_whitespace) {
            return bad(format!("party id `{}` must be non-empty without whitespace", self.party));
        }
        Ok(())
    }

    fn rate(&self, tag: Corruption) -> f64 {
        self.corruption_rates.get(&tag).copied().unwrap_or(0.0)
    }
}

/// Standard deviation of the per-feature image noise.
pub const IMAGE_NOISE_STD: f64 = 0.1;
/// Offset of hazardous (+) and safe (−) scenes along the hazard direction.
pub const HAZARD_OFFSET: f64 = 0.5;

/// Shared class prototypes and hazard direction.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub prototypes: Vec<Vec<f64>>,
    pub hazard_dir: Vec<f64>,
}

impl World {
    pub fn new(world_seed: u64, d_v: usize) -> Self {
        let mut rng = SplitMix64::derive(world_seed, &["dataquality", "world"]);
        let n = vocab::NUM_CLASSES + 1;
        let mut m = Matrix::gaussian(d_v, n, 1.0, &mut rng);
        if n <= d_v {
            orthonormalize_columns(&mut m);
        } else {
            for c in 0..n {
                let col = m.column(c);
                let len = crate::linalg::norm(&col);
                for (r, v) in col.iter().enumerate() {
                    m[(r, c)] = v / len;
                }
            }
        }
        let prototypes = (0..vocab::NUM_CLASSES).map(|c| m.column(c)).collect();
        Self {
            prototypes,
            hazard_dir: m.column(vocab::NUM_CLASSES),
        }
    }

    pub fn for_spec(spec: &CorpusSpec) -> Self {
        Self::new(spec.world_seed, spec.d_v)
    }

    pub fn d_v(&self) -> usize {
        self.hazard_dir.len()
    }

    /// `prototype + (±offset)·hazard_dir + N(0, 0.1²)` per feature.
    pub fn image(&self, class: usize, hazard: bool, rng: &mut SplitMix64) -> Vec<f64> {
        let sign = if hazard { HAZARD_OFFSET } else { -HAZARD_OFFSET };
        self.prototypes[class]
            .iter()
            .zip(&self.hazard_dir)
            .map(|(p, h)| p + sign * h + IMAGE_NOISE_STD * rng.next_gaussian())
            .collect()
    }

    /// Public probe set alternating image and caption items over all classes.
    pub fn probe_set(&self, size: usize, seed: u64) -> ProbeSet {
        let mut rng = SplitMix64::derive(seed, &["dataquality", "probe"]);
        let items = (0..size.max(1))
            .map(|i| {
                let class = (i / 2) % vocab::NUM_CLASSES;
                let hazard = (i / (2 * vocab::NUM_CLASSES)) % 2 == 1;
                let id = format!("probe-{i:04}");
                if i % 2 == 0 {
                    ProbeItem::Image {
                        id,
                        features: self.image(class, hazard, &mut rng),
                    }
                } else {
                    ProbeItem::Text {
                        id,
                        tokens: caption_template(class, hazard),
                    }
                }
            })
            .collect();
        ProbeSet::new(format!("probe-{seed}"), items).expect("probe set is non-empty")
    }
}

/// Generates a party corpus. Identical specs give bit-identical corpora.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SceneRecord>, CorpusError> {
    spec.validate()?;
    let world = World::for_spec(spec);
    let mut rng = SplitMix64::derive(spec.seed, &["dataquality", "corpus", &spec.party]);
    let pool = &spec.scene_class_pool;
    let mut out = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let class = pool[rng.below(pool.len() as u64) as usize];
        let hazard = rng.next_f64() < spec.hazard_rate;
        let image = world.image(class, hazard, &mut rng);
        let pristine = caption_template(class, hazard);
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut planted = Corruption::Clean;
        for tag in Corruption::PLANTABLE {
            acc += spec.rate(tag);
            if u < acc {
                planted = tag;
                break;
            }
        }
        let caption = match planted {
            Corruption::Clean => pristine.clone(),
            Corruption::Mismatched => {
                let others: Vec<usize> = if pool.iter().any(|&c| c != class) {
                    pool.iter().copied().filter(|&c| c != class).collect()
                } else {
                    (0..vocab::NUM_CLASSES).filter(|&c| c != class).collect()
                };
                let other = others[rng.below(others.len() as u64) as usize];
                caption_template(other, rng.next_f64() < 0.5)
            }
            Corruption::SensitiveNoise => {
                let mut cap = pristine.clone();
                let n = 1 + rng.below(3);
                for _ in 0..n {
                    let tok = *vocab::SENSITIVE.start() + rng.below(8) as TokenId;
                    let at = rng.below(cap.len() as u64 + 1) as usize;
                    cap.insert(at, tok);
                }
                cap
            }
            Corruption::LabelsOnly => Vec::new(),
            Corruption::TooShort => pristine[..2].to_vec(),
        };
        out.push(SceneRecord {
            id: format!("{}-{i:05}", spec.party),
            image,
            caption,
            object_labels: vocab::objects(class).to_vec(),
            party: spec.party.clone(),
            truth: Some(Truth {
                class,
                hazard,
                planted,
                pristine_caption: pristine,
            }),
            corruption: BTreeSet::from([planted]),
            quality_score: None,
        });
    }
    Ok(out)
}

/// Clean held-out set spanning every class.
pub fn clean_eval_set(size: usize, seed: u64, d_v: usize, world_seed: u64) -> Vec<SceneRecord> {
    generate_corpus(&CorpusSpec {
        party: "eval".into(),
        size,
        seed,
        d_v,
        world_seed,
        ..CorpusSpec::default()
    })
    .expect("default eval spec is valid")
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|t| t.to_string()).collect::<Vec<_>>().join(sep)
}

/// One record per line:
/// `id TAB party TAB base64(image f64 LE) TAB caption TAB labels TAB tags`.
pub fn write_corpus(records: &[SceneRecord]) -> String {
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut out = String::new();
    for r in records {
        let bytes: Vec<u8> = r.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.party,
            b64.encode(bytes),
            join(&r.caption, " "),
            join(&r.object_labels, " "),
            join(&r.corruption, ","),
        ));
    }
    out
}

/// Parses [`write_corpus`] output. Ground truth is not part of the file.
pub fn read_corpus(text: &str) -> Result<Vec<SceneRecord>, CorpusError> {
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Parse { line: n + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 tab-separated fields, got {}", fields.len())));
        }
        let bytes = b64.decode(fields[2]).map_err(|e| err(format!("image: {e}")))?;
        if bytes.len() % 8 != 0 || bytes.is_empty() {
            return Err(err(format!("image payload of {} bytes is not a list of f64", bytes.len())));
        }
        let image = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tokens = |s: &str| -> Result<Vec<TokenId>, CorpusError> {
            s.split_whitespace()
                .map(|t| t.parse::<TokenId>().map_err(|e| err(format!("token `{t}`: {e}"))))
                .collect()
        };
        let corruption = fields[5]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<Corruption>().map_err(|e| err(e.to_string())))
            .collect::<Result<BTreeSet<_>, _>>()?;
        if corruption.is_empty() || (corruption.contains(&Corruption::Clean) && corruption.len() > 1) {
            return Err(err("tags must be `clean` or one or more corruptions".into()));
        }
        out.push(SceneRecord {
            id: fields[0].to_string(),
            party: fields[1].to_string(),
            image,
            caption: tokens(fields[3])?,
            object_labels: tokens(fields[4])?,
            truth: None,
            corruption,
            quality_score: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
