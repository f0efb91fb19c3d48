//! Append-only round log with a CRC chain, and the aggregation step shared
//! by the live server and log replay.
//!
//! Each record is one line of space-separated `key=value` fields ending in
//! `prev=<crc of previous line> crc=<crc of this line up to " crc=">`, both
//! as eight lowercase hex digits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use super::wire::{self, valid_party_id};
use crate::aggregation::{
    apply_block_mask, async_mix, deltas_to_values, fedavg_adapters, product_refactor, AggregationError, AggregationPlan, ClientUpdate,
    Strategy, VersionHistory,
};
use crate::codec::{self, Reader};
use crate::fusion::ConsensusMap;
use crate::privacy::{self, PrivacyError};
use crate::toymodel::{BlockMap, BlockName, ModelSnapshot};

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("round log line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("round log line {line}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { line: usize, stored: u32, computed: u32 },
    #[error("round log line {line}: chain broken (expects previous {expected:08x}, found {found:08x})")]
    Chain { line: usize, expected: u32, found: u32 },
    #[error("round log i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum RoundError {
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub status: RoundStatus,
    pub plan: AggregationPlan,
    /// Seed of the pairwise masks when secure aggregation was on.
    pub mask_seed: Option<u64>,
    /// Contributing parties with their sample counts, sorted by id.
    pub contributors: Vec<(String, u64)>,
    /// Expected parties that did not submit before the round closed.
    pub absent: Vec<String>,
    /// CRC32 of each aggregated block of the post-round model.
    pub checksums: BTreeMap<BlockName, u32>,
    pub pre_version: u64,
    pub post_version: u64,
    /// CRC32 of the post-round checkpoint.
    pub checkpoint_crc: u32,
    pub metric: Option<f64>,
    pub duration_ms: u64,
    /// Updates in aggregation order, kept for replay.
    pub updates: Vec<ClientUpdate>,
    pub consensus: Option<ConsensusMap>,
    pub prev_crc: u32,
}

fn list<T: AsRef<str>>(items: impl IntoIterator<Item = T>) -> String {
    let joined: Vec<String> = items.into_iter().map(|s| s.as_ref().to_string()).collect();
    if joined.is_empty() {
        "-".into()
    } else {
        joined.join(",")
    }
}

fn encode_updates(updates: &[ClientUpdate]) -> String {
    let mut buf = Vec::new();
    codec::put_u32(&mut buf, updates.len() as u32);
    updates.iter().for_each(|u| wire::put_update(&mut buf, u));
    B64.encode(buf)
}

fn encode_consensus(c: &ConsensusMap) -> String {
    let mut buf = Vec::new();
    codec::put_u64(&mut buf, c.round);
    codec::put_u32(&mut buf, c.probe_id.len() as u32);
    buf.extend_from_slice(c.probe_id.as_bytes());
    codec::put_u32(&mut buf, c.items.len() as u32);
    for item in &c.items {
        match item {
            Some(v) => {
                codec::put_u8(&mut buf, 1);
                codec::put_u32(&mut buf, v.len() as u32);
                v.iter().for_each(|&x| codec::put_f64(&mut buf, x));
            }
            None => codec::put_u8(&mut buf, 0),
        }
    }
    B64.encode(buf)
}

fn decode_consensus(text: &str) -> Result<ConsensusMap, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    let mut r = Reader::new(&bytes);
    let err = |e: codec::DecodeError| e.to_string();
    let round = r.u64().map_err(err)?;
    let n = r.u32().map_err(err)? as usize;
    let probe_id = String::from_utf8(r.take(n).map_err(err)?.to_vec()).map_err(|e| e.to_string())?;
    let count = r.u32().map_err(err)? as usize;
    let mut items = Vec::new();
    for _ in 0..count {
        items.push(match r.u8().map_err(err)? {
            0 => None,
            1 => {
                let d = r.u32().map_err(err)? as usize;
                Some((0..d).map(|_| r.f64()).collect::<Result<Vec<_>, _>>().map_err(err)?)
            }
            x => return Err(format!("bad consensus flag {x}")),
        });
    }
    r.finish().map_err(err)?;
    Ok(ConsensusMap { probe_id, round, items })
}

impl RoundRecord {
    /// The record line up to (excluding) ` crc=`.
    fn body(&self) -> String {
        let (status, reason) = match &self.status {
            RoundStatus::Ok => ("ok", "-".to_string()),
            RoundStatus::Failed(msg) => ("failed", B64.encode(msg)),
        };
        let p = &self.plan;
        let fields: Vec<(&str, String)> = vec![
            ("round", self.round.to_string()),
            ("status", status.into()),
            ("reason", reason),
            ("strategy", p.strategy.as_str().into()),
            ("blocks", list(p.block_mask.iter().map(|b| b.as_str()))),
            ("staleness_exponent", p.staleness_exponent.to_string()),
            ("mixing_rate", p.mixing_rate.to_string()),
            ("history_window", p.history_window.to_string()),
            ("chain", list(&p.chain_order)),
            ("mask_seed", self.mask_seed.map_or("-".into(), |s| s.to_string())),
            ("contributors", list(self.contributors.iter().map(|(id, n)| format!("{id}:{n}")))),
            ("absent", list(&self.absent)),
            ("checksums", list(self.checksums.iter().map(|(b, c)| format!("{b}:{c:08x}")))),
            ("pre", self.pre_version.to_string()),
            ("post", self.post_version.to_string()),
            ("checkpoint", format!("{:08x}", self.checkpoint_crc)),
            ("metric", self.metric.map_or("-".into(), |m| m.to_string())),
            ("duration_ms", self.duration_ms.to_string()),
            ("updates", encode_updates(&self.updates)),
            ("consensus", self.consensus.as_ref().map_or("-".into(), encode_consensus)),
            ("prev", format!("{:08x}", self.prev_crc)),
        ];
        let parts: Vec<String> = fields.into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        parts.join(" ")
    }

    /// Checksum of this record as stored in its `crc` field.
    pub fn crc(&self) -> u32 {
        codec::crc32(self.body().as_bytes())
    }

    pub fn render(&self) -> String {
        let body = self.body();
        let crc = codec::crc32(body.as_bytes());
        format!("{body} crc={crc:08x}")
    }

    pub fn contributor_ids(&self) -> BTreeSet<&str> {
        self.contributors.iter().map(|(id, _)| id.as_str()).collect()
    }

    /// Parses one line, verifying its own checksum. Returns the record and
    /// that checksum.
    pub fn parse(line: &str, line_no: usize) -> Result<(Self, u32), LogError> {
        let perr = |msg: String| LogError::Parse { line: line_no, msg };
        let (body, crc_text) = line.rsplit_once(" crc=").ok_or_else(|| perr("missing crc field".into()))?;
        let stored = parse_hex(crc_text).ok_or_else(|| perr(format!("bad crc `{crc_text}`")))?;
        let computed = codec::crc32(body.as_bytes());
        if stored != computed {
            return Err(LogError::Crc {
                line: line_no,
                stored,
                computed,
            });
        }
        const KEYS: [&str; 21] = [
            "round",
            "status",
            "reason",
            "strategy",
            "blocks",
            "staleness_exponent",
            "mixing_rate",
            "history_window",
            "chain",
            "mask_seed",
            "contributors",
            "absent",
            "checksums",
            "pre",
            "post",
            "checkpoint",
            "metric",
            "duration_ms",
            "updates",
            "consensus",
            "prev",
        ];
        let fields: Vec<&str> = body.split(' ').collect();
        if fields.len() != KEYS.len() {
            return Err(perr(format!("expected {} fields, found {}", KEYS.len(), fields.len())));
        }
        let mut v = BTreeMap::new();
        for (field, key) in fields.iter().zip(KEYS) {
            let value = field
                .strip_prefix(key)
                .and_then(|s| s.strip_prefix('='))
                .ok_or_else(|| perr(format!("expected field `{key}`, found `{field}`")))?;
            v.insert(key, value);
        }
        let num = |key: &str| -> Result<u64, LogError> { v[key].parse().map_err(|_| perr(format!("bad {key} `{}`", v[key]))) };
        let float = |key: &str| -> Result<f64, LogError> { v[key].parse().map_err(|_| perr(format!("bad {key} `{}`", v[key]))) };
        let items = |key: &str| -> Vec<&str> {
            match v[key] {
                "-" => Vec::new(),
                s => s.split(',').collect(),
            }
        };
        let party = |s: &str| -> Result<String, LogError> {
            if valid_party_id(s) {
                Ok(s.to_string())
            } else {
                Err(perr(format!("bad party id `{s}`")))
            }
        };

        let status = match (v["status"], v["reason"]) {
            ("ok", "-") => RoundStatus::Ok,
            ("failed", r) => {
                let bytes = B64.decode(r).map_err(|e| perr(format!("bad reason: {e}")))?;
                RoundStatus::Failed(String::from_utf8(bytes).map_err(|_| perr("reason is not UTF-8".into()))?)
            }
            (s, _) => return Err(perr(format!("bad status `{s}`"))),
        };
        let plan = AggregationPlan {
            strategy: v["strategy"].parse().map_err(|e: AggregationError| perr(e.to_string()))?,
            block_mask: items("blocks")
                .into_iter()
                .map(|b| b.parse::<BlockName>().map_err(|e| perr(e.to_string())))
                .collect::<Result<_, _>>()?,
            staleness_exponent: float("staleness_exponent")?,
            mixing_rate: float("mixing_rate")?,
            history_window: num("history_window")? as usize,
            chain_order: items("chain").into_iter().map(party).collect::<Result<_, _>>()?,
        };
        let contributors = items("contributors")
            .into_iter()
            .map(|c| {
                let (id, n) = c.split_once(':').ok_or_else(|| perr(format!("bad contributor `{c}`")))?;
                Ok((party(id)?, n.parse().map_err(|_| perr(format!("bad contributor `{c}`")))?))
            })
            .collect::<Result<Vec<_>, LogError>>()?;
        let checksums = items("checksums")
            .into_iter()
            .map(|c| {
                let (b, h) = c.split_once(':').ok_or_else(|| perr(format!("bad checksum `{c}`")))?;
                let name: BlockName = b.parse().map_err(|e: crate::toymodel::UnknownBlock| perr(e.to_string()))?;
                Ok((name, parse_hex(h).ok_or_else(|| perr(format!("bad checksum `{c}`")))?))
            })
            .collect::<Result<BTreeMap<_, _>, LogError>>()?;
        let updates = {
            let bytes = B64.decode(v["updates"]).map_err(|e| perr(format!("bad updates: {e}")))?;
            let mut r = Reader::new(&bytes);
            let n = r.u32().map_err(|e| perr(e.to_string()))?;
            let ups = (0..n)
                .map(|_| wire::read_update(&mut r))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| perr(format!("bad updates: {e}")))?;
            r.finish().map_err(|e| perr(e.to_string()))?;
            ups
        };
        let record = RoundRecord {
            round: num("round")?,
            status,
            plan,
            mask_seed: match v["mask_seed"] {
                "-" => None,
                _ => Some(num("mask_seed")?),
            },
            contributors,
            absent: items("absent").into_iter().map(party).collect::<Result<_, _>>()?,
            checksums,
            pre_version: num("pre")?,
            post_version: num("post")?,
            checkpoint_crc: parse_hex(v["checkpoint"]).ok_or_else(|| perr("bad checkpoint crc".into()))?,
            metric: match v["metric"] {
                "-" => None,
                _ => Some(float("metric")?),
            },
            duration_ms: num("duration_ms")?,
            updates,
            consensus: match v["consensus"] {
                "-" => None,
                s => Some(decode_consensus(s).map_err(|e| perr(format!("bad consensus: {e}")))?),
            },
            prev_crc: parse_hex(v["prev"]).ok_or_else(|| perr("bad prev crc".into()))?,
        };
        if record.render() != line {
            return Err(perr("record is not in canonical form".into()));
        }
        Ok((record, stored))
    }
}

/// Eight lowercase hex digits, nothing else.
fn parse_hex(s: &str) -> Option<u32> {
    if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return None;
    }
    u32::from_str_radix(s, 16).ok()
}

/// Parses a whole log, checking every line's checksum and the chain.
pub fn parse_log(text: &str) -> Result<Vec<RoundRecord>, LogError> {
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(LogError::Parse {
            line: text.lines().count(),
            msg: "last record is not newline-terminated".into(),
        });
    }
    let mut prev = 0u32;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (record, crc) = RoundRecord::parse(line, i + 1)?;
        if record.prev_crc != prev {
            return Err(LogError::Chain {
                line: i + 1,
                expected: prev,
                found: record.prev_crc,
            });
        }
        prev = crc;
        out.push(record);
    }
    Ok(out)
}

/// The round log, in memory and optionally mirrored to a file.
#[derive(Debug, Clone, Default)]
pub struct RoundLog {
    path: Option<PathBuf>,
    records: Vec<RoundRecord>,
    last_crc: u32,
}

impl RoundLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file, validating any existing content.
    pub fn open(path: &Path) -> Result<Self, LogError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let records = parse_log(&text)?;
        let last_crc = records.last().map_or(0, RoundRecord::crc);
        Ok(Self {
            path: Some(path.to_path_buf()),
            records,
            last_crc,
        })
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    /// Chains and persists `record`, returning the stored copy.
    pub fn append(&mut self, mut record: RoundRecord) -> Result<&RoundRecord, LogError> {
        record.prev_crc = self.last_crc;
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(format!("{}\n", record.render()).as_bytes())?;
            f.sync_data()?;
        }
        self.last_crc = record.crc();
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }
}

/// CRC32 of each masked block of `snapshot`.
pub fn block_checksums(snapshot: &ModelSnapshot, plan: &AggregationPlan) -> BTreeMap<BlockName, u32> {
    plan.block_mask
        .iter()
        .filter_map(|&b| snapshot.block(b).map(|m| (b, codec::crc32(&m.to_le_bytes()))))
        .collect()
}

fn masked_mean(updates: &[ClientUpdate], plan: &AggregationPlan, seed: u64) -> Result<BlockMap, RoundError> {
    let first = updates.first().ok_or(AggregationError::Empty)?;
    for u in updates {
        u.validate()?;
    }
    let bases: BTreeSet<u64> = updates.iter().map(|u| u.base_version).collect();
    if bases.len() > 1 {
        return Err(AggregationError::MixedBase(bases.into_iter().collect()).into());
    }
    let masked = if updates.len() == 1 {
        vec![privacy::mask_update(first, std::slice::from_ref(&first.client_id), seed)?]
    } else {
        privacy::pairwise_mask(updates, seed)?
    };
    let mut mean = privacy::unmask_mean(&masked)?;
    mean.retain(|b, _| plan.block_mask.contains(b));
    Ok(mean)
}

/// One round's aggregation: unmasking (when `mask_seed` is set), the plan's
/// strategy and the block-mask write-back. The result carries version + 1.
pub fn aggregate_round(
    current: &ModelSnapshot,
    updates: &[ClientUpdate],
    plan: &AggregationPlan,
    mask_seed: Option<u64>,
    history: &dyn VersionHistory,
) -> Result<ModelSnapshot, RoundError> {
    let values = match (plan.strategy, mask_seed) {
        (Strategy::SyncAvg | Strategy::Chained, Some(seed)) => deltas_to_values(current, &masked_mean(updates, plan, seed)?)?,
        (Strategy::SyncAvg | Strategy::Chained, None) => deltas_to_values(current, &fedavg_adapters(updates, plan)?)?,
        (_, Some(_)) => {
            return Err(AggregationError::Plan(format!("secure aggregation is not available with {}", plan.strategy)).into());
        }
        (Strategy::ProductRefactor, None) => product_refactor(updates, current, plan)?,
        (Strategy::AsyncMix, None) => match updates {
            [u] => async_mix(&current.blocks(), u, current.version, plan, history)?,
            [] => return Err(AggregationError::Empty.into()),
            _ => return Err(AggregationError::Plan("asynchronous rounds carry exactly one update".into()).into()),
        },
    };
    Ok(apply_block_mask(&values, current)?)
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("round {round}: {msg}")]
    History { round: u64, msg: String },
    #[error("round {round}: {source}")]
    Round { round: u64, source: RoundError },
}

/// Re-aggregates the logged rounds starting from `initial`, keeping only
/// updates from `coalition` (all parties when `None`). Rounds without any
/// coalition update leave the model unchanged but still advance its version.
pub fn replay(initial: &ModelSnapshot, records: &[RoundRecord], coalition: Option<&BTreeSet<String>>) -> Result<ModelSnapshot, ReplayError> {
    replay_visit(initial, records, coalition, &mut |_, _| {})
}

/// [`replay`], calling `visit` with each successful record and the model it
/// produced.
pub fn replay_visit(
    initial: &ModelSnapshot,
    records: &[RoundRecord],
    coalition: Option<&BTreeSet<String>>,
    visit: &mut dyn FnMut(&RoundRecord, &ModelSnapshot),
) -> Result<ModelSnapshot, ReplayError> {
    let mut model = initial.clone();
    let mut history: BTreeMap<u64, BlockMap> = BTreeMap::from([(model.version, model.blocks())]);
    for rec in records.iter().filter(|r| r.status == RoundStatus::Ok) {
        let hist = |msg: String| ReplayError::History { round: rec.round, msg };
        if rec.pre_version != model.version || rec.post_version != rec.pre_version + 1 {
            return Err(hist(format!(
                "log moves version {} → {} but replay is at {}",
                rec.pre_version, rec.post_version, model.version
            )));
        }
        let logged: BTreeSet<&str> = rec.updates.iter().map(|u| u.client_id.as_str()).collect();
        if logged != rec.contributor_ids() || logged.len() != rec.updates.len() {
            return Err(hist("recorded updates do not match the contributor list".into()));
        }
        let updates: Vec<ClientUpdate> = rec
            .updates
            .iter()
            .filter(|u| coalition.is_none_or(|c| c.contains(&u.client_id)))
            .cloned()
            .collect();
        if updates.is_empty() {
            model.version = rec.post_version;
        } else {
            model = aggregate_round(&model, &updates, &rec.plan, rec.mask_seed, &history).map_err(|source| ReplayError::Round { round: rec.round, source })?;
        }
        visit(rec, &model);
        history.insert(model.version, model.blocks());
        let keep_from = model.version.saturating_sub(rec.plan.history_window as u64);
        history.retain(|&v, _| v >= keep_from);
    }
    Ok(model)
}
