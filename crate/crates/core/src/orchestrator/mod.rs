//! Round coordination server.
//!
//! [`Coordinator`] is the protocol-agnostic state machine: registry, round
//! state, aggregation dispatch and persistence. Every mutation goes through
//! `&mut self`, so whoever owns it is the single writer; [`net`] puts it
//! behind a TCP listener and an ordered command queue. Aggregation is split
//! into [`Coordinator::begin_aggregation`] (captures inputs),
//! [`AggregationJob::run`] (pure, may run on another thread) and
//! [`Coordinator::install`] (one atomic transition).

pub mod log;
pub mod net;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::aggregation::{AggregationPlan, ClientUpdate, Strategy};
use crate::codec;
use crate::dataquality::SceneRecord;
use crate::fusion::{build_consensus, ClientProbeEmbeddings, ConsensusMap, Modality, ProbeSet};
use crate::rng::SplitMix64;
use crate::toymodel::{BlockMap, CheckpointError, ModelSnapshot};

pub use self::log::{aggregate_round, block_checksums, parse_log, replay, replay_visit, LogError, ReplayError, RoundError, RoundLog, RoundRecord, RoundStatus};
pub use self::wire::{
    Credentials, Frame, MsgType, RejectCode, Request, Response, ServerStatus, TaskAssignment, TrainingParams, WireError,
};

/// Monotonic time source for deadlines and durations.
pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    millis: AtomicU64,
}

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        self.millis.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_millis(self.millis.load(Ordering::SeqCst))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("server config: {0}")]
    Config(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("recovery: {0}")]
    Recovery(String),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("install: {0}")]
    Install(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    /// Accepted credentials; a party is bound to the token it registers with.
    pub tokens: BTreeSet<String>,
    /// Parties expected in every synchronous round.
    pub parties: Vec<String>,
    pub rounds: u64,
    pub plan: AggregationPlan,
    pub training: TrainingParams,
    pub deadline: Duration,
    pub masking: bool,
    pub seed: u64,
    pub probe: Option<ProbeSet>,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.tokens.is_empty() || self.tokens.iter().any(|t| t.is_empty() || !wire::valid_party_id(t)) {
            return bad("tokens must be non-empty strings of [A-Za-z0-9_.-]".into());
        }
        if self.parties.is_empty() {
            return bad("at least one party is required".into());
        }
        if let Some(p) = self.parties.iter().find(|p| !wire::valid_party_id(p)) {
            return bad(format!("invalid party id `{p}`"));
        }
        if self.parties.iter().collect::<BTreeSet<_>>().len() != self.parties.len() {
            return bad("party ids must be unique".into());
        }
        self.plan.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        if self.plan.strategy == Strategy::Chained {
            if let Some(p) = self.plan.chain_order.iter().find(|p| !self.parties.contains(p)) {
                return bad(format!("chain_order names unknown party `{p}`"));
            }
        }
        if self.masking && !matches!(self.plan.strategy, Strategy::SyncAvg | Strategy::Chained) {
            return bad(format!("secure aggregation needs sync_avg or chained, not {}", self.plan.strategy));
        }
        if !(self.training.lr >= 0.0 && self.training.lr.is_finite()) || self.training.batch_size == 0 {
            return bad("training needs lr ≥ 0 and batch_size ≥ 1".into());
        }
        if self.deadline.is_zero() {
            return bad("deadline must be positive".into());
        }
        Ok(())
    }

    fn mask_seed(&self, round: u64) -> Option<u64> {
        self.masking
            .then(|| SplitMix64::derive(self.seed, &["orchestrator", "mask", &round.to_string()]).next_u64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Open,
    Collecting,
    Aggregating,
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartyInfo {
    pub modalities: Vec<Modality>,
    /// Sample count of the party's latest accepted update.
    pub sample_count: u64,
    pub token: String,
    pub last_seen: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartyRegistry {
    pub parties: BTreeMap<String, PartyInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: u64,
    pub model_version: u64,
    pub phase: Phase,
    pub expected: BTreeSet<String>,
    pub received: BTreeMap<String, ClientUpdate>,
    pub embeddings: BTreeMap<String, ClientProbeEmbeddings>,
    pub plan: AggregationPlan,
    pub deadline: Duration,
    pub opened_at: Duration,
}

/// Inputs of one aggregation, detached from the server.
#[derive(Debug, Clone)]
pub struct AggregationJob {
    pub round: u64,
    current: Arc<ModelSnapshot>,
    updates: Vec<ClientUpdate>,
    plan: AggregationPlan,
    mask_seed: Option<u64>,
    history: BTreeMap<u64, BlockMap>,
}

#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub round: u64,
    pub result: Result<ModelSnapshot, String>,
}

impl AggregationJob {
    pub fn run(self) -> AggregationOutcome {
        let result = aggregate_round(&self.current, &self.updates, &self.plan, self.mask_seed, &self.history).map_err(|e| e.to_string());
        AggregationOutcome { round: self.round, result }
    }
}

pub const INITIAL_CHECKPOINT: &str = "initial.ckpt";
pub const ROUND_LOG: &str = "rounds.log";

fn checkpoint_path(dir: &Path, version: u64) -> PathBuf {
    dir.join(format!("v{version:010}.ckpt"))
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    cfg: ServerConfig,
    clock: Arc<dyn Clock>,
    registry: PartyRegistry,
    state: RoundState,
    initial: Arc<ModelSnapshot>,
    model: Arc<ModelSnapshot>,
    checkpoints: BTreeMap<u64, Arc<Vec<u8>>>,
    history: BTreeMap<u64, BlockMap>,
    log: RoundLog,
    dir: Option<PathBuf>,
    consensus: Option<ConsensusMap>,
    eval_set: Option<Arc<Vec<SceneRecord>>>,
    job_in_flight: bool,
}

impl Coordinator {
    /// Fresh server. With a directory, the initial model, every retained
    /// checkpoint and the round log are persisted there; the directory must
    /// not already hold a round log.
    pub fn new(
        cfg: ServerConfig,
        initial: ModelSnapshot,
        clock: Arc<dyn Clock>,
        dir: Option<&Path>,
        eval_set: Option<Arc<Vec<SceneRecord>>>,
    ) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let log = match dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                let log = RoundLog::open(&d.join(ROUND_LOG))?;
                if !log.records().is_empty() {
                    return Err(OrchestratorError::Config(format!("{} already holds a round log; recover instead", d.display())));
                }
                fs::write(d.join(INITIAL_CHECKPOINT), initial.to_checkpoint())?;
                log
            }
            None => RoundLog::in_memory(),
        };
        let initial = Arc::new(initial);
        let mut c = Self::assemble(cfg, clock, initial.clone(), log, dir, eval_set);
        c.install_model(initial)?;
        c.open_round(0);
        Ok(c)
    }

    fn assemble(
        cfg: ServerConfig,
        clock: Arc<dyn Clock>,
        initial: Arc<ModelSnapshot>,
        log: RoundLog,
        dir: Option<&Path>,
        eval_set: Option<Arc<Vec<SceneRecord>>>,
    ) -> Self {
        let state = RoundState {
            round: 0,
            model_version: initial.version,
            phase: Phase::Closed,
            expected: BTreeSet::new(),
            received: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            plan: cfg.plan.clone(),
            deadline: cfg.deadline,
            opened_at: Duration::ZERO,
        };
        Self {
            cfg,
            clock,
            registry: PartyRegistry::default(),
            state,
            model: initial.clone(),
            initial,
            checkpoints: BTreeMap::new(),
            history: BTreeMap::new(),
            log,
            dir: dir.map(Path::to_path_buf),
            consensus: None,
            eval_set,
            job_in_flight: false,
        }
    }

    /// Rebuilds the server from a log directory: replays every logged round
    /// from the initial checkpoint and checks the result against the stored
    /// checkpoints bit for bit. The registry starts empty.
    pub fn recover(
        cfg: ServerConfig,
        clock: Arc<dyn Clock>,
        dir: &Path,
        eval_set: Option<Arc<Vec<SceneRecord>>>,
    ) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let initial = ModelSnapshot::from_checkpoint(&fs::read(dir.join(INITIAL_CHECKPOINT))?)?;
        let log = RoundLog::open(&dir.join(ROUND_LOG))?;
        let records = log.records().to_vec();
        let initial = Arc::new(initial);
        let mut c = Self::assemble(cfg, clock, initial.clone(), log, Some(dir), eval_set);
        c.remember(initial.clone());
        let mut replayed = Vec::new();
        let model = replay_visit(&initial, &records, None, &mut |rec, m| replayed.push((rec.round, rec.checkpoint_crc, m.clone())))?;
        for (round, crc, m) in replayed {
            let bytes = c.remember(Arc::new(m));
            if codec::crc32(&bytes) != crc {
                return Err(OrchestratorError::Recovery(format!("round {round} does not replay to its logged checkpoint")));
            }
        }
        c.consensus = records.iter().rev().find_map(|r| r.consensus.clone());
        let model = Arc::new(model);
        let stored = fs::read(checkpoint_path(dir, model.version))?;
        if stored != *c.checkpoints[&model.version] {
            return Err(OrchestratorError::Recovery(format!("checkpoint v{} differs from the replayed model", model.version)));
        }
        c.model = model;
        c.state.model_version = c.model.version;
        let done = records.len() as u64;
        if done >= c.cfg.rounds {
            c.state.round = done;
            c.state.phase = Phase::Closed;
        } else {
            c.open_round(done);
        }
        Ok(c)
    }

    /// Adds a version to the in-memory history and evicts what falls out of
    /// the window.
    fn remember(&mut self, model: Arc<ModelSnapshot>) -> Arc<Vec<u8>> {
        let bytes = Arc::new(model.to_checkpoint());
        self.checkpoints.insert(model.version, bytes.clone());
        self.history.insert(model.version, model.blocks());
        let keep_from = model.version.saturating_sub(self.cfg.plan.history_window as u64);
        self.checkpoints.retain(|&v, _| v >= keep_from);
        self.history.retain(|&v, _| v >= keep_from);
        bytes
    }

    fn install_model(&mut self, model: Arc<ModelSnapshot>) -> Result<(), OrchestratorError> {
        let bytes = self.remember(model.clone());
        if let Some(dir) = &self.dir {
            fs::write(checkpoint_path(dir, model.version), bytes.as_slice())?;
            let keep_from = model.version.saturating_sub(self.cfg.plan.history_window as u64);
            for v in keep_from.saturating_sub(1)..keep_from {
                let _ = fs::remove_file(checkpoint_path(dir, v));
            }
        }
        self.model = model;
        self.state.model_version = self.model.version;
        Ok(())
    }

    fn open_round(&mut self, round: u64) {
        let expected = match self.cfg.plan.strategy {
            Strategy::Chained => {
                let order = &self.cfg.plan.chain_order;
                BTreeSet::from([order[(round % order.len() as u64) as usize].clone()])
            }
            _ => self.cfg.parties.iter().cloned().collect(),
        };
        self.state = RoundState {
            round,
            model_version: self.model.version,
            phase: Phase::Open,
            expected,
            received: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            plan: self.cfg.plan.clone(),
            deadline: self.cfg.deadline,
            opened_at: self.clock.now(),
        };
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn registry(&self) -> &PartyRegistry {
        &self.registry
    }

    pub fn model(&self) -> Arc<ModelSnapshot> {
        self.model.clone()
    }

    pub fn initial_model(&self) -> Arc<ModelSnapshot> {
        self.initial.clone()
    }

    pub fn records(&self) -> &[RoundRecord] {
        self.log.records()
    }

    pub fn consensus(&self) -> Option<&ConsensusMap> {
        self.consensus.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.log.records().len() as u64 >= self.cfg.rounds
    }

    fn status(&self) -> ServerStatus {
        ServerStatus {
            round: self.state.round,
            version: self.model.version,
        }
    }

    fn reject(&self, code: RejectCode, reason: impl Into<String>) -> Response {
        Response::Reject {
            status: self.status(),
            code,
            reason: reason.into(),
        }
    }

    /// Parses, dispatches and answers one frame.
    pub fn handle_frame(&mut self, frame: &Frame) -> Frame {
        match Request::from_frame(frame) {
            Ok(req) => self.handle(req).to_frame(),
            Err(e) => self.reject(RejectCode::Malformed, e.to_string()).to_frame(),
        }
    }

    pub fn handle(&mut self, req: Request) -> Response {
        self.tick();
        match req {
            Request::Register { cred, modalities } => self.register(cred, modalities),
            Request::Poll { cred } => self.authenticated(&cred).unwrap_or_else(|| self.poll(&cred.party)),
            Request::Submit {
                cred,
                round,
                update,
                embeddings,
            } => self
                .authenticated(&cred)
                .unwrap_or_else(|| self.submit(&cred.party, round, update, embeddings)),
            Request::Fetch { cred, version } => self.authenticated(&cred).unwrap_or_else(|| self.fetch(version)),
        }
    }

    /// `None` when the credentials belong to a registered party; otherwise
    /// the rejection to send.
    fn authenticated(&mut self, cred: &Credentials) -> Option<Response> {
        let now = self.clock.now();
        match self.registry.parties.get_mut(&cred.party) {
            None => Some(self.reject(RejectCode::Unregistered, format!("party `{}` is not registered", cred.party))),
            Some(info) if info.token != cred.token => Some(self.reject(RejectCode::Auth, "token does not match the registration")),
            Some(info) => {
                info.last_seen = now;
                None
            }
        }
    }

    fn register(&mut self, cred: Credentials, modalities: Vec<Modality>) -> Response {
        if !self.cfg.tokens.contains(&cred.token) {
            return self.reject(RejectCode::Auth, "unknown token");
        }
        if !wire::valid_party_id(&cred.party) {
            return self.reject(RejectCode::Invalid, format!("invalid party id `{}`", cred.party));
        }
        if let Some(existing) = self.registry.parties.get(&cred.party) {
            if existing.token != cred.token {
                return self.reject(RejectCode::Conflict, format!("party `{}` is registered with another token", cred.party));
            }
        }
        let now = self.clock.now();
        let entry = self.registry.parties.entry(cred.party).or_insert_with(|| PartyInfo {
            modalities: Vec::new(),
            sample_count: 0,
            token: cred.token,
            last_seen: now,
        });
        entry.modalities = modalities;
        entry.last_seen = now;
        Response::Ack {
            status: self.status(),
            capabilities: vec!["poll".into(), "submit".into(), "fetch".into()],
        }
    }

    fn poll(&self, party: &str) -> Response {
        if self.is_finished() {
            return Response::NoTask {
                status: self.status(),
                finished: true,
            };
        }
        let s = &self.state;
        let eligible = matches!(s.phase, Phase::Open | Phase::Collecting) && s.expected.contains(party) && !s.received.contains_key(party);
        if !eligible {
            return Response::NoTask {
                status: self.status(),
                finished: false,
            };
        }
        Response::Assign {
            status: self.status(),
            task: TaskAssignment {
                round: s.round,
                model_version: self.model.version,
                strategy: s.plan.strategy,
                training: self.cfg.training.clone(),
                probe_set_id: self.cfg.probe.as_ref().map(|p| p.id().to_string()),
                deadline_ms: s.deadline.as_millis() as u64,
                consensus: self.consensus.clone(),
            },
        }
    }

    fn submit(&mut self, party: &str, round: u64, update: ClientUpdate, embeddings: Option<ClientProbeEmbeddings>) -> Response {
        use RejectCode::{Duplicate, Invalid, Stale};
        if self.is_finished() || !matches!(self.state.phase, Phase::Open | Phase::Collecting) {
            return self.reject(RejectCode::Phase, "round is not accepting updates");
        }
        if update.client_id != party {
            return self.reject(Invalid, "update names another party");
        }
        if !self.state.expected.contains(party) {
            return self.reject(RejectCode::Phase, format!("party `{party}` is not expected in round {}", self.state.round));
        }
        if self.state.received.contains_key(party) {
            return self.reject(Duplicate, format!("party `{party}` already submitted in round {}", self.state.round));
        }
        let current = self.model.version;
        if self.state.plan.strategy == Strategy::AsyncMix {
            if round > self.state.round || update.base_version > current {
                return self.reject(Invalid, "update refers to a future round or version");
            }
            let staleness = current - update.base_version;
            if staleness > self.state.plan.history_window as u64 {
                return self.reject(Stale, format!("update is {staleness} versions stale; fetch version {current}"));
            }
        } else if round != self.state.round || update.base_version != current {
            return self.reject(
                Stale,
                format!(
                    "update for round {round} at version {} but round {} runs at version {current}; refetch",
                    update.base_version, self.state.round
                ),
            );
        }
        if let Err(e) = update.validate() {
            return self.reject(Invalid, e.to_string());
        }
        for (name, delta) in &update.deltas {
            match self.model.block(*name) {
                Some(m) if m.same_shape(delta) => {}
                Some(m) => return self.reject(Invalid, format!("block {name} has shape {:?}, expected {:?}", delta.shape(), m.shape())),
                None => return self.reject(Invalid, format!("model has no block {name}")),
            }
        }
        if let (Some(probe), Some(e)) = (&self.cfg.probe, &embeddings) {
            if e.skipped.len() != probe.len() || e.covered() != e.embeddings.len() || e.embeddings.iter().any(|v| v.len() != self.model.d_emb())
            {
                return self.reject(Invalid, "probe embeddings do not match the probe set");
            }
        }
        if let Some(info) = self.registry.parties.get_mut(party) {
            info.sample_count = update.sample_count;
        }
        self.state.received.insert(party.to_string(), update);
        if let (Some(_), Some(e)) = (&self.cfg.probe, embeddings) {
            self.state.embeddings.insert(party.to_string(), e);
        }
        self.state.phase = Phase::Collecting;
        if self.state.plan.strategy == Strategy::AsyncMix || self.state.received.len() == self.state.expected.len() {
            self.state.phase = Phase::Aggregating;
        }
        Response::Ack {
            status: self.status(),
            capabilities: Vec::new(),
        }
    }

    fn fetch(&self, version: u64) -> Response {
        match self.checkpoints.get(&version) {
            Some(bytes) => Response::Model {
                status: self.status(),
                checkpoint: bytes.as_ref().clone(),
            },
            None => self.reject(RejectCode::History, format!("version {version} is outside the retained history")),
        }
    }

    /// Applies the deadline: a round that timed out moves to aggregation
    /// with what it has, or is logged as failed when nothing arrived.
    pub fn tick(&mut self) {
        if self.is_finished() || !matches!(self.state.phase, Phase::Open | Phase::Collecting) {
            return;
        }
        if self.clock.now().saturating_sub(self.state.opened_at) < self.state.deadline {
            return;
        }
        if self.state.received.is_empty() {
            let outcome = AggregationOutcome {
                round: self.state.round,
                result: Err("deadline elapsed without submissions".into()),
            };
            self.state.phase = Phase::Aggregating;
            if let Err(e) = self.install(outcome) {
                ::log::error!("failed to record an empty round: {e}");
            }
        } else {
            self.state.phase = Phase::Aggregating;
        }
    }

    /// Captures the inputs of a pending aggregation, once per round.
    pub fn begin_aggregation(&mut self) -> Option<AggregationJob> {
        if self.state.phase != Phase::Aggregating || self.job_in_flight {
            return None;
        }
        self.job_in_flight = true;
        Some(AggregationJob {
            round: self.state.round,
            current: self.model.clone(),
            updates: self.state.received.values().cloned().collect(),
            plan: self.state.plan.clone(),
            mask_seed: self.cfg.mask_seed(self.state.round),
            history: self.history.clone(),
        })
    }

    /// Installs an aggregation result: persists the checkpoint and the round
    /// record and opens the next round.
    pub fn install(&mut self, outcome: AggregationOutcome) -> Result<RoundRecord, OrchestratorError> {
        if self.state.phase != Phase::Aggregating || outcome.round != self.state.round {
            return Err(OrchestratorError::Install(format!(
                "result for round {} but round {} is {:?}",
                outcome.round, self.state.round, self.state.phase
            )));
        }
        self.job_in_flight = false;
        let pre_version = self.model.version;
        let status = match outcome.result {
            Ok(model) => {
                self.install_model(Arc::new(model))?;
                RoundStatus::Ok
            }
            Err(msg) => {
                ::log::warn!("round {} failed: {msg}", self.state.round);
                RoundStatus::Failed(msg)
            }
        };
        let ok = status == RoundStatus::Ok;
        let consensus = match (&self.cfg.probe, ok && !self.state.embeddings.is_empty()) {
            (Some(probe), true) => match build_consensus(probe, &self.state.embeddings, self.state.round) {
                Ok((map, _warnings)) => Some(map),
                Err(e) => {
                    ::log::warn!("no consensus for round {}: {e}", self.state.round);
                    None
                }
            },
            _ => None,
        };
        if consensus.is_some() {
            self.consensus = consensus.clone();
        }
        let metric = match (&self.eval_set, ok) {
            (Some(eval), true) => crate::metrics::recall_at_k(&self.model, eval, 1).ok(),
            _ => None,
        };
        let s = &self.state;
        let record = RoundRecord {
            round: s.round,
            status,
            plan: s.plan.clone(),
            mask_seed: self.cfg.mask_seed(s.round),
            contributors: s.received.iter().map(|(id, u)| (id.clone(), u.sample_count)).collect(),
            absent: s.expected.iter().filter(|p| !s.received.contains_key(*p)).cloned().collect(),
            checksums: if ok { block_checksums(&self.model, &s.plan) } else { BTreeMap::new() },
            pre_version,
            post_version: self.model.version,
            checkpoint_crc: codec::crc32(&self.checkpoints[&self.model.version]),
            metric,
            duration_ms: self.clock.now().saturating_sub(s.opened_at).as_millis() as u64,
            updates: s.received.values().cloned().collect(),
            consensus,
            prev_crc: 0,
        };
        let stored = self.log.append(record)?.clone();
        if self.is_finished() {
            self.state.round += 1;
            self.state.phase = Phase::Closed;
        } else {
            self.open_round(self.state.round + 1);
        }
        Ok(stored)
    }

    /// Synchronous aggregation of a round that is ready for it.
    pub fn close_round(&mut self) -> Option<Result<RoundRecord, OrchestratorError>> {
        let job = self.begin_aggregation()?;
        Some(self.install(job.run()))
    }

    /// Checkpoint bytes for a retained version.
    pub fn checkpoint(&self, version: u64) -> Option<Arc<Vec<u8>>> {
        self.checkpoints.get(&version).cloned()
    }
}
