//! Client agent: poll, fetch, train locally, submit.

use std::fmt;
use std::time::Duration;

use crate::aggregation::ClientUpdate;
use crate::dataquality::SceneRecord;
use crate::fusion::{
    client_probe_embeddings, compose_losses, distillation_loss_and_grads, text_anchor_loss_and_grads, ClientProbeEmbeddings, FusionError,
    Modality, ProbeSet,
};
use crate::orchestrator::net::{Transport, TransportError};
use crate::orchestrator::wire::{decode_frame, encode_frame, read_blocks};
use crate::orchestrator::{Coordinator, Credentials, MsgType, RejectCode, Request, Response, TaskAssignment};
use crate::privacy::{gaussian_mechanism, PrivacyConfig, PrivacyError};
use crate::rng::SplitMix64;
use crate::toymodel::{contrastive_loss_and_grads, sgd_step, CheckpointError, ModelError, ModelSnapshot, PairRef};

use super::scenario::{FusionWeights, ScenarioConfig};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClientPhase {
    Idle,
    Training,
    Submitting,
    Waiting,
}

impl ClientPhase {
    /// The declared transition graph.
    pub fn can_move_to(self, to: ClientPhase) -> bool {
        use ClientPhase::*;
        matches!(
            (self, to),
            (Idle, Training) | (Training, Submitting) | (Submitting, Waiting) | (Submitting, Idle) | (Waiting, Idle)
        )
    }
}

impl fmt::Display for ClientPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClientPhase::Idle => "idle",
            ClientPhase::Training => "training",
            ClientPhase::Submitting => "submitting",
            ClientPhase::Waiting => "waiting",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("party `{party}` has no trainable records for round {round}")]
    Starvation { party: String, round: u64 },
    #[error("illegal transition {from} → {to}")]
    Transition { from: ClientPhase, to: ClientPhase },
    #[error("local model is at version {have:?}, task needs {want}")]
    NotFetched { have: Option<u64>, want: u64 },
    #[error("server rejected {request}: {code}: {reason}")]
    Rejected { request: MsgType, code: RejectCode, reason: String },
    #[error("unexpected response to {request}")]
    Unexpected { request: MsgType },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

/// Everything a party holds locally.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub party: String,
    pub phase: ClientPhase,
    /// Last fetched global model.
    pub local: Option<ModelSnapshot>,
    pub corpus: Vec<SceneRecord>,
    pub modalities: Vec<Modality>,
    pub fusion: FusionWeights,
    pub privacy: PrivacyConfig,
    pub probe: Option<ProbeSet>,
    pub seed: u64,
    pub poll_interval: Duration,
}

impl ClientState {
    pub fn new(party: impl Into<String>, corpus: Vec<SceneRecord>, seed: u64) -> Self {
        Self {
            party: party.into(),
            phase: ClientPhase::Idle,
            local: None,
            corpus,
            modalities: vec![Modality::Image, Modality::Text],
            fusion: FusionWeights::default(),
            privacy: PrivacyConfig::default(),
            probe: None,
            seed,
            poll_interval: Duration::from_millis(50),
        }
    }

    pub fn transition(&mut self, to: ClientPhase) -> Result<(), ClientError> {
        if !self.phase.can_move_to(to) {
            return Err(ClientError::Transition { from: self.phase, to });
        }
        ::log::trace!("{}: {} → {to}", self.party, self.phase);
        self.phase = to;
        Ok(())
    }

    /// Records usable as training pairs.
    pub fn trainable(&self) -> Vec<&SceneRecord> {
        self.corpus.iter().filter(|r| !r.caption.is_empty()).collect()
    }
}

/// Output of [`local_train`].
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub update: ClientUpdate,
    pub embeddings: Option<ClientProbeEmbeddings>,
    pub trained: ModelSnapshot,
}

/// Runs the assignment's local epochs on the kept corpus and packages the
/// adapter deltas.
pub fn local_train(state: &ClientState, task: &TaskAssignment) -> Result<LocalResult, ClientError> {
    let fetched = match &state.local {
        Some(m) if m.version == task.model_version => m,
        other => {
            return Err(ClientError::NotFetched {
                have: other.as_ref().map(|m| m.version),
                want: task.model_version,
            })
        }
    };
    let usable = state.trainable();
    if usable.is_empty() {
        return Err(ClientError::Starvation {
            party: state.party.clone(),
            round: task.round,
        });
    }
    let w = state.fusion;
    let distill = match (&task.consensus, &state.probe) {
        (Some(c), Some(p)) if w.distill > 0.0 => Some((p, c)),
        _ => None,
    };
    let mut rng = SplitMix64::derive(state.seed, &["client", &state.party, &task.round.to_string()]);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let batch = task.training.batch_size.max(2) as usize;
    let mut model = fetched.clone();
    for _ in 0..task.training.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let pairs: Vec<PairRef<'_>> = chunk.iter().map(|&i| (usable[i].image.as_slice(), usable[i].caption.as_slice())).collect();
            let mut weights = Vec::with_capacity(3);
            let mut parts = Vec::with_capacity(3);
            if w.contrastive > 0.0 {
                weights.push(w.contrastive);
                parts.push(contrastive_loss_and_grads(&model, &pairs)?);
            }
            if let Some((probe, consensus)) = distill {
                weights.push(w.distill);
                parts.push(distillation_loss_and_grads(&model, probe, consensus, &state.modalities, 1.0)?);
            }
            if w.anchor > 0.0 {
                weights.push(w.anchor);
                parts.push(text_anchor_loss_and_grads(&model, &pairs, 1.0)?);
            }
            if parts.is_empty() {
                continue;
            }
            let (_, grads) = compose_losses(&weights, &parts)?;
            model = sgd_step(&model, &grads, task.training.lr)?;
        }
    }
    let trained = model.blocks();
    let base = fetched.blocks();
    let deltas = trained
        .iter()
        .map(|(name, m)| Ok((*name, m.sub(&base[name]).map_err(ModelError::from)?)))
        .collect::<Result<_, ClientError>>()?;
    let mut update = ClientUpdate {
        client_id: state.party.clone(),
        base_version: fetched.version,
        deltas,
        sample_count: usable.len() as u64,
        submitted_round: task.round,
    };
    if state.privacy.dp_enabled {
        let seed = SplitMix64::derive(state.seed, &["dp", &state.party, &task.round.to_string()]).next_u64();
        update = gaussian_mechanism(&update, &state.privacy, seed)?;
    }
    let embeddings = match &state.probe {
        Some(p) if w.distill > 0.0 => Some(client_probe_embeddings(&model, p, &state.modalities)?),
        _ => None,
    };
    Ok(LocalResult {
        update,
        embeddings,
        trained: model,
    })
}

/// Outcome of one agent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// The agent changed state.
    Progress,
    /// Nothing to do until the server moves on.
    Idle,
    /// The run is over.
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    Submitted { round: u64, version: u64 },
    Rejected { round: u64, code: RejectCode, reason: String },
    Starved { round: u64 },
}

/// Pull-only client. Every call to [`ClientAgent::step`] sends at most
/// two requests and moves along the declared phase graph.
#[derive(Debug, Clone)]
pub struct ClientAgent {
    pub state: ClientState,
    cred: Credentials,
    registered: bool,
    finished: bool,
    task: Option<TaskAssignment>,
    pending: Option<LocalResult>,
    submitted_round: Option<u64>,
    skip_round: Option<u64>,
    events: Vec<ClientEvent>,
}

impl ClientAgent {
    pub fn new(state: ClientState, token: impl Into<String>) -> Self {
        let cred = Credentials {
            party: state.party.clone(),
            token: token.into(),
        };
        Self {
            state,
            cred,
            registered: false,
            finished: false,
            task: None,
            pending: None,
            submitted_round: None,
            skip_round: None,
            events: Vec::new(),
        }
    }

    /// Agent for `party` with the scenario's corpus and settings.
    pub fn from_scenario(cfg: &ScenarioConfig, party: &str, corpus: Option<Vec<SceneRecord>>) -> Result<Self, HarnessError> {
        let p = cfg.party(party).ok_or_else(|| HarnessError::Config(format!("no party `{party}` in the scenario")))?;
        let corpus = match corpus {
            Some(c) => c,
            None => cfg.local_corpus(p)?,
        };
        let mut state = ClientState::new(party, corpus, cfg.client_seed(party));
        state.modalities = p.modalities.clone();
        state.fusion = p.fusion;
        state.privacy = p.privacy.clone();
        state.probe = cfg.probe_set();
        Ok(Self::new(state, cfg.token.clone()))
    }

    pub fn party(&self) -> &str {
        &self.state.party
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn events(&self) -> &[ClientEvent] {
        &self.events
    }

    /// Compact view of the agent's control state.
    pub fn control_state(&self) -> (ClientPhase, bool, bool, Option<u64>, Option<u64>) {
        (
            self.state.phase,
            self.registered,
            self.finished,
            self.task.as_ref().map(|t| t.round),
            self.submitted_round,
        )
    }

    pub fn step(&mut self, t: &mut dyn Transport) -> Result<Step, ClientError> {
        if self.finished {
            return Ok(Step::Finished);
        }
        if !self.registered {
            let req = Request::Register {
                cred: self.cred.clone(),
                modalities: self.state.modalities.clone(),
            };
            return match t.call(&req)? {
                Response::Ack { .. } => {
                    self.registered = true;
                    Ok(Step::Progress)
                }
                Response::Reject { code, reason, .. } => Err(ClientError::Rejected {
                    request: MsgType::Register,
                    code,
                    reason,
                }),
                _ => Err(ClientError::Unexpected { request: MsgType::Register }),
            };
        }
        match self.state.phase {
            ClientPhase::Idle => {
                let resp = self.poll(t)?;
                self.on_poll(resp, t)
            }
            ClientPhase::Training => {
                let task = self.task.clone().expect("training has a task");
                let result = local_train(&self.state, &task)?;
                self.pending = Some(result);
                self.state.transition(ClientPhase::Submitting)?;
                Ok(Step::Progress)
            }
            ClientPhase::Submitting => self.submit(t),
            ClientPhase::Waiting => {
                let resp = self.poll(t)?;
                let moved_on = match &resp {
                    Response::NoTask { finished: true, .. } => true,
                    Response::Assign { status, .. } | Response::NoTask { status, .. } | Response::Reject { status, .. } => {
                        Some(status.round) > self.submitted_round
                    }
                    _ => false,
                };
                if !moved_on {
                    return Ok(Step::Idle);
                }
                self.state.transition(ClientPhase::Idle)?;
                self.on_poll(resp, t)?;
                Ok(Step::Progress)
            }
        }
    }

    fn poll(&mut self, t: &mut dyn Transport) -> Result<Response, ClientError> {
        Ok(t.call(&Request::Poll { cred: self.cred.clone() })?)
    }

    fn on_poll(&mut self, resp: Response, t: &mut dyn Transport) -> Result<Step, ClientError> {
        match resp {
            Response::NoTask { finished: true, .. } => {
                self.finished = true;
                Ok(Step::Finished)
            }
            Response::NoTask { .. } => Ok(Step::Idle),
            Response::Assign { task, .. } => {
                if self.skip_round == Some(task.round) {
                    return Ok(Step::Idle);
                }
                if self.state.trainable().is_empty() {
                    ::log::warn!("{}: no trainable records, sitting out round {}", self.state.party, task.round);
                    self.skip_round = Some(task.round);
                    self.events.push(ClientEvent::Starved { round: task.round });
                    return Ok(Step::Idle);
                }
                if self.state.local.as_ref().map(|m| m.version) != Some(task.model_version) {
                    let req = Request::Fetch {
                        cred: self.cred.clone(),
                        version: task.model_version,
                    };
                    match t.call(&req)? {
                        Response::Model { checkpoint, .. } => {
                            let m = ModelSnapshot::from_checkpoint(&checkpoint)?;
                            if m.version != task.model_version {
                                return Err(ClientError::Unexpected { request: MsgType::Fetch });
                            }
                            self.state.local = Some(m);
                        }
                        Response::Reject { code, reason, status } => {
                            ::log::info!("{}: fetch of v{} rejected ({code}: {reason})", self.state.party, task.model_version);
                            self.events.push(ClientEvent::Rejected {
                                round: status.round,
                                code,
                                reason,
                            });
                            return Ok(Step::Idle);
                        }
                        _ => return Err(ClientError::Unexpected { request: MsgType::Fetch }),
                    }
                }
                self.task = Some(task);
                self.state.transition(ClientPhase::Training)?;
                Ok(Step::Progress)
            }
            Response::Reject {
                code: RejectCode::Unregistered, ..
            } => {
                self.registered = false;
                Ok(Step::Progress)
            }
            Response::Reject { code, reason, .. } => Err(ClientError::Rejected {
                request: MsgType::Poll,
                code,
                reason,
            }),
            _ => Err(ClientError::Unexpected { request: MsgType::Poll }),
        }
    }

    fn submit(&mut self, t: &mut dyn Transport) -> Result<Step, ClientError> {
        let task = self.task.clone().expect("submitting has a task");
        let result = self.pending.take().expect("submitting has a result");
        let req = Request::Submit {
            cred: self.cred.clone(),
            round: task.round,
            update: result.update,
            embeddings: result.embeddings,
        };
        match t.call(&req)? {
            Response::Ack { .. } => {
                self.submitted_round = Some(task.round);
                self.events.push(ClientEvent::Submitted {
                    round: task.round,
                    version: task.model_version,
                });
                self.state.transition(ClientPhase::Waiting)?;
            }
            Response::Reject { code, reason, .. } => {
                ::log::info!("{}: submit for round {} rejected ({code}: {reason})", self.state.party, task.round);
                self.events.push(ClientEvent::Rejected {
                    round: task.round,
                    code,
                    reason,
                });
                self.task = None;
                self.state.transition(ClientPhase::Idle)?;
            }
            _ => return Err(ClientError::Unexpected { request: MsgType::Submit }),
        }
        Ok(Step::Progress)
    }
}

/// One captured SUBMIT frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedSubmit {
    pub party: String,
    pub round: u64,
    /// Frame size on the wire, length prefix included.
    pub bytes: usize,
    /// Name and shape of every block in the frame body.
    pub blocks: Vec<(String, (usize, usize))>,
}

/// In-process transport: requests and responses are encoded to bytes and
/// parsed back, so the server sees exactly what a socket would carry.
pub struct Loopback<'a> {
    server: &'a mut Coordinator,
    capture: &'a mut Vec<CapturedSubmit>,
}

impl<'a> Loopback<'a> {
    pub fn new(server: &'a mut Coordinator, capture: &'a mut Vec<CapturedSubmit>) -> Self {
        Self { server, capture }
    }
}

impl Transport for Loopback<'_> {
    fn call(&mut self, req: &Request) -> Result<Response, TransportError> {
        let bytes = encode_frame(&req.to_frame())?;
        let frame = decode_frame(&bytes)?;
        if frame.kind == MsgType::Submit {
            let mut r = crate::codec::Reader::new(&frame.body);
            let blocks = read_blocks(&mut r).map_err(crate::orchestrator::WireError::from)?;
            self.capture.push(CapturedSubmit {
                party: frame.header("party").unwrap_or_default().to_string(),
                round: frame.header("round").and_then(|v| v.parse().ok()).unwrap_or_default(),
                bytes: bytes.len(),
                blocks: blocks.iter().map(|(b, m)| (b.to_string(), m.shape())).collect(),
            });
        }
        let reply = self.server.handle_frame(&frame);
        let back = decode_frame(&encode_frame(&reply)?)?;
        Ok(Response::from_frame(&back)?)
    }
}
