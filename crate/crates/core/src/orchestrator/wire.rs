//! `FLMM/1` framing and the typed request/response messages.
//!
//! A frame is a u32 LE payload length followed by the payload: the start
//! line `FLMM/1 <MSGTYPE>`, `key: value` header lines, a blank line and an
//! optional binary body.

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use crate::aggregation::{ClientUpdate, Strategy};
use crate::codec::{self, DecodeError, Reader};
use crate::fusion::{ClientProbeEmbeddings, ConsensusMap, Modality};
use crate::toymodel::{BlockMap, BlockName};

pub const PROTOCOL: &str = "FLMM/1";
/// Largest accepted payload.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u64),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("missing header `{0}`")]
    MissingHeader(&'static str),
    #[error("bad value for header `{key}`: {msg}")]
    BadHeader { key: String, msg: String },
    #[error("unexpected {got} message")]
    Unexpected { got: MsgType },
    #[error("body: {0}")]
    Body(#[from] DecodeError),
}

impl WireError {
    fn malformed(msg: impl Into<String>) -> Self {
        WireError::Malformed(msg.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Register,
    Poll,
    Assign,
    Submit,
    Ack,
    Reject,
    Fetch,
    Model,
    NoTask,
}

impl MsgType {
    pub const ALL: [MsgType; 9] = [
        MsgType::Register,
        MsgType::Poll,
        MsgType::Assign,
        MsgType::Submit,
        MsgType::Ack,
        MsgType::Reject,
        MsgType::Fetch,
        MsgType::Model,
        MsgType::NoTask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Register => "REGISTER",
            MsgType::Poll => "POLL",
            MsgType::Assign => "ASSIGN",
            MsgType::Submit => "SUBMIT",
            MsgType::Ack => "ACK",
            MsgType::Reject => "REJECT",
            MsgType::Fetch => "FETCH",
            MsgType::Model => "MODEL",
            MsgType::NoTask => "NOTASK",
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MsgType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MsgType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| WireError::malformed(format!("unknown message type `{s}`")))
    }
}

/// Party ids travel in headers and log lines, so they are restricted to a
/// conservative alphabet.
pub fn valid_party_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"_-.".contains(&b))
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

fn valid_value(v: &str) -> bool {
    !v.contains(['\n', '\r'])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: MsgType,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MsgType) -> Self {
        Self {
            kind,
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.headers.push((key.to_string(), value.to_string()));
        self
    }

    pub fn header(&self, key: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &'static str) -> Result<&str, WireError> {
        self.header(key).ok_or(WireError::MissingHeader(key))
    }

    fn parse_header<T: FromStr>(&self, key: &'static str) -> Result<T, WireError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e: T::Err| WireError::BadHeader {
            key: key.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn encode_payload(&self) -> Result<Vec<u8>, WireError> {
        let mut out = format!("{PROTOCOL} {}\n", self.kind).into_bytes();
        for (k, v) in &self.headers {
            if !valid_key(k) || !valid_value(v) {
                return Err(WireError::malformed(format!("unencodable header `{k}`")));
            }
            out.extend_from_slice(format!("{k}: {v}\n").as_bytes());
        }
        out.push(b'\n');
        out.extend_from_slice(&self.body);
        if out.len() as u64 > u64::from(MAX_FRAME_LEN) {
            return Err(WireError::TooLarge(out.len() as u64));
        }
        Ok(out)
    }

    pub fn parse_payload(payload: &[u8]) -> Result<Self, WireError> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str, WireError> {
            let rest = &payload[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| WireError::malformed("unterminated header section"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| WireError::malformed("header is not UTF-8"))
        };
        let start = next_line()?;
        let kind = start
            .strip_prefix(PROTOCOL)
            .and_then(|s| s.strip_prefix(' '))
            .ok_or_else(|| WireError::malformed(format!("bad start line `{start}`")))?
            .parse()?;
        let mut headers = Vec::new();
        loop {
            let line = next_line()?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| WireError::malformed(format!("bad header line `{line}`")))?;
            if !valid_key(k) || v.contains('\r') {
                return Err(WireError::malformed(format!("bad header line `{line}`")));
            }
            headers.push((k.to_string(), v.to_string()));
        }
        Ok(Self {
            kind,
            headers,
            body: payload[pos..].to_vec(),
        })
    }

    /// Serialized size on the wire, length prefix included.
    pub fn wire_len(&self) -> Result<usize, WireError> {
        Ok(4 + self.encode_payload()?.len())
    }
}

/// Writes one frame and returns the number of bytes put on the wire.
pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<usize, WireError> {
    let payload = frame.encode_payload()?;
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(4 + payload.len())
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame, WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len.into()));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Frame::parse_payload(&payload)
}

/// Decodes a complete length-prefixed buffer holding exactly one frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::malformed("missing length prefix"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len.into()));
    }
    if bytes.len() - 4 != len as usize {
        return Err(WireError::malformed(format!("length prefix {len} but {} payload bytes", bytes.len() - 4)));
    }
    Frame::parse_payload(&bytes[4..])
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    write_frame(&mut out, frame)?;
    Ok(out)
}

fn block_index(name: BlockName) -> u8 {
    BlockName::ALL.iter().position(|&b| b == name).expect("listed block") as u8
}

/// Block count u8, then per block its index into [`BlockName::ALL`] and the
/// matrix.
pub fn put_blocks(buf: &mut Vec<u8>, blocks: &BlockMap) {
    codec::put_u8(buf, blocks.len() as u8);
    for (&name, m) in blocks {
        codec::put_u8(buf, block_index(name));
        codec::put_matrix(buf, m);
    }
}

pub fn read_blocks(r: &mut Reader<'_>) -> Result<BlockMap, DecodeError> {
    let n = r.u8()?;
    let mut out = BlockMap::new();
    for _ in 0..n {
        let idx = r.u8()? as usize;
        let name = *BlockName::ALL
            .get(idx)
            .ok_or_else(|| DecodeError::Invalid(format!("unknown block index {idx}")))?;
        if out.insert(name, r.matrix()?).is_some() {
            return Err(DecodeError::Invalid(format!("block {name} sent twice")));
        }
    }
    Ok(out)
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    codec::put_u16(buf, s.len() as u16);
    buf.extend_from_slice(s.as_bytes());
}

fn read_string(r: &mut Reader<'_>) -> Result<String, DecodeError> {
    let n = r.u16()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| DecodeError::Invalid("string is not UTF-8".into()))
}

fn put_vector(buf: &mut Vec<u8>, v: &[f64]) {
    codec::put_u32(buf, v.len() as u32);
    v.iter().for_each(|&x| codec::put_f64(buf, x));
}

fn read_vector(r: &mut Reader<'_>) -> Result<Vec<f64>, DecodeError> {
    let n = r.u32()? as usize;
    if n as u64 > codec::MAX_MATRIX_ENTRIES {
        return Err(DecodeError::Invalid(format!("vector of {n} entries")));
    }
    let raw = r.take(n * 8)?;
    Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Full binary form of an update, used by the round log.
pub fn put_update(buf: &mut Vec<u8>, u: &ClientUpdate) {
    put_string(buf, &u.client_id);
    codec::put_u64(buf, u.base_version);
    codec::put_u64(buf, u.sample_count);
    codec::put_u64(buf, u.submitted_round);
    put_blocks(buf, &u.deltas);
}

pub fn read_update(r: &mut Reader<'_>) -> Result<ClientUpdate, DecodeError> {
    Ok(ClientUpdate {
        client_id: read_string(r)?,
        base_version: r.u64()?,
        sample_count: r.u64()?,
        submitted_round: r.u64()?,
        deltas: read_blocks(r)?,
    })
}

fn put_embeddings(buf: &mut Vec<u8>, e: &ClientProbeEmbeddings) {
    codec::put_u32(buf, e.skipped.len() as u32);
    for &s in &e.skipped {
        codec::put_u8(buf, u8::from(s));
    }
    codec::put_u32(buf, e.embeddings.len() as u32);
    e.embeddings.iter().for_each(|v| put_vector(buf, v));
}

fn read_embeddings(r: &mut Reader<'_>) -> Result<ClientProbeEmbeddings, DecodeError> {
    let n = r.u32()? as usize;
    let skipped = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(DecodeError::Invalid(format!("bad skip flag {x}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let m = r.u32()? as usize;
    if m > n {
        return Err(DecodeError::Invalid(format!("{m} embeddings for {n} items")));
    }
    let embeddings = (0..m).map(|_| read_vector(r)).collect::<Result<_, _>>()?;
    Ok(ClientProbeEmbeddings { embeddings, skipped })
}

fn put_consensus(buf: &mut Vec<u8>, c: &ConsensusMap) {
    codec::put_u32(buf, c.items.len() as u32);
    for item in &c.items {
        match item {
            Some(v) => {
                codec::put_u8(buf, 1);
                put_vector(buf, v);
            }
            None => codec::put_u8(buf, 0),
        }
    }
}

fn read_consensus(r: &mut Reader<'_>, probe_id: String, round: u64) -> Result<ConsensusMap, DecodeError> {
    let n = r.u32()? as usize;
    let mut items = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        items.push(match r.u8()? {
            0 => None,
            1 => Some(read_vector(r)?),
            x => return Err(DecodeError::Invalid(format!("bad consensus flag {x}"))),
        });
    }
    Ok(ConsensusMap { probe_id, round, items })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credentials {
    pub party: String,
    pub token: String,
}

/// Hyper-parameters the server hands out with every task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingParams {
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAssignment {
    pub round: u64,
    pub model_version: u64,
    pub strategy: Strategy,
    pub training: TrainingParams,
    pub probe_set_id: Option<String>,
    pub deadline_ms: u64,
    /// Consensus from the previous round, used as the distillation target.
    pub consensus: Option<ConsensusMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectCode {
    Auth,
    Conflict,
    Unregistered,
    Duplicate,
    Stale,
    Invalid,
    Phase,
    History,
    Malformed,
}

impl RejectCode {
    pub const ALL: [RejectCode; 9] = [
        RejectCode::Auth,
        RejectCode::Conflict,
        RejectCode::Unregistered,
        RejectCode::Duplicate,
        RejectCode::Stale,
        RejectCode::Invalid,
        RejectCode::Phase,
        RejectCode::History,
        RejectCode::Malformed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectCode::Auth => "auth",
            RejectCode::Conflict => "conflict",
            RejectCode::Unregistered => "unregistered",
            RejectCode::Duplicate => "duplicate",
            RejectCode::Stale => "stale",
            RejectCode::Invalid => "invalid",
            RejectCode::Phase => "phase",
            RejectCode::History => "history",
            RejectCode::Malformed => "malformed",
        }
    }
}

impl fmt::Display for RejectCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RejectCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RejectCode::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown reject code `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Register { cred: Credentials, modalities: Vec<Modality> },
    Poll { cred: Credentials },
    Submit {
        cred: Credentials,
        round: u64,
        update: ClientUpdate,
        embeddings: Option<ClientProbeEmbeddings>,
    },
    Fetch { cred: Credentials, version: u64 },
}

impl Request {
    pub fn credentials(&self) -> &Credentials {
        match self {
            Request::Register { cred, .. } | Request::Poll { cred } | Request::Submit { cred, .. } | Request::Fetch { cred, .. } => cred,
        }
    }

    pub fn kind(&self) -> MsgType {
        match self {
            Request::Register { .. } => MsgType::Register,
            Request::Poll { .. } => MsgType::Poll,
            Request::Submit { .. } => MsgType::Submit,
            Request::Fetch { .. } => MsgType::Fetch,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let cred = self.credentials();
        let f = Frame::new(self.kind()).with("party", &cred.party).with("token", &cred.token);
        match self {
            Request::Register { modalities, .. } => {
                let list: Vec<String> = modalities.iter().map(Modality::to_string).collect();
                f.with("modalities", list.join(","))
            }
            Request::Poll { .. } => f,
            Request::Submit {
                round,
                update,
                embeddings,
                ..
            } => {
                let mut f = f
                    .with("round", round)
                    .with("base-version", update.base_version)
                    .with("sample-count", update.sample_count)
                    .with("submitted-round", update.submitted_round);
                put_blocks(&mut f.body, &update.deltas);
                match embeddings {
                    Some(e) => {
                        codec::put_u8(&mut f.body, 1);
                        put_embeddings(&mut f.body, e);
                    }
                    None => codec::put_u8(&mut f.body, 0),
                }
                f
            }
            Request::Fetch { version, .. } => f.with("version", version),
        }
    }

    pub fn from_frame(f: &Frame) -> Result<Self, WireError> {
        let cred = Credentials {
            party: f.require("party")?.to_string(),
            token: f.require("token")?.to_string(),
        };
        if !valid_party_id(&cred.party) {
            return Err(WireError::BadHeader {
                key: "party".into(),
                msg: format!("`{}` is not a valid party id", cred.party),
            });
        }
        let no_body = |f: &Frame| {
            if f.body.is_empty() {
                Ok(())
            } else {
                Err(WireError::malformed(format!("{} carries no body", f.kind)))
            }
        };
        match f.kind {
            MsgType::Register => {
                no_body(f)?;
                let raw = f.require("modalities")?;
                let modalities = if raw.is_empty() {
                    Vec::new()
                } else {
                    raw.split(',')
                        .map(|m| {
                            m.parse().map_err(|msg| WireError::BadHeader {
                                key: "modalities".into(),
                                msg,
                            })
                        })
                        .collect::<Result<_, _>>()?
                };
                Ok(Request::Register { cred, modalities })
            }
            MsgType::Poll => {
                no_body(f)?;
                Ok(Request::Poll { cred })
            }
            MsgType::Submit => {
                let mut r = Reader::new(&f.body);
                let deltas = read_blocks(&mut r)?;
                let embeddings = match r.u8()? {
                    0 => None,
                    1 => Some(read_embeddings(&mut r)?),
                    x => return Err(WireError::malformed(format!("bad embeddings flag {x}"))),
                };
                r.finish()?;
                Ok(Request::Submit {
                    round: f.parse_header("round")?,
                    update: ClientUpdate {
                        client_id: cred.party.clone(),
                        base_version: f.parse_header("base-version")?,
                        deltas,
                        sample_count: f.parse_header("sample-count")?,
                        submitted_round: f.parse_header("submitted-round")?,
                    },
                    embeddings,
                    cred,
                })
            }
            MsgType::Fetch => {
                no_body(f)?;
                Ok(Request::Fetch {
                    version: f.parse_header("version")?,
                    cred,
                })
            }
            got => Err(WireError::Unexpected { got }),
        }
    }
}

/// Round and model version stamped on every response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerStatus {
    pub round: u64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ack { status: ServerStatus, capabilities: Vec<String> },
    Reject { status: ServerStatus, code: RejectCode, reason: String },
    Assign { status: ServerStatus, task: TaskAssignment },
    NoTask { status: ServerStatus, finished: bool },
    Model { status: ServerStatus, checkpoint: Vec<u8> },
}

impl Response {
    pub fn status(&self) -> ServerStatus {
        match self {
            Response::Ack { status, .. }
            | Response::Reject { status, .. }
            | Response::Assign { status, .. }
            | Response::NoTask { status, .. }
            | Response::Model { status, .. } => *status,
        }
    }

    pub fn kind(&self) -> MsgType {
        match self {
            Response::Ack { .. } => MsgType::Ack,
            Response::Reject { .. } => MsgType::Reject,
            Response::Assign { .. } => MsgType::Assign,
            Response::NoTask { .. } => MsgType::NoTask,
            Response::Model { .. } => MsgType::Model,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let s = self.status();
        let f = Frame::new(self.kind()).with("round", s.round).with("version", s.version);
        match self {
            Response::Ack { capabilities, .. } => f.with("capabilities", capabilities.join(",")),
            Response::Reject { code, reason, .. } => f.with("code", code).with("reason", reason.replace(['\n', '\r'], " ")),
            Response::NoTask { finished, .. } => f.with("finished", finished),
            Response::Model { checkpoint, .. } => {
                let mut f = f.with("crc", format!("{:08x}", codec::crc32(checkpoint)));
                f.body = checkpoint.clone();
                f
            }
            Response::Assign { task, .. } => {
                let mut f = f
                    .with("task-round", task.round)
                    .with("model-version", task.model_version)
                    .with("strategy", task.strategy.as_str())
                    .with("epochs", task.training.epochs)
                    .with("lr", task.training.lr)
                    .with("batch-size", task.training.batch_size)
                    .with("deadline-ms", task.deadline_ms);
                if let Some(p) = &task.probe_set_id {
                    f = f.with("probe", p);
                }
                if let Some(c) = &task.consensus {
                    f = f.with("consensus-probe", &c.probe_id).with("consensus-round", c.round);
                    put_consensus(&mut f.body, c);
                }
                f
            }
        }
    }

    pub fn from_frame(f: &Frame) -> Result<Self, WireError> {
        let status = ServerStatus {
            round: f.parse_header("round")?,
            version: f.parse_header("version")?,
        };
        let no_body = |f: &Frame| {
            if f.body.is_empty() {
                Ok(())
            } else {
                Err(WireError::malformed(format!("{} carries no body", f.kind)))
            }
        };
        match f.kind {
            MsgType::Ack => {
                no_body(f)?;
                let raw = f.require("capabilities")?;
                let capabilities = if raw.is_empty() { Vec::new() } else { raw.split(',').map(str::to_string).collect() };
                Ok(Response::Ack { status, capabilities })
            }
            MsgType::Reject => {
                no_body(f)?;
                Ok(Response::Reject {
                    status,
                    code: f.parse_header("code")?,
                    reason: f.require("reason")?.to_string(),
                })
            }
            MsgType::NoTask => {
                no_body(f)?;
                Ok(Response::NoTask {
                    status,
                    finished: f.parse_header("finished")?,
                })
            }
            MsgType::Model => {
                let stored = u32::from_str_radix(f.require("crc")?, 16).map_err(|e| WireError::BadHeader {
                    key: "crc".into(),
                    msg: e.to_string(),
                })?;
                let computed = codec::crc32(&f.body);
                if stored != computed {
                    return Err(WireError::malformed(format!("model body crc {computed:08x} ≠ header {stored:08x}")));
                }
                Ok(Response::Model {
                    status,
                    checkpoint: f.body.clone(),
                })
            }
            MsgType::Assign => {
                let consensus = match f.header("consensus-probe") {
                    Some(probe) => {
                        let mut r = Reader::new(&f.body);
                        let c = read_consensus(&mut r, probe.to_string(), f.parse_header("consensus-round")?)?;
                        r.finish()?;
                        Some(c)
                    }
                    None => {
                        no_body(f)?;
                        None
                    }
                };
                Ok(Response::Assign {
                    status,
                    task: TaskAssignment {
                        round: f.parse_header("task-round")?,
                        model_version: f.parse_header("model-version")?,
                        strategy: f.parse_header("strategy")?,
                        training: TrainingParams {
                            epochs: f.parse_header("epochs")?,
                            lr: f.parse_header("lr")?,
                            batch_size: f.parse_header("batch-size")?,
                        },
                        probe_set_id: f.header("probe").map(str::to_string),
                        deadline_ms: f.parse_header("deadline-ms")?,
                        consensus,
                    },
                })
            }
            got => Err(WireError::Unexpected { got }),
        }
    }
}
