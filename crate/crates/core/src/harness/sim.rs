//! Simulation driver, artifacts and the TCP entry points.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;

use crate::contribution::{exact_shapley, fl_game, wtdp_shapley, ShapleyMethod, ShapleyResult};
use crate::dataquality::{quality_loop, write_corpus, FederatedTrainer, IterationReport, SceneRecord};
use crate::metrics::{evaluate, recall_at_k, EvalReport};
use crate::orchestrator::net::{serve, Backoff, ServeOptions, TcpTransport};
use crate::orchestrator::{Coordinator, ManualClock, RoundRecord, RoundStatus, SystemClock, ROUND_LOG};
use crate::rng::SplitMix64;
use crate::toymodel::ModelSnapshot;

use super::client::{CapturedSubmit, ClientAgent, ClientEvent, Loopback, Step};
use super::scenario::ScenarioConfig;
use super::HarnessError;

/// Deadline expiries in a row without a closed round before giving up.
const MAX_IDLE_EXPIRIES: usize = 3;

/// One coordinator and its agents, stepped cooperatively on one thread.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub coord: Coordinator,
    pub clock: Arc<ManualClock>,
    pub agents: Vec<ClientAgent>,
    /// Every SUBMIT frame that crossed the loopback.
    pub traffic: Vec<CapturedSubmit>,
    pub failures: Vec<String>,
    dead: BTreeSet<String>,
}

impl Simulation {
    /// Server plus one agent per party, each holding its entry of `corpora`.
    pub fn new(
        cfg: &ScenarioConfig,
        corpora: &BTreeMap<String, Vec<SceneRecord>>,
        start: ModelSnapshot,
        dir: Option<&Path>,
        eval: Option<Arc<Vec<SceneRecord>>>,
    ) -> Result<Self, HarnessError> {
        let clock = Arc::new(ManualClock::default());
        let coord = Coordinator::new(cfg.server_config(), start, clock.clone(), dir, eval)?;
        let agents = cfg
            .party_ids()
            .iter()
            .map(|id| ClientAgent::from_scenario(cfg, id, Some(corpora.get(id).cloned().unwrap_or_default())))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            coord,
            clock,
            agents,
            traffic: Vec::new(),
            failures: Vec::new(),
            dead: BTreeSet::new(),
        })
    }

    /// Stops stepping `party`, as if its process died.
    pub fn kill(&mut self, party: &str) {
        self.dead.insert(party.to_string());
    }

    pub fn is_live(&self, i: usize) -> bool {
        let a = &self.agents[i];
        !a.is_finished() && !self.dead.contains(a.party())
    }

    pub fn is_done(&self) -> bool {
        self.coord.is_finished() && (0..self.agents.len()).all(|i| !self.is_live(i))
    }

    /// One step of agent `i`, then synchronous aggregation if the round
    /// became ready.
    pub fn step_agent(&mut self, i: usize) -> Result<Step, HarnessError> {
        let step = self.agents[i].step(&mut Loopback::new(&mut self.coord, &mut self.traffic))?;
        self.close_ready()?;
        Ok(step)
    }

    fn close_ready(&mut self) -> Result<bool, HarnessError> {
        match self.coord.close_round() {
            Some(r) => {
                r?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Moves the clock past the current round's deadline.
    pub fn expire_deadline(&mut self) -> Result<(), HarnessError> {
        self.clock.advance(self.coord.state().deadline);
        self.coord.tick();
        self.close_ready()?;
        Ok(())
    }

    /// Round-robin until every round is closed and every live agent has
    /// seen the end. A failing agent is reported and dropped.
    pub fn run(&mut self) -> Result<(), HarnessError> {
        let mut idle_expiries = 0;
        while !self.is_done() {
            let mut progress = false;
            for i in 0..self.agents.len() {
                if !self.is_live(i) {
                    continue;
                }
                match self.step_agent(i) {
                    Ok(Step::Idle) => {}
                    Ok(_) => progress = true,
                    Err(HarnessError::Client(e)) => {
                        let party = self.agents[i].party().to_string();
                        ::log::error!("party {party} failed: {e}");
                        self.failures.push(format!("party {party}: {e}"));
                        self.dead.insert(party);
                        progress = true;
                    }
                    Err(e) => return Err(e),
                }
            }
            if progress {
                idle_expiries = 0;
                continue;
            }
            let before = self.coord.records().len();
            self.expire_deadline()?;
            if self.coord.records().len() == before {
                idle_expiries += 1;
                if idle_expiries > MAX_IDLE_EXPIRIES {
                    return Err(HarnessError::Stalled(format!(
                        "round {} made no progress over {idle_expiries} deadlines",
                        self.coord.state().round
                    )));
                }
            } else {
                idle_expiries = 0;
            }
        }
        for a in &self.agents {
            for e in a.events() {
                if let ClientEvent::Starved { round } = e {
                    self.failures.push(format!("party {}: starved in round {round}", a.party()));
                }
            }
        }
        for r in self.coord.records() {
            if let RoundStatus::Failed(msg) = &r.status {
                self.failures.push(format!("round {}: {msg}", r.round));
            }
        }
        Ok(())
    }
}

/// Result of one federated run.
#[derive(Debug, Clone)]
struct RunResult {
    initial: ModelSnapshot,
    model: ModelSnapshot,
    records: Vec<RoundRecord>,
    traffic: Vec<CapturedSubmit>,
    failures: Vec<String>,
}

/// Runs `cfg.rounds` federated rounds per call, continuing from the last
/// model; this is what the quality loop drives.
struct SimTrainer<'a> {
    cfg: &'a ScenarioConfig,
    eval: Arc<Vec<SceneRecord>>,
    out: Option<PathBuf>,
    model: ModelSnapshot,
    runs: Vec<RunResult>,
}

impl FederatedTrainer for SimTrainer<'_> {
    type Error = HarnessError;

    fn train(&mut self, corpora: &BTreeMap<String, Vec<SceneRecord>>) -> Result<ModelSnapshot, HarnessError> {
        let dir = self.out.as_ref().map(|o| o.join("server").join(format!("run-{}", self.runs.len())));
        let mut sim = Simulation::new(self.cfg, corpora, self.model.clone(), dir.as_deref(), Some(self.eval.clone()))?;
        sim.run()?;
        let model = sim.coord.model().as_ref().clone();
        self.runs.push(RunResult {
            initial: self.model.clone(),
            model: model.clone(),
            records: sim.coord.records().to_vec(),
            traffic: sim.traffic,
            failures: sim.failures,
        });
        self.model = model.clone();
        Ok(model)
    }

    fn evaluate(&mut self, model: &ModelSnapshot) -> Result<f64, HarnessError> {
        Ok(recall_at_k(model, &self.eval, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    /// Model the last federated run started from; round records replay
    /// from it.
    pub initial: ModelSnapshot,
    pub model: ModelSnapshot,
    pub records: Vec<RoundRecord>,
    /// Scenario start model and final model on the eval set.
    pub reports: Vec<EvalReport>,
    pub shapley: Option<ShapleyResult>,
    pub quality: Vec<IterationReport>,
    /// Corpora as used in the last run (after repair and filtering).
    pub corpora: BTreeMap<String, Vec<SceneRecord>>,
    /// SUBMIT frames of the last run.
    pub traffic: Vec<CapturedSubmit>,
    /// Size of a full model checkpoint.
    pub checkpoint_bytes: usize,
    /// Starved parties, failed rounds, failed agents. Empty on success.
    pub failures: Vec<String>,
}

impl SimulationOutcome {
    /// Bytes uploaded per round, by round number.
    pub fn upload_bytes_per_round(&self) -> BTreeMap<u64, usize> {
        let mut out = BTreeMap::new();
        for c in &self.traffic {
            *out.entry(c.round).or_insert(0) += c.bytes;
        }
        out
    }
}

fn shapley(cfg: &ScenarioConfig, initial: &ModelSnapshot, records: &[RoundRecord], eval: &[SceneRecord]) -> Result<ShapleyResult, HarnessError> {
    let game = fl_game(initial, records, eval, cfg.shapley.metric)?;
    Ok(match cfg.shapley.method {
        ShapleyMethod::Exact => exact_shapley(&game)?,
        ShapleyMethod::Wtdp => {
            let seed = SplitMix64::derive(cfg.seed, &["harness", "shapley"]).next_u64();
            wtdp_shapley(&game, &cfg.shapley.weights, cfg.shapley.budget, cfg.shapley.tolerance, seed)?
        }
    })
}

/// Runs the whole scenario in process: corpus generation and repair,
/// federated rounds (inside the quality loop when enabled), evaluation and
/// optional Shapley values. With `out`, every artifact is written there.
pub fn run_simulation(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<SimulationOutcome, HarnessError> {
    cfg.validate()?;
    let eval = cfg.shared_eval_set();
    let mut corpora = BTreeMap::new();
    for p in &cfg.parties {
        corpora.insert(p.id.clone(), cfg.local_corpus(p)?);
    }
    let start = cfg.initial_model()?;
    if let Some(dir) = out {
        write_inputs(dir, cfg, &eval)?;
    }
    let mut trainer = SimTrainer {
        cfg,
        eval: eval.clone(),
        out: out.map(Path::to_path_buf),
        model: start.clone(),
        runs: Vec::new(),
    };
    let mut failures = Vec::new();
    let mut quality = Vec::new();
    if cfg.quality.enabled {
        match quality_loop(&mut trainer, corpora.clone(), &cfg.quality) {
            Ok(q) => {
                corpora = q.corpora;
                quality = q.reports;
            }
            Err(e) if !trainer.runs.is_empty() => failures.push(format!("quality loop: {e}")),
            Err(e) => return Err(e.into()),
        }
    } else {
        trainer.train(&corpora)?;
    }
    let last = trainer.runs.pop().expect("at least one run");
    failures.extend(last.failures);
    let reports = vec![evaluate(&start, &eval, "union")?, evaluate(&last.model, &eval, "union")?];
    let shapley = if cfg.shapley.enabled {
        match shapley(cfg, &last.initial, &last.records, &eval) {
            Ok(s) => Some(s),
            Err(e) => {
                failures.push(format!("shapley: {e}"));
                None
            }
        }
    } else {
        None
    };
    let outcome = SimulationOutcome {
        checkpoint_bytes: start.to_checkpoint().len(),
        initial: last.initial,
        model: last.model,
        records: last.records,
        reports,
        shapley,
        quality,
        corpora,
        traffic: last.traffic,
        failures,
    };
    if let Some(dir) = out {
        write_artifacts(dir, &outcome)?;
    }
    Ok(outcome)
}

fn write_inputs(dir: &Path, cfg: &ScenarioConfig, eval: &[SceneRecord]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir.join("corpora"))?;
    fs::write(dir.join("scenario.toml"), cfg.to_toml())?;
    for p in &cfg.parties {
        fs::write(dir.join("corpora").join(format!("{}.tsv", p.id)), write_corpus(&cfg.raw_corpus(p)?))?;
    }
    fs::write(dir.join("eval.tsv"), write_corpus(eval))?;
    if let Some(probe) = cfg.probe_set() {
        fs::write(dir.join("probe.txt"), probe.render())?;
    }
    Ok(())
}

/// Writes the final checkpoint and the text reports.
pub fn write_artifacts(dir: &Path, outcome: &SimulationOutcome) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("final.ckpt"), outcome.model.to_checkpoint())?;
    let mut eval = String::new();
    for r in &outcome.reports {
        let _ = writeln!(eval, "{r}\n");
    }
    fs::write(dir.join("eval_report.txt"), eval)?;

    let mut rounds = String::from("round\tstatus\tcontributors\tabsent\tversion\trecall_at_1\tupload_bytes\n");
    let uploads = outcome.upload_bytes_per_round();
    for r in &outcome.records {
        let status = match &r.status {
            RoundStatus::Ok => "ok".to_string(),
            RoundStatus::Failed(m) => format!("failed: {m}"),
        };
        let contributors: Vec<String> = r.contributors.iter().map(|(p, n)| format!("{p}:{n}")).collect();
        let absent: Vec<&str> = r.absent.iter().map(String::as_str).collect();
        let _ = writeln!(
            rounds,
            "{}\t{status}\t{}\t{}\t{}\t{}\t{}",
            r.round,
            contributors.join(","),
            absent.join(","),
            r.post_version,
            r.metric.map_or("-".into(), |m| format!("{m:.6}")),
            uploads.get(&r.round).copied().unwrap_or(0),
        );
    }
    let _ = writeln!(rounds, "# checkpoint_bytes={}", outcome.checkpoint_bytes);
    fs::write(dir.join("rounds.tsv"), rounds)?;

    if !outcome.quality.is_empty() {
        let mut q = String::from("iteration\tmetric\tparty\tthreshold\tkept\tdropped\tmismatch_recall\tclean_loss\n");
        let opt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
        for it in &outcome.quality {
            for p in &it.parties {
                let _ = writeln!(
                    q,
                    "{}\t{:.6}\t{}\t{:.4}\t{}\t{}\t{}\t{}",
                    it.iteration,
                    it.metric,
                    p.party,
                    p.threshold,
                    p.kept,
                    p.dropped,
                    opt(p.mismatch_recall),
                    opt(p.clean_loss)
                );
            }
        }
        fs::write(dir.join("quality_report.tsv"), q)?;
    }
    if let Some(s) = &outcome.shapley {
        fs::write(dir.join("shapley.txt"), s.to_string())?;
    }
    let failures = dir.join("failures.txt");
    if outcome.failures.is_empty() {
        if failures.exists() {
            fs::remove_file(failures)?;
        }
    } else {
        fs::write(failures, outcome.failures.join("\n") + "\n")?;
    }
    Ok(())
}

/// Serves the scenario over TCP until every round is closed, then
/// evaluates and writes artifacts like [`run_simulation`]. A server
/// directory that already holds rounds is recovered and continued.
pub fn run_server(
    cfg: &ScenarioConfig,
    listener: TcpListener,
    out: Option<&Path>,
    opts: ServeOptions,
    stop: Arc<AtomicBool>,
) -> Result<SimulationOutcome, HarnessError> {
    cfg.validate()?;
    if cfg.quality.enabled {
        return Err(HarnessError::Config("the quality loop runs in simulation only".into()));
    }
    let eval = cfg.shared_eval_set();
    let start = cfg.initial_model()?;
    if let Some(dir) = out {
        write_inputs(dir, cfg, &eval)?;
    }
    let dir = out.map(|o| o.join("server").join("run-0"));
    let clock = Arc::new(SystemClock::new());
    let resume = dir.as_ref().is_some_and(|d| fs::metadata(d.join(ROUND_LOG)).is_ok_and(|m| m.len() > 0));
    let coord = match dir.as_deref() {
        Some(d) if resume => {
            ::log::info!("resuming from {}", d.display());
            Coordinator::recover(cfg.server_config(), clock, d, Some(eval.clone()))?
        }
        d => Coordinator::new(cfg.server_config(), start.clone(), clock, d, Some(eval.clone()))?,
    };
    let coord = serve(coord, listener, opts, stop)?;
    let model = coord.model().as_ref().clone();
    let records = coord.records().to_vec();
    let mut failures: Vec<String> = records
        .iter()
        .filter_map(|r| match &r.status {
            RoundStatus::Failed(m) => Some(format!("round {}: {m}", r.round)),
            RoundStatus::Ok => None,
        })
        .collect();
    if !coord.is_finished() {
        failures.push(format!("stopped after {} of {} rounds", records.len(), cfg.rounds));
    }
    let shapley = if cfg.shapley.enabled {
        Some(shapley(cfg, &start, &records, &eval)?)
    } else {
        None
    };
    let outcome = SimulationOutcome {
        reports: vec![evaluate(&start, &eval, "union")?, evaluate(&model, &eval, "union")?],
        checkpoint_bytes: start.to_checkpoint().len(),
        initial: start,
        model,
        records,
        shapley,
        quality: Vec::new(),
        corpora: BTreeMap::new(),
        traffic: Vec::new(),
        failures,
    };
    if let Some(dir) = out {
        write_artifacts(dir, &outcome)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub party: String,
    pub events: Vec<ClientEvent>,
    pub bytes_sent: u64,
}

/// Runs one party against a TCP server until the server reports the run
/// finished.
pub fn run_client(cfg: &ScenarioConfig, party: &str, endpoint: &str, backoff: Backoff) -> Result<ClientReport, HarnessError> {
    cfg.validate()?;
    let mut agent = ClientAgent::from_scenario(cfg, party, None)?;
    let mut transport = TcpTransport::new(endpoint, backoff);
    loop {
        match agent.step(&mut transport)? {
            Step::Finished => break,
            Step::Idle => thread::sleep(agent.state.poll_interval),
            Step::Progress => {}
        }
    }
    Ok(ClientReport {
        party: party.to_string(),
        events: agent.events().to_vec(),
        bytes_sent: transport.bytes_sent(),
    })
}
