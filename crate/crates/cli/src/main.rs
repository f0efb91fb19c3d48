//! `flmm`: data generation, simulation, distributed runs and analysis.
//!
//! Exit codes: 0 success, 2 configuration error, 3 transport error,
//! 4 starvation or failure (partial results were written).

use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use flmm_core::contribution::{exact_shapley, fl_game, wtdp_shapley, ShapleyMethod};
use flmm_core::dataquality::{read_corpus, score_and_filter, select_threshold, write_corpus, Threshold};
use flmm_core::harness::{run_client, run_server, run_simulation, ClientError, HarnessError, ScenarioConfig, SimulationOutcome};
use flmm_core::metrics::evaluate;
use flmm_core::orchestrator::net::{Backoff, ServeOptions};
use flmm_core::orchestrator::{parse_log, INITIAL_CHECKPOINT, ROUND_LOG};
use flmm_core::rng::SplitMix64;
use flmm_core::toymodel::ModelSnapshot;

#[derive(Parser)]
#[command(name = "flmm", version, about = "Federated low-rank adaptation of a toy vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the three-party scenario template.
    Template,
    /// Generate every party's corpus, the eval set and the probe set.
    Gendata {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a whole scenario in one process.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coordination server.
    Server {
        #[command(subcommand)]
        action: ServerAction,
    },
    /// Party process.
    Client {
        #[command(subcommand)]
        action: ClientAction,
    },
    /// Score a corpus with a model and keep the aligned records.
    Clean {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// `auto` or a fixed alignment score.
        #[arg(long, default_value = "auto", allow_hyphen_values = true)]
        threshold: Threshold,
        /// Where to write the kept records; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieval recall, BLEU and ROUGE-L of a model on a corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "eval")]
        id: String,
    },
    /// Shapley contributions from a logged run.
    Shapley {
        #[arg(long)]
        config: PathBuf,
        /// Server directory holding `initial.ckpt` and `rounds.log`.
        #[arg(long)]
        run: PathBuf,
        /// Eval corpus; the scenario's eval set when absent.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// `exact` or `wtdp`; the scenario's method when absent.
        #[arg(long, value_parser = parse_method)]
        method: Option<ShapleyMethod>,
        #[arg(long)]
        budget: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ServerAction {
    /// Serve the scenario; an existing run directory is resumed.
    Start {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ClientAction {
    /// Take part in a run until the server reports it finished.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        party: String,
        #[command(flatten)]
        retry: RetryArgs,
    },
}

#[derive(Args)]
struct RetryArgs {
    /// First reconnect delay.
    #[arg(long, default_value_t = 100)]
    retry_base_ms: u64,
    /// Longest reconnect delay.
    #[arg(long, default_value_t = 5000)]
    retry_cap_ms: u64,
    #[arg(long, default_value_t = 10)]
    max_attempts: u32,
}

struct Failure {
    code: u8,
    msg: String,
}

fn parse_method(s: &str) -> Result<ShapleyMethod, String> {
    match s {
        "exact" => Ok(ShapleyMethod::Exact),
        "wtdp" => Ok(ShapleyMethod::Wtdp),
        _ => Err(format!("method must be `exact` or `wtdp`, got `{s}`")),
    }
}

fn config_err(msg: impl ToString) -> Failure {
    Failure { code: 2, msg: msg.to_string() }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Config(_) => 2,
            HarnessError::Client(ClientError::Transport(_)) => 3,
            _ => 4,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<ModelSnapshot, Failure> {
    ModelSnapshot::from_checkpoint(&read(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Vec<flmm_core::dataquality::SceneRecord>, Failure> {
    read_corpus(&read_text(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn io(e: std::io::Error) -> Failure {
    Failure { code: 4, msg: e.to_string() }
}

fn summarize(outcome: &SimulationOutcome) -> Result<(), Failure> {
    println!("rounds={}", outcome.records.len());
    if let Some(r) = outcome.reports.last() {
        println!("{r}");
    }
    if let Some(s) = &outcome.shapley {
        println!("{s}");
    }
    if outcome.failures.is_empty() {
        return Ok(());
    }
    Err(Failure {
        code: 4,
        msg: format!("run finished with failures:\n  {}", outcome.failures.join("\n  ")),
    })
}

fn gendata(spec: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = ScenarioConfig::load(spec)?;
    fs::create_dir_all(out.join("corpora")).map_err(io)?;
    for p in &cfg.parties {
        let records = cfg.raw_corpus(p)?;
        fs::write(out.join("corpora").join(format!("{}.tsv", p.id)), write_corpus(&records)).map_err(io)?;
        println!("{}\t{} records", p.id, records.len());
    }
    fs::write(out.join("eval.tsv"), write_corpus(&cfg.eval_set())).map_err(io)?;
    if let Some(probe) = cfg.probe_set() {
        fs::write(out.join("probe.txt"), probe.render()).map_err(io)?;
    }
    Ok(())
}

fn clean(model: &Path, corpus: &Path, threshold: Threshold, out: Option<&Path>) -> Result<(), Failure> {
    let model = load_model(model)?;
    let records = load_corpus(corpus)?;
    let (scored, _) = score_and_filter(&model, records, f64::NEG_INFINITY).map_err(config_err)?;
    let scores: Vec<f64> = scored.iter().filter_map(|r| r.quality_score).collect();
    let (cut, separability) = select_threshold(&scores, threshold);
    let (kept, dropped): (Vec<_>, Vec<_>) = scored.into_iter().partition(|r| r.quality_score.is_some_and(|s| s >= cut));
    eprintln!(
        "threshold={cut:.6} separability={} kept={} dropped={}",
        separability.map_or("-".into(), |s| format!("{s:.4}")),
        kept.len(),
        dropped.len()
    );
    match out {
        Some(p) => fs::write(p, write_corpus(&kept)).map_err(io),
        None => {
            print!("{}", write_corpus(&kept));
            Ok(())
        }
    }
}

fn shapley(config: &Path, run: &Path, eval: Option<&Path>, method: Option<ShapleyMethod>, budget: Option<usize>) -> Result<(), Failure> {
    let cfg = ScenarioConfig::load(config)?;
    let initial = load_model(&run.join(INITIAL_CHECKPOINT))?;
    let records = parse_log(&read_text(&run.join(ROUND_LOG))?).map_err(config_err)?;
    let eval_set = match eval {
        Some(p) => load_corpus(p)?,
        None => cfg.eval_set(),
    };
    let game = fl_game(&initial, &records, &eval_set, cfg.shapley.metric).map_err(|e| Failure { code: 4, msg: e.to_string() })?;
    let result = match method.unwrap_or(cfg.shapley.method) {
        ShapleyMethod::Exact => exact_shapley(&game),
        ShapleyMethod::Wtdp => {
            let seed = SplitMix64::derive(cfg.seed, &["harness", "shapley"]).next_u64();
            wtdp_shapley(&game, &cfg.shapley.weights, budget.unwrap_or(cfg.shapley.budget), cfg.shapley.tolerance, seed)
        }
    }
    .map_err(|e| Failure { code: 4, msg: e.to_string() })?;
    println!("{result}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Template => {
            print!("{}", ScenarioConfig::three_party().to_toml());
            Ok(())
        }
        Command::Gendata { spec, out } => gendata(&spec, &out),
        Command::Simulate { config, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            let outcome = run_simulation(&cfg, Some(&out))?;
            summarize(&outcome)
        }
        Command::Server {
            action: ServerAction::Start { config, listen, out },
        } => {
            let cfg = ScenarioConfig::load(&config)?;
            let listener = TcpListener::bind(&listen).map_err(|e| Failure {
                code: 3,
                msg: format!("cannot listen on {listen}: {e}"),
            })?;
            log::info!("listening on {}", listener.local_addr().map_err(io)?);
            let outcome = run_server(&cfg, listener, Some(&out), ServeOptions::default(), Arc::new(AtomicBool::new(false)))?;
            summarize(&outcome)
        }
        Command::Client {
            action: ClientAction::Run {
                config,
                endpoint,
                party,
                retry,
            },
        } => {
            let cfg = ScenarioConfig::load(&config)?;
            let backoff = Backoff {
                base: Duration::from_millis(retry.retry_base_ms),
                cap: Duration::from_millis(retry.retry_cap_ms),
                max_attempts: retry.max_attempts.max(1),
            };
            let report = run_client(&cfg, &party, &endpoint, backoff)?;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for e in &report.events {
                let kind = match e {
                    flmm_core::harness::ClientEvent::Submitted { .. } => "submitted",
                    flmm_core::harness::ClientEvent::Rejected { .. } => "rejected",
                    flmm_core::harness::ClientEvent::Starved { .. } => "starved",
                };
                *counts.entry(kind).or_default() += 1;
            }
            println!("party={} bytes_sent={}", report.party, report.bytes_sent);
            for (k, n) in &counts {
                println!("{k}={n}");
            }
            if counts.contains_key("starved") {
                return Err(Failure {
                    code: 4,
                    msg: format!("party {party} starved in {} rounds", counts["starved"]),
                });
            }
            Ok(())
        }
        Command::Clean {
            model,
            corpus,
            threshold,
            out,
        } => clean(&model, &corpus, threshold, out.as_deref()),
        Command::Eval { model, corpus, id } => {
            let model = load_model(&model)?;
            let records = load_corpus(&corpus)?;
            let report = evaluate(&model, &records, &id).map_err(config_err)?;
            println!("{report}");
            Ok(())
        }
        Command::Shapley {
            config,
            run,
            eval,
            method,
            budget,
        } => shapley(&config, &run, eval.as_deref(), method, budget),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("flmm: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
