//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fracsls::bcm::export_slices;
use fracsls::bo::{run_session_with, FeedbackSource, Session, SessionOutcome, TranscriptOracle};
use fracsls::fom::{gl_coeffs, DiscreteImpedance, TestProtocol};
use fracsls::gp::Label;
use fracsls::oracle::{OracleConfig, SimulatedParticipant};
use fracsls::passivity::PassivityChecker;
use fracsls::store::{read_json, write_json, StudyStore};
use fracsls::sysid::{fit_params, CreepData, IdentificationProblem, RelaxationData};
use fracsls::validation::run_validation;
use fracsls::{Error, ModelParams, Result, SignalRole, TimeSeries};

use crate::study::{build_aggregate, load_aggregate_model, PoolCache, StudyConfig};

#[derive(Debug, Parser)]
#[command(name = "fracsls", version, about = "Fractional viscoelastic rendering models tuned from ordinal feedback")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Study configuration (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, also the study store root.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct ParamArgs {
    #[arg(long, allow_negative_numbers = true, default_value_t = ModelParams::identified().k0)]
    pub k0: f64,
    #[arg(long, default_value_t = ModelParams::identified().k1)]
    pub k1: f64,
    #[arg(long, default_value_t = ModelParams::identified().b1)]
    pub b1: f64,
    #[arg(long, default_value_t = ModelParams::identified().alpha)]
    pub alpha: f64,
}

impl ParamArgs {
    fn params(&self) -> ModelParams {
        ModelParams::new(self.k0, self.k1, self.b1, self.alpha)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the short-memory fractional coefficients as CSV.
    Coeffs {
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = fracsls::fom::DEFAULT_WINDOW)]
        window: usize,
    },
    /// Simulate the relaxation and creep tests; writes relaxation.csv and creep.csv.
    Simulate(ParamArgs),
    /// Identify parameters from recorded tests.
    Fit {
        /// Force CSV of a displacement-step test.
        #[arg(long)]
        relaxation: Option<PathBuf>,
        /// Step size of the relaxation test, mm.
        #[arg(long, default_value_t = 5.0)]
        step: f64,
        /// Displacement CSV of a creep test.
        #[arg(long)]
        creep: Option<PathBuf>,
        /// Force CSV driving the creep test; the default protocol when absent.
        #[arg(long)]
        force_profile: Option<PathBuf>,
        #[arg(long, default_value_t = fracsls::fom::DEFAULT_WINDOW)]
        window: usize,
    },
    /// Passivity margin of one parameter set.
    Passivity(ParamArgs),
    /// Run a tuning session against a simulated participant or a transcript.
    Hil {
        /// `default`, an oracle JSON file, or `transcript:<file>`.
        #[arg(long, default_value = "default")]
        oracle: String,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Pool completed sessions and select the best, mid and worst renderings.
    Aggregate {
        /// Session ids; all stored sessions when empty.
        #[arg(long, value_delimiter = ',')]
        sessions: Vec<String>,
        #[arg(long)]
        id: Option<String>,
    },
    /// Export posterior slices of an aggregate as CSV.
    Slices {
        #[arg(long)]
        aggregate: String,
        /// Comma-separated alpha levels.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.4, 0.8])]
        alpha: Vec<f64>,
        #[arg(long)]
        res: Option<usize>,
    },
    /// Simulate the best/mid/worst validation session.
    Validate {
        #[arg(long)]
        aggregate: String,
        #[arg(long, default_value_t = 24)]
        participants: usize,
        /// Sensory noise of the simulated participants.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Serve the HTTP session API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn load_config(path: Option<&Path>) -> Result<StudyConfig> {
    match path {
        Some(p) => StudyConfig::load(p),
        None => Ok(StudyConfig::default()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Feedback source named on the command line.
pub fn feedback_source(spec: &str, base: &OracleConfig, seed: u64) -> Result<Box<dyn FeedbackSource>> {
    if let Some(path) = spec.strip_prefix("transcript:") {
        return Ok(Box::new(TranscriptOracle::new(read_transcript(Path::new(path))?)));
    }
    let mut config = if spec == "default" { *base } else { read_json::<OracleConfig>(Path::new(spec))? };
    config.seed = seed;
    Ok(Box::new(SimulatedParticipant::new(config)?))
}

/// Labels from either a JSON array of labels or a session file.
pub fn read_transcript(path: &Path) -> Result<Vec<Label>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        let session: Session = serde_json::from_value(value)?;
        Ok(session.transcript())
    }
}

/// Run one session and persist it after every trial.
pub fn run_hil(
    store: &StudyStore,
    config: &StudyConfig,
    pools: &PoolCache,
    source: &mut dyn FeedbackSource,
    seed: u64,
) -> Result<SessionOutcome> {
    let pool = pools.get(&config.session)?;
    let outcome = run_session_with(&config.session, pool, source, seed, &mut |s| store.save_session(s));
    match outcome {
        Ok(out) => {
            store.save_posterior(&out.session.id, &out.posterior)?;
            Ok(out)
        }
        Err(Error::Oracle { partial, trial_index, message }) => {
            store.save_session(&partial)?;
            Err(Error::Oracle { partial, trial_index, message })
        }
        Err(e) => Err(e),
    }
}

fn load_series(path: &Path, role: SignalRole) -> Result<TimeSeries> {
    TimeSeries::load_csv(path, role)
}

pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Coeffs { alpha, window } => {
            let c = gl_coeffs(alpha, window)?;
            println!("i,c");
            for (i, v) in c.iter().enumerate() {
                println!("{i},{v}");
            }
        }
        Command::Simulate(p) => {
            let protocol = config.oracle.protocol;
            let r = protocol.simulate(&p.params())?;
            r.relaxation.save_csv(cli.out.join("relaxation.csv"))?;
            r.creep.save_csv(cli.out.join("creep.csv"))?;
            protocol.force_profile()?.save_csv(cli.out.join("force_profile.csv"))?;
            println!("wrote {}", cli.out.display());
        }
        Command::Fit { relaxation, step, creep, force_profile, window } => {
            let protocol = TestProtocol { window, ..config.oracle.protocol };
            let relaxation = relaxation
                .map(|p| -> Result<_> {
                    Ok(RelaxationData { step_displacement: step, force: load_series(&p, SignalRole::Force)? })
                })
                .transpose()?;
            let creep = creep
                .map(|p| -> Result<_> {
                    let profile = match &force_profile {
                        Some(f) => load_series(f, SignalRole::Force)?,
                        None => protocol.force_profile()?,
                    };
                    Ok(CreepData { force_profile: profile, displacement: load_series(&p, SignalRole::Displacement)? })
                })
                .transpose()?;
            let sample_time = relaxation
                .as_ref()
                .map(|r| r.force.sample_time)
                .or(creep.as_ref().map(|c| c.displacement.sample_time))
                .ok_or_else(|| Error::InvalidArgument("give --relaxation and/or --creep".into()))?;
            let problem = IdentificationProblem { relaxation, creep, window, sample_time, ..Default::default() };
            let report = fit_params(&problem, cli.seed)?;
            write_json(&cli.out.join("fit.json"), &report)?;
            print_json(&report)?;
        }
        Command::Passivity(p) => {
            let params = p.params();
            let checker = PassivityChecker::new(config.session.search_space.passivity)?;
            let margin = checker.margin(&params)?;
            let filter = DiscreteImpedance::new(params, checker.config().sample_time, checker.config().window)?;
            print_json(&serde_json::json!({
                "params": params,
                "margin": margin,
                "passive": margin >= 0.0,
                "instantaneous_stiffness": filter.instantaneous_stiffness(),
            }))?;
        }
        Command::Hil { oracle, trials } => {
            let mut config = config;
            if let Some(n) = trials {
                config.session.acquisition.n_total = n;
            }
            let store = StudyStore::open(&cli.out)?;
            let mut source = feedback_source(&oracle, &config.oracle, cli.seed)?;
            let out = run_hil(&store, &config, &PoolCache::default(), source.as_mut(), cli.seed)?;
            print_json(&serde_json::json!({
                "id": out.session.id,
                "x_max": out.session.x_max,
                "transcript": out.session.transcript(),
                "session_file": store.session_path(&out.session.id),
            }))?;
        }
        Command::Aggregate { sessions, id } => {
            let store = StudyStore::open(&cli.out)?;
            let ids = if sessions.is_empty() { store.list_sessions()? } else { sessions };
            let bundle = build_aggregate(&store, &ids, id, config.grid_density)?;
            print_json(&serde_json::json!({ "id": bundle.id, "optima_triple": bundle.optima }))?;
        }
        Command::Slices { aggregate, alpha, res } => {
            let store = StudyStore::open(&cli.out)?;
            let (_, model) = load_aggregate_model(&store, &aggregate)?;
            let slices = export_slices(&model, &alpha, res.unwrap_or(config.slice_resolution))?;
            for s in &slices {
                let path = cli.out.join("slices").join(format!("{aggregate}_alpha_{}.csv", s.alpha));
                s.save_csv(&path)?;
                println!("{}", path.display());
            }
        }
        Command::Validate { aggregate, participants, noise } => {
            let store = StudyStore::open(&cli.out)?;
            let bundle = store.load_aggregate(&aggregate)?;
            let optima = bundle
                .optima
                .ok_or_else(|| Error::InvalidArgument(format!("aggregate {aggregate} has no optima")))?;
            let configs: Vec<OracleConfig> = (0..participants as u64)
                .map(|i| OracleConfig {
                    seed: cli.seed.wrapping_mul(1000).wrapping_add(i),
                    noise: noise.unwrap_or(config.oracle.noise),
                    ..config.oracle
                })
                .collect();
            let report = run_validation(&optima, &configs, config.validation_trials)?;
            let path = store.root().join("aggregates").join(format!("{aggregate}_validation.json"));
            write_json(&path, &report)?;
            print_json(&serde_json::json!({
                "classification": report.classification,
                "ordering": report.ordering,
                "classification_diagonal": report.classification_diagonal(),
                "ordering_agreement": report.ordering_agreement(),
                "report_file": path,
            }))?;
        }
        Command::Serve { addr } => {
            let store = StudyStore::open(&cli.out)?;
            let reference = config.oracle.protocol.simulate(&config.oracle.ground_truth)?;
            store.save_reference(&reference)?;
            let state = crate::api::AppState::new(store, config);
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on http://{addr}");
            rt.block_on(crate::api::serve(state, &addr))?;
        }
    }
    Ok(())
}

