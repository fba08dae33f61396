//! `tamer`: pretrain encoders, run and serve training sessions, evaluate,
//! replay and plot.
//!
//! Exit codes: 0 ok, 1 user error (bad flags, missing files, bad configs),
//! 2 internal error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tamer_core::credit::DelayDistribution;
use tamer_core::envsim::{EnvConfig, LineWorldConfig, MiniBowlConfig};
use tamer_core::learner::{Algorithm, LearnerConfig};
use tamer_core::model::{
    load_params, pretrain_autoencoder, save_params, EncoderConfig, ModelSpec, PretrainConfig,
    RewardModel,
};
use tamer_core::session::{
    collect_random_states, evaluate, read_log, run_session, score_series, write_eval_csv,
    write_score_csv, Session, SessionConfig, TrainerConfig, DEFAULT_EVAL_MAX_STEPS,
};
use tamer_gateway::{serve, ServeOptions};

#[derive(Debug, Parser)]
#[command(
    name = "tamer",
    version,
    about = "Train agents from delayed human (or oracle) feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect random-policy frames and pretrain the encoder.
    Pretrain(PretrainArgs),
    /// Run a training session (oracle, or human via the gateway).
    Run(RunArgs),
    /// Run a human-trainer session behind the WebSocket gateway.
    Serve(RunArgs),
    /// Greedy evaluation of saved parameters.
    Eval(EvalArgs),
    /// Re-drive a learner from a recorded oracle trace.
    Replay(ReplayArgs),
    /// Score-versus-time CSV from a session log.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EnvName {
    Minibowl,
    Lineworld,
}

impl EnvName {
    fn config(self) -> EnvConfig {
        match self {
            EnvName::Minibowl => EnvConfig::MiniBowl(MiniBowlConfig::default()),
            EnvName::Lineworld => EnvConfig::LineWorld(LineWorldConfig::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgoName {
    DeepTamer,
    Tamer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainerName {
    Oracle,
    Human,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long, value_enum, default_value = "minibowl")]
    env: EnvName,
    /// Number of random-policy frames.
    #[arg(long, default_value_t = 5000)]
    frames: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder parameter file to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch loss CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON session config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    algo: Option<AlgoName>,
    #[arg(long, value_enum)]
    env: Option<EnvName>,
    #[arg(long, value_enum)]
    trainer: Option<TrainerName>,
    /// Session length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    step_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Credit-assignment delay preset: uniform, uniform-0.28, gamma.
    #[arg(long)]
    credit: Option<String>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    /// Oracle feedback trace to write (oracle trainer only).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Gateway port for human sessions.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Start stepping without waiting for a trainer's start command.
    #[arg(long)]
    autostart: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long, value_enum, default_value = "minibowl")]
    env: EnvName,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EVAL_MAX_STEPS)]
    max_steps: u64,
    /// CSV destination; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Config of the run that recorded the trace.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    log: PathBuf,
    /// Episodes in the trailing mean.
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    User(String),
    Internal(String),
}

impl From<tamer_core::Error> for CliError {
    fn from(e: tamer_core::Error) -> Self {
        use tamer_core::Error as E;
        match e {
            E::InvalidConfig(_)
            | E::InvalidDistribution(_)
            | E::Wiring(_)
            | E::ParamFile(_)
            | E::Log(_)
            | E::Json(_)
            | E::ShapeMismatch { .. } => CliError::User(e.to_string()),
            E::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::User(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<tamer_gateway::GatewayError> for CliError {
    fn from(e: tamer_gateway::GatewayError) -> Self {
        match e {
            tamer_gateway::GatewayError::Core(c) => c.into(),
            tamer_gateway::GatewayError::NotHuman => CliError::User(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| CliError::User(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<File> {
    File::create(path).map_err(|e| CliError::User(format!("cannot create {}: {e}", path.display())))
}

fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn pretrain(a: PretrainArgs) -> CliResult {
    let env = a.env.config();
    let mut cfg = PretrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let mut enc = EncoderConfig::default();
    if let Some(p) = a.latent_dim {
        enc.latent_dim = p;
    }
    let states = collect_random_states(&env, a.frames, a.seed)?;
    let out = pretrain_autoencoder(&states, enc, &cfg)?;
    let hist = &out.loss_history;
    eprintln!(
        "reconstruction mse {:.6} -> {:.6} ({} epochs)",
        hist[0],
        hist[hist.len() - 1],
        hist.len() - 1
    );
    save_params(&out.autoencoder.encoder, Some(a.seed), create(&a.out)?)?;
    if let Some(p) = &a.loss_csv {
        let mut w = BufWriter::new(create(p)?);
        writeln!(w, "epoch,mse").map_err(internal)?;
        for (i, l) in hist.iter().enumerate() {
            writeln!(w, "{i},{l}").map_err(internal)?;
        }
        w.flush().map_err(internal)?;
    }
    Ok(())
}

fn session_config(a: &RunArgs) -> CliResult<SessionConfig> {
    let mut cfg = match &a.config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    if let Some(env) = a.env {
        cfg.env = env.config();
    }
    match a.algo {
        Some(AlgoName::DeepTamer) => {
            cfg.learner.algorithm = Algorithm::DeepTamer;
            cfg.model = ModelSpec::Deep {
                head: Default::default(),
            };
        }
        Some(AlgoName::Tamer) => {
            cfg.learner.algorithm = Algorithm::Tamer;
            cfg.model = ModelSpec::Linear { bias: true };
            if a.eta.is_none() && a.config.is_none() {
                cfg.learner.eta = LearnerConfig::LINEAR_ETA;
            }
        }
        None => {}
    }
    match a.trainer {
        Some(TrainerName::Human) => cfg.trainer = TrainerConfig::Human,
        Some(TrainerName::Oracle) if !matches!(cfg.trainer, TrainerConfig::Oracle(_)) => {
            cfg.trainer = TrainerConfig::default();
        }
        _ => {}
    }
    if let Some(d) = a.duration {
        cfg.duration = d;
    }
    if let Some(r) = a.step_rate {
        cfg.step_rate = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(eta) = a.eta {
        cfg.learner.eta = eta;
    }
    if let Some(name) = &a.credit {
        cfg.learner.delay_dist = DelayDistribution::preset(name).ok_or_else(|| {
            CliError::User(format!(
                "unknown credit preset {name:?}; try uniform, uniform-0.28, gamma"
            ))
        })?;
    }
    if let Some(p) = &a.encoder {
        cfg.encoder_params_path = Some(p.clone());
    }
    if let Some(p) = &a.log {
        cfg.log_path = Some(p.clone());
    }
    if let Some(p) = &a.params {
        cfg.params_path = Some(p.clone());
    }
    if let Some(p) = &a.trace {
        cfg.trace_path = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(summary: &tamer_core::session::SessionSummary) {
    let s = &summary.learner;
    eprintln!(
        "{} steps, {} episodes, {} feedback ({} credited nothing), {} updates",
        summary.steps,
        summary.episode_scores.len(),
        s.feedback_count,
        s.empty_feedback_count,
        s.update_count()
    );
}

fn run(a: RunArgs, force_human: bool) -> CliResult {
    let mut cfg = session_config(&a)?;
    if force_human {
        cfg.trainer = TrainerConfig::Human;
    }
    if matches!(cfg.trainer, TrainerConfig::Human) {
        return serve_session(cfg, a.port, a.autostart);
    }
    let (_, summary) = run_session(cfg)?;
    report(&summary);
    Ok(())
}

fn serve_session(cfg: SessionConfig, port: u16, autostart: bool) -> CliResult {
    let rt = tokio::runtime::Runtime::new().map_err(internal)?;
    rt.block_on(async move {
        let session = Session::from_config(cfg)?;
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|e| CliError::User(format!("cannot listen on port {port}: {e}")))?;
        let gw = serve(
            listener,
            session,
            ServeOptions {
                start_paused: !autostart,
            },
        )
        .await?;
        eprintln!("trainer endpoint: {}", gw.url());
        let (_, summary) = gw.wait().await?;
        report(&summary);
        Ok(())
    })
}

fn eval(a: EvalArgs) -> CliResult {
    let (model, _): (RewardModel, _) = load_params(BufReader::new(open(&a.params)?))?;
    let r = evaluate(&model, &a.env.config(), a.episodes, a.seed, a.max_steps)?;
    eprintln!(
        "mean score {:.3} over {} episodes",
        r.mean_score, a.episodes
    );
    write_eval_csv(&r, sink(a.out.as_deref())?)?;
    Ok(())
}

fn replay(a: ReplayArgs) -> CliResult {
    let mut cfg = SessionConfig::load(&a.config)?;
    // Make a missing trace a user error before the session is built.
    open(&a.trace)?;
    cfg.trainer = TrainerConfig::Scripted {
        trace_path: a.trace,
    };
    cfg.trace_path = None;
    cfg.log_path = a.log;
    cfg.params_path = a.params;
    let (_, summary) = run_session(cfg)?;
    report(&summary);
    Ok(())
}

fn plot(a: PlotArgs) -> CliResult {
    let records = read_log(BufReader::new(open(&a.log)?))?;
    write_score_csv(&score_series(&records, a.window), sink(a.out.as_deref())?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Run(a) => run(a, false),
        Command::Serve(a) => run(a, true),
        Command::Eval(a) => eval(a),
        Command::Replay(a) => replay(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
