use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use gradebot_core::commit_db::Store;
use gradebot_core::config::{load_config, resolve_token_from_env, ConfigError, CourseConfig};
use gradebot_core::evaluator::{Engine, EngineError};
use gradebot_core::git_ops::Git;
use gradebot_core::gitlab_api::GitlabClient;
use gradebot_core::intake::{Catalog, DropDir, Watcher, POLL_INTERVAL};
use gradebot_core::provisioner::{
    load_roster, lock_assessment, provision_course, publish_assessment, CourseTopology, ProvisionError, Roster,
};
use gradebot_core::service;

#[derive(Parser)]
#[command(name = "gradebot", version, about = "Automated assessment on a GitLab server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or repair groups, repositories and memberships
    Init {
        #[arg(long)]
        config: PathBuf,
    },
    /// Push an assessment's materials to every submission repository
    Publish {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        assessment: String,
        #[arg(long)]
        materials: PathBuf,
    },
    /// Remove students' write access to an assessment's repositories
    Lock {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        assessment: String,
    },
    /// Watch the drop directory and evaluate submissions until signalled
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate the latest commit of every group, ignoring cooldowns
    Reevaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        assessment: String,
    },
    /// Write the submission history as CSV to standard output
    Dump {
        #[arg(long)]
        config: PathBuf,
    },
}

const OK: u8 = 0;
const INVALID: u8 = 1;
const PARTIAL: u8 = 2;
const INFRA: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(e: impl std::fmt::Display) -> Failure {
        Failure {
            code: INVALID,
            message: e.to_string(),
        }
    }

    fn infra(e: impl std::fmt::Display) -> Failure {
        Failure {
            code: INFRA,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::invalid(e)
    }
}

impl From<ProvisionError> for Failure {
    fn from(e: ProvisionError) -> Self {
        match e {
            ProvisionError::Roster { .. }
            | ProvisionError::UnknownAssessment(_)
            | ProvisionError::MissingStatement(_) => Failure::invalid(e),
            _ => Failure::infra(e),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::UnknownAssessment(_) => Failure::invalid(e),
            EngineError::Topology(p) => p.into(),
            _ => Failure::infra(e),
        }
    }
}

type Outcome = Result<u8, Failure>;

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "{} {} {}",
                chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ"),
                record.level(),
                record.args()
            )
        })
        .target(env_logger::Target::Stderr)
        .init();
}

struct Context {
    config: CourseConfig,
    roster: Roster,
    token: String,
}

fn context(path: &Path) -> Result<Context, Failure> {
    let config = load_config(path)?;
    let roster = load_roster(&config.roster_path)?;
    let token = resolve_token_from_env(&config)?;
    Ok(Context { config, roster, token })
}

impl Context {
    fn api(&self) -> GitlabClient {
        GitlabClient::new(&self.config.server_base_url, &self.token)
    }

    fn assessment(&self, id: &str) -> Result<&gradebot_core::config::AssessmentConfig, Failure> {
        self.config
            .assessment(id)
            .ok_or_else(|| Failure::invalid(format!("unknown assessment `{id}`")))
    }

    fn topology(&self) -> Result<CourseTopology, Failure> {
        Ok(CourseTopology::lookup(&self.api(), &self.config, &self.roster)?)
    }

    fn engine(self) -> Result<Engine, Failure> {
        Ok(Engine::open(self.config, self.roster, &self.token)?)
    }
}

fn cmd_init(config: &Path) -> Outcome {
    let ctx = context(config)?;
    let (topology, changes) = provision_course(&ctx.api(), &ctx.config, &ctx.roster)?;
    if changes.is_empty() {
        println!("no changes");
    }
    for c in &changes {
        println!("{c}");
    }
    log::info!(
        "init_done course={} repositories={} changes={}",
        ctx.config.course_id,
        topology.submissions.len() + topology.feedback.len() + 1,
        changes.len()
    );
    Ok(OK)
}

fn cmd_publish(config: &Path, id: &str, materials: &Path) -> Outcome {
    let ctx = context(config)?;
    let assessment = ctx.assessment(id)?;
    let topology = ctx.topology()?;
    let git = Git::with_token(&ctx.token);
    let report = publish_assessment(&git, &ctx.config, &topology, assessment, materials)?;
    for p in &report.pushed {
        println!("published {p}");
    }
    for p in &report.unchanged {
        println!("unchanged {p}");
    }
    for (p, why) in &report.failures {
        println!("failed {p}: {why}");
    }
    Ok(if report.failures.is_empty() { OK } else { PARTIAL })
}

fn cmd_lock(config: &Path, id: &str) -> Outcome {
    let ctx = context(config)?;
    ctx.assessment(id)?;
    let topology = ctx.topology()?;
    let report = lock_assessment(&ctx.api(), &topology, id)?;
    println!("demoted {} memberships", report.demotions);
    for (what, why) in &report.errors {
        println!("failed {what}: {why}");
    }
    Ok(if report.errors.is_empty() { OK } else { PARTIAL })
}

fn cmd_serve(config: &Path, workers: Option<usize>) -> Outcome {
    let ctx = context(config)?;
    let workers = workers.unwrap_or(ctx.config.workers);
    if workers == 0 {
        return Err(Failure::invalid("--workers must be at least 1"));
    }
    let catalog = Catalog::new(
        ctx.config.assessments.iter().map(|a| a.id.clone()),
        ctx.roster.group_ids().map(str::to_string),
    );
    let drop = DropDir::open(&ctx.config.drop_dir).map_err(Failure::infra)?;
    let engine = Arc::new(ctx.engine()?);
    engine.topology()?;

    let shutdown = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, shutdown.clone()).map_err(Failure::infra)?;
    }
    service::serve(engine, Watcher::new(drop, catalog), workers, &shutdown, POLL_INTERVAL).map_err(Failure::infra)?;
    Ok(OK)
}

fn cmd_reevaluate(config: &Path, id: &str) -> Outcome {
    let ctx = context(config)?;
    ctx.assessment(id)?;
    let engine = ctx.engine()?;
    let summary = engine.reevaluate_all(id)?;
    for g in &summary.evaluated {
        println!("evaluated {g}");
    }
    for (g, why) in &summary.failed {
        println!("failed {g}: {why}");
    }
    Ok(if summary.failed.is_empty() { OK } else { PARTIAL })
}

fn cmd_dump(config: &Path) -> Outcome {
    let config = load_config(config)?;
    let store = Store::open(&config.state_db_path).map_err(Failure::infra)?;
    let stdout = std::io::stdout();
    store.dump_csv(stdout.lock()).map_err(Failure::infra)?;
    Ok(OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { INVALID } else { OK });
        }
    };
    init_logging();
    let outcome = match &cli.command {
        Command::Init { config } => cmd_init(config),
        Command::Publish {
            config,
            assessment,
            materials,
        } => cmd_publish(config, assessment, materials),
        Command::Lock { config, assessment } => cmd_lock(config, assessment),
        Command::Serve { config, workers } => cmd_serve(config, *workers),
        Command::Reevaluate { config, assessment } => cmd_reevaluate(config, assessment),
        Command::Dump { config } => cmd_dump(config),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            log::error!("command_failed code={} error=\"{}\"", f.code, f.message);
            ExitCode::from(f.code)
        }
    }
}
