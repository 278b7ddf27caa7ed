//! Course configuration: a single TOML file describing the course, its
//! assessments and the analyzers attached to them.
//!
//! Every optional key is filled with its default at load time, so the rest
//! of the engine only ever sees a fully resolved [`CourseConfig`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::gitlab_api::Role;
use crate::sandbox::ResourceLimits;

pub const DEFAULT_LAB_COOLDOWN_S: u64 = 60;
pub const DEFAULT_PROJECT_COOLDOWN_S: u64 = 600;
pub const DEFAULT_CPU_LIMIT_S: u64 = 5;
pub const DEFAULT_MEM_LIMIT_BYTES: u64 = 8 * (1 << 30);
pub const DEFAULT_ANALYZER_TIMEOUT_S: u64 = 60;
pub const DEFAULT_WORKERS: usize = 2;
pub const DEFAULT_SOURCE_EXTENSIONS: &[&str] = &["c", "h", "py"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("environment variable `{0}` is not set or empty")]
    MissingToken(String),
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssessmentKind {
    Lab,
    Project,
}

impl AssessmentKind {
    pub fn default_cooldown_s(self) -> u64 {
        match self {
            AssessmentKind::Lab => DEFAULT_LAB_COOLDOWN_S,
            AssessmentKind::Project => DEFAULT_PROJECT_COOLDOWN_S,
        }
    }
}

impl fmt::Display for AssessmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssessmentKind::Lab => f.write_str("Lab"),
            AssessmentKind::Project => f.write_str("Project"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OnFailure {
    Warn,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerSpec {
    pub name: String,
    pub title: String,
    /// Command template; `{workdir}` and `{out}` are substituted per token.
    pub command: String,
    pub timeout_s: u64,
    pub on_failure: OnFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentConfig {
    pub id: String,
    pub kind: AssessmentKind,
    pub start_date: NaiveDate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deadline: Option<DateTime<Utc>>,
    pub cooldown_s: u64,
    pub cpu_limit_s: u64,
    pub mem_limit_bytes: u64,
    pub wall_limit_s: u64,
    pub output_visible: bool,
    pub only_first_wrong_visible: bool,
    pub tests_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub build_cmd: Option<String>,
    pub run_cmd: String,
    pub forbidden_patterns: Vec<String>,
    pub source_extensions: Vec<String>,
    pub analyzers: Vec<AnalyzerSpec>,
}

impl AssessmentConfig {
    pub fn limits(&self) -> ResourceLimits {
        ResourceLimits::new(self.cpu_limit_s as f64, self.mem_limit_bytes, self.wall_limit_s as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseConfig {
    pub course_id: String,
    pub server_base_url: String,
    pub auth_token_env: String,
    pub drop_dir: PathBuf,
    pub work_dir: PathBuf,
    pub state_db_path: PathBuf,
    pub roster_path: PathBuf,
    pub faculty: Vec<String>,
    pub faculty_role: Role,
    pub workers: usize,
    pub assessments: Vec<AssessmentConfig>,
}

impl CourseConfig {
    pub fn assessment(&self, id: &str) -> Option<&AssessmentConfig> {
        self.assessments.iter().find(|a| a.id == id)
    }

    /// Serializes back into the on-disk format. Loading the result yields an
    /// equal value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

// On-disk shape: everything defaultable is optional.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCourse {
    course_id: String,
    server_base_url: String,
    auth_token_env: String,
    drop_dir: PathBuf,
    work_dir: PathBuf,
    state_db_path: PathBuf,
    roster_path: PathBuf,
    #[serde(default)]
    faculty: Vec<String>,
    faculty_role: Option<String>,
    workers: Option<usize>,
    #[serde(default)]
    assessments: Vec<RawAssessment>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAssessment {
    id: String,
    kind: String,
    start_date: NaiveDate,
    deadline: Option<DateTime<Utc>>,
    cooldown_s: Option<i64>,
    cpu_limit_s: Option<i64>,
    mem_limit_bytes: Option<i64>,
    wall_limit_s: Option<i64>,
    output_visible: Option<bool>,
    only_first_wrong_visible: Option<bool>,
    tests_dir: PathBuf,
    build_cmd: Option<String>,
    run_cmd: String,
    #[serde(default)]
    forbidden_patterns: Vec<String>,
    source_extensions: Option<Vec<String>>,
    #[serde(default)]
    analyzers: Vec<RawAnalyzer>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalyzer {
    name: String,
    title: String,
    command: String,
    timeout_s: Option<i64>,
    on_failure: Option<String>,
}

pub fn load_config(path: &Path) -> Result<CourseConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base)
}

/// Parses configuration text; relative paths are resolved against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<CourseConfig, ConfigError> {
    let raw: RawCourse = toml::from_str(text).map_err(|e| ConfigError::Parse {
        line: e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0),
        message: e.message().to_string(),
    })?;
    resolve(raw, base)
}

fn resolve(raw: RawCourse, base: &Path) -> Result<CourseConfig, ConfigError> {
    if !valid_course_id(&raw.course_id) {
        return Err(ConfigError::invalid("course_id", "must match [a-z0-9_-]{1,64}"));
    }
    if raw.auth_token_env.is_empty() {
        return Err(ConfigError::invalid(
            "auth_token_env",
            "must name an environment variable",
        ));
    }
    url::Url::parse(&raw.server_base_url).map_err(|e| ConfigError::invalid("server_base_url", e.to_string()))?;

    let abs = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    let drop_dir = abs(raw.drop_dir);
    let work_dir = abs(raw.work_dir);
    let state_db_path = abs(raw.state_db_path);
    if drop_dir == work_dir || drop_dir == state_db_path || work_dir == state_db_path {
        return Err(ConfigError::invalid(
            "drop_dir",
            "drop_dir, work_dir and state_db_path must be distinct",
        ));
    }

    let faculty_role = match raw.faculty_role.as_deref() {
        None => Role::Maintainer,
        Some(s) => s
            .parse::<Role>()
            .map_err(|_| ConfigError::invalid("faculty_role", format!("unknown role `{s}`")))?,
    };
    let workers = raw.workers.unwrap_or(DEFAULT_WORKERS);
    if workers == 0 {
        return Err(ConfigError::invalid("workers", "must be at least 1"));
    }

    let mut seen = BTreeSet::new();
    let mut assessments = Vec::with_capacity(raw.assessments.len());
    for a in raw.assessments {
        if !seen.insert(a.id.clone()) {
            return Err(ConfigError::invalid(
                "id",
                format!("duplicate assessment id `{}`", a.id),
            ));
        }
        assessments.push(resolve_assessment(a, &abs)?);
    }

    Ok(CourseConfig {
        course_id: raw.course_id,
        server_base_url: raw.server_base_url,
        auth_token_env: raw.auth_token_env,
        drop_dir,
        work_dir,
        state_db_path,
        roster_path: abs(raw.roster_path),
        faculty: raw.faculty,
        faculty_role,
        workers,
        assessments,
    })
}

fn non_negative(field: &str, v: Option<i64>, default: u64) -> Result<u64, ConfigError> {
    match v {
        None => Ok(default),
        Some(v) if v < 0 => Err(ConfigError::invalid(field, "must not be negative")),
        Some(v) => Ok(v as u64),
    }
}

fn positive(field: &str, v: Option<i64>, default: u64) -> Result<u64, ConfigError> {
    match non_negative(field, v, default)? {
        0 => Err(ConfigError::invalid(field, "must be positive")),
        v => Ok(v),
    }
}

fn resolve_assessment(a: RawAssessment, abs: &dyn Fn(PathBuf) -> PathBuf) -> Result<AssessmentConfig, ConfigError> {
    if !valid_segment(&a.id) {
        return Err(ConfigError::invalid(
            "id",
            format!("`{}` is not a valid path segment", a.id),
        ));
    }
    let kind = match a.kind.as_str() {
        "Lab" | "lab" => AssessmentKind::Lab,
        "Project" | "project" => AssessmentKind::Project,
        other => {
            return Err(ConfigError::invalid(
                "kind",
                format!("expected Lab or Project, got `{other}`"),
            ))
        }
    };
    if kind == AssessmentKind::Lab && a.deadline.is_some() {
        return Err(ConfigError::invalid("deadline", "labs have no deadline"));
    }
    let cooldown_s = non_negative("cooldown_s", a.cooldown_s, kind.default_cooldown_s())?;
    let cpu_limit_s = positive("cpu_limit_s", a.cpu_limit_s, DEFAULT_CPU_LIMIT_S)?;
    let mem_limit_bytes = positive("mem_limit_bytes", a.mem_limit_bytes, DEFAULT_MEM_LIMIT_BYTES)?;
    let wall_limit_s = positive("wall_limit_s", a.wall_limit_s, 2 * cpu_limit_s + 5)?;
    if wall_limit_s < cpu_limit_s {
        return Err(ConfigError::invalid("wall_limit_s", "must be at least cpu_limit_s"));
    }
    if a.run_cmd.trim().is_empty() {
        return Err(ConfigError::invalid("run_cmd", "must not be empty"));
    }
    shell_words::split(&a.run_cmd).map_err(|e| ConfigError::invalid("run_cmd", e.to_string()))?;
    if let Some(b) = &a.build_cmd {
        shell_words::split(b).map_err(|e| ConfigError::invalid("build_cmd", e.to_string()))?;
    }

    let mut names = BTreeSet::new();
    let mut analyzers = Vec::with_capacity(a.analyzers.len());
    for r in a.analyzers {
        if !names.insert(r.name.clone()) {
            return Err(ConfigError::invalid("name", format!("duplicate analyzer `{}`", r.name)));
        }
        if !r.command.contains("{workdir}") {
            return Err(ConfigError::invalid("command", "must contain {workdir}"));
        }
        shell_words::split(&r.command).map_err(|e| ConfigError::invalid("command", e.to_string()))?;
        let on_failure = match r.on_failure.as_deref() {
            None | Some("Warn") => OnFailure::Warn,
            Some("Skip") => OnFailure::Skip,
            Some(other) => {
                return Err(ConfigError::invalid(
                    "on_failure",
                    format!("expected Warn or Skip, got `{other}`"),
                ))
            }
        };
        analyzers.push(AnalyzerSpec {
            name: r.name,
            title: r.title,
            command: r.command,
            timeout_s: positive("timeout_s", r.timeout_s, DEFAULT_ANALYZER_TIMEOUT_S)?,
            on_failure,
        });
    }

    let source_extensions = a
        .source_extensions
        .unwrap_or_else(|| DEFAULT_SOURCE_EXTENSIONS.iter().map(|s| s.to_string()).collect())
        .into_iter()
        .map(|e| e.trim_start_matches('.').to_string())
        .collect();

    Ok(AssessmentConfig {
        id: a.id,
        kind,
        start_date: a.start_date,
        deadline: a.deadline,
        cooldown_s,
        cpu_limit_s,
        mem_limit_bytes,
        wall_limit_s,
        output_visible: a.output_visible.unwrap_or(false),
        only_first_wrong_visible: a.only_first_wrong_visible.unwrap_or(true),
        tests_dir: abs(a.tests_dir),
        build_cmd: a.build_cmd,
        run_cmd: a.run_cmd,
        forbidden_patterns: a.forbidden_patterns,
        source_extensions,
        analyzers,
    })
}

pub fn resolve_token(config: &CourseConfig, env: &HashMap<String, String>) -> Result<String, ConfigError> {
    match env.get(&config.auth_token_env) {
        Some(v) if !v.is_empty() => Ok(v.clone()),
        _ => Err(ConfigError::MissingToken(config.auth_token_env.clone())),
    }
}

/// Reads the token from the process environment.
pub fn resolve_token_from_env(config: &CourseConfig) -> Result<String, ConfigError> {
    let env: HashMap<String, String> = std::env::vars().collect();
    resolve_token(config, &env)
}

pub fn valid_course_id(s: &str) -> bool {
    (1..=64).contains(&s.len())
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

/// A single GitLab path segment: no slashes, no leading dot or dash.
pub fn valid_segment(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 255
        && !s.starts_with(['.', '-'])
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}
