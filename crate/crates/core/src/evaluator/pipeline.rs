use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use super::{
    discover_tests, expand_template, forbidden_includes, run_analyzers, run_tests, AnalyzerSection, EvalError,
    EvaluationReport, Overall, COMPILE_LOG_LIMIT,
};
use crate::clock::{Clock, SystemClock};
use crate::commit_db::{CooldownDecision, Status, Store, StoreError, SubmissionRecord};
use crate::config::{AssessmentConfig, CourseConfig};
use crate::git_ops::{Git, GitError, RepoLocks, WorkTree};
use crate::gitlab_api::{GitlabClient, GitlabError, RemoteRef};
use crate::intake::SubmissionEvent;
use crate::provisioner::{canonical_ci, CourseTopology, ProvisionError, Roster};
use crate::reporting::{self, DashboardRow};
use crate::sandbox::{self, Verdict};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("unknown assessment `{0}`")]
    UnknownAssessment(String),
    #[error("group `{0}` is not in the roster")]
    UnknownGroup(String),
    #[error(transparent)]
    Topology(#[from] ProvisionError),
    #[error(transparent)]
    Git(#[from] GitError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Api(#[from] GitlabError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("repository {0} has no commits")]
    EmptyRepository(String),
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub bypass_cooldown: bool,
    pub update_dashboard: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bypass_cooldown: false,
            update_dashboard: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    Report(Box<EvaluationReport>),
    SkippedCooldown { until: i64 },
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ReevalSummary {
    pub evaluated: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Everything an evaluation needs: configuration, server access, local
/// work trees and the submission store.
pub struct Engine {
    config: Arc<CourseConfig>,
    roster: Roster,
    api: GitlabClient,
    git: Git,
    store: Mutex<Store>,
    clock: Arc<dyn Clock>,
    locks: RepoLocks,
    course_lane: Mutex<()>,
    topology: Mutex<Option<Arc<CourseTopology>>>,
}

impl Engine {
    pub fn new(
        config: CourseConfig,
        roster: Roster,
        api: GitlabClient,
        git: Git,
        store: Store,
        clock: Arc<dyn Clock>,
    ) -> Engine {
        Engine {
            config: Arc::new(config),
            roster,
            api,
            git,
            store: Mutex::new(store),
            clock,
            locks: RepoLocks::new(),
            course_lane: Mutex::new(()),
            topology: Mutex::new(None),
        }
    }

    /// Production wiring: real clock and the on-disk store.
    pub fn open(config: CourseConfig, roster: Roster, token: &str) -> Result<Engine, EngineError> {
        let api = GitlabClient::new(&config.server_base_url, token);
        let git = Git::with_token(token);
        if let Some(parent) = config.state_db_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let store = Store::open(&config.state_db_path)?;
        Ok(Engine::new(config, roster, api, git, store, Arc::new(SystemClock)))
    }

    pub fn config(&self) -> &CourseConfig {
        &self.config
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    pub fn store(&self) -> MutexGuard<'_, Store> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn topology(&self) -> Result<Arc<CourseTopology>, EngineError> {
        let mut cached = self.topology.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = cached.as_ref() {
            return Ok(t.clone());
        }
        let t = Arc::new(CourseTopology::lookup(&self.api, &self.config, &self.roster)?);
        *cached = Some(t.clone());
        Ok(t)
    }

    fn tree_path(&self, kind: &str, assessment: &str, group: &str) -> PathBuf {
        self.config
            .work_dir
            .join("trees")
            .join(kind)
            .join(assessment)
            .join(group)
    }

    fn assessment(&self, id: &str) -> Result<&AssessmentConfig, EngineError> {
        self.config
            .assessment(id)
            .ok_or_else(|| EngineError::UnknownAssessment(id.to_string()))
    }

    fn record(
        &self,
        event: &SubmissionEvent,
        received_at: i64,
        status: Status,
        evaluated: Option<(i64, u32, u32)>,
    ) -> Result<(), StoreError> {
        let (evaluated_at, tests_passed, tests_failed) = match evaluated {
            Some((at, p, f)) => (Some(at), p, f),
            None => (None, 0, 0),
        };
        self.store().record(&SubmissionRecord {
            assessment_id: event.assessment_id.clone(),
            group_id: event.group_id.clone(),
            commit: event.commit.clone(),
            pushed_at: event.pushed_at,
            received_at,
            status,
            evaluated_at,
            tests_passed,
            tests_failed,
        })
    }

    /// Stores a coalesced-away event without evaluating it.
    pub fn record_superseded(&self, event: &SubmissionEvent) -> Result<(), EngineError> {
        self.record(event, self.now(), Status::SkippedCooldown, None)?;
        Ok(())
    }

    pub fn evaluate(&self, event: &SubmissionEvent) -> Result<Evaluation, EngineError> {
        self.evaluate_with(event, EvalOptions::default())
    }

    /// Runs the whole pipeline for one event. Infrastructure failures are
    /// recorded as `Failed` and returned.
    pub fn evaluate_with(&self, event: &SubmissionEvent, opts: EvalOptions) -> Result<Evaluation, EngineError> {
        let received_at = self.now();
        let result = self.pipeline(event, opts, received_at);
        if let Err(e) = &result {
            log::error!(
                "evaluation_failed assessment={} group={} commit={} error=\"{e}\"",
                event.assessment_id,
                event.group_id,
                event.commit
            );
            if let Err(store_err) = self.record(event, received_at, Status::Failed, None) {
                log::error!("record_failed error=\"{store_err}\"");
            }
        }
        result
    }

    fn pipeline(
        &self,
        event: &SubmissionEvent,
        opts: EvalOptions,
        received_at: i64,
    ) -> Result<Evaluation, EngineError> {
        let assessment = self.assessment(&event.assessment_id)?;
        let members = self
            .roster
            .group(&event.group_id)
            .ok_or_else(|| EngineError::UnknownGroup(event.group_id.clone()))?
            .members
            .clone();
        let topology = self.topology()?;
        let submission = topology
            .submission(&event.assessment_id, &event.group_id)
            .ok_or_else(|| EngineError::UnknownGroup(event.group_id.clone()))?;
        let feedback = topology
            .feedback_repo(&event.assessment_id, &event.group_id)
            .ok_or_else(|| EngineError::UnknownGroup(event.group_id.clone()))?;

        let sub_path = self.tree_path("submissions", &event.assessment_id, &event.group_id);
        let sub_lock = self.locks.get(&sub_path);
        let _sub_guard = sub_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut tree = self.git.clone_or_update(url(submission)?, &sub_path)?;
        self.git.checkout_commit(&mut tree, &event.commit)?;

        let canonical = canonical_ci(&self.config, &assessment.id);
        if super::detect_tamper(&tree.local_path, &canonical) {
            let now = self.now();
            for user in &members {
                match self.api.revoke_write(submission, user) {
                    Ok(_) => {}
                    Err(GitlabError::UnknownUser(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            log::warn!(
                "tamper_detected assessment={} group={} commit={} demoted={}",
                event.assessment_id,
                event.group_id,
                event.commit,
                members.len()
            );
            let report = EvaluationReport {
                event: event.clone(),
                evaluated_at: now,
                overall: Overall::Tampered,
                test_verdicts: Vec::new(),
                analyzer_sections: Vec::new(),
                cooldown_until: now + assessment.cooldown_s as i64,
                compile_log: None,
            };
            self.push_feedback(&report, assessment, url(feedback)?, None)?;
            self.record(event, received_at, Status::SkippedTamper, None)?;
            return Ok(Evaluation::Report(Box::new(report)));
        }

        if !opts.bypass_cooldown {
            let decision = self.store().check_cooldown(
                &event.group_id,
                &event.assessment_id,
                self.now(),
                assessment.cooldown_s,
            )?;
            if let CooldownDecision::SkippedUntil(until) = decision {
                self.record(event, received_at, Status::SkippedCooldown, None)?;
                log::info!(
                    "skipped_cooldown assessment={} group={} commit={} until={until}",
                    event.assessment_id,
                    event.group_id,
                    event.commit
                );
                return Ok(Evaluation::SkippedCooldown { until });
            }
        }

        let compile_log = self.build(&tree, assessment)?;
        let test_verdicts = match compile_log {
            None => run_tests(&tree.local_path, assessment)?,
            Some(_) => Vec::new(),
        };
        let mut sections: Vec<AnalyzerSection> = Vec::new();
        if !assessment.forbidden_patterns.is_empty() {
            sections.push(forbidden_includes(
                &tree.local_path,
                &assessment.forbidden_patterns,
                &assessment.source_extensions,
            ));
        }
        let scratch = self.tree_path("scratch", &event.assessment_id, &event.group_id);
        sections.extend(run_analyzers(
            &tree.local_path,
            &assessment.analyzers,
            &assessment.limits(),
            &scratch,
        ));

        let now = self.now();
        let (overall, passed, failed) = match &compile_log {
            None => {
                let p = test_verdicts
                    .iter()
                    .filter(|v| v.outcome == super::TestOutcome::Pass)
                    .count() as u32;
                (Overall::Evaluated, p, test_verdicts.len() as u32 - p)
            }
            Some(_) => (
                Overall::CompileError,
                0,
                discover_tests(&assessment.tests_dir)?.len() as u32,
            ),
        };
        let report = EvaluationReport {
            event: event.clone(),
            evaluated_at: now,
            overall,
            test_verdicts,
            analyzer_sections: sections,
            cooldown_until: now + assessment.cooldown_s as i64,
            compile_log,
        };

        // Build and test runs may leave files behind; archive the commit as pushed.
        self.git.checkout_commit(&mut tree, &event.commit)?;
        let archive = reporting::package_code(&tree.local_path, now)?;
        let short = reporting::short_sha(&event.commit).to_string();
        self.push_feedback(&report, assessment, url(feedback)?, Some((&short, &archive)))?;
        self.record(event, received_at, Status::Evaluated, Some((now, passed, failed)))?;
        log::info!(
            "evaluated assessment={} group={} commit={} passed={passed} failed={failed}",
            event.assessment_id,
            event.group_id,
            event.commit
        );
        if opts.update_dashboard {
            if let Err(e) = self.update_dashboard(&event.assessment_id) {
                log::error!("dashboard_failed assessment={} error=\"{e}\"", event.assessment_id);
            }
        }
        Ok(Evaluation::Report(Box::new(report)))
    }

    /// Runs the build command, returning the diagnostics when it fails.
    fn build(&self, tree: &WorkTree, assessment: &AssessmentConfig) -> Result<Option<String>, EngineError> {
        let Some(cmd) = &assessment.build_cmd else {
            return Ok(None);
        };
        let workdir = tree.local_path.to_string_lossy().into_owned();
        let argv = expand_template(cmd, &[("workdir", &workdir)])?;
        let run = sandbox::run(&argv, None, &tree.local_path, &assessment.limits()).map_err(EvalError::from)?;
        if run.verdict == Verdict::Ok {
            return Ok(None);
        }
        let mut log = String::new();
        log.push_str(&run.stderr.text());
        if !run.stdout.bytes.is_empty() {
            if !log.is_empty() && !log.ends_with('\n') {
                log.push('\n');
            }
            log.push_str(&run.stdout.text());
        }
        if run.verdict != Verdict::RuntimeError {
            log.push_str(&format!("\n[build stopped: {:?}]", run.verdict));
        }
        Ok(Some(truncate(log, COMPILE_LOG_LIMIT)))
    }

    fn push_feedback(
        &self,
        report: &EvaluationReport,
        assessment: &AssessmentConfig,
        clone_url: &str,
        archive: Option<(&str, &[u8])>,
    ) -> Result<(), EngineError> {
        let path = self.tree_path("feedback", &report.event.assessment_id, &report.event.group_id);
        let lock = self.locks.get(&path);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut tree = self.git.clone_or_update(clone_url, &path)?;
        let body = reporting::render_feedback(report, assessment);
        let message = format!(
            "Feedback for {} ({})",
            reporting::short_sha(&report.event.commit),
            reporting::iso8601(report.evaluated_at)
        );
        reporting::publish(&self.git, &mut tree, &body, archive, &message)?;
        Ok(())
    }

    /// Current dashboard rows for an assessment, one per roster group.
    pub fn dashboard_rows(&self, assessment_id: &str) -> Result<Vec<DashboardRow>, EngineError> {
        let assessment = self.assessment(assessment_id)?;
        let now = self.now();
        let store = self.store();
        let mut rows = Vec::new();
        for g in self.roster.group_ids() {
            let s = store.stats(g, assessment_id, now, assessment.start_date)?;
            rows.push(DashboardRow {
                group_id: g.to_string(),
                passed: s.passed,
                failed: s.failed,
                submissions: s.submissions,
                days: s.days,
            });
        }
        reporting::sort_rows(&mut rows);
        Ok(rows)
    }

    /// Regenerates and pushes `dashboards/<id>.md` in the course repository.
    pub fn update_dashboard(&self, assessment_id: &str) -> Result<(), EngineError> {
        let rows = self.dashboard_rows(assessment_id)?;
        let bytes = reporting::render_dashboard(&rows, assessment_id, self.now());
        let topology = self.topology()?;
        let _lane = self.course_lane.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.config.work_dir.join("trees").join("course");
        let mut tree = self.git.clone_or_update(url(&topology.course_project)?, &path)?;
        reporting::publish_dashboard(&self.git, &mut tree, assessment_id, &bytes)?;
        Ok(())
    }

    /// Evaluates the head of every group's submission repository, ignoring
    /// cooldowns, then rebuilds the dashboard once.
    pub fn reevaluate_all(&self, assessment_id: &str) -> Result<ReevalSummary, EngineError> {
        self.assessment(assessment_id)?;
        let topology = self.topology()?;
        let mut summary = ReevalSummary::default();
        let groups: Vec<String> = self.roster.group_ids().map(str::to_string).collect();
        for g in groups {
            let Some(repo) = topology.submission(assessment_id, &g) else {
                summary.failed.push((g, "no submission repository".into()));
                continue;
            };
            let head = {
                let path = self.tree_path("submissions", assessment_id, &g);
                let lock = self.locks.get(&path);
                let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
                self.git
                    .clone_or_update(url(repo)?, &path)
                    .map(|tree| self.git.head(&tree))
            };
            let commit = match head {
                Ok(Some(c)) => c,
                Ok(None) | Err(_) => {
                    let reason = match head {
                        Err(e) => e.to_string(),
                        _ => EngineError::EmptyRepository(repo.full_path.clone()).to_string(),
                    };
                    let event = SubmissionEvent {
                        assessment_id: assessment_id.to_string(),
                        group_id: g.clone(),
                        commit: String::new(),
                        pushed_at: self.now(),
                        repo_path: repo.full_path.clone(),
                        pusher: String::new(),
                    };
                    self.record(&event, self.now(), Status::Failed, None)?;
                    log::warn!("reevaluate_failed assessment={assessment_id} group={g} reason=\"{reason}\"");
                    summary.failed.push((g, reason));
                    continue;
                }
            };
            let event = SubmissionEvent {
                assessment_id: assessment_id.to_string(),
                group_id: g.clone(),
                commit,
                pushed_at: self.now(),
                repo_path: repo.full_path.clone(),
                pusher: String::new(),
            };
            let opts = EvalOptions {
                bypass_cooldown: true,
                update_dashboard: false,
            };
            match self.evaluate_with(&event, opts) {
                Ok(_) => summary.evaluated.push(g),
                Err(e) => summary.failed.push((g, e.to_string())),
            }
        }
        self.update_dashboard(assessment_id)?;
        Ok(summary)
    }
}

fn url(r: &RemoteRef) -> Result<&str, EngineError> {
    r.clone_url.as_deref().ok_or_else(|| {
        EngineError::Api(GitlabError::Protocol {
            path: r.full_path.clone(),
            message: "no clone url".into(),
        })
    })
}

fn truncate(mut s: String, limit: usize) -> String {
    if s.len() > limit {
        let mut cut = limit;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
        s.push_str("\n[truncated]");
    }
    s
}
