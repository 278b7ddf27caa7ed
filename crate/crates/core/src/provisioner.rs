//! Course topology on the server: groups, repositories and memberships.
//!
//! Path scheme, with `<c>` the course id:
//!
//! | entity | path |
//! |---|---|
//! | main group | `<c>` |
//! | assessment subgroup | `<c>/<assessment>` |
//! | feedback subgroup | `<c>/feedback` |
//! | course repository | `<c>/course-info` |
//! | submission repository | `<c>/<assessment>/<group>` |
//! | feedback repository | `<c>/feedback/<assessment>-<group>` |
//!
//! Students are Developers on their submission repository and Reporters on
//! their own feedback repository and on the course repository.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{valid_segment, AssessmentConfig, CourseConfig};
use crate::evaluator::CI_FILE;
use crate::git_ops::{Author, Git, GitError, PushOutcome};
use crate::gitlab_api::{Change, GitlabClient, GitlabError, RemoteRef, Role};

pub const FEEDBACK_GROUP: &str = "feedback";
pub const COURSE_PROJECT: &str = "course-info";
pub const STATEMENT_STEM: &str = "statement";
pub const CI_WARNING_MARKER: &str = "<!-- ci-warning -->";

#[derive(Debug, thiserror::Error)]
pub enum ProvisionError {
    #[error("{path}: {source}")]
    Api {
        path: String,
        #[source]
        source: GitlabError,
    },
    #[error("roster line {line}: {message}")]
    Roster { line: usize, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown assessment `{0}`")]
    UnknownAssessment(String),
    #[error("materials in {0} contain no statement file")]
    MissingStatement(PathBuf),
    #[error("{0} does not exist on the server; run init first")]
    NotProvisioned(String),
}

fn api_fail(path: &str) -> impl FnOnce(GitlabError) -> ProvisionError + '_ {
    move |source| ProvisionError::Api {
        path: path.to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterEntry {
    pub group_id: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Roster {
    pub entries: Vec<RosterEntry>,
}

impl Roster {
    pub fn group(&self, group_id: &str) -> Option<&RosterEntry> {
        self.entries.iter().find(|e| e.group_id == group_id)
    }

    pub fn group_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.group_id.as_str())
    }
}

/// One group per line, `group_id: user1,user2`; `#` starts a comment.
pub fn parse_roster(text: &str) -> Result<Roster, ProvisionError> {
    let mut entries = Vec::new();
    let mut groups = BTreeSet::new();
    let mut users = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ProvisionError::Roster { line: i + 1, message };
        let (group, members) = line
            .split_once(':')
            .ok_or_else(|| err("expected `group_id: user,...`".into()))?;
        let group = group.trim().to_string();
        if !valid_segment(&group) || group == FEEDBACK_GROUP {
            return Err(err(format!("invalid group id `{group}`")));
        }
        if !groups.insert(group.clone()) {
            return Err(err(format!("duplicate group `{group}`")));
        }
        let members: Vec<String> = members
            .split(',')
            .map(|m| m.trim().to_string())
            .filter(|m| !m.is_empty())
            .collect();
        if members.is_empty() {
            return Err(err(format!("group `{group}` has no members")));
        }
        for m in &members {
            if !users.insert(m.clone()) {
                return Err(err(format!("user `{m}` appears in more than one group")));
            }
        }
        entries.push(RosterEntry {
            group_id: group,
            members,
        });
    }
    Ok(Roster { entries })
}

pub fn load_roster(path: &Path) -> Result<Roster, ProvisionError> {
    let text = fs::read_to_string(path).map_err(|source| ProvisionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_roster(&text)
}

pub mod paths {
    use super::{COURSE_PROJECT, FEEDBACK_GROUP};

    pub fn assessment_group(course: &str, assessment: &str) -> String {
        format!("{course}/{assessment}")
    }

    pub fn feedback_group(course: &str) -> String {
        format!("{course}/{FEEDBACK_GROUP}")
    }

    pub fn course_project(course: &str) -> String {
        format!("{course}/{COURSE_PROJECT}")
    }

    pub fn submission(course: &str, assessment: &str, group: &str) -> String {
        format!("{course}/{assessment}/{group}")
    }

    pub fn feedback_project_name(assessment: &str, group: &str) -> String {
        format!("{assessment}-{group}")
    }

    pub fn feedback(course: &str, assessment: &str, group: &str) -> String {
        format!("{course}/{FEEDBACK_GROUP}/{}", feedback_project_name(assessment, group))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CourseTopology {
    pub main_group: RemoteRef,
    pub assessment_groups: BTreeMap<String, RemoteRef>,
    pub feedback_group: RemoteRef,
    pub course_project: RemoteRef,
    /// Keyed by (assessment id, group id).
    pub submissions: BTreeMap<(String, String), RemoteRef>,
    pub feedback: BTreeMap<(String, String), RemoteRef>,
}

impl CourseTopology {
    pub fn submission(&self, assessment: &str, group: &str) -> Option<&RemoteRef> {
        self.submissions.get(&(assessment.to_string(), group.to_string()))
    }

    pub fn feedback_repo(&self, assessment: &str, group: &str) -> Option<&RemoteRef> {
        self.feedback.get(&(assessment.to_string(), group.to_string()))
    }

    /// Reads the existing topology without creating anything.
    pub fn lookup(
        api: &GitlabClient,
        config: &CourseConfig,
        roster: &Roster,
    ) -> Result<CourseTopology, ProvisionError> {
        let group = |p: String| -> Result<RemoteRef, ProvisionError> {
            api.find_group(&p)
                .map_err(api_err(&p))?
                .ok_or(ProvisionError::NotProvisioned(p))
        };
        let project = |p: String| -> Result<RemoteRef, ProvisionError> {
            api.find_project(&p)
                .map_err(api_err(&p))?
                .ok_or(ProvisionError::NotProvisioned(p))
        };
        let c = &config.course_id;
        let mut topo = CourseTopology {
            main_group: group(c.clone())?,
            assessment_groups: BTreeMap::new(),
            feedback_group: group(paths::feedback_group(c))?,
            course_project: project(paths::course_project(c))?,
            submissions: BTreeMap::new(),
            feedback: BTreeMap::new(),
        };
        for a in &config.assessments {
            topo.assessment_groups
                .insert(a.id.clone(), group(paths::assessment_group(c, &a.id))?);
            for g in roster.group_ids() {
                let key = (a.id.clone(), g.to_string());
                topo.submissions
                    .insert(key.clone(), project(paths::submission(c, &a.id, g))?);
                topo.feedback.insert(key, project(paths::feedback(c, &a.id, g))?);
            }
        }
        Ok(topo)
    }
}

fn api_err(path: &str) -> impl FnOnce(GitlabError) -> ProvisionError + '_ {
    api_fail(path)
}

/// Human-readable record of what provisioning changed.
pub type ChangeLog = Vec<String>;

fn note(log: &mut ChangeLog, change: Change, what: String) {
    match change {
        Change::Unchanged => {}
        Change::Created => log.push(format!("created {what}")),
        Change::Updated => log.push(format!("repaired {what}")),
    }
}

/// Creates or repairs the whole course topology. Running it again on a
/// converged server changes nothing.
pub fn provision_course(
    api: &GitlabClient,
    config: &CourseConfig,
    roster: &Roster,
) -> Result<(CourseTopology, ChangeLog), ProvisionError> {
    let mut log = ChangeLog::new();
    let c = &config.course_id;

    let (main_group, ch) = api.ensure_group_tracked(None, c).map_err(api_err(c))?;
    note(&mut log, ch, format!("group {c}"));
    for f in &config.faculty {
        let ch = api
            .set_member_role_tracked(&main_group, f, config.faculty_role)
            .map_err(api_err(c))?;
        note(
            &mut log,
            ch,
            format!("membership {f} as {} on {c}", config.faculty_role),
        );
    }

    let fb_path = paths::feedback_group(c);
    let (feedback_group, ch) = api
        .ensure_group_tracked(Some(&main_group), FEEDBACK_GROUP)
        .map_err(api_err(&fb_path))?;
    note(&mut log, ch, format!("group {fb_path}"));

    let cp_path = paths::course_project(c);
    let (course_project, ch) = api
        .ensure_project_tracked(&main_group, COURSE_PROJECT)
        .map_err(api_err(&cp_path))?;
    note(&mut log, ch, format!("project {cp_path}"));

    let mut topo = CourseTopology {
        main_group: main_group.clone(),
        assessment_groups: BTreeMap::new(),
        feedback_group: feedback_group.clone(),
        course_project: course_project.clone(),
        submissions: BTreeMap::new(),
        feedback: BTreeMap::new(),
    };

    let member = |log: &mut ChangeLog, target: &RemoteRef, user: &str, role: Role| -> Result<(), ProvisionError> {
        debug_assert!(role <= Role::Developer, "students never exceed Developer");
        let ch = api
            .set_member_role_tracked(target, user, role)
            .map_err(api_err(&target.full_path))?;
        note(log, ch, format!("membership {user} as {role} on {}", target.full_path));
        Ok(())
    };

    for entry in &roster.entries {
        for user in &entry.members {
            member(&mut log, &course_project, user, Role::Reporter)?;
        }
    }

    for a in &config.assessments {
        let ag_path = paths::assessment_group(c, &a.id);
        let (ag, ch) = api
            .ensure_group_tracked(Some(&main_group), &a.id)
            .map_err(api_err(&ag_path))?;
        note(&mut log, ch, format!("group {ag_path}"));
        for entry in &roster.entries {
            let g = &entry.group_id;
            let sp = paths::submission(c, &a.id, g);
            let (sub, ch) = api.ensure_project_tracked(&ag, g).map_err(api_err(&sp))?;
            note(&mut log, ch, format!("project {sp}"));
            let fp = paths::feedback(c, &a.id, g);
            let (fb, ch) = api
                .ensure_project_tracked(&feedback_group, &paths::feedback_project_name(&a.id, g))
                .map_err(api_err(&fp))?;
            note(&mut log, ch, format!("project {fp}"));
            for user in &entry.members {
                // a demoted member (lock or tamper) stays demoted
                let current = api.member_role(&sub, user).map_err(api_err(&sp))?;
                if current.is_none() {
                    member(&mut log, &sub, user, Role::Developer)?;
                }
                member(&mut log, &fb, user, Role::Reporter)?;
            }
            let key = (a.id.clone(), g.clone());
            topo.submissions.insert(key.clone(), sub);
            topo.feedback.insert(key, fb);
        }
        topo.assessment_groups.insert(a.id.clone(), ag);
    }
    Ok((topo, log))
}

/// The runner job committed to every submission repository. It only
/// writes an event file into the drop directory.
pub fn ci_template(config: &CourseConfig) -> String {
    let drop = config.drop_dir.to_string_lossy();
    format!(
        r#"# Managed by the course staff. DO NOT EDIT THIS FILE.
# Any change to it locks your repository until the faculty restores access.
stages:
  - submit

submit:
  stage: submit
  tags:
    - gradebot-{course}
  variables:
    GIT_STRATEGY: none
  script:
    - NOW="$(date +%s)"
    - ASSESSMENT="$(basename "$CI_PROJECT_NAMESPACE")"
    - GROUP="$(basename "$CI_PROJECT_PATH")"
    - EVENT="{drop}/${{NOW}}__${{ASSESSMENT}}__${{GROUP}}__${{CI_COMMIT_SHA}}.sub"
    - printf 'assessment_id=%s\ngroup_id=%s\ncommit=%s\npushed_at=%s\nrepo_path=%s\npusher=%s\n' "$ASSESSMENT" "$GROUP" "$CI_COMMIT_SHA" "$NOW" "$CI_PROJECT_PATH" "$GITLAB_USER_LOGIN" > "$EVENT.tmp"
    - mv "$EVENT.tmp" "$EVENT"
"#,
        course = config.course_id,
    )
}

pub fn canonical_ci_path(config: &CourseConfig, assessment_id: &str) -> PathBuf {
    config
        .work_dir
        .join("canonical")
        .join(format!("{assessment_id}{CI_FILE}"))
}

/// The CI file as stored at publish time, or freshly generated when the
/// assessment was never published from this host.
pub fn canonical_ci(config: &CourseConfig, assessment_id: &str) -> Vec<u8> {
    fs::read(canonical_ci_path(config, assessment_id)).unwrap_or_else(|_| ci_template(config).into_bytes())
}

const GITIGNORE_NOTE: &str = "# .gitlab-ci.yml is managed by the course staff: keep it versioned and unmodified";

const README_WARNING: &str = "> **Warning:** do not modify or delete `.gitlab-ci.yml`. It submits your work for \
evaluation, and any change to it locks this repository until the faculty restores access.";

fn has_statement(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(Result::ok).any(|e| {
                let p = e.path();
                p.is_file()
                    && (p.file_name().is_some_and(|n| n == "README.md")
                        || p.file_stem().is_some_and(|s| s == STATEMENT_STEM))
            })
        })
        .unwrap_or(false)
}

fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(src).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if entry.file_name() == ".git" {
            continue;
        }
        let rel = entry.path().strip_prefix(src).expect("below src");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            if let Some(p) = target.parent() {
                fs::create_dir_all(p)?;
            }
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

fn stage_materials(root: &Path, materials: &Path, ci: &str) -> std::io::Result<()> {
    copy_tree(materials, root)?;
    fs::write(root.join(CI_FILE), ci)?;

    let gi = root.join(".gitignore");
    let mut gitignore = fs::read_to_string(&gi).unwrap_or_default();
    if !gitignore.lines().any(|l| l == GITIGNORE_NOTE) {
        if !gitignore.is_empty() && !gitignore.ends_with('\n') {
            gitignore.push('\n');
        }
        gitignore.push_str(GITIGNORE_NOTE);
        gitignore.push('\n');
        fs::write(&gi, gitignore)?;
    }

    let rd = root.join("README.md");
    let mut readme = fs::read_to_string(&rd).unwrap_or_default();
    if !readme.contains(CI_WARNING_MARKER) {
        let mut head = format!("{CI_WARNING_MARKER}\n{README_WARNING}\n\n");
        head.push_str(&readme);
        readme = head;
        fs::write(&rd, readme)?;
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct PublishReport {
    pub pushed: Vec<String>,
    pub unchanged: Vec<String>,
    pub failures: Vec<(String, String)>,
}

/// Commits the materials, the CI file and the edit warnings into every
/// group's submission repository. Failing repositories are collected; the
/// rest still proceed.
pub fn publish_assessment(
    git: &Git,
    config: &CourseConfig,
    topology: &CourseTopology,
    assessment: &AssessmentConfig,
    materials_dir: &Path,
) -> Result<PublishReport, ProvisionError> {
    if !has_statement(materials_dir) {
        return Err(ProvisionError::MissingStatement(materials_dir.to_path_buf()));
    }
    let ci = ci_template(config);
    let canonical = canonical_ci_path(config, &assessment.id);
    if let Some(p) = canonical.parent() {
        fs::create_dir_all(p).map_err(|source| ProvisionError::Io {
            path: p.to_path_buf(),
            source,
        })?;
    }
    fs::write(&canonical, &ci).map_err(|source| ProvisionError::Io {
        path: canonical.clone(),
        source,
    })?;

    let mut report = PublishReport::default();
    for ((a, _g), repo) in topology.submissions.iter().filter(|((a, _), _)| a == &assessment.id) {
        debug_assert_eq!(a, &assessment.id);
        let path = repo.full_path.clone();
        let result = (|| -> Result<PushOutcome, GitError> {
            let url = repo.clone_url.as_deref().unwrap_or_default();
            let local = config.work_dir.join("publish").join(&path);
            let mut tree = git.clone_or_update(url, &local)?;
            stage_materials(&tree.local_path, materials_dir, &ci).map_err(|source| GitError::Io {
                path: local.clone(),
                source,
            })?;
            git.commit_all_push(&mut tree, &format!("Publish {}", assessment.id), &Author::bot())
        })();
        match result {
            Ok(PushOutcome::Pushed(_)) => report.pushed.push(path),
            Ok(PushOutcome::NothingToCommit(_)) => report.unchanged.push(path),
            Err(e) => {
                log::error!("publish_failed repo={path} error=\"{e}\"");
                report.failures.push((path, e.to_string()));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Default)]
pub struct LockReport {
    pub demotions: usize,
    pub errors: Vec<(String, String)>,
}

/// Demotes every member of every submission repository of the assessment
/// to Reporter. Feedback repositories are left alone.
pub fn lock_assessment(
    api: &GitlabClient,
    topology: &CourseTopology,
    assessment_id: &str,
) -> Result<LockReport, ProvisionError> {
    if !topology.assessment_groups.contains_key(assessment_id) {
        return Err(ProvisionError::UnknownAssessment(assessment_id.to_string()));
    }
    let mut report = LockReport::default();
    for ((a, _), repo) in &topology.submissions {
        if a != assessment_id {
            continue;
        }
        let members = match api.list_members(repo) {
            Ok(m) => m,
            Err(e) => {
                report.errors.push((repo.full_path.clone(), e.to_string()));
                continue;
            }
        };
        for m in members {
            if m.role.is_some_and(|r| r <= Role::Reporter) {
                continue;
            }
            match api.revoke_write(repo, &m.username) {
                Ok(true) => report.demotions += 1,
                Ok(false) => {}
                Err(e) => report
                    .errors
                    .push((format!("{}:{}", repo.full_path, m.username), e.to_string())),
            }
        }
    }
    Ok(report)
}
