//! Deterministic rendering of feedback READMEs, code archives and
//! dashboards, and publishing them through git.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat};
use walkdir::WalkDir;

use crate::config::AssessmentConfig;
use crate::evaluator::{EvaluationReport, Overall, TestOutcome, TestVerdict, CI_FILE};
use crate::git_ops::{Author, Git, GitError, PushOutcome, WorkTree};

/// Longest excerpt shown per expected/actual block.
pub const BLOCK_LIMIT: usize = 16 * 1024;
pub const EXPECTED_HEADING: &str = "Expected output:";
pub const ACTUAL_HEADING: &str = "Your output:";
pub const TAMPER_NOTICE: &str = "The CI configuration file `.gitlab-ci.yml` was modified in this submission. \
Write access to your submission repository has been revoked and no tests were run. \
Please reach out to the course faculty to restore access.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DashboardRow {
    pub group_id: String,
    pub passed: u32,
    pub failed: u32,
    pub submissions: u32,
    pub days: u32,
}

/// UTC ISO-8601 with a `Z` suffix.
pub fn iso8601(epoch_s: i64) -> String {
    DateTime::from_timestamp(epoch_s, 0)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| epoch_s.to_string())
}

pub fn short_sha(commit: &str) -> &str {
    &commit[..commit.len().min(8)]
}

/// A code fence longer than any backtick run inside `body`.
fn fenced(out: &mut String, lang: &str, body: &str) {
    let mut longest = 0;
    let mut run = 0;
    for c in body.chars() {
        if c == '`' {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    let fence = "`".repeat(longest.max(2) + 1);
    let _ = writeln!(out, "{fence}{lang}");
    out.push_str(body);
    if !body.ends_with('\n') {
        out.push('\n');
    }
    let _ = writeln!(out, "{fence}");
}

fn excerpt(bytes: &[u8]) -> String {
    let cut = &bytes[..bytes.len().min(BLOCK_LIMIT)];
    let mut s = String::from_utf8_lossy(cut).into_owned();
    if bytes.len() > BLOCK_LIMIT {
        if !s.ends_with('\n') {
            s.push('\n');
        }
        s.push_str("[... truncated ...]\n");
    }
    s
}

fn output_block(out: &mut String, v: &TestVerdict) {
    let _ = writeln!(out, "### Test `{}`\n", v.name);
    let _ = writeln!(out, "{EXPECTED_HEADING}\n");
    fenced(out, "text", &excerpt(&v.expected));
    let _ = writeln!(out, "\n{ACTUAL_HEADING}\n");
    let mut actual = excerpt(&v.run.stdout.bytes);
    if v.run.stdout.truncated {
        actual.push_str("[... output truncated by the sandbox ...]\n");
    }
    fenced(out, "text", &actual);
    if let Some(d) = &v.diff_excerpt {
        out.push('\n');
        fenced(out, "diff", d);
    }
    out.push('\n');
}

/// Tests whose expected/actual output the student may see.
pub fn visible_tests<'a>(report: &'a EvaluationReport, assessment: &AssessmentConfig) -> Vec<&'a TestVerdict> {
    if assessment.output_visible {
        return report.test_verdicts.iter().collect();
    }
    if assessment.only_first_wrong_visible {
        return report
            .test_verdicts
            .iter()
            .filter(|v| v.outcome != TestOutcome::Pass)
            .min_by(|a, b| a.name.cmp(&b.name))
            .into_iter()
            .collect();
    }
    Vec::new()
}

pub fn render_feedback(report: &EvaluationReport, assessment: &AssessmentConfig) -> Vec<u8> {
    let ev = &report.event;
    let mut out = String::new();
    let _ = writeln!(out, "# {} — {}\n", ev.assessment_id, ev.group_id);
    let _ = writeln!(out, "- Commit: `{}`", short_sha(&ev.commit));
    let _ = writeln!(out, "- Evaluated at: {}", iso8601(report.evaluated_at));
    let _ = writeln!(
        out,
        "- Next evaluation available at: {}",
        iso8601(report.cooldown_until)
    );
    let result = match report.overall {
        Overall::Evaluated => format!("{}/{} tests passed", report.passed(), report.test_verdicts.len()),
        Overall::CompileError => "build failed".to_string(),
        Overall::Tampered => "Tampered (submission locked)".to_string(),
    };
    let _ = writeln!(out, "- Result: {result}\n");

    match report.overall {
        Overall::Tampered => {
            let _ = writeln!(out, "## Submission locked\n\n{TAMPER_NOTICE}\n");
        }
        Overall::CompileError => {
            let _ = writeln!(out, "## Build failed\n");
            fenced(&mut out, "text", report.compile_log.as_deref().unwrap_or(""));
            out.push('\n');
        }
        Overall::Evaluated => {
            let _ = writeln!(out, "## Results\n");
            let _ = writeln!(out, "| Test | Verdict |\n|------|---------|");
            for v in &report.test_verdicts {
                let _ = writeln!(out, "| {} | {} |", v.name, v.outcome.label());
            }
            out.push('\n');
            let visible = visible_tests(report, assessment);
            if !visible.is_empty() {
                let _ = writeln!(out, "## Output\n");
                for v in visible {
                    output_block(&mut out, v);
                }
            }
        }
    }

    for s in &report.analyzer_sections {
        let _ = writeln!(out, "## Hints: {}\n", s.title);
        let status = if s.ok { "No issues found." } else { "Issues found:" };
        let _ = writeln!(out, "{status}\n");
        if !s.body.is_empty() {
            let _ = writeln!(out, "{}\n", s.body);
        }
    }

    let _ = writeln!(
        out,
        "---\n\n> **Do not edit `{CI_FILE}`** in your submission repository. Any change to it locks the repository until the faculty restores access."
    );
    out.into_bytes()
}

fn ustar_header(size: u64, mode: u32, mtime: u64) -> tar::Header {
    let mut h = tar::Header::new_ustar();
    h.set_size(size);
    h.set_mode(mode);
    h.set_mtime(mtime);
    h.set_uid(0);
    h.set_gid(0);
    let _ = h.set_username("");
    let _ = h.set_groupname("");
    h
}

/// Ustar archive of the tree without `.git`, entries sorted by path, every
/// entry stamped with `mtime`.
pub fn package_code(tree: &Path, mtime: i64) -> std::io::Result<Vec<u8>> {
    use std::os::unix::fs::PermissionsExt;

    let mut entries: Vec<(String, std::path::PathBuf)> = WalkDir::new(tree)
        .into_iter()
        .filter_entry(|e| !(e.depth() == 1 && e.file_name() == ".git"))
        .filter_map(Result::ok)
        .filter(|e| e.depth() > 0 && !e.file_type().is_dir())
        .map(|e| {
            let rel = e
                .path()
                .strip_prefix(tree)
                .unwrap_or(e.path())
                .to_string_lossy()
                .into_owned();
            (rel, e.path().to_path_buf())
        })
        .collect();
    entries.sort();

    let mtime = mtime.max(0) as u64;
    let mut builder = tar::Builder::new(Vec::new());
    for (rel, path) in entries {
        let meta = fs::symlink_metadata(&path)?;
        if meta.file_type().is_symlink() {
            let target = fs::read_link(&path)?;
            let mut h = ustar_header(0, 0o777, mtime);
            h.set_entry_type(tar::EntryType::Symlink);
            builder.append_link(&mut h, &rel, &target)?;
        } else if meta.is_file() {
            let data = fs::read(&path)?;
            let mode = if meta.permissions().mode() & 0o111 != 0 {
                0o755
            } else {
                0o644
            };
            let mut h = ustar_header(data.len() as u64, mode, mtime);
            h.set_entry_type(tar::EntryType::Regular);
            builder.append_data(&mut h, &rel, &data[..])?;
        }
    }
    builder.into_inner()
}

/// Leaderboard order: passed desc, submissions asc, group id asc.
pub fn sort_rows(rows: &mut [DashboardRow]) {
    rows.sort_by(|a, b| {
        b.passed
            .cmp(&a.passed)
            .then(a.submissions.cmp(&b.submissions))
            .then_with(|| a.group_id.cmp(&b.group_id))
    });
}

pub fn render_dashboard(rows: &[DashboardRow], assessment_id: &str, generated_at: i64) -> Vec<u8> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut out = String::new();
    let _ = writeln!(out, "# Dashboard — {assessment_id}\n");
    let _ = writeln!(out, "Generated at: {}\n", iso8601(generated_at));
    let _ = writeln!(out, "| Group | Passed | Failed | Submissions | Days |");
    let _ = writeln!(out, "|-------|--------|--------|-------------|------|");
    for r in &rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.group_id, r.passed, r.failed, r.submissions, r.days
        );
    }
    out.into_bytes()
}

/// Rows back out of a rendered dashboard, in rendered order.
pub fn parse_dashboard(markdown: &str) -> Vec<DashboardRow> {
    markdown
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| Group"))
        .filter_map(|l| {
            let cells: Vec<&str> = l.trim_matches('|').split('|').map(str::trim).collect();
            if cells.len() != 5 {
                return None;
            }
            Some(DashboardRow {
                group_id: cells[0].to_string(),
                passed: cells[1].parse().ok()?,
                failed: cells[2].parse().ok()?,
                submissions: cells[3].parse().ok()?,
                days: cells[4].parse().ok()?,
            })
        })
        .collect()
}

fn io_err(path: &Path, source: std::io::Error) -> GitError {
    GitError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `README.md` and `code-<shortsha>.tar` into the feedback tree,
/// dropping archives of earlier submissions, and pushes.
pub fn publish(
    git: &Git,
    feedback: &mut WorkTree,
    report: &[u8],
    archive: Option<(&str, &[u8])>,
    message: &str,
) -> Result<PushOutcome, GitError> {
    let root = feedback.local_path.clone();
    fs::write(root.join("README.md"), report).map_err(|e| io_err(&root, e))?;
    if let Some((short, tar_bytes)) = archive {
        let keep = format!("code-{short}.tar");
        for entry in fs::read_dir(&root).map_err(|e| io_err(&root, e))?.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with("code-") && name.ends_with(".tar") && name != keep {
                fs::remove_file(entry.path()).map_err(|e| io_err(&root, e))?;
            }
        }
        fs::write(root.join(&keep), tar_bytes).map_err(|e| io_err(&root, e))?;
    }
    git.commit_all_push(feedback, message, &Author::bot())
}

pub fn publish_dashboard(
    git: &Git,
    course: &mut WorkTree,
    assessment_id: &str,
    bytes: &[u8],
) -> Result<PushOutcome, GitError> {
    let dir = course.local_path.join("dashboards");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    fs::write(dir.join(format!("{assessment_id}.md")), bytes).map_err(|e| io_err(&dir, e))?;
    git.commit_all_push(course, &format!("Update dashboard for {assessment_id}"), &Author::bot())
}
