use std::fs;
use std::path::Path;

use walkdir::WalkDir;

use super::{expand_template, AnalyzerSection};
use crate::config::{AnalyzerSpec, OnFailure};
use crate::sandbox::{self, ResourceLimits, Verdict};

pub const FORBIDDEN_TITLE: &str = "Forbidden libraries";
pub const UNAVAILABLE: &str = "analyzer unavailable";

/// Flags every source line containing one of `patterns` as `file:line`.
pub fn forbidden_includes(workdir: &Path, patterns: &[String], extensions: &[String]) -> AnalyzerSection {
    let patterns: Vec<&String> = patterns.iter().filter(|p| !p.is_empty()).collect();
    let mut hits = Vec::new();
    if !patterns.is_empty() {
        let files = WalkDir::new(workdir)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| e.file_name() != ".git")
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file())
            .filter(|e| {
                e.path()
                    .extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| extensions.iter().any(|want| want == x))
            });
        for entry in files {
            let Ok(bytes) = fs::read(entry.path()) else { continue };
            let rel = entry
                .path()
                .strip_prefix(workdir)
                .unwrap_or(entry.path())
                .to_string_lossy()
                .into_owned();
            let text = String::from_utf8_lossy(&bytes);
            for (i, line) in text.lines().enumerate() {
                let found: Vec<&str> = patterns
                    .iter()
                    .filter(|p| line.contains(p.as_str()))
                    .map(|p| p.as_str())
                    .collect();
                if !found.is_empty() {
                    hits.push(format!("- `{}:{}` uses `{}`", rel, i + 1, found.join("`, `")));
                }
            }
        }
    }
    AnalyzerSection {
        title: FORBIDDEN_TITLE.to_string(),
        ok: hits.is_empty(),
        body: hits.join("\n"),
    }
}

/// Runs each analyzer in the sandbox with its own timeout. Output comes
/// from the `{out}` file when the command names one, else from stdout.
pub fn run_analyzers(
    workdir: &Path,
    specs: &[AnalyzerSpec],
    base_limits: &ResourceLimits,
    scratch: &Path,
) -> Vec<AnalyzerSection> {
    let mut sections = Vec::new();
    for spec in specs {
        match run_one(workdir, spec, base_limits, scratch) {
            Ok(body) => sections.push(AnalyzerSection {
                title: spec.title.clone(),
                body,
                ok: true,
            }),
            Err(reason) => {
                log::warn!("analyzer_failed name={} reason=\"{reason}\"", spec.name);
                if spec.on_failure == OnFailure::Warn {
                    sections.push(AnalyzerSection {
                        title: spec.title.clone(),
                        body: UNAVAILABLE.to_string(),
                        ok: false,
                    });
                }
            }
        }
    }
    sections
}

fn run_one(workdir: &Path, spec: &AnalyzerSpec, base: &ResourceLimits, scratch: &Path) -> Result<String, String> {
    fs::create_dir_all(scratch).map_err(|e| e.to_string())?;
    let out_path = scratch.join(format!("{}.out", spec.name));
    let _ = fs::remove_file(&out_path);
    let workdir_s = workdir.to_string_lossy().into_owned();
    let out_s = out_path.to_string_lossy().into_owned();
    let argv =
        expand_template(&spec.command, &[("workdir", &workdir_s), ("out", &out_s)]).map_err(|e| e.to_string())?;
    let mut limits = base.clone();
    limits.cpu_s = spec.timeout_s as f64;
    limits.wall_s = spec.timeout_s as f64;
    let run = sandbox::run(&argv, None, workdir, &limits).map_err(|e| e.to_string())?;
    if run.verdict != Verdict::Ok {
        return Err(format!("{:?} (exit {:?})", run.verdict, run.exit_code));
    }
    if spec.command.contains("{out}") {
        let bytes = fs::read(&out_path).map_err(|e| format!("no output file: {e}"))?;
        Ok(String::from_utf8_lossy(&bytes).trim_end().to_string())
    } else {
        Ok(run.stdout.text().trim_end().to_string())
    }
}
