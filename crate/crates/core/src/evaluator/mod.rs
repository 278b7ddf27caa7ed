//! Evaluation of one submission: tamper check, cooldown, build, I/O tests
//! and analyzers, composed into an [`EvaluationReport`].

mod analyzers;
mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::AssessmentConfig;
use crate::intake::SubmissionEvent;
use crate::sandbox::{self, RunOutcome, SandboxError, Verdict};

pub use analyzers::{forbidden_includes, run_analyzers, FORBIDDEN_TITLE};
pub use pipeline::{Engine, EngineError, EvalOptions, Evaluation, ReevalSummary};

pub const CI_FILE: &str = ".gitlab-ci.yml";
pub const COMPILE_LOG_LIMIT: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot read tests in {path}: {source}")]
    Tests {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad command template `{0}`")]
    Template(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub name: String,
    pub input_path: PathBuf,
    pub expected_path: PathBuf,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestOutcome {
    Pass,
    WrongOutput,
    TimeLimit,
    MemoryLimit,
    RuntimeError,
}

impl TestOutcome {
    pub fn label(self) -> &'static str {
        match self {
            TestOutcome::Pass => "Pass",
            TestOutcome::WrongOutput => "Wrong output",
            TestOutcome::TimeLimit => "Time limit exceeded",
            TestOutcome::MemoryLimit => "Memory limit exceeded",
            TestOutcome::RuntimeError => "Runtime error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestVerdict {
    pub name: String,
    pub outcome: TestOutcome,
    pub run: RunOutcome,
    pub expected: Vec<u8>,
    pub diff_excerpt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzerSection {
    pub title: String,
    pub body: String,
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overall {
    Evaluated,
    CompileError,
    Tampered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub event: SubmissionEvent,
    pub evaluated_at: i64,
    pub overall: Overall,
    pub test_verdicts: Vec<TestVerdict>,
    pub analyzer_sections: Vec<AnalyzerSection>,
    pub cooldown_until: i64,
    /// Build diagnostics when `overall` is `CompileError`.
    pub compile_log: Option<String>,
}

impl EvaluationReport {
    pub fn passed(&self) -> u32 {
        self.test_verdicts
            .iter()
            .filter(|v| v.outcome == TestOutcome::Pass)
            .count() as u32
    }

    pub fn failed(&self) -> u32 {
        self.test_verdicts.len() as u32 - self.passed()
    }
}

/// True when the CI file is missing or differs in any byte.
pub fn detect_tamper(tree: &Path, canonical_ci: &[u8]) -> bool {
    match fs::read(tree.join(CI_FILE)) {
        Ok(bytes) => bytes != canonical_ci,
        Err(_) => true,
    }
}

/// Same as [`detect_tamper`] for a CI file read from a revision.
pub fn is_tampered(ci_at_commit: Option<&[u8]>, canonical_ci: &[u8]) -> bool {
    ci_at_commit != Some(canonical_ci)
}

fn normalized_lines(bytes: &[u8]) -> Vec<&[u8]> {
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n')
        .map(|line| {
            let end = line.iter().rposition(|&b| b != b' ' && b != b'\t').map_or(0, |i| i + 1);
            &line[..end]
        })
        .collect()
}

/// Line-wise comparison ignoring trailing spaces and tabs; one missing
/// final newline is forgiven.
pub fn compare_output(actual: &[u8], expected: &[u8]) -> bool {
    normalized_lines(actual) == normalized_lines(expected)
}

/// Finds `<name>.in` / `<name>.out` pairs, with optional `<name>.args`
/// holding one argument per line. Sorted by name.
pub fn discover_tests(dir: &Path) -> Result<Vec<TestCase>, EvalError> {
    let err = |source| EvalError::Tests {
        path: dir.to_path_buf(),
        source,
    };
    let mut cases = Vec::new();
    for entry in fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("in") {
            continue;
        }
        let Some(name) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        let expected_path = dir.join(format!("{name}.out"));
        if !expected_path.is_file() {
            log::warn!("test_without_expected name={name} dir={}", dir.display());
            continue;
        }
        let args_path = dir.join(format!("{name}.args"));
        let args = if args_path.is_file() {
            fs::read_to_string(&args_path)
                .map_err(err)?
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect()
        } else {
            Vec::new()
        };
        cases.push(TestCase {
            name,
            input_path: path,
            expected_path,
            args,
        });
    }
    cases.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(cases)
}

/// Splits a command template and substitutes placeholders inside each
/// token, so substituted paths never get re-split.
pub fn expand_template(template: &str, vars: &[(&str, &str)]) -> Result<Vec<String>, EvalError> {
    let tokens = shell_words::split(template).map_err(|_| EvalError::Template(template.to_string()))?;
    if tokens.is_empty() {
        return Err(EvalError::Template(template.to_string()));
    }
    Ok(tokens
        .into_iter()
        .map(|t| vars.iter().fold(t, |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v)))
        .collect())
}

fn classify(run: &RunOutcome, expected: &[u8]) -> TestOutcome {
    match run.verdict {
        Verdict::Ok if compare_output(&run.stdout.bytes, expected) => TestOutcome::Pass,
        Verdict::Ok | Verdict::OutputLimit => TestOutcome::WrongOutput,
        Verdict::TimeLimit => TestOutcome::TimeLimit,
        Verdict::MemoryLimit => TestOutcome::MemoryLimit,
        Verdict::RuntimeError | Verdict::SandboxError => TestOutcome::RuntimeError,
    }
}

/// Runs every test of the assessment in `workdir`, in name order, without
/// stopping at failures.
pub fn run_tests(workdir: &Path, assessment: &AssessmentConfig) -> Result<Vec<TestVerdict>, EvalError> {
    let limits = assessment.limits();
    let workdir_s = workdir.to_string_lossy().into_owned();
    let mut out = Vec::new();
    for case in discover_tests(&assessment.tests_dir)? {
        let input = case.input_path.to_string_lossy().into_owned();
        let mut argv = expand_template(&assessment.run_cmd, &[("workdir", &workdir_s), ("test_input", &input)])?;
        argv.extend(case.args.iter().cloned());
        let expected = fs::read(&case.expected_path).map_err(|source| EvalError::Tests {
            path: case.expected_path.clone(),
            source,
        })?;
        let run = sandbox::run(&argv, Some(&case.input_path), workdir, &limits)?;
        if run.verdict == Verdict::SandboxError {
            log::error!("sandbox_fault test={} workdir={}", case.name, workdir.display());
        }
        let outcome = classify(&run, &expected);
        out.push(TestVerdict {
            name: case.name,
            outcome,
            run,
            expected,
            diff_excerpt: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AssessmentKind, DEFAULT_SOURCE_EXTENSIONS};
    use chrono::NaiveDate;
    use tempfile::TempDir;

    pub(crate) fn assessment(tests_dir: &Path, run_cmd: &str) -> AssessmentConfig {
        AssessmentConfig {
            id: "lab1".into(),
            kind: AssessmentKind::Lab,
            start_date: NaiveDate::from_ymd_opt(2024, 2, 1).unwrap(),
            deadline: None,
            cooldown_s: 60,
            cpu_limit_s: 2,
            mem_limit_bytes: 512 << 20,
            wall_limit_s: 4,
            output_visible: false,
            only_first_wrong_visible: true,
            tests_dir: tests_dir.to_path_buf(),
            build_cmd: None,
            run_cmd: run_cmd.into(),
            forbidden_patterns: vec![],
            source_extensions: DEFAULT_SOURCE_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
            analyzers: vec![],
        }
    }

    #[test]
    fn compare_examples() {
        assert!(compare_output(b"1 2\n", b"1 2\n"));
        assert!(compare_output(b"1 2", b"1 2\n"));
        assert!(!compare_output(b"1 2\n", b"1 3\n"));
        assert!(compare_output(b"1 2  \t\n3\n", b"1 2\n3\n"));
        assert!(!compare_output(b"1 2\n\n", b"1 2\n"));
        assert!(!compare_output(b" 1\n", b"1\n"));
        assert!(compare_output(b"", b""));
    }

    #[test]
    fn tamper_examples() {
        let dir = TempDir::new().unwrap();
        let canonical = b"stages: [submit]\n";
        fs::write(dir.path().join(CI_FILE), canonical).unwrap();
        assert!(!detect_tamper(dir.path(), canonical));
        fs::write(dir.path().join(CI_FILE), b"stages: [submiT]\n").unwrap();
        assert!(detect_tamper(dir.path(), canonical));
        fs::remove_file(dir.path().join(CI_FILE)).unwrap();
        assert!(detect_tamper(dir.path(), canonical));
        assert!(is_tampered(None, canonical));
        assert!(!is_tampered(Some(canonical), canonical));
    }

    #[test]
    fn template_expansion_keeps_paths_whole() {
        let argv = expand_template(
            "python3 {workdir}/main.py --in {test_input}",
            &[("workdir", "/a b"), ("test_input", "/t/x.in")],
        )
        .unwrap();
        assert_eq!(argv, vec!["python3", "/a b/main.py", "--in", "/t/x.in"]);
        assert!(expand_template("", &[]).is_err());
    }

    #[test]
    fn discovery_sorted_with_args() {
        let dir = TempDir::new().unwrap();
        for (n, body) in [("b", "2"), ("a", "1"), ("c", "3")] {
            fs::write(dir.path().join(format!("{n}.in")), body).unwrap();
            fs::write(dir.path().join(format!("{n}.out")), body).unwrap();
        }
        fs::write(dir.path().join("orphan.in"), "x").unwrap();
        fs::write(dir.path().join("b.args"), "-v\n--fast\n").unwrap();
        let cases = discover_tests(dir.path()).unwrap();
        let names: Vec<_> = cases.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(cases[1].args, vec!["-v", "--fast"]);
    }

    #[test]
    fn no_tests_no_verdicts() {
        let tests = TempDir::new().unwrap();
        let work = TempDir::new().unwrap();
        assert!(run_tests(work.path(), &assessment(tests.path(), "cat"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn echo_oracle_passes() {
        let tests = TempDir::new().unwrap();
        let work = TempDir::new().unwrap();
        fs::write(tests.path().join("t1.in"), "x\n").unwrap();
        fs::write(tests.path().join("t1.out"), "x\n").unwrap();
        let v = run_tests(work.path(), &assessment(tests.path(), "cat")).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].outcome, TestOutcome::Pass);
    }

    #[test]
    fn failures_do_not_short_circuit() {
        let tests = TempDir::new().unwrap();
        let work = TempDir::new().unwrap();
        for (n, input) in [("t1", "ok"), ("t2", "boom"), ("t3", "ok")] {
            fs::write(tests.path().join(format!("{n}.in")), format!("{input}\n")).unwrap();
            fs::write(tests.path().join(format!("{n}.out")), "ok\n").unwrap();
        }
        fs::write(
            work.path().join("prog.sh"),
            "read x; [ \"$x\" = boom ] && exit 1; echo \"$x\"\n",
        )
        .unwrap();
        let v = run_tests(work.path(), &assessment(tests.path(), "sh {workdir}/prog.sh")).unwrap();
        let outcomes: Vec<_> = v.iter().map(|t| t.outcome).collect();
        assert_eq!(
            outcomes,
            [TestOutcome::Pass, TestOutcome::RuntimeError, TestOutcome::Pass]
        );
        assert_eq!(v[1].run.exit_code, Some(1));
    }

    #[test]
    fn args_are_appended() {
        let tests = TempDir::new().unwrap();
        let work = TempDir::new().unwrap();
        fs::write(tests.path().join("t.in"), "").unwrap();
        fs::write(tests.path().join("t.out"), "-n|hello|").unwrap();
        fs::write(tests.path().join("t.args"), "-n\nhello\n").unwrap();
        let v = run_tests(
            work.path(),
            &assessment(tests.path(), "sh -c 'printf \"%s|\" \"$@\"' prog"),
        )
        .unwrap();
        assert_eq!(v[0].outcome, TestOutcome::Pass, "{:?}", v[0].run.stdout.text());
    }
}
