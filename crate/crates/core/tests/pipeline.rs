mod common;

use std::fs;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{Course, ADDER, THREE};
use gradebot_core::commit_db::Status;
use gradebot_core::evaluator::{Evaluation, Overall, CI_FILE};
use gradebot_core::gitlab_api::Role;
use gradebot_core::intake::SubmissionEvent;
use gradebot_core::provisioner::{
    canonical_ci, lock_assessment, paths, publish_assessment, ProvisionError, CI_WARNING_MARKER,
};
use gradebot_core::service::{process_available, serve};

fn only_report(
    r: Vec<(
        gradebot_core::intake::Delivered,
        Result<Evaluation, gradebot_core::evaluator::EngineError>,
    )>,
) -> Box<gradebot_core::evaluator::EvaluationReport> {
    match r.into_iter().next() {
        Some((_, Ok(Evaluation::Report(rep)))) => rep,
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn publish_writes_ci_file_and_warnings_once() {
    let course = Course::new(&[("g1", &["alice"])]);
    let topo = course.ready();
    let sub = paths::submission("cs101", "lab1", "g1");
    let ci = course.mock.read_file(&sub, CI_FILE).unwrap();
    assert_eq!(ci, canonical_ci(&course.config, "lab1"));
    let readme = String::from_utf8(course.mock.read_file(&sub, "README.md").unwrap()).unwrap();
    assert!(readme.contains(CI_WARNING_MARKER));
    assert!(readme.contains("Print the sum"));
    let gitignore = String::from_utf8(course.mock.read_file(&sub, ".gitignore").unwrap()).unwrap();
    assert!(gitignore.contains(".gitlab-ci.yml"));
    let commits = course.mock.commit_count(&sub);

    let a = course.config.assessment("lab1").unwrap();
    let again = publish_assessment(&course.git(), &course.config, &topo, a, &course.materials()).unwrap();
    assert!(again.pushed.is_empty());
    assert_eq!(again.unchanged, vec![sub.clone()]);
    assert_eq!(course.mock.commit_count(&sub), commits);

    let empty = course.base().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(matches!(
        publish_assessment(&course.git(), &course.config, &topo, a, &empty),
        Err(ProvisionError::MissingStatement(_))
    ));
}

#[test]
fn init_repairs_drift_but_keeps_demotions() {
    let course = Course::new(&[("g1", &["alice", "bob"])]);
    let (topo, _) = course.init();
    let sub = paths::submission("cs101", "lab1", "g1");
    assert!(course.mock.remove_member(&sub, "bob"));
    let (_, log) = course.init();
    assert_eq!(log.len(), 1, "{log:?}");
    assert!(log[0].contains("bob"));
    assert_eq!(course.mock.assert_member_role(&sub, "bob"), Some(Role::Developer));

    let lock = lock_assessment(&course.api(), &topo, "lab1").unwrap();
    assert_eq!(lock.demotions, 2);
    let (_, log) = course.init();
    assert!(log.is_empty(), "{log:?}");
    assert_eq!(course.mock.assert_member_role(&sub, "alice"), Some(Role::Reporter));
    assert_eq!(
        course
            .mock
            .assert_member_role(&paths::feedback("cs101", "lab1", "g1"), "alice"),
        Some(Role::Reporter)
    );
    assert_eq!(course.mock.assert_member_role(&sub, "prof"), Some(Role::Maintainer));
    assert!(matches!(
        lock_assessment(&course.api(), &topo, "lab9"),
        Err(ProvisionError::UnknownAssessment(_))
    ));
}

#[test]
fn build_failure_is_reported_and_counted() {
    let extra = r#"build_cmd = "sh -c 'test -f main.sh || { echo missing main.sh >&2; exit 1; }'""#;
    let course = Course::with_extra(&[("g1", &["alice"])], extra);
    course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    course
        .mock
        .push_changes(
            &paths::submission("cs101", "lab1", "g1"),
            &[("notes.txt", b"x\n")],
            &["main.sh"],
            "alice",
        )
        .unwrap();
    let rep = only_report(process_available(&engine, &mut w));
    assert_eq!(rep.overall, Overall::CompileError);
    assert!(rep.compile_log.as_deref().unwrap().contains("missing main.sh"));
    let readme = course.readme("lab1", "g1");
    assert!(readme.contains("## Build failed"), "{readme}");
    assert!(readme.contains("missing main.sh"));
    let rec = engine.store().records().unwrap().pop().unwrap();
    assert_eq!(
        (rec.status, rec.tests_passed, rec.tests_failed),
        (Status::Evaluated, 0, 3)
    );
}

#[test]
fn tamper_dominates_cooldown_and_engine_never_writes_submissions() {
    let course = Course::new(&[("g1", &["alice"])]);
    course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    let sub = paths::submission("cs101", "lab1", "g1");
    course.push("lab1", "g1", "alice", &[("main.sh", ADDER)]);
    let head = course.mock.head(&sub);
    let rep = only_report(process_available(&engine, &mut w));
    assert_eq!(rep.overall, Overall::Evaluated);
    assert_eq!(rep.passed() + rep.failed(), 3);
    assert_eq!(course.mock.head(&sub), head);

    course.clock.advance(5);
    course.mock.push_changes(&sub, &[], &[CI_FILE], "alice").unwrap();
    let rep = only_report(process_available(&engine, &mut w));
    assert_eq!(rep.overall, Overall::Tampered);
    let st: Vec<Status> = engine.store().records().unwrap().iter().map(|r| r.status).collect();
    assert_eq!(st, vec![Status::Evaluated, Status::SkippedTamper]);
}

#[test]
fn analyzers_follow_the_builtin_section() {
    let extra = r#"
[[assessments.analyzers]]
name = "lines"
title = "Line count"
command = "sh -c 'cat {workdir}/main.sh | wc -l'"

[[assessments.analyzers]]
name = "broken"
title = "Broken tool"
command = "no-such-tool {workdir}"
"#;
    let course = Course::with_extra(&[("g1", &["alice"])], extra);
    course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    course.push("lab1", "g1", "alice", &[("main.sh", ADDER)]);
    let rep = only_report(process_available(&engine, &mut w));
    let titles: Vec<&str> = rep.analyzer_sections.iter().map(|s| s.title.as_str()).collect();
    assert_eq!(titles, ["Forbidden libraries", "Line count", "Broken tool"]);
    assert_eq!(rep.analyzer_sections[1].body, "2");
    assert!(!rep.analyzer_sections[2].ok);
    let readme = course.readme("lab1", "g1");
    assert!(
        readme.contains("## Hints: Broken tool\n\nIssues found:\n\nanalyzer unavailable"),
        "{readme}"
    );
}

#[test]
fn unknown_group_is_failed_without_side_effects() {
    let course = Course::new(&[("g1", &["alice"])]);
    course.ready();
    let engine = course.engine();
    let ev = SubmissionEvent {
        assessment_id: "lab1".into(),
        group_id: "ghost".into(),
        commit: "0123456789abcdef0123456789abcdef01234567".into(),
        pushed_at: 1,
        repo_path: "cs101/lab1/ghost".into(),
        pusher: "x".into(),
    };
    assert!(engine.evaluate(&ev).is_err());
    let recs = engine.store().records().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].status, Status::Failed);

    let bad_commit = SubmissionEvent {
        group_id: "g1".into(),
        repo_path: "cs101/lab1/g1".into(),
        ..ev
    };
    assert!(engine.evaluate(&bad_commit).is_err());
    assert_eq!(course.mock.commit_count(&course.feedback_path("lab1", "g1")), 0);
}

#[test]
fn coalesced_pushes_evaluate_latest_only() {
    let course = Course::new(&[("g1", &["alice"])]);
    course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    course.push("lab1", "g1", "alice", &[("main.sh", THREE)]);
    std::thread::sleep(Duration::from_millis(1100));
    let last = course.push("lab1", "g1", "alice", &[("main.sh", ADDER)]);
    let results = process_available(&engine, &mut w);
    assert_eq!(results.len(), 1);
    let rep = only_report(results);
    assert_eq!(rep.event.commit, last);
    let st: Vec<Status> = engine.store().records().unwrap().iter().map(|r| r.status).collect();
    assert_eq!(st, vec![Status::SkippedCooldown, Status::Evaluated]);
    assert_eq!(fs::read_dir(course.config.drop_dir.join("done")).unwrap().count(), 2);
}

#[test]
fn serve_survives_malformed_events_and_releases_on_stop() {
    let course = Course::new(&[("g1", &["alice"])]);
    course.ready();
    let engine = Arc::new(course.engine());
    let drop = course.config.drop_dir.clone();
    fs::write(drop.join("garbage.sub"), b"\xff\xfe not an event").unwrap();
    course.push("lab1", "g1", "alice", &[("main.sh", ADDER)]);

    let stop = Arc::new(AtomicBool::new(false));
    let handle = {
        let (engine, stop, watcher) = (engine.clone(), stop.clone(), course.watcher());
        std::thread::spawn(move || serve(engine, watcher, 2, &stop, Duration::from_millis(50)))
    };
    let t = Instant::now();
    while t.elapsed() < Duration::from_secs(10) && !course.readme("lab1", "g1").contains("3/3") {
        std::thread::sleep(Duration::from_millis(50));
    }
    stop.store(true, Ordering::SeqCst);
    handle.join().unwrap().unwrap();
    assert!(course.readme("lab1", "g1").contains("3/3"));
    assert!(drop.join("failed/garbage.sub").exists());
    assert!(drop.join("failed/garbage.sub.reason").exists());
    assert_eq!(fs::read_dir(drop.join("processing")).unwrap().count(), 0);
}
