//! End-to-end acceptance scenarios. Runs without the libtest harness so
//! every scenario prints one PASS/FAIL line.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{Course, ADDER, THREE};
use gradebot_core::commit_db::{days_since, parse_csv, Status};
use gradebot_core::evaluator::{EvalOptions, Evaluation, Overall, FORBIDDEN_TITLE};
use gradebot_core::gitlab_api::Role;
use gradebot_core::intake::SubmissionEvent;
use gradebot_core::mock_gitlab::MockError;
use gradebot_core::provisioner::{lock_assessment, paths};
use gradebot_core::reporting::{parse_dashboard, short_sha, DashboardRow, ACTUAL_HEADING, EXPECTED_HEADING};
use gradebot_core::sandbox::{self, ResourceLimits, Verdict, GRACE};
use gradebot_core::service::{process_available, serve};
use rand::{Rng, SeedableRng};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn statuses(course_engine: &gradebot_core::evaluator::Engine) -> Vec<(String, Status)> {
    course_engine
        .store()
        .records()
        .unwrap()
        .into_iter()
        .map(|r| (r.group_id, r.status))
        .collect()
}

fn happy_path() -> Outcome {
    let course = Course::new(&[("g1", &["alice"]), ("g2", &["bob"])]);
    course.ready();
    let engine = Arc::new(course.engine());
    let commit = course.push("lab1", "g1", "alice", &[("main.sh", ADDER)]);

    let stop = Arc::new(AtomicBool::new(false));
    let started = Instant::now();
    let server = {
        let (engine, stop, watcher) = (engine.clone(), stop.clone(), course.watcher());
        std::thread::spawn(move || serve(engine, watcher, 2, &stop, Duration::from_millis(100)))
    };
    let dashboard_path = "dashboards/lab1.md";
    let course_repo = paths::course_project("cs101");
    let mut done = false;
    while started.elapsed() < Duration::from_secs(10) {
        if course.mock.read_file(&course_repo, dashboard_path).is_some() {
            done = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let elapsed = started.elapsed();
    stop.store(true, Ordering::SeqCst);
    server.join().unwrap().map_err(|e| e.to_string())?;
    ensure!(done, "no dashboard after {elapsed:?}");

    let readme = course.readme("lab1", "g1");
    ensure!(readme.contains("3/3 tests passed"), "README: {readme}");
    ensure!(readme.matches("| Pass |").count() == 3, "README: {readme}");
    let tar = format!("code-{}.tar", short_sha(&commit));
    let files = course.mock.list_files(&course.feedback_path("lab1", "g1"));
    ensure!(files.contains(&tar), "feedback files {files:?}");
    let md = String::from_utf8(course.mock.read_file(&course_repo, dashboard_path).unwrap()).unwrap();
    let rows = parse_dashboard(&md);
    let g1 = rows.iter().find(|r| r.group_id == "g1").ok_or("g1 missing")?;
    ensure!(
        (g1.passed, g1.failed, g1.submissions, g1.days) == (3, 0, 1, 3),
        "g1 row {g1:?}"
    );
    println!("    served in {elapsed:.2?}");
    Ok(())
}

fn cooldown() -> Outcome {
    let course = Course::new(&[("g1", &["alice"])]);
    ensure!(
        course.config.assessment("lab1").unwrap().cooldown_s == 60,
        "lab default"
    );
    ensure!(
        course.config.assessment("proj1").unwrap().cooldown_s == 600,
        "project default"
    );
    course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    let fb = course.feedback_path("lab1", "g1");

    course.push("lab1", "g1", "alice", &[("main.sh", ADDER)]);
    process_available(&engine, &mut w);
    course.clock.advance(30);
    course.push("lab1", "g1", "alice", &[("main.sh", THREE)]);
    let r = process_available(&engine, &mut w);
    ensure!(
        matches!(r.as_slice(), [(_, Ok(Evaluation::SkippedCooldown { .. }))]),
        "second push: {r:?}"
    );
    let st = statuses(&engine);
    ensure!(
        st == vec![("g1".into(), Status::Evaluated), ("g1".into(), Status::SkippedCooldown)],
        "records {st:?}"
    );
    ensure!(
        course.mock.commit_count(&fb) == 1,
        "feedback commits {}",
        course.mock.commit_count(&fb)
    );

    course.clock.advance(30);
    course.push("lab1", "g1", "alice", &[("main.sh", THREE)]);
    process_available(&engine, &mut w);
    let st = statuses(&engine);
    ensure!(
        st.last() == Some(&("g1".into(), Status::Evaluated)),
        "boundary push: {st:?}"
    );
    ensure!(course.mock.commit_count(&fb) == 2, "feedback commits after boundary");
    Ok(())
}

fn tamper() -> Outcome {
    let course = Course::new(&[("g1", &["alice", "bob"]), ("g2", &["carol"])]);
    course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    course.push(
        "lab1",
        "g1",
        "alice",
        &[
            ("main.sh", ADDER),
            (".gitlab-ci.yml", "submit:\n  script: [\"true\"]\n"),
        ],
    );
    let r = process_available(&engine, &mut w);
    let report = match r.as_slice() {
        [(_, Ok(Evaluation::Report(rep)))] => rep.clone(),
        other => return Err(format!("unexpected {other:?}")),
    };
    ensure!(report.overall == Overall::Tampered, "overall {:?}", report.overall);
    ensure!(report.test_verdicts.is_empty(), "tests ran");
    let sub = paths::submission("cs101", "lab1", "g1");
    for u in ["alice", "bob"] {
        let role = course.mock.assert_member_role(&sub, u);
        ensure!(role == Some(Role::Reporter), "{u} is {role:?}");
    }
    let other = course
        .mock
        .assert_member_role(&paths::submission("cs101", "lab1", "g2"), "carol");
    ensure!(other == Some(Role::Developer), "carol is {other:?}");
    let readme = course.readme("lab1", "g1");
    ensure!(readme.contains("Tampered"), "README: {readme}");
    ensure!(readme.contains("reach out to the course faculty"), "README: {readme}");
    ensure!(!readme.contains("| Pass |"), "README lists tests");
    ensure!(
        statuses(&engine) == vec![("g1".into(), Status::SkippedTamper)],
        "records"
    );
    let again = course
        .mock
        .simulate_student_push(&sub, &[("main.sh", ADDER.as_bytes())], "alice");
    ensure!(
        matches!(again, Err(MockError::PushRejected(..))),
        "push after lockout: {again:?}"
    );
    Ok(())
}

fn sandbox_limits() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let cpu = 5.0;
    let limits = ResourceLimits::new(cpu, 1 << 30, 2.0 * cpu + 5.0);
    let marker = format!("{}", 900_000 + std::process::id() % 90_000);
    let script = format!("sleep {marker} & sleep {marker} & while :; do :; done");
    let argv: Vec<String> = vec!["sh".into(), "-c".into(), script];
    let t = Instant::now();
    let out = sandbox::run(&argv, None, dir.path(), &limits).map_err(|e| e.to_string())?;
    let wall = t.elapsed();
    ensure!(out.verdict == Verdict::TimeLimit, "verdict {:?}", out.verdict);
    ensure!(
        out.cpu_used_s >= cpu && out.cpu_used_s <= cpu + GRACE.as_secs_f64(),
        "cpu_used_s {}",
        out.cpu_used_s
    );
    ensure!(
        wall <= Duration::from_secs_f64(limits.wall_s) + Duration::from_secs(2),
        "wall {wall:?}"
    );
    let needle = format!("sleep\0{marker}");
    let orphans: Vec<String> = std::fs::read_dir("/proc")
        .unwrap()
        .filter_map(Result::ok)
        .filter(|e| e.file_name().to_string_lossy().chars().all(|c| c.is_ascii_digit()))
        .filter_map(|e| {
            let cmd = std::fs::read(e.path().join("cmdline")).ok()?;
            let stat = std::fs::read_to_string(e.path().join("stat")).ok()?;
            let state = stat.rsplit(')').next()?.trim_start().chars().next()?;
            (state != 'Z' && String::from_utf8_lossy(&cmd).contains(&needle))
                .then(|| e.file_name().to_string_lossy().into_owned())
        })
        .collect();
    ensure!(orphans.is_empty(), "orphans {orphans:?}");
    println!("    cpu_used_s={:.3} wall={wall:.2?}", out.cpu_used_s);
    Ok(())
}

fn visibility() -> Outcome {
    let course = Course::new(&[("g1", &["alice"])]);
    course.ready();
    let engine = course.engine();
    let commit = course.push("lab1", "g1", "alice", &[("main.sh", THREE)]);
    let event = SubmissionEvent {
        assessment_id: "lab1".into(),
        group_id: "g1".into(),
        commit,
        pushed_at: common::START,
        repo_path: paths::submission("cs101", "lab1", "g1"),
        pusher: "alice".into(),
    };
    let pinned = course.clock.advance(0);
    let opts = EvalOptions {
        bypass_cooldown: true,
        update_dashboard: false,
    };
    let mut bodies = Vec::new();
    for _ in 0..2 {
        course.clock.set(pinned);
        let r = engine.evaluate_with(&event, opts).map_err(|e| e.to_string())?;
        let Evaluation::Report(rep) = r else {
            return Err("skipped".into());
        };
        let outcomes: Vec<&str> = rep.test_verdicts.iter().map(|v| v.outcome.label()).collect();
        ensure!(
            outcomes == ["Pass", "Wrong output", "Wrong output"],
            "verdicts {outcomes:?}"
        );
        bodies.push(course.readme("lab1", "g1"));
    }
    let readme = &bodies[0];
    ensure!(
        readme.matches(EXPECTED_HEADING).count() == 1,
        "expected blocks in {readme}"
    );
    ensure!(readme.matches(ACTUAL_HEADING).count() == 1, "actual blocks in {readme}");
    ensure!(
        readme.contains("### Test `t2`") && !readme.contains("### Test `t3`"),
        "wrong test shown: {readme}"
    );
    ensure!(bodies[0] == bodies[1], "README differs between runs");
    Ok(())
}

fn brute_force_rows(course: &Course, csv: &[u8], now: i64) -> Vec<DashboardRow> {
    let records = parse_csv(csv).unwrap();
    let start = course.config.assessment("lab1").unwrap().start_date;
    let mut rows: Vec<DashboardRow> = course
        .roster
        .group_ids()
        .map(|g| {
            let mine: Vec<_> = records
                .iter()
                .filter(|r| r.group_id == g && r.assessment_id == "lab1")
                .collect();
            let last = mine.iter().rev().find(|r| r.status == Status::Evaluated);
            DashboardRow {
                group_id: g.to_string(),
                passed: last.map_or(0, |r| r.tests_passed),
                failed: last.map_or(0, |r| r.tests_failed),
                submissions: mine.len() as u32,
                days: days_since(start, now),
            }
        })
        .collect();
    // insertion sort with the declared comparator spelled out
    let before = |a: &DashboardRow, b: &DashboardRow| {
        a.passed > b.passed
            || (a.passed == b.passed && a.submissions < b.submissions)
            || (a.passed == b.passed && a.submissions == b.submissions && a.group_id < b.group_id)
    };
    for i in 1..rows.len() {
        let mut j = i;
        while j > 0 && before(&rows[j], &rows[j - 1]) {
            rows.swap(j, j - 1);
            j -= 1;
        }
    }
    rows
}

fn dashboard_oracle() -> Outcome {
    let groups: Vec<(String, Vec<String>)> = (1..=5).map(|i| (format!("g{i}"), vec![format!("s{i}")])).collect();
    let spec: Vec<(&str, Vec<&str>)> = groups
        .iter()
        .map(|(g, u)| (g.as_str(), u.iter().map(String::as_str).collect()))
        .collect();
    let refs: Vec<(&str, &[&str])> = spec.iter().map(|(g, u)| (*g, u.as_slice())).collect();
    let course = Course::new(&refs);
    course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x5eed);
    let programs = [ADDER, THREE, "exit 1\n", "read a b\necho $((a - b))\n"];
    for n in 0..52 {
        let g = rng.gen_range(1..=5);
        let prog = programs[rng.gen_range(0..programs.len())];
        course.clock.advance(rng.gen_range(0..90));
        course.push(
            "lab1",
            &format!("g{g}"),
            &format!("s{g}"),
            &[("main.sh", &format!("{prog}# {n}\n"))],
        );
        for (_, r) in process_available(&engine, &mut w) {
            r.map_err(|e| e.to_string())?;
        }
    }
    let mut csv = Vec::new();
    engine.store().dump_csv(&mut csv).map_err(|e| e.to_string())?;
    let records = parse_csv(csv.as_slice()).unwrap();
    let count = |s: Status| records.iter().filter(|r| r.status == s).count();
    ensure!(records.len() >= 50, "only {} records", records.len());
    ensure!(
        count(Status::Evaluated) > 0 && count(Status::SkippedCooldown) > 0,
        "not mixed"
    );

    let oracle = brute_force_rows(&course, &csv, engine.now());
    let rows = engine.dashboard_rows("lab1").map_err(|e| e.to_string())?;
    ensure!(rows == oracle, "engine rows {rows:?} vs oracle {oracle:?}");
    let md = course
        .mock
        .read_file(&paths::course_project("cs101"), "dashboards/lab1.md")
        .ok_or("no dashboard")?;
    let published = parse_dashboard(&String::from_utf8_lossy(&md));
    ensure!(published == oracle, "published {published:?} vs oracle {oracle:?}");
    println!(
        "    {} records: {} evaluated, {} skipped",
        records.len(),
        count(Status::Evaluated),
        count(Status::SkippedCooldown)
    );
    Ok(())
}

fn reevaluate() -> Outcome {
    let course = Course::new(&[("g1", &["alice"]), ("g2", &["bob"]), ("g3", &["carol"])]);
    let topo = course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    for (g, u) in [("g1", "alice"), ("g2", "bob"), ("g3", "carol")] {
        course.push("lab1", g, u, &[("main.sh", ADDER)]);
    }
    process_available(&engine, &mut w);
    course.clock.advance(10); // every group is inside its cooldown
    let before = engine.store().records().unwrap();

    let lock = lock_assessment(&course.api(), &topo, "lab1").map_err(|e| e.to_string())?;
    ensure!(lock.demotions == 3 && lock.errors.is_empty(), "lock {lock:?}");
    let summary = engine.reevaluate_all("lab1").map_err(|e| e.to_string())?;
    ensure!(summary.failed.is_empty(), "failed {:?}", summary.failed);

    let after = engine.store().records().unwrap();
    let fresh = &after[before.len()..];
    let mut per_group: BTreeMap<&str, usize> = BTreeMap::new();
    for r in fresh {
        ensure!(r.status == Status::Evaluated, "fresh record {r:?}");
        ensure!(r.evaluated_at == Some(engine.now()), "stale evaluated_at {r:?}");
        *per_group.entry(r.group_id.as_str()).or_default() += 1;
    }
    ensure!(
        per_group == BTreeMap::from([("g1", 1), ("g2", 1), ("g3", 1)]),
        "per group {per_group:?}"
    );
    let push = course.mock.simulate_student_push(
        &paths::submission("cs101", "lab1", "g2"),
        &[("main.sh", THREE.as_bytes())],
        "bob",
    );
    ensure!(
        matches!(push, Err(MockError::PushRejected(..))),
        "push after lock: {push:?}"
    );
    Ok(())
}

fn idempotent_init() -> Outcome {
    let course = Course::new(&[("g1", &["alice", "bob"]), ("g2", &["carol"])]);
    let (_, first) = course.init();
    ensure!(!first.is_empty(), "first run changed nothing");
    let state = course.mock.state();
    let (_, second) = course.init();
    ensure!(second.is_empty(), "second run changed {second:?}");
    ensure!(course.mock.state() == state, "server state differs");
    println!("    {} changes on first run, 0 on second", first.len());
    Ok(())
}

fn forbidden_library() -> Outcome {
    let course = Course::new(&[("g1", &["alice"])]);
    course.ready();
    let engine = course.engine();
    let mut w = course.watcher();
    let helper = "/* helper */\n#include <stdio.h>\n#include <string.h>\nint f(void) { return 0; }\n";
    course.push("lab1", "g1", "alice", &[("main.sh", ADDER), ("helper.c", helper)]);
    let r = process_available(&engine, &mut w);
    let sections = match r.as_slice() {
        [(_, Ok(Evaluation::Report(rep)))] => rep.analyzer_sections.clone(),
        other => return Err(format!("unexpected {other:?}")),
    };
    let s = sections
        .iter()
        .find(|s| s.title == FORBIDDEN_TITLE)
        .ok_or("no section")?;
    ensure!(!s.ok && s.body.contains("helper.c:3"), "section {s:?}");
    let readme = course.readme("lab1", "g1");
    ensure!(
        readme.contains(&format!("## Hints: {FORBIDDEN_TITLE}")) && readme.contains("helper.c:3"),
        "README: {readme}"
    );

    course.clock.advance(60);
    course
        .mock
        .push_changes(&paths::submission("cs101", "lab1", "g1"), &[], &["helper.c"], "alice")
        .map_err(|e| e.to_string())?;
    let r = process_available(&engine, &mut w);
    let sections = match r.as_slice() {
        [(_, Ok(Evaluation::Report(rep)))] => rep.analyzer_sections.clone(),
        other => return Err(format!("unexpected {other:?}")),
    };
    let s = sections
        .iter()
        .find(|s| s.title == FORBIDDEN_TITLE)
        .ok_or("no section")?;
    ensure!(s.ok && s.body.is_empty(), "section after removal {s:?}");
    Ok(())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 end-to-end happy path", happy_path),
        ("2 cooldown defaults and boundary", cooldown),
        ("3 tamper lockout", tamper),
        ("4 sandbox cpu limit and process cleanup", sandbox_limits),
        ("5 visibility of the first wrong output", visibility),
        ("6 dashboard matches brute-force recount", dashboard_oracle),
        ("7 reevaluate-all after lock", reevaluate),
        ("8 idempotent provisioning", idempotent_init),
        ("9 forbidden-library hints", forbidden_library),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match result {
            Ok(()) => println!("PASS  criterion {name} ({:.1?})", t.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
