#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gradebot_core::clock::ManualClock;
use gradebot_core::commit_db::Store;
use gradebot_core::config::{parse_config, CourseConfig};
use gradebot_core::evaluator::Engine;
use gradebot_core::git_ops::Git;
use gradebot_core::gitlab_api::{GitlabClient, RetryPolicy};
use gradebot_core::intake::{Catalog, DropDir, Watcher};
use gradebot_core::mock_gitlab::{MockFixture, MockGitlab};
use gradebot_core::provisioner::{
    parse_roster, paths, provision_course, publish_assessment, ChangeLog, CourseTopology, Roster,
};
use tempfile::TempDir;

pub const START: i64 = 1_706_745_600; // 2024-02-01T00:00:00Z

pub const ADDER: &str = "read a b\necho $((a + b))\n";
pub const THREE: &str = "read a b\necho 3\n";

/// A throwaway course on a mock server: config, roster, tests and
/// materials on disk.
pub struct Course {
    pub root: TempDir,
    pub mock: MockGitlab,
    pub config: CourseConfig,
    pub config_path: PathBuf,
    pub roster: Roster,
    pub clock: Arc<ManualClock>,
}

pub fn groups_text(groups: &[(&str, &[&str])]) -> String {
    groups
        .iter()
        .map(|(g, users)| format!("{g}: {}\n", users.join(", ")))
        .collect()
}

impl Course {
    pub fn new(groups: &[(&str, &[&str])]) -> Course {
        Self::with_extra(groups, "")
    }

    /// `extra` is appended to the lab1 table.
    pub fn with_extra(groups: &[(&str, &[&str])], extra: &str) -> Course {
        let root = TempDir::new().unwrap();
        let base = root.path();
        let mut users: Vec<&str> = vec!["prof"];
        for (_, us) in groups {
            users.extend(us.iter());
        }
        let drop = base.join("drop");
        let mock = MockGitlab::start(MockFixture::new(&base.join("server"), &drop, &users)).unwrap();

        let tests = base.join("tests/lab1");
        fs::create_dir_all(&tests).unwrap();
        for (name, input, expected) in [
            ("t1", "1 2\n", "3\n"),
            ("t2", "10 20\n", "30\n"),
            ("t3", "-1 1\n", "0\n"),
        ] {
            fs::write(tests.join(format!("{name}.in")), input).unwrap();
            fs::write(tests.join(format!("{name}.out")), expected).unwrap();
        }
        let materials = base.join("materials/lab1");
        fs::create_dir_all(&materials).unwrap();
        fs::write(
            materials.join("README.md"),
            "# Lab 1\n\nPrint the sum of two integers.\n",
        )
        .unwrap();
        fs::write(materials.join("main.sh"), "# your solution here\n").unwrap();

        fs::write(base.join("roster.txt"), groups_text(groups)).unwrap();
        let text = format!(
            r#"course_id = "cs101"
server_base_url = "{url}"
auth_token_env = "GRADEBOT_TEST_TOKEN"
drop_dir = "drop"
work_dir = "work"
state_db_path = "state/commits.db"
roster_path = "roster.txt"
faculty = ["prof"]

[[assessments]]
id = "lab1"
kind = "Lab"
start_date = "2024-02-01"
cpu_limit_s = 2
wall_limit_s = 5
mem_limit_bytes = 536870912
tests_dir = "tests/lab1"
run_cmd = "sh {{workdir}}/main.sh"
forbidden_patterns = ["string.h"]
{extra}

[[assessments]]
id = "proj1"
kind = "Project"
start_date = "2024-02-01"
deadline = "2024-06-01T23:59:00Z"
tests_dir = "tests/lab1"
run_cmd = "sh {{workdir}}/main.sh"
"#,
            url = mock.base_url()
        );
        let config_path = base.join("course.toml");
        fs::write(&config_path, &text).unwrap();
        let config = parse_config(&text, base).unwrap();
        let roster = parse_roster(&groups_text(groups)).unwrap();
        Course {
            root,
            mock,
            config,
            config_path,
            roster,
            clock: Arc::new(ManualClock::new(START + 3 * 86_400)),
        }
    }

    pub fn base(&self) -> &Path {
        self.root.path()
    }

    pub fn materials(&self) -> PathBuf {
        self.base().join("materials/lab1")
    }

    pub fn api(&self) -> GitlabClient {
        GitlabClient::new(self.mock.base_url(), self.mock.token()).with_retry(RetryPolicy::none())
    }

    pub fn git(&self) -> Git {
        Git::with_token(self.mock.token())
    }

    pub fn init(&self) -> (CourseTopology, ChangeLog) {
        provision_course(&self.api(), &self.config, &self.roster).unwrap()
    }

    pub fn publish(&self, topology: &CourseTopology, id: &str) {
        let a = self.config.assessment(id).unwrap();
        let report = publish_assessment(&self.git(), &self.config, topology, a, &self.materials()).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
    }

    /// init + publish lab1.
    pub fn ready(&self) -> CourseTopology {
        let (topo, _) = self.init();
        self.publish(&topo, "lab1");
        topo
    }

    pub fn engine(&self) -> Engine {
        fs::create_dir_all(self.config.state_db_path.parent().unwrap()).unwrap();
        let store = Store::open(&self.config.state_db_path).unwrap();
        Engine::new(
            self.config.clone(),
            self.roster.clone(),
            self.api(),
            self.git(),
            store,
            self.clock.clone(),
        )
    }

    pub fn watcher(&self) -> Watcher {
        let catalog = Catalog::new(
            self.config.assessments.iter().map(|a| a.id.clone()),
            self.roster.group_ids().map(str::to_string),
        );
        Watcher::new(DropDir::open(&self.config.drop_dir).unwrap(), catalog)
    }

    pub fn push(&self, assessment: &str, group: &str, author: &str, files: &[(&str, &str)]) -> String {
        let files: Vec<(&str, &[u8])> = files.iter().map(|(n, b)| (*n, b.as_bytes())).collect();
        self.mock
            .simulate_student_push(&paths::submission("cs101", assessment, group), &files, author)
            .unwrap()
    }

    pub fn feedback_path(&self, assessment: &str, group: &str) -> String {
        paths::feedback("cs101", assessment, group)
    }

    pub fn readme(&self, assessment: &str, group: &str) -> String {
        String::from_utf8(
            self.mock
                .read_file(&self.feedback_path(assessment, group), "README.md")
                .unwrap_or_default(),
        )
        .unwrap()
    }

    pub fn event_files(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = fs::read_dir(&self.config.drop_dir)
            .unwrap()
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "sub"))
            .collect();
        v.sort();
        v
    }
}
