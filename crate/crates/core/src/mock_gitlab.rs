//! In-process stand-in for a GitLab server, used by tests and demos.
//!
//! Serves the REST subset the client uses over real HTTP on a loopback
//! port, backs every project with a local bare repository, and plays the CI
//! runner: a push to a submission repository drops an event file into the
//! configured directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::Serialize;
use serde_json::{json, Value};

use crate::git_ops::{Author, Git, GitError, PushOutcome};
use crate::gitlab_api::{RefKind, Role};
use crate::intake::SubmissionEvent;
use crate::provisioner::{COURSE_PROJECT, FEEDBACK_GROUP};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MockGroup {
    pub id: u64,
    pub path: String,
    pub full_path: String,
    pub parent_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MockProject {
    pub id: u64,
    pub path: String,
    pub full_path: String,
    pub namespace_id: u64,
}

/// Server-side state. Equality is deep, which makes it usable as an oracle
/// for idempotency checks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct MockState {
    pub groups: BTreeMap<u64, MockGroup>,
    pub projects: BTreeMap<u64, MockProject>,
    pub users: BTreeMap<u64, String>,
    /// (kind, namespace or project id, user id) → access level.
    pub members: BTreeMap<(RefKind, u64, u64), u32>,
    next_id: u64,
}

impl MockState {
    fn next(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn group_by_path(&self, p: &str) -> Option<&MockGroup> {
        self.groups.values().find(|g| g.full_path == p)
    }

    fn project_by_path(&self, p: &str) -> Option<&MockProject> {
        self.projects.values().find(|g| g.full_path == p)
    }

    fn user_id(&self, name: &str) -> Option<u64> {
        self.users.iter().find(|(_, n)| n.as_str() == name).map(|(id, _)| *id)
    }

    fn path_taken(&self, p: &str) -> bool {
        self.group_by_path(p).is_some() || self.project_by_path(p).is_some()
    }
}

#[derive(Debug, Clone)]
pub struct MockFixture {
    pub token: String,
    pub users: Vec<String>,
    pub repo_root: PathBuf,
    pub drop_dir: PathBuf,
    /// Largest page the server hands out for member listings.
    pub max_page_size: usize,
}

impl MockFixture {
    pub fn new(root: &Path, drop_dir: &Path, users: &[&str]) -> Self {
        MockFixture {
            token: "mock-token".into(),
            users: users.iter().map(|u| u.to_string()).collect(),
            repo_root: root.join("repos"),
            drop_dir: drop_dir.to_path_buf(),
            max_page_size: 100,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error("unknown project {0}")]
    UnknownProject(String),
    #[error("push rejected: {0} may not push to {1}")]
    PushRejected(String, String),
    #[error(transparent)]
    Git(#[from] GitError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

struct Inner {
    state: MockState,
    log: Vec<(String, String)>,
    fail_next: usize,
}

struct Shared {
    inner: Mutex<Inner>,
    fixture: MockFixture,
    base_url: String,
    git: Git,
}

pub struct MockGitlab {
    shared: Arc<Shared>,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

struct Reply {
    status: u16,
    body: Value,
    headers: Vec<(String, String)>,
}

impl Reply {
    fn json(status: u16, body: Value) -> Reply {
        Reply {
            status,
            body,
            headers: Vec::new(),
        }
    }

    fn not_found() -> Reply {
        Reply::json(404, json!({ "message": "404 Not Found" }))
    }
}

impl MockGitlab {
    pub fn start(fixture: MockFixture) -> std::io::Result<MockGitlab> {
        fs::create_dir_all(&fixture.repo_root)?;
        fs::create_dir_all(&fixture.drop_dir)?;
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let port = server.server_addr().to_ip().map(|a| a.port()).unwrap_or(0);
        let mut state = MockState::default();
        for u in &fixture.users {
            let id = state.next();
            state.users.insert(id, u.clone());
        }
        let shared = Arc::new(Shared {
            inner: Mutex::new(Inner {
                state,
                log: Vec::new(),
                fail_next: 0,
            }),
            fixture,
            base_url: format!("http://127.0.0.1:{port}"),
            git: Git::new(),
        });
        let server = Arc::new(server);
        let (srv, sh) = (server.clone(), shared.clone());
        let thread = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let method = req.method().as_str().to_string();
                let url = req.url().to_string();
                let token = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("PRIVATE-TOKEN"))
                    .map(|h| h.value.as_str().to_string());
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let reply = sh.handle(&method, &url, token.as_deref(), &body);
                let mut resp = tiny_http::Response::from_string(reply.body.to_string())
                    .with_status_code(reply.status)
                    .with_header(tiny_http::Header::from_bytes("Content-Type", "application/json").expect("header"));
                for (k, v) in reply.headers {
                    resp.add_header(tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()).expect("header"));
                }
                let _ = req.respond(resp);
            }
        });
        Ok(MockGitlab {
            shared,
            server,
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.shared.base_url
    }

    pub fn token(&self) -> &str {
        &self.shared.fixture.token
    }

    pub fn drop_dir(&self) -> &Path {
        &self.shared.fixture.drop_dir
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.shared.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn state(&self) -> MockState {
        self.lock().state.clone()
    }

    pub fn request_log(&self) -> Vec<(String, String)> {
        self.lock().log.clone()
    }

    pub fn add_user(&self, name: &str) -> u64 {
        let mut inner = self.lock();
        if let Some(id) = inner.state.user_id(name) {
            return id;
        }
        let id = inner.state.next();
        inner.state.users.insert(id, name.to_string());
        id
    }

    /// The next `n` API requests answer 500.
    pub fn fail_next(&self, n: usize) {
        self.lock().fail_next = n;
    }

    /// Effective role: the highest of the direct project membership and any
    /// membership on an ancestor group.
    pub fn assert_member_role(&self, project_path: &str, username: &str) -> Option<Role> {
        let inner = self.lock();
        let st = &inner.state;
        let uid = st.user_id(username)?;
        let project = st.project_by_path(project_path)?;
        let mut best = st.members.get(&(RefKind::Project, project.id, uid)).copied();
        let mut ns = Some(project.namespace_id);
        while let Some(gid) = ns {
            if let Some(l) = st.members.get(&(RefKind::Group, gid, uid)) {
                best = Some(best.map_or(*l, |b| b.max(*l)));
            }
            ns = st.groups.get(&gid).and_then(|g| g.parent_id);
        }
        best.and_then(Role::from_access_level)
    }

    /// Drops a direct project membership, bypassing the API. Used to
    /// simulate drift.
    pub fn remove_member(&self, project_path: &str, username: &str) -> bool {
        let mut inner = self.lock();
        let st = &mut inner.state;
        let (Some(uid), Some(pid)) = (st.user_id(username), st.project_by_path(project_path).map(|p| p.id)) else {
            return false;
        };
        st.members.remove(&(RefKind::Project, pid, uid)).is_some()
    }

    pub fn clone_url(&self, project_path: &str) -> Option<String> {
        let inner = self.lock();
        inner
            .state
            .project_by_path(project_path)
            .map(|_| self.shared.repo_path(project_path).to_string_lossy().into_owned())
    }

    /// Commits `files` to the project as `author` and, for submission
    /// repositories, writes the runner's event file. Authors below
    /// Developer are rejected.
    pub fn simulate_student_push(
        &self,
        project_path: &str,
        files: &[(&str, &[u8])],
        author: &str,
    ) -> Result<String, MockError> {
        self.push_changes(project_path, files, &[], author)
    }

    /// As [`simulate_student_push`](Self::simulate_student_push), also
    /// deleting `removed` paths.
    pub fn push_changes(
        &self,
        project_path: &str,
        files: &[(&str, &[u8])],
        removed: &[&str],
        author: &str,
    ) -> Result<String, MockError> {
        let url = self
            .clone_url(project_path)
            .ok_or_else(|| MockError::UnknownProject(project_path.to_string()))?;
        if self
            .assert_member_role(project_path, author)
            .is_none_or(|r| r < Role::Developer)
        {
            return Err(MockError::PushRejected(author.to_string(), project_path.to_string()));
        }
        let scratch = tempfile_dir(&self.shared.fixture.repo_root)?;
        let git = &self.shared.git;
        let mut tree = git.clone_or_update(&url, &scratch.join("w"))?;
        for (name, bytes) in files {
            let p = tree.local_path.join(name);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, bytes)?;
        }
        for name in removed {
            let _ = fs::remove_file(tree.local_path.join(name));
        }
        let who = Author::new(author, format!("{author}@students.invalid"));
        let outcome = git.commit_all_push(&mut tree, "student push", &who);
        let _ = fs::remove_dir_all(&scratch);
        let commit = match outcome? {
            PushOutcome::Pushed(c) => c,
            PushOutcome::NothingToCommit(c) => c.unwrap_or_default(),
        };
        if let Some((assessment, group)) = submission_ids(project_path) {
            let event = SubmissionEvent {
                assessment_id: assessment,
                group_id: group,
                commit: commit.clone(),
                pushed_at: now(),
                repo_path: project_path.to_string(),
                pusher: author.to_string(),
            };
            let dir = &self.shared.fixture.drop_dir;
            let tmp = dir.join(format!("{}.tmp", event.file_name()));
            fs::write(&tmp, event.to_body())?;
            fs::rename(&tmp, dir.join(event.file_name()))?;
        }
        Ok(commit)
    }

    /// Head commit of a project's default branch.
    pub fn head(&self, project_path: &str) -> Option<String> {
        let repo = self.shared.repo_path(project_path);
        let out = std::process::Command::new("git")
            .args(["rev-parse", "--verify", "-q", "refs/heads/main"])
            .current_dir(&repo)
            .output()
            .ok()?;
        out.status
            .success()
            .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
    }

    /// Number of commits on the default branch.
    pub fn commit_count(&self, project_path: &str) -> usize {
        let repo = self.shared.repo_path(project_path);
        std::process::Command::new("git")
            .args(["rev-list", "--count", "refs/heads/main"])
            .current_dir(&repo)
            .output()
            .ok()
            .filter(|o| o.status.success())
            .and_then(|o| String::from_utf8_lossy(&o.stdout).trim().parse().ok())
            .unwrap_or(0)
    }

    /// File contents at the head of a project's default branch.
    pub fn read_file(&self, project_path: &str, file: &str) -> Option<Vec<u8>> {
        let repo = self.shared.repo_path(project_path);
        let out = std::process::Command::new("git")
            .args(["cat-file", "blob", &format!("refs/heads/main:{file}")])
            .current_dir(&repo)
            .output()
            .ok()?;
        out.status.success().then_some(out.stdout)
    }

    /// Paths at the head of a project's default branch.
    pub fn list_files(&self, project_path: &str) -> Vec<String> {
        let repo = self.shared.repo_path(project_path);
        std::process::Command::new("git")
            .args(["ls-tree", "-r", "--name-only", "refs/heads/main"])
            .current_dir(&repo)
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).lines().map(str::to_string).collect())
            .unwrap_or_default()
    }

    pub fn shutdown(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockGitlab {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn now() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(1)
}

fn tempfile_dir(root: &Path) -> std::io::Result<PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    let p = root.join(format!(
        ".push-{}-{}",
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir_all(&p)?;
    Ok(p)
}

/// `<course>/<assessment>/<group>` → (assessment, group), for submission
/// repositories only.
fn submission_ids(project_path: &str) -> Option<(String, String)> {
    let parts: Vec<&str> = project_path.split('/').collect();
    match parts.as_slice() {
        [_, assessment, group] if *assessment != FEEDBACK_GROUP && *group != COURSE_PROJECT => {
            Some((assessment.to_string(), group.to_string()))
        }
        _ => None,
    }
}

fn decode_segment(s: &str) -> String {
    url::form_urlencoded::parse(format!("x={s}").as_bytes())
        .next()
        .map(|(_, v)| v.into_owned())
        .unwrap_or_default()
}

fn query_param(query: &str, key: &str) -> Option<String> {
    url::form_urlencoded::parse(query.as_bytes())
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.into_owned())
}

impl Shared {
    fn repo_path(&self, full_path: &str) -> PathBuf {
        self.fixture.repo_root.join(format!("{full_path}.git"))
    }

    fn handle(&self, method: &str, url: &str, token: Option<&str>, body: &str) -> Reply {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        inner.log.push((method.to_string(), path.to_string()));
        if inner.fail_next > 0 {
            inner.fail_next -= 1;
            return Reply::json(500, json!({ "message": "injected failure" }));
        }
        if token != Some(self.fixture.token.as_str()) {
            return Reply::json(401, json!({ "message": "401 Unauthorized" }));
        }
        let Some(rest) = path.strip_prefix("/api/v4/") else {
            return Reply::not_found();
        };
        let segs: Vec<&str> = rest.split('/').collect();
        let body: Value = serde_json::from_str(body).unwrap_or(Value::Null);
        let st = &mut inner.state;
        match (method, segs.as_slice()) {
            ("GET", ["users"]) => {
                let name = query_param(query, "username").unwrap_or_default();
                let users: Vec<Value> = st
                    .users
                    .iter()
                    .filter(|(_, n)| **n == name)
                    .map(|(id, n)| json!({ "id": id, "username": n }))
                    .collect();
                Reply::json(200, Value::Array(users))
            }
            ("GET", ["groups", id]) => match self.find(st, RefKind::Group, id) {
                Some(gid) => Reply::json(200, group_json(&st.groups[&gid])),
                None => Reply::not_found(),
            },
            ("POST", ["groups"]) => self.create_group(st, &body),
            ("GET", ["projects", id]) => match self.find(st, RefKind::Project, id) {
                Some(pid) => Reply::json(200, self.project_json(&st.projects[&pid])),
                None => Reply::not_found(),
            },
            ("POST", ["projects"]) => self.create_project(st, &body),
            ("GET", [coll, id, "members"]) => match self.target(st, coll, id) {
                Some((kind, tid)) => self.list_members(st, kind, tid, query),
                None => Reply::not_found(),
            },
            ("GET", [coll, id, "members", uid]) => match (self.target(st, coll, id), uid.parse::<u64>()) {
                (Some((kind, tid)), Ok(uid)) => match st.members.get(&(kind, tid, uid)) {
                    Some(level) => Reply::json(200, member_json(st, uid, *level)),
                    None => Reply::not_found(),
                },
                _ => Reply::not_found(),
            },
            ("POST", [coll, id, "members"]) => match self.target(st, coll, id) {
                Some((kind, tid)) => {
                    let uid = body["user_id"].as_u64().unwrap_or(0);
                    let level = body["access_level"].as_u64().unwrap_or(0) as u32;
                    if !st.users.contains_key(&uid) {
                        return Reply::not_found();
                    }
                    if st.members.contains_key(&(kind, tid, uid)) {
                        return Reply::json(409, json!({ "message": "Member already exists" }));
                    }
                    st.members.insert((kind, tid, uid), level);
                    Reply::json(201, member_json(st, uid, level))
                }
                None => Reply::not_found(),
            },
            ("PUT", [coll, id, "members", uid]) => match (self.target(st, coll, id), uid.parse::<u64>()) {
                (Some((kind, tid)), Ok(uid)) => {
                    let level = body["access_level"].as_u64().unwrap_or(0) as u32;
                    match st.members.get_mut(&(kind, tid, uid)) {
                        Some(l) => {
                            *l = level;
                            Reply::json(200, member_json(st, uid, level))
                        }
                        None => Reply::not_found(),
                    }
                }
                _ => Reply::not_found(),
            },
            ("DELETE", [coll, id, "members", uid]) => match (self.target(st, coll, id), uid.parse::<u64>()) {
                (Some((kind, tid)), Ok(uid)) => match st.members.remove(&(kind, tid, uid)) {
                    Some(_) => Reply::json(204, Value::Null),
                    None => Reply::not_found(),
                },
                _ => Reply::not_found(),
            },
            _ => Reply::not_found(),
        }
    }

    fn find(&self, st: &MockState, kind: RefKind, id: &str) -> Option<u64> {
        let key = decode_segment(id);
        match kind {
            RefKind::Group => match key.parse::<u64>() {
                Ok(n) => st.groups.contains_key(&n).then_some(n),
                Err(_) => st.group_by_path(&key).map(|g| g.id),
            },
            RefKind::Project => match key.parse::<u64>() {
                Ok(n) => st.projects.contains_key(&n).then_some(n),
                Err(_) => st.project_by_path(&key).map(|p| p.id),
            },
        }
    }

    fn target(&self, st: &MockState, coll: &str, id: &str) -> Option<(RefKind, u64)> {
        let kind = match coll {
            "groups" => RefKind::Group,
            "projects" => RefKind::Project,
            _ => return None,
        };
        self.find(st, kind, id).map(|i| (kind, i))
    }

    fn create_group(&self, st: &mut MockState, body: &Value) -> Reply {
        let Some(path) = body["path"].as_str().filter(|p| !p.is_empty() && !p.contains('/')) else {
            return Reply::json(400, json!({ "message": "path is invalid" }));
        };
        let parent_id = body["parent_id"].as_u64();
        let full_path = match parent_id {
            Some(pid) => match st.groups.get(&pid) {
                Some(g) => format!("{}/{}", g.full_path, path),
                None => return Reply::not_found(),
            },
            None => path.to_string(),
        };
        if st.path_taken(&full_path) {
            return Reply::json(400, json!({ "message": "has already been taken" }));
        }
        let id = st.next();
        let g = MockGroup {
            id,
            path: path.to_string(),
            full_path,
            parent_id,
        };
        let out = group_json(&g);
        st.groups.insert(id, g);
        Reply::json(201, out)
    }

    fn create_project(&self, st: &mut MockState, body: &Value) -> Reply {
        let Some(path) = body["path"].as_str().filter(|p| !p.is_empty() && !p.contains('/')) else {
            return Reply::json(400, json!({ "message": "path is invalid" }));
        };
        let Some(ns) = body["namespace_id"].as_u64().and_then(|n| st.groups.get(&n)) else {
            return Reply::json(400, json!({ "message": "namespace is invalid" }));
        };
        let full_path = format!("{}/{}", ns.full_path, path);
        if st.path_taken(&full_path) {
            return Reply::json(400, json!({ "message": "has already been taken" }));
        }
        let namespace_id = ns.id;
        if let Err(e) = self.git.init_bare(&self.repo_path(&full_path)) {
            return Reply::json(500, json!({ "message": e.to_string() }));
        }
        let id = st.next();
        let p = MockProject {
            id,
            path: path.to_string(),
            full_path,
            namespace_id,
        };
        let out = self.project_json(&p);
        st.projects.insert(id, p);
        Reply::json(201, out)
    }

    fn project_json(&self, p: &MockProject) -> Value {
        json!({
            "id": p.id,
            "path": p.path,
            "path_with_namespace": p.full_path,
            "namespace": { "id": p.namespace_id },
            "http_url_to_repo": self.repo_path(&p.full_path).to_string_lossy(),
        })
    }

    fn list_members(&self, st: &MockState, kind: RefKind, tid: u64, query: &str) -> Reply {
        let per_page = query_param(query, "per_page")
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(20)
            .clamp(1, self.fixture.max_page_size);
        let page = query_param(query, "page")
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(1)
            .max(1);
        let all: Vec<Value> = st
            .members
            .iter()
            .filter(|((k, t, _), _)| *k == kind && *t == tid)
            .map(|((_, _, uid), level)| member_json(st, *uid, *level))
            .collect();
        let pages = all.len().div_ceil(per_page).max(1);
        let items: Vec<Value> = all.into_iter().skip((page - 1) * per_page).take(per_page).collect();
        let mut reply = Reply::json(200, Value::Array(items));
        reply.headers.push(("X-Total-Pages".into(), pages.to_string()));
        reply.headers.push((
            "X-Next-Page".into(),
            if page < pages {
                (page + 1).to_string()
            } else {
                String::new()
            },
        ));
        reply
    }
}

fn group_json(g: &MockGroup) -> Value {
    json!({ "id": g.id, "path": g.path, "full_path": g.full_path, "parent_id": g.parent_id })
}

fn member_json(st: &MockState, uid: u64, level: u32) -> Value {
    json!({ "id": uid, "username": st.users.get(&uid).cloned().unwrap_or_default(), "access_level": level })
}
