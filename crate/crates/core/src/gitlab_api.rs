//! Minimal blocking client for the GitLab v4 REST surface used to build a
//! course: groups, projects, users and memberships.
//!
//! Every mutating call is idempotent. `ensure_*` looks the path up before
//! creating it, and membership calls converge to the requested role.

use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::valid_segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Reporter,
    Developer,
    Maintainer,
    Owner,
}

impl Role {
    pub fn access_level(self) -> u32 {
        match self {
            Role::Reporter => 20,
            Role::Developer => 30,
            Role::Maintainer => 40,
            Role::Owner => 50,
        }
    }

    /// Levels below Reporter (guest, minimal access) have no counterpart.
    pub fn from_access_level(level: u32) -> Option<Role> {
        match level {
            20 => Some(Role::Reporter),
            30 => Some(Role::Developer),
            40 => Some(Role::Maintainer),
            50 => Some(Role::Owner),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Reporter => "Reporter",
            Role::Developer => "Developer",
            Role::Maintainer => "Maintainer",
            Role::Owner => "Owner",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Reporter" => Ok(Role::Reporter),
            "Developer" => Ok(Role::Developer),
            "Maintainer" => Ok(Role::Maintainer),
            "Owner" => Ok(Role::Owner),
            _ => Err(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RefKind {
    Group,
    Project,
}

impl RefKind {
    fn collection(self) -> &'static str {
        match self {
            RefKind::Group => "groups",
            RefKind::Project => "projects",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RemoteRef {
    pub kind: RefKind,
    pub id: u64,
    pub full_path: String,
    /// Set for projects only.
    pub clone_url: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Change {
    Unchanged,
    Created,
    Updated,
}

#[derive(Debug, thiserror::Error)]
pub enum GitlabError {
    #[error("authentication rejected by server")]
    Auth,
    #[error("server error {status} on {path}")]
    Server { status: u16, path: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("conflict at {0}")]
    Conflict(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("`{0}` is not a valid path segment")]
    InvalidName(String),
    #[error("unexpected response from {path}: {message}")]
    Protocol { path: String, message: String },
}

impl GitlabError {
    fn is_transient(&self) -> bool {
        matches!(self, GitlabError::Transport(_) | GitlabError::Server { .. })
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Sleep before each retry; its length is the retry count.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(1),
                Duration::from_secs(2),
            ],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { backoff: Vec::new() }
    }
}

struct Reply {
    status: u16,
    body: Value,
    next_page: Option<u32>,
}

#[derive(Deserialize)]
struct GroupJson {
    id: u64,
    full_path: String,
}

#[derive(Deserialize)]
struct ProjectJson {
    id: u64,
    path_with_namespace: String,
    http_url_to_repo: String,
}

#[derive(Deserialize)]
struct MemberJson {
    id: u64,
    username: String,
    access_level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub user_id: u64,
    pub username: String,
    pub role: Option<Role>,
}

pub struct GitlabClient {
    api_base: String,
    token: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    per_page: u32,
}

impl GitlabClient {
    /// `server_base_url` is the server root; the `/api/v4` prefix is added here.
    pub fn new(server_base_url: &str, token: &str) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(10))
            .timeout(Duration::from_secs(60))
            .build();
        GitlabClient {
            api_base: format!("{}/api/v4", server_base_url.trim_end_matches('/')),
            token: token.to_string(),
            agent,
            retry: RetryPolicy::default(),
            per_page: 100,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_page_size(mut self, per_page: u32) -> Self {
        self.per_page = per_page.max(1);
        self
    }

    fn call(&self, method: &str, path: &str, body: Option<&Value>) -> Result<Reply, GitlabError> {
        let mut attempt = 0;
        loop {
            match self.call_once(method, path, body) {
                Err(e) if e.is_transient() && attempt < self.retry.backoff.len() => {
                    log::warn!(
                        "gitlab_retry method={method} path={path} attempt={} error=\"{e}\"",
                        attempt + 1
                    );
                    thread::sleep(self.retry.backoff[attempt]);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn call_once(&self, method: &str, path: &str, body: Option<&Value>) -> Result<Reply, GitlabError> {
        let url = format!("{}{}", self.api_base, path);
        let req = self.agent.request(method, &url).set("PRIVATE-TOKEN", &self.token);
        let result = match body {
            Some(b) => req.send_json(b.clone()),
            None => req.call(),
        };
        let resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(ureq::Error::Transport(t)) => return Err(GitlabError::Transport(t.to_string())),
        };
        let status = resp.status();
        if status == 401 || status == 403 {
            return Err(GitlabError::Auth);
        }
        if status >= 500 {
            return Err(GitlabError::Server {
                status,
                path: path.to_string(),
            });
        }
        let next_page = resp.header("X-Next-Page").and_then(|v| v.trim().parse::<u32>().ok());
        let text = resp.into_string().map_err(|e| GitlabError::Transport(e.to_string()))?;
        let body = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).map_err(|e| GitlabError::Protocol {
                path: path.to_string(),
                message: e.to_string(),
            })?
        };
        Ok(Reply {
            status,
            body,
            next_page,
        })
    }

    fn decode<T: serde::de::DeserializeOwned>(path: &str, body: Value) -> Result<T, GitlabError> {
        serde_json::from_value(body).map_err(|e| GitlabError::Protocol {
            path: path.to_string(),
            message: e.to_string(),
        })
    }

    fn unexpected(path: &str, reply: &Reply) -> GitlabError {
        GitlabError::Protocol {
            path: path.to_string(),
            message: format!("status {}: {}", reply.status, reply.body),
        }
    }

    pub fn find_group(&self, full_path: &str) -> Result<Option<RemoteRef>, GitlabError> {
        let path = format!("/groups/{}", encode_path(full_path));
        let reply = self.call("GET", &path, None)?;
        match reply.status {
            200 => {
                let g: GroupJson = Self::decode(&path, reply.body)?;
                Ok(Some(group_ref(g)))
            }
            404 => Ok(None),
            _ => Err(Self::unexpected(&path, &reply)),
        }
    }

    pub fn find_project(&self, full_path: &str) -> Result<Option<RemoteRef>, GitlabError> {
        let path = format!("/projects/{}", encode_path(full_path));
        let reply = self.call("GET", &path, None)?;
        match reply.status {
            200 => {
                let p: ProjectJson = Self::decode(&path, reply.body)?;
                Ok(Some(project_ref(p)))
            }
            404 => Ok(None),
            _ => Err(Self::unexpected(&path, &reply)),
        }
    }

    pub fn ensure_group(&self, parent: Option<&RemoteRef>, name: &str) -> Result<RemoteRef, GitlabError> {
        self.ensure_group_tracked(parent, name).map(|(r, _)| r)
    }

    /// Like [`ensure_group`](Self::ensure_group), also reporting whether the
    /// group had to be created.
    pub fn ensure_group_tracked(
        &self,
        parent: Option<&RemoteRef>,
        name: &str,
    ) -> Result<(RemoteRef, Change), GitlabError> {
        if !valid_segment(name) {
            return Err(GitlabError::InvalidName(name.to_string()));
        }
        if let Some(p) = parent {
            if p.kind != RefKind::Group {
                return Err(GitlabError::Conflict(format!("{} is a project", p.full_path)));
            }
        }
        let full = child_path(parent, name);
        if let Some(g) = self.find_group(&full)? {
            return Ok((g, Change::Unchanged));
        }
        if self.find_project(&full)?.is_some() {
            return Err(GitlabError::Conflict(format!("{full} is occupied by a project")));
        }
        let mut body = json!({ "name": name, "path": name });
        if let Some(p) = parent {
            body["parent_id"] = json!(p.id);
        }
        let reply = self.call("POST", "/groups", Some(&body))?;
        match reply.status {
            200 | 201 => {
                let g: GroupJson = Self::decode("/groups", reply.body)?;
                Ok((group_ref(g), Change::Created))
            }
            // lost a creation race; the path now exists
            400 | 409 => match self.find_group(&full)? {
                Some(g) => Ok((g, Change::Unchanged)),
                None => Err(GitlabError::Conflict(full)),
            },
            _ => Err(Self::unexpected("/groups", &reply)),
        }
    }

    pub fn ensure_project(&self, parent: &RemoteRef, name: &str) -> Result<RemoteRef, GitlabError> {
        self.ensure_project_tracked(parent, name).map(|(r, _)| r)
    }

    pub fn ensure_project_tracked(&self, parent: &RemoteRef, name: &str) -> Result<(RemoteRef, Change), GitlabError> {
        if !valid_segment(name) {
            return Err(GitlabError::InvalidName(name.to_string()));
        }
        if parent.kind != RefKind::Group {
            return Err(GitlabError::Conflict(format!("{} is a project", parent.full_path)));
        }
        let full = child_path(Some(parent), name);
        if let Some(p) = self.find_project(&full)? {
            return Ok((p, Change::Unchanged));
        }
        if self.find_group(&full)?.is_some() {
            return Err(GitlabError::Conflict(format!("{full} is occupied by a group")));
        }
        let body = json!({ "name": name, "path": name, "namespace_id": parent.id });
        let reply = self.call("POST", "/projects", Some(&body))?;
        match reply.status {
            200 | 201 => {
                let p: ProjectJson = Self::decode("/projects", reply.body)?;
                Ok((project_ref(p), Change::Created))
            }
            400 | 409 => match self.find_project(&full)? {
                Some(p) => Ok((p, Change::Unchanged)),
                None => Err(GitlabError::Conflict(full)),
            },
            _ => Err(Self::unexpected("/projects", &reply)),
        }
    }

    pub fn user_id(&self, username: &str) -> Result<u64, GitlabError> {
        let path = format!("/users?username={}", encode_query(username));
        let reply = self.call("GET", &path, None)?;
        if reply.status != 200 {
            return Err(Self::unexpected(&path, &reply));
        }
        let users: Vec<Value> = Self::decode(&path, reply.body)?;
        users
            .iter()
            .find(|u| u["username"].as_str() == Some(username))
            .and_then(|u| u["id"].as_u64())
            .ok_or_else(|| GitlabError::UnknownUser(username.to_string()))
    }

    fn member_path(target: &RemoteRef) -> String {
        format!("/{}/{}/members", target.kind.collection(), target.id)
    }

    fn direct_level(&self, target: &RemoteRef, user_id: u64) -> Result<Option<u32>, GitlabError> {
        let path = format!("{}/{}", Self::member_path(target), user_id);
        let reply = self.call("GET", &path, None)?;
        match reply.status {
            200 => {
                let m: MemberJson = Self::decode(&path, reply.body)?;
                Ok(Some(m.access_level))
            }
            404 => Ok(None),
            _ => Err(Self::unexpected(&path, &reply)),
        }
    }

    /// Direct role of `username` on a group or project, if any.
    pub fn member_role(&self, target: &RemoteRef, username: &str) -> Result<Option<Role>, GitlabError> {
        let uid = self.user_id(username)?;
        Ok(self.direct_level(target, uid)?.and_then(Role::from_access_level))
    }

    pub fn set_member_role(&self, target: &RemoteRef, username: &str, role: Role) -> Result<(), GitlabError> {
        self.set_member_role_tracked(target, username, role).map(|_| ())
    }

    /// Converges the direct membership of `username` to exactly `role`.
    pub fn set_member_role_tracked(
        &self,
        target: &RemoteRef,
        username: &str,
        role: Role,
    ) -> Result<Change, GitlabError> {
        let uid = self.user_id(username)?;
        let level = role.access_level();
        match self.direct_level(target, uid)? {
            Some(l) if l == level => Ok(Change::Unchanged),
            Some(_) => {
                let path = format!("{}/{}", Self::member_path(target), uid);
                let reply = self.call("PUT", &path, Some(&json!({ "access_level": level })))?;
                match reply.status {
                    200 | 201 => Ok(Change::Updated),
                    404 => Err(GitlabError::UnknownUser(username.to_string())),
                    _ => Err(Self::unexpected(&path, &reply)),
                }
            }
            None => {
                let path = Self::member_path(target);
                let body = json!({ "user_id": uid, "access_level": level });
                let reply = self.call("POST", &path, Some(&body))?;
                match reply.status {
                    200 | 201 => Ok(Change::Created),
                    404 => Err(GitlabError::NotFound(target.full_path.clone())),
                    // concurrent add; converge with an update
                    409 => {
                        let path = format!("{}/{}", Self::member_path(target), uid);
                        let reply = self.call("PUT", &path, Some(&json!({ "access_level": level })))?;
                        match reply.status {
                            200 | 201 => Ok(Change::Updated),
                            _ => Err(Self::unexpected(&path, &reply)),
                        }
                    }
                    _ => Err(Self::unexpected(&path, &reply)),
                }
            }
        }
    }

    /// Demotes a member to Reporter. Returns whether a demotion happened.
    pub fn revoke_write(&self, project: &RemoteRef, username: &str) -> Result<bool, GitlabError> {
        let uid = self.user_id(username)?;
        match self.direct_level(project, uid)? {
            None => Err(GitlabError::UnknownUser(username.to_string())),
            Some(l) if l <= Role::Reporter.access_level() => Ok(false),
            Some(_) => {
                let path = format!("{}/{}", Self::member_path(project), uid);
                let body = json!({ "access_level": Role::Reporter.access_level() });
                let reply = self.call("PUT", &path, Some(&body))?;
                match reply.status {
                    200 | 201 => Ok(true),
                    _ => Err(Self::unexpected(&path, &reply)),
                }
            }
        }
    }

    /// All direct members, following pagination to the end.
    pub fn list_members(&self, target: &RemoteRef) -> Result<Vec<Member>, GitlabError> {
        let mut out = Vec::new();
        let mut page = 1;
        loop {
            let path = format!("{}?per_page={}&page={}", Self::member_path(target), self.per_page, page);
            let reply = self.call("GET", &path, None)?;
            if reply.status != 200 {
                return Err(Self::unexpected(&path, &reply));
            }
            let next = reply.next_page;
            let members: Vec<MemberJson> = Self::decode(&path, reply.body)?;
            out.extend(members.into_iter().map(|m| Member {
                user_id: m.id,
                username: m.username,
                role: Role::from_access_level(m.access_level),
            }));
            match next {
                Some(n) if n > page => page = n,
                _ => return Ok(out),
            }
        }
    }
}

fn group_ref(g: GroupJson) -> RemoteRef {
    RemoteRef {
        kind: RefKind::Group,
        id: g.id,
        full_path: g.full_path,
        clone_url: None,
    }
}

fn project_ref(p: ProjectJson) -> RemoteRef {
    RemoteRef {
        kind: RefKind::Project,
        id: p.id,
        full_path: p.path_with_namespace,
        clone_url: Some(p.http_url_to_repo),
    }
}

fn child_path(parent: Option<&RemoteRef>, name: &str) -> String {
    match parent {
        Some(p) => format!("{}/{}", p.full_path, name),
        None => name.to_string(),
    }
}

/// Namespaced paths are passed as URL-encoded ids.
pub fn encode_path(full_path: &str) -> String {
    encode_query(full_path)
}

fn encode_query(s: &str) -> String {
    url::form_urlencoded::byte_serialize(s.as_bytes()).collect()
}
