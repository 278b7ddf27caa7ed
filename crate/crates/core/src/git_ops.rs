//! Local working-tree operations, driven through the `git` command line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};

use base64::Engine as _;

pub const DEFAULT_BRANCH: &str = "main";
const PUSH_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Author {
    pub name: String,
    pub email: String,
}

impl Author {
    pub fn new(name: impl Into<String>, email: impl Into<String>) -> Self {
        Author {
            name: name.into(),
            email: email.into(),
        }
    }

    pub fn bot() -> Self {
        Author::new("Gradebot", "bot@course.invalid")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GitError {
    #[error("git transport failure: {0}")]
    Transport(String),
    #[error("unknown commit `{0}`")]
    UnknownCommit(String),
    #[error("push rejected: {0}")]
    PushRejected(String),
    #[error("git {command} failed: {stderr}")]
    Command { command: String, stderr: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkTree {
    pub local_path: PathBuf,
    pub remote_url: String,
    /// `None` while the remote has no commits yet.
    pub current_commit: Option<String>,
    pub branch: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PushOutcome {
    Pushed(String),
    /// Nothing changed; carries the unchanged head.
    NothingToCommit(Option<String>),
}

impl PushOutcome {
    pub fn head(&self) -> Option<&str> {
        match self {
            PushOutcome::Pushed(c) => Some(c),
            PushOutcome::NothingToCommit(c) => c.as_deref(),
        }
    }
}

pub fn is_commit_id(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Runs git with optional HTTP token authentication.
#[derive(Debug, Clone, Default)]
pub struct Git {
    auth_header: Option<String>,
}

impl Git {
    pub fn new() -> Self {
        Git::default()
    }

    /// HTTPS remotes receive the token as basic auth (`oauth2:<token>`).
    pub fn with_token(token: &str) -> Self {
        let basic = base64::engine::general_purpose::STANDARD.encode(format!("oauth2:{token}"));
        Git {
            auth_header: Some(format!("Authorization: Basic {basic}")),
        }
    }

    fn command(&self, dir: Option<&Path>) -> Command {
        let mut cmd = Command::new("git");
        if let Some(d) = dir {
            cmd.current_dir(d);
        }
        cmd.env("GIT_TERMINAL_PROMPT", "0")
            .env("GIT_CONFIG_NOSYSTEM", "1")
            .env("LC_ALL", "C");
        // Passed through the environment so the token stays out of argv.
        let mut cfg = vec![("init.defaultBranch", DEFAULT_BRANCH.to_string())];
        if let Some(h) = &self.auth_header {
            cfg.push(("http.extraHeader", h.clone()));
        }
        cmd.env("GIT_CONFIG_COUNT", cfg.len().to_string());
        for (i, (k, v)) in cfg.iter().enumerate() {
            cmd.env(format!("GIT_CONFIG_KEY_{i}"), k);
            cmd.env(format!("GIT_CONFIG_VALUE_{i}"), v);
        }
        cmd
    }

    fn output(&self, dir: Option<&Path>, args: &[&str]) -> Result<Output, GitError> {
        self.command(dir).args(args).output().map_err(|source| GitError::Io {
            path: dir.map(Path::to_path_buf).unwrap_or_default(),
            source,
        })
    }

    fn run(&self, dir: Option<&Path>, args: &[&str]) -> Result<String, GitError> {
        let out = self.output(dir, args)?;
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).trim_end().to_string())
        } else {
            Err(GitError::Command {
                command: args.first().copied().unwrap_or("").to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            })
        }
    }

    fn try_run(&self, dir: &Path, args: &[&str]) -> Option<String> {
        self.run(Some(dir), args).ok()
    }

    pub fn init_bare(&self, path: &Path) -> Result<(), GitError> {
        fs::create_dir_all(path).map_err(|source| GitError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.run(Some(path), &["init", "-q", "--bare", "-b", DEFAULT_BRANCH])?;
        Ok(())
    }

    fn remote_head(&self, dir: &Path, branch: &str) -> Option<String> {
        self.try_run(
            dir,
            &[
                "rev-parse",
                "--verify",
                "-q",
                &format!("refs/remotes/origin/{branch}^{{commit}}"),
            ],
        )
    }

    fn is_clone_of(&self, dir: &Path, remote_url: &str) -> bool {
        if !dir.join(".git").exists() {
            return false;
        }
        self.try_run(dir, &["config", "--get", "remote.origin.url"]).as_deref() == Some(remote_url)
    }

    /// Clones `remote_url` into `local_path`, or brings an existing clone up
    /// to date with the remote default branch. A directory that is not a
    /// clone of `remote_url` is moved aside and recloned.
    pub fn clone_or_update(&self, remote_url: &str, local_path: &Path) -> Result<WorkTree, GitError> {
        if local_path.exists() && !self.is_clone_of(local_path, remote_url) {
            let quarantine = quarantine_path(local_path);
            log::warn!(
                "corrupt_clone path={} quarantine={}",
                local_path.display(),
                quarantine.display()
            );
            fs::rename(local_path, &quarantine).map_err(|source| GitError::Io {
                path: local_path.to_path_buf(),
                source,
            })?;
        }
        if !local_path.exists() {
            if let Some(parent) = local_path.parent() {
                fs::create_dir_all(parent).map_err(|source| GitError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            let dest = local_path.to_string_lossy();
            let out = self.output(None, &["clone", "-q", remote_url, &dest])?;
            if !out.status.success() {
                return Err(GitError::Transport(
                    String::from_utf8_lossy(&out.stderr).trim().to_string(),
                ));
            }
        } else {
            let out = self.output(Some(local_path), &["fetch", "-q", "--prune", "origin"])?;
            if !out.status.success() {
                return Err(GitError::Transport(
                    String::from_utf8_lossy(&out.stderr).trim().to_string(),
                ));
            }
        }

        let branch = self
            .try_run(local_path, &["symbolic-ref", "--short", "refs/remotes/origin/HEAD"])
            .and_then(|s| s.strip_prefix("origin/").map(str::to_string))
            .unwrap_or_else(|| DEFAULT_BRANCH.to_string());
        let head = self.remote_head(local_path, &branch);
        match &head {
            Some(h) => {
                self.run(Some(local_path), &["checkout", "-q", "-f", "-B", &branch, h])?;
                self.run(Some(local_path), &["clean", "-q", "-ffdx"])?;
            }
            None => {
                // empty remote: make sure we sit on an unborn branch of the right name
                let _ = self.try_run(local_path, &["symbolic-ref", "HEAD", &format!("refs/heads/{branch}")]);
            }
        }
        Ok(WorkTree {
            local_path: local_path.to_path_buf(),
            remote_url: remote_url.to_string(),
            current_commit: head,
            branch,
        })
    }

    fn commit_exists(&self, tree: &WorkTree, commit: &str) -> bool {
        is_commit_id(commit)
            && self
                .try_run(&tree.local_path, &["cat-file", "-e", &format!("{commit}^{{commit}}")])
                .is_some()
    }

    /// Detached checkout of `commit`, removing untracked and ignored files.
    pub fn checkout_commit(&self, tree: &mut WorkTree, commit: &str) -> Result<(), GitError> {
        if !self.commit_exists(tree, commit) {
            return Err(GitError::UnknownCommit(commit.to_string()));
        }
        self.run(Some(&tree.local_path), &["checkout", "-q", "-f", "--detach", commit])?;
        self.run(Some(&tree.local_path), &["clean", "-q", "-ffdx"])?;
        tree.current_commit = Some(commit.to_string());
        Ok(())
    }

    /// Contents of `path` at `commit`; `None` when the file does not exist
    /// in that revision.
    pub fn read_file_at(&self, tree: &WorkTree, commit: &str, path: &str) -> Result<Option<Vec<u8>>, GitError> {
        if !self.commit_exists(tree, commit) {
            return Err(GitError::UnknownCommit(commit.to_string()));
        }
        let out = self.output(
            Some(&tree.local_path),
            &["cat-file", "blob", &format!("{commit}:{path}")],
        )?;
        Ok(out.status.success().then_some(out.stdout))
    }

    pub fn head(&self, tree: &WorkTree) -> Option<String> {
        self.try_run(&tree.local_path, &["rev-parse", "--verify", "-q", "HEAD^{commit}"])
    }

    /// Stages everything, commits as `author` and pushes to the tree's
    /// branch, rebasing onto concurrent remote commits when needed.
    pub fn commit_all_push(
        &self,
        tree: &mut WorkTree,
        message: &str,
        author: &Author,
    ) -> Result<PushOutcome, GitError> {
        let dir = tree.local_path.clone();
        if self.try_run(&dir, &["symbolic-ref", "-q", "HEAD"]).is_none() {
            self.run(Some(&dir), &["checkout", "-q", "-B", &tree.branch])?;
        }
        self.run(Some(&dir), &["add", "-A"])?;
        let status = self.run(Some(&dir), &["status", "--porcelain"])?;
        if status.is_empty() {
            return Ok(PushOutcome::NothingToCommit(self.head(tree)));
        }
        let out = self
            .command(Some(&dir))
            .args(["commit", "-q", "--no-verify", "-m", message])
            .env("GIT_AUTHOR_NAME", &author.name)
            .env("GIT_AUTHOR_EMAIL", &author.email)
            .env("GIT_COMMITTER_NAME", &author.name)
            .env("GIT_COMMITTER_EMAIL", &author.email)
            .output()
            .map_err(|source| GitError::Io {
                path: dir.clone(),
                source,
            })?;
        if !out.status.success() {
            return Err(GitError::Command {
                command: "commit".into(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }

        let refspec = format!("HEAD:refs/heads/{}", tree.branch);
        let mut last_err = String::new();
        for attempt in 0..=PUSH_RETRIES {
            if attempt > 0 {
                let pull = self
                    .command(Some(&dir))
                    .args(["pull", "-q", "--rebase", "origin", &tree.branch])
                    .env("GIT_COMMITTER_NAME", &author.name)
                    .env("GIT_COMMITTER_EMAIL", &author.email)
                    .output()
                    .map_err(|source| GitError::Io {
                        path: dir.clone(),
                        source,
                    })?;
                if !pull.status.success() {
                    let _ = self.try_run(&dir, &["rebase", "--abort"]);
                    last_err = String::from_utf8_lossy(&pull.stderr).trim().to_string();
                    continue;
                }
            }
            let push = self.output(Some(&dir), &["push", "-q", "origin", &refspec])?;
            if push.status.success() {
                let head = self.head(tree).unwrap_or_default();
                tree.current_commit = Some(head.clone());
                return Ok(PushOutcome::Pushed(head));
            }
            last_err = String::from_utf8_lossy(&push.stderr).trim().to_string();
            log::warn!(
                "push_retry repo={} attempt={} error=\"{}\"",
                tree.remote_url,
                attempt + 1,
                last_err
            );
        }
        Err(GitError::PushRejected(last_err))
    }
}

fn quarantine_path(path: &Path) -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{name}.quarantine-{stamp}"))
}

/// Per-repository mutual exclusion for working trees.
#[derive(Debug, Default, Clone)]
pub struct RepoLocks {
    locks: Arc<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>>,
}

impl RepoLocks {
    pub fn new() -> Self {
        RepoLocks::default()
    }

    pub fn get(&self, path: &Path) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(path.to_path_buf()).or_default().clone()
    }
}
