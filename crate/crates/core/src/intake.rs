//! Submission intake from the drop directory.
//!
//! CI runners write one event file per push, named
//! `<epoch>__<assessment_id>__<group_id>__<commit>.sub`, whose body is
//! `key=value` lines. The watcher polls the directory, waits until a file's
//! size is stable across two polls, and claims it by renaming it into
//! `processing/`. Claimed files end in `done/` or `failed/`; failures get a
//! `<name>.reason` sidecar.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use crate::git_ops::is_commit_id;

pub const EVENT_SUFFIX: &str = ".sub";
pub const POLL_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubmissionEvent {
    pub assessment_id: String,
    pub group_id: String,
    pub commit: String,
    pub pushed_at: i64,
    pub repo_path: String,
    pub pusher: String,
}

impl SubmissionEvent {
    pub fn key(&self) -> (String, String) {
        (self.assessment_id.clone(), self.group_id.clone())
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}__{}__{}__{}{EVENT_SUFFIX}",
            self.pushed_at, self.assessment_id, self.group_id, self.commit
        )
    }

    pub fn to_body(&self) -> String {
        format!(
            "assessment_id={}\ngroup_id={}\ncommit={}\npushed_at={}\nrepo_path={}\npusher={}\n",
            self.assessment_id, self.group_id, self.commit, self.pushed_at, self.repo_path, self.pusher
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EventError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("bad commit id `{0}`")]
    BadCommitId(String),
    #[error("bad timestamp `{0}`")]
    BadTimestamp(String),
    #[error("unknown assessment `{0}`")]
    UnknownAssessment(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("empty event file")]
    Empty,
    #[error("event body is not UTF-8")]
    Encoding,
}

/// The assessments and groups an event may refer to.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    groups: BTreeMap<String, BTreeSet<String>>,
}

impl Catalog {
    pub fn new<A, G>(assessments: A, groups: G) -> Self
    where
        A: IntoIterator,
        A::Item: Into<String>,
        G: IntoIterator,
        G::Item: Into<String>,
    {
        let groups: BTreeSet<String> = groups.into_iter().map(Into::into).collect();
        Catalog {
            groups: assessments.into_iter().map(|a| (a.into(), groups.clone())).collect(),
        }
    }
}

/// Fields encoded in an event file name, if the name follows the scheme.
pub fn fields_from_name(name: &str) -> Option<HashMap<&'static str, String>> {
    let stem = name.strip_suffix(EVENT_SUFFIX)?;
    let parts: Vec<&str> = stem.split("__").collect();
    if parts.len() != 4 {
        return None;
    }
    Some(HashMap::from([
        ("pushed_at", parts[0].to_string()),
        ("assessment_id", parts[1].to_string()),
        ("group_id", parts[2].to_string()),
        ("commit", parts[3].to_string()),
    ]))
}

pub fn parse_event(bytes: &[u8], catalog: &Catalog) -> Result<SubmissionEvent, EventError> {
    parse_event_with(bytes, HashMap::new(), catalog)
}

/// Parses a body, falling back to `defaults` (typically derived from the
/// file name) for absent keys.
pub fn parse_event_with(
    bytes: &[u8],
    mut fields: HashMap<&'static str, String>,
    catalog: &Catalog,
) -> Result<SubmissionEvent, EventError> {
    if bytes.is_empty() {
        return Err(EventError::Empty);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| EventError::Encoding)?;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else { continue };
        let key = match k.trim() {
            "assessment_id" => "assessment_id",
            "group_id" => "group_id",
            "commit" => "commit",
            "pushed_at" => "pushed_at",
            "repo_path" => "repo_path",
            "pusher" => "pusher",
            _ => continue,
        };
        fields.insert(key, v.trim().to_string());
    }
    let mut take = |k: &'static str| -> Result<String, EventError> {
        match fields.remove(k) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(EventError::MissingField(k)),
        }
    };
    let assessment_id = take("assessment_id")?;
    let group_id = take("group_id")?;
    let commit = take("commit")?;
    let pushed_at_raw = take("pushed_at")?;
    let repo_path = take("repo_path")?;
    let pusher = take("pusher")?;

    let groups = catalog
        .groups
        .get(&assessment_id)
        .ok_or_else(|| EventError::UnknownAssessment(assessment_id.clone()))?;
    if !groups.contains(&group_id) {
        return Err(EventError::UnknownGroup(group_id));
    }
    if !is_commit_id(&commit) {
        return Err(EventError::BadCommitId(commit));
    }
    let pushed_at = match pushed_at_raw.parse::<i64>() {
        Ok(t) if t > 0 => t,
        _ => return Err(EventError::BadTimestamp(pushed_at_raw)),
    };
    Ok(SubmissionEvent {
        assessment_id,
        group_id,
        commit,
        pushed_at,
        repo_path,
        pusher,
    })
}

/// Keeps one event per (assessment, group): the one with the greatest
/// `pushed_at` (the later arrival on ties), placed where that key first
/// appeared. Returns the survivors and the superseded events.
pub fn coalesce_split<T, F>(queue: Vec<T>, event: F) -> (Vec<T>, Vec<T>)
where
    F: Fn(&T) -> &SubmissionEvent,
{
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    let mut kept: Vec<Option<T>> = Vec::new();
    let mut dropped = Vec::new();
    for item in queue {
        let key = event(&item).key();
        match slot.get(&key) {
            None => {
                slot.insert(key, kept.len());
                kept.push(Some(item));
            }
            Some(&i) => {
                let current = kept[i].take().expect("slot filled");
                if event(&item).pushed_at >= event(&current).pushed_at {
                    dropped.push(current);
                    kept[i] = Some(item);
                } else {
                    dropped.push(item);
                    kept[i] = Some(current);
                }
            }
        }
    }
    (kept.into_iter().flatten().collect(), dropped)
}

pub fn coalesce(queue: Vec<SubmissionEvent>) -> Vec<SubmissionEvent> {
    coalesce_split(queue, |e| e).0
}

/// The drop directory and its bookkeeping subdirectories.
#[derive(Debug, Clone)]
pub struct DropDir {
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivered {
    pub event: SubmissionEvent,
    /// Location under `processing/`.
    pub file: PathBuf,
}

impl DropDir {
    pub fn open(root: &Path) -> std::io::Result<DropDir> {
        let d = DropDir {
            root: root.to_path_buf(),
        };
        for sub in [d.processing(), d.done(), d.failed()] {
            fs::create_dir_all(sub)?;
        }
        Ok(d)
    }

    pub fn processing(&self) -> PathBuf {
        self.root.join("processing")
    }

    pub fn done(&self) -> PathBuf {
        self.root.join("done")
    }

    pub fn failed(&self) -> PathBuf {
        self.root.join("failed")
    }

    /// Moves claimed-but-unfinished files back so they are picked up again.
    pub fn recover(&self) -> std::io::Result<usize> {
        let mut n = 0;
        for entry in fs::read_dir(self.processing())? {
            let entry = entry?;
            fs::rename(entry.path(), self.root.join(entry.file_name()))?;
            n += 1;
        }
        Ok(n)
    }

    pub fn release(&self, file: &Path) -> std::io::Result<()> {
        if let Some(name) = file.file_name() {
            fs::rename(file, self.root.join(name))?;
        }
        Ok(())
    }

    pub fn mark_done(&self, file: &Path) -> std::io::Result<PathBuf> {
        let dest = unique(&self.done(), file);
        fs::rename(file, &dest)?;
        Ok(dest)
    }

    pub fn mark_failed(&self, file: &Path, reason: &str) -> std::io::Result<PathBuf> {
        let dest = unique(&self.failed(), file);
        fs::rename(file, &dest)?;
        let mut sidecar = dest.clone().into_os_string();
        sidecar.push(".reason");
        fs::write(PathBuf::from(sidecar), format!("{reason}\n"))?;
        Ok(dest)
    }
}

fn unique(dir: &Path, file: &Path) -> PathBuf {
    let name = file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut dest = dir.join(&name);
    let mut i = 1;
    while dest.exists() {
        dest = dir.join(format!("{name}.{i}"));
        i += 1;
    }
    dest
}

/// Poll-based watcher with a size-stability completion check.
pub struct Watcher {
    dir: DropDir,
    catalog: Catalog,
    sizes: HashMap<PathBuf, u64>,
}

impl Watcher {
    pub fn new(dir: DropDir, catalog: Catalog) -> Self {
        Watcher {
            dir,
            catalog,
            sizes: HashMap::new(),
        }
    }

    pub fn drop_dir(&self) -> &DropDir {
        &self.dir
    }

    /// One polling pass. Returns the events claimed in this pass, oldest
    /// file name first; malformed files go straight to `failed/`.
    pub fn poll_once(&mut self) -> Vec<Delivered> {
        let mut candidates: Vec<(PathBuf, u64)> = match fs::read_dir(&self.dir.root) {
            Ok(rd) => rd
                .filter_map(Result::ok)
                .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
                .filter(|e| e.file_name().to_string_lossy().ends_with(EVENT_SUFFIX))
                .filter_map(|e| Some((e.path(), e.metadata().ok()?.len())))
                .collect(),
            Err(e) => {
                log::error!("drop_dir_unreadable path={} error=\"{e}\"", self.dir.root.display());
                return Vec::new();
            }
        };
        candidates.sort();

        let mut seen = HashMap::new();
        let mut ready = Vec::new();
        for (path, size) in candidates {
            if self.sizes.get(&path) == Some(&size) {
                ready.push(path.clone());
            } else {
                seen.insert(path, size);
            }
        }
        self.sizes = seen;

        let mut out = Vec::new();
        for path in ready {
            let name = path.file_name().expect("file").to_string_lossy().into_owned();
            let claimed = self.dir.processing().join(&name);
            if fs::rename(&path, &claimed).is_err() {
                // someone else claimed it
                continue;
            }
            let parsed = fs::read(&claimed).map_err(|e| e.to_string()).and_then(|bytes| {
                let defaults = fields_from_name(&name).unwrap_or_default();
                parse_event_with(&bytes, defaults, &self.catalog).map_err(|e| e.to_string())
            });
            match parsed {
                Ok(event) => out.push(Delivered { event, file: claimed }),
                Err(reason) => {
                    log::warn!("event_rejected file={name} reason=\"{reason}\"");
                    if let Err(e) = self.dir.mark_failed(&claimed, &reason) {
                        log::error!("event_move_failed file={name} error=\"{e}\"");
                    }
                }
            }
        }
        out
    }
}

/// Polls until `shutdown` is set, handing every claimed event to `sink`.
pub fn watch_drop_dir(
    watcher: &mut Watcher,
    interval: Duration,
    shutdown: &AtomicBool,
    mut sink: impl FnMut(Delivered),
) {
    while !shutdown.load(Ordering::SeqCst) {
        for d in watcher.poll_once() {
            sink(d);
        }
        let mut slept = Duration::ZERO;
        while slept < interval && !shutdown.load(Ordering::SeqCst) {
            let step = Duration::from_millis(50).min(interval - slept);
            std::thread::sleep(step);
            slept += step;
        }
    }
}
