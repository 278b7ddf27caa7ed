//! The long-running side: drop-directory watcher feeding a pool of
//! evaluation workers, with at most one evaluation in flight per
//! (assessment, group).

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::evaluator::{Engine, EngineError, Evaluation};
use crate::intake::{coalesce_split, Delivered, DropDir, Watcher};

#[derive(Default)]
struct Queue {
    pending: Vec<Delivered>,
    in_flight: HashSet<(String, String)>,
    closed: bool,
}

/// Pending events plus the per-key in-flight set.
#[derive(Default)]
pub struct Scheduler {
    state: Mutex<Queue>,
    ready: Condvar,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Queue> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Queues new events and coalesces per key. Returns the superseded ones.
    pub fn push(&self, events: Vec<Delivered>) -> Vec<Delivered> {
        if events.is_empty() {
            return Vec::new();
        }
        let mut q = self.lock();
        let mut all = std::mem::take(&mut q.pending);
        all.extend(events);
        let (kept, dropped) = coalesce_split(all, |d| &d.event);
        q.pending = kept;
        drop(q);
        self.ready.notify_all();
        dropped
    }

    /// Blocks until an event whose key is idle is available. `None` once
    /// the scheduler is closed.
    pub fn take(&self) -> Option<Delivered> {
        let mut q = self.lock();
        loop {
            if q.closed {
                return None;
            }
            if let Some(i) = q.pending.iter().position(|d| !q.in_flight.contains(&d.event.key())) {
                let d = q.pending.remove(i);
                q.in_flight.insert(d.event.key());
                return Some(d);
            }
            q = self.ready.wait(q).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn finish(&self, key: &(String, String)) {
        self.lock().in_flight.remove(key);
        self.ready.notify_all();
    }

    /// Stops handing out work and returns whatever was still queued.
    pub fn close(&self) -> Vec<Delivered> {
        let mut q = self.lock();
        q.closed = true;
        let rest = std::mem::take(&mut q.pending);
        drop(q);
        self.ready.notify_all();
        rest
    }

    pub fn pending(&self) -> usize {
        self.lock().pending.len()
    }
}

fn settle(drop_dir: &DropDir, d: &Delivered, outcome: &Result<Evaluation, EngineError>) {
    let moved = match outcome {
        Ok(_) => drop_dir.mark_done(&d.file).map(|_| ()),
        Err(e) => drop_dir.mark_failed(&d.file, &e.to_string()).map(|_| ()),
    };
    if let Err(e) = moved {
        log::error!("event_move_failed file={} error=\"{e}\"", d.file.display());
    }
}

fn supersede(engine: &Engine, drop_dir: &DropDir, dropped: Vec<Delivered>) {
    for d in dropped {
        log::info!(
            "superseded assessment={} group={} commit={}",
            d.event.assessment_id,
            d.event.group_id,
            d.event.commit
        );
        if let Err(e) = engine.record_superseded(&d.event) {
            log::error!("record_failed error=\"{e}\"");
        }
        if let Err(e) = drop_dir.mark_done(&d.file) {
            log::error!("event_move_failed file={} error=\"{e}\"", d.file.display());
        }
    }
}

/// Polls until nothing new shows up, then evaluates everything claimed, in
/// order, on the calling thread.
pub fn process_available(engine: &Engine, watcher: &mut Watcher) -> Vec<(Delivered, Result<Evaluation, EngineError>)> {
    let mut claimed = Vec::new();
    loop {
        let first = watcher.poll_once();
        let second = watcher.poll_once();
        if first.is_empty() && second.is_empty() {
            break;
        }
        claimed.extend(first);
        claimed.extend(second);
    }
    let drop_dir = watcher.drop_dir().clone();
    let (kept, dropped) = coalesce_split(claimed, |d| &d.event);
    supersede(engine, &drop_dir, dropped);
    kept.into_iter()
        .map(|d| {
            let outcome = engine.evaluate(&d.event);
            settle(&drop_dir, &d, &outcome);
            (d, outcome)
        })
        .collect()
}

/// Runs the watcher and `workers` evaluation threads until `shutdown` is
/// set. In-flight evaluations finish; queued events go back to the drop
/// directory for the next start.
pub fn serve(
    engine: Arc<Engine>,
    mut watcher: Watcher,
    workers: usize,
    shutdown: &AtomicBool,
    poll_interval: Duration,
) -> std::io::Result<()> {
    let drop_dir = watcher.drop_dir().clone();
    let recovered = drop_dir.recover()?;
    if recovered > 0 {
        log::info!("recovered_events count={recovered}");
    }
    let sched = Arc::new(Scheduler::new());
    let handles: Vec<_> = (0..workers.max(1))
        .map(|i| {
            let (engine, sched, drop_dir) = (engine.clone(), sched.clone(), drop_dir.clone());
            std::thread::Builder::new().name(format!("worker-{i}")).spawn(move || {
                while let Some(d) = sched.take() {
                    let key = d.event.key();
                    let outcome = engine.evaluate(&d.event);
                    settle(&drop_dir, &d, &outcome);
                    sched.finish(&key);
                }
            })
        })
        .collect::<std::io::Result<_>>()?;
    log::info!(
        "serve_started workers={} drop_dir={}",
        workers.max(1),
        drop_dir.root.display()
    );

    while !shutdown.load(Ordering::SeqCst) {
        let claimed = watcher.poll_once();
        let dropped = sched.push(claimed);
        supersede(&engine, &drop_dir, dropped);
        let mut slept = Duration::ZERO;
        while slept < poll_interval && !shutdown.load(Ordering::SeqCst) {
            let step = Duration::from_millis(25).min(poll_interval - slept);
            std::thread::sleep(step);
            slept += step;
        }
    }

    let pending = sched.close();
    for h in handles {
        let _ = h.join();
    }
    for d in &pending {
        if let Err(e) = drop_dir.release(&d.file) {
            log::error!("event_release_failed file={} error=\"{e}\"", d.file.display());
        }
    }
    log::info!("serve_stopped released={}", pending.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intake::SubmissionEvent;

    fn delivered(group: &str, t: i64) -> Delivered {
        Delivered {
            event: SubmissionEvent {
                assessment_id: "lab1".into(),
                group_id: group.into(),
                commit: "0123456789abcdef0123456789abcdef01234567".into(),
                pushed_at: t,
                repo_path: format!("cs101/lab1/{group}"),
                pusher: "alice".into(),
            },
            file: format!("/tmp/{group}-{t}.sub").into(),
        }
    }

    #[test]
    fn one_in_flight_per_key() {
        let s = Scheduler::new();
        assert!(s.push(vec![delivered("g1", 1), delivered("g2", 1)]).is_empty());
        let a = s.take().unwrap();
        assert_eq!(a.event.group_id, "g1");
        let dropped = s.push(vec![delivered("g1", 5)]);
        assert!(dropped.is_empty());
        // g1 is busy, so g2 comes next even though g1's newer event is queued
        let b = s.take().unwrap();
        assert_eq!(b.event.group_id, "g2");
        s.finish(&a.event.key());
        let c = s.take().unwrap();
        assert_eq!((c.event.group_id.as_str(), c.event.pushed_at), ("g1", 5));
    }

    #[test]
    fn queued_events_coalesce() {
        let s = Scheduler::new();
        s.push(vec![delivered("g1", 1)]);
        let dropped = s.push(vec![delivered("g1", 3), delivered("g2", 2)]);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].event.pushed_at, 1);
        assert_eq!(s.pending(), 2);
        assert_eq!(s.close().len(), 2);
        assert!(s.take().is_none());
    }

    #[test]
    fn take_wakes_on_finish() {
        let s = Arc::new(Scheduler::new());
        s.push(vec![delivered("g1", 1), delivered("g1", 2)]);
        // coalesced to one
        let a = s.take().unwrap();
        s.push(vec![delivered("g1", 3)]);
        let s2 = s.clone();
        let h = std::thread::spawn(move || s2.take().map(|d| d.event.pushed_at));
        std::thread::sleep(Duration::from_millis(50));
        s.finish(&a.event.key());
        assert_eq!(h.join().unwrap(), Some(3));
    }
}
