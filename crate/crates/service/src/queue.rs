//! Bounded job queue in front of a fixed pool of worker threads.
//!
//! Submission never waits: it either enqueues or reports overload. The
//! pending count covers queued and running jobs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use tokio::sync::oneshot;

type Job = Box<dyn FnOnce() + Send + 'static>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("queue full ({capacity} pending)")]
pub struct Overloaded {
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("worker panicked while running the job")]
pub struct JobPanicked;

/// Resolves to the job's result once a worker has run it.
pub struct Ticket<R> {
    rx: oneshot::Receiver<Result<R, JobPanicked>>,
}

impl<R> Ticket<R> {
    pub async fn wait(self) -> Result<R, JobPanicked> {
        self.rx.await.unwrap_or(Err(JobPanicked))
    }

    pub fn wait_blocking(self) -> Result<R, JobPanicked> {
        self.rx.blocking_recv().unwrap_or(Err(JobPanicked))
    }
}

pub struct WorkQueue {
    capacity: usize,
    pending: Arc<AtomicUsize>,
    tx: Option<crossbeam_channel::Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl WorkQueue {
    /// Starts `workers` threads. Panics if either argument is zero.
    pub fn new(capacity: usize, workers: usize) -> Self {
        assert!(capacity > 0 && workers > 0, "queue needs capacity and workers");
        let (tx, rx) = crossbeam_channel::unbounded::<Job>();
        let workers = (0..workers)
            .map(|i| {
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("embed-worker-{i}"))
                    .spawn(move || {
                        for job in rx {
                            job();
                        }
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        Self {
            capacity,
            pending: Arc::new(AtomicUsize::new(0)),
            tx: Some(tx),
            workers,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Jobs queued or running.
    pub fn depth(&self) -> usize {
        self.pending.load(Ordering::SeqCst)
    }

    pub fn submit<R, F>(&self, f: F) -> Result<Ticket<R>, Overloaded>
    where
        R: Send + 'static,
        F: FnOnce() -> R + Send + 'static,
    {
        let cap = self.capacity;
        self.pending
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |p| (p < cap).then_some(p + 1))
            .map_err(|_| Overloaded { capacity: cap })?;
        let (done, rx) = oneshot::channel();
        let pending = Arc::clone(&self.pending);
        let job: Job = Box::new(move || {
            let out = catch_unwind(AssertUnwindSafe(f)).map_err(|_| JobPanicked);
            pending.fetch_sub(1, Ordering::SeqCst);
            let _ = done.send(out);
        });
        let tx = self.tx.as_ref().expect("queue is running");
        if tx.send(job).is_err() {
            self.pending.fetch_sub(1, Ordering::SeqCst);
            return Err(Overloaded { capacity: cap });
        }
        Ok(Ticket { rx })
    }
}

impl Drop for WorkQueue {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
