//! Central coordination: the residential and common crawl queues with
//! lease-based stall detection, and the non-resetting crawl-set barrier.
//!
//! [`Broker`] is the in-process service; [`wire`] exposes it over TCP and
//! provides [`wire::RemoteBroker`]. Workers only see [`BrokerClient`].

use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};

use async_trait::async_trait;
use futures::future::{self, Either};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{CrawlConfig, Millis, VantagePoint};

mod state;
pub mod verify;
pub mod wire;

pub use state::{BrokerCore, BrokerStatus, SyncState};

/// Longer than the crawl watchdog so a live worker always finishes first.
pub const DEFAULT_LEASE_MS: Millis = 240_000;
/// How long a crawl-set member waits at the barrier before going alone.
pub const BARRIER_TIMEOUT_MS: Millis = 120_000;
pub const DEFAULT_PORT: u16 = 7400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueueName {
    Residential,
    Common,
}

impl QueueName {
    pub fn for_vp(vp: VantagePoint) -> QueueName {
        match vp {
            VantagePoint::Residential => QueueName::Residential,
            _ => QueueName::Common,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Lease {
    pub worker_id: String,
    pub expiry: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct JobEnvelope {
    pub job_id: String,
    pub config: CrawlConfig,
    pub queue: QueueName,
    pub enqueue_time: Millis,
    pub lease: Option<Lease>,
    /// Number of times the job has been handed to a worker.
    pub attempt: u32,
}

impl JobEnvelope {
    pub fn new(config: CrawlConfig) -> Self {
        JobEnvelope {
            job_id: config.crawl_id(),
            queue: QueueName::for_vp(config.vp),
            config,
            enqueue_time: 0,
            lease: None,
            attempt: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReapAction {
    Requeued,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Reaped {
    pub job: JobEnvelope,
    pub action: ReapAction,
    pub at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum ArriveOutcome {
    Released { at: Millis },
    Waiting { arrivals: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum ReleaseOutcome {
    Released { at: Millis },
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "kebab-case")]
pub enum BrokerError {
    #[error("duplicate job id {0}")]
    DuplicateJobId(String),
    #[error("sync tag {tag}: party size {got} differs from {expected}")]
    PartySizeMismatch { tag: String, expected: u32, got: u32 },
    #[error("unknown sync tag {0}")]
    UnknownTag(String),
    #[error("lease_ms must be positive")]
    InvalidLease,
    #[error("job {job_id} is not leased to {worker_id}")]
    LeaseLost { job_id: String, worker_id: String },
    #[error("broker unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Everything a worker or scheduler needs from the broker.
#[async_trait]
pub trait BrokerClient: Send + Sync {
    async fn enqueue(&self, queue: QueueName, job: JobEnvelope) -> Result<(), BrokerError>;
    async fn dequeue(
        &self,
        queue: QueueName,
        worker_id: &str,
        lease_ms: Millis,
        vp: Option<VantagePoint>,
    ) -> Result<Option<JobEnvelope>, BrokerError>;
    async fn sync_arrive(&self, tag: &str, party_size: u32) -> Result<ArriveOutcome, BrokerError>;
    async fn await_release(&self, tag: &str, timeout_ms: Millis) -> Result<ReleaseOutcome, BrokerError>;
    async fn renew(&self, job_id: &str, worker_id: &str, lease_ms: Millis) -> Result<Millis, BrokerError>;
    async fn complete(&self, job_id: &str, worker_id: &str) -> Result<(), BrokerError>;
    async fn reap(&self) -> Result<Vec<Reaped>, BrokerError>;
    async fn status(&self) -> Result<BrokerStatus, BrokerError>;
}

/// The broker service: shared state plus the clock that stamps it.
#[derive(Clone)]
pub struct Broker {
    core: Arc<Mutex<BrokerCore>>,
    clock: Arc<dyn Clock>,
}

impl Broker {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Broker { core: Arc::default(), clock }
    }

    pub fn with_core<R>(&self, f: impl FnOnce(&mut BrokerCore) -> R) -> R {
        f(&mut self.core.lock().unwrap())
    }

    fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    /// Resolves once `tag` is released. Fails immediately on unknown tags.
    pub fn release_signal(&self, tag: &str) -> ReleaseSignal {
        ReleaseSignal { core: Arc::clone(&self.core), tag: tag.to_string() }
    }
}

pub struct ReleaseSignal {
    core: Arc<Mutex<BrokerCore>>,
    tag: String,
}

impl Future for ReleaseSignal {
    type Output = Result<Millis, BrokerError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        match self.core.lock().unwrap().poll_release(&self.tag, Some(cx.waker())) {
            Ok(Some(at)) => Poll::Ready(Ok(at)),
            Ok(None) => Poll::Pending,
            Err(e) => Poll::Ready(Err(e)),
        }
    }
}

#[async_trait]
impl BrokerClient for Broker {
    async fn enqueue(&self, queue: QueueName, job: JobEnvelope) -> Result<(), BrokerError> {
        let now = self.now();
        self.with_core(|c| c.enqueue(queue, job, now))
    }

    async fn dequeue(
        &self,
        queue: QueueName,
        worker_id: &str,
        lease_ms: Millis,
        vp: Option<VantagePoint>,
    ) -> Result<Option<JobEnvelope>, BrokerError> {
        let now = self.now();
        self.with_core(|c| c.dequeue(queue, worker_id, lease_ms, vp, now))
    }

    async fn sync_arrive(&self, tag: &str, party_size: u32) -> Result<ArriveOutcome, BrokerError> {
        let now = self.now();
        self.with_core(|c| c.sync_arrive(tag, party_size, now))
    }

    async fn await_release(&self, tag: &str, timeout_ms: Millis) -> Result<ReleaseOutcome, BrokerError> {
        let deadline = self.now() + timeout_ms;
        let signal = self.release_signal(tag);
        match future::select(signal, self.clock.sleep_until(deadline)).await {
            Either::Left((res, _)) => res.map(|at| ReleaseOutcome::Released { at }),
            Either::Right(((), _)) => Ok(ReleaseOutcome::TimedOut),
        }
    }

    async fn renew(&self, job_id: &str, worker_id: &str, lease_ms: Millis) -> Result<Millis, BrokerError> {
        let now = self.now();
        self.with_core(|c| c.renew(job_id, worker_id, lease_ms, now))
    }

    async fn complete(&self, job_id: &str, worker_id: &str) -> Result<(), BrokerError> {
        let now = self.now();
        self.with_core(|c| c.complete(job_id, worker_id, now))
    }

    async fn reap(&self) -> Result<Vec<Reaped>, BrokerError> {
        let now = self.now();
        Ok(self.with_core(|c| c.reap(now)))
    }

    async fn status(&self) -> Result<BrokerStatus, BrokerError> {
        Ok(self.with_core(|c| c.status()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::executor::SimExecutor;

    #[test]
    fn four_awaiters_all_released() {
        let clock = SimClock::starting_at(0);
        let broker = Broker::new(Arc::new(clock.clone()));
        let mut exec = SimExecutor::new(clock.clone());
        let seen = Arc::new(Mutex::new(Vec::new()));
        for i in 0..4u64 {
            let (b, c, s) = (broker.clone(), clock.clone(), Arc::clone(&seen));
            exec.spawn(async move {
                c.sleep_until(i * 1_000).await;
                b.sync_arrive("set", 4).await.unwrap();
                let out = b.await_release("set", BARRIER_TIMEOUT_MS).await.unwrap();
                s.lock().unwrap().push(out);
            });
        }
        exec.run().unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![ReleaseOutcome::Released { at: 3_000 }; 4]);
    }

    #[test]
    fn await_times_out_at_deadline() {
        let clock = SimClock::starting_at(500);
        let broker = Broker::new(Arc::new(clock.clone()));
        let mut exec = SimExecutor::new(clock.clone());
        let (b, c) = (broker.clone(), clock.clone());
        let out = Arc::new(Mutex::new(None));
        let o = Arc::clone(&out);
        exec.spawn(async move {
            b.sync_arrive("lonely", 4).await.unwrap();
            let r = b.await_release("lonely", BARRIER_TIMEOUT_MS).await.unwrap();
            *o.lock().unwrap() = Some((r, c.now_ms()));
        });
        exec.run().unwrap();
        assert_eq!(*out.lock().unwrap(), Some((ReleaseOutcome::TimedOut, 500 + BARRIER_TIMEOUT_MS)));
    }

    #[test]
    fn await_after_release_is_immediate_and_unknown_tag_fails() {
        let clock = SimClock::starting_at(0);
        let broker = Broker::new(Arc::new(clock.clone()));
        let b = broker.clone();
        let mut exec = SimExecutor::new(clock);
        exec.spawn(async move {
            b.sync_arrive("one", 1).await.unwrap();
            assert_eq!(b.await_release("one", 10).await.unwrap(), ReleaseOutcome::Released { at: 0 });
            assert_eq!(b.await_release("none", 10).await, Err(BrokerError::UnknownTag("none".into())));
        });
        exec.run().unwrap();
    }
}
