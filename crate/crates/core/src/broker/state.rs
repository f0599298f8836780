//! The broker's synchronous state machine. Every method takes `now`
//! explicitly so the same code runs under wall and simulated clocks.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::task::Waker;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ArriveOutcome, BrokerError, JobEnvelope, Lease, QueueName, ReapAction, Reaped};
use crate::model::{Millis, VantagePoint};

#[derive(Debug, Clone, Default)]
pub struct SyncState {
    pub party_size: u32,
    pub arrivals: u32,
    pub released_at: Option<Millis>,
    waiters: Vec<Waker>,
}

impl SyncState {
    pub fn released(&self) -> bool {
        self.released_at.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BrokerStatus {
    pub queued_residential: usize,
    pub queued_common: usize,
    pub leased: usize,
    pub completed: usize,
    pub dropped: usize,
    pub sync_tags: usize,
    pub released_tags: usize,
}

impl BrokerStatus {
    /// Jobs that still need a worker (queued or leased).
    pub fn outstanding(&self) -> usize {
        self.queued_residential + self.queued_common + self.leased
    }
}

#[derive(Debug, Clone, Default)]
pub struct BrokerCore {
    // queued and leased jobs
    jobs: IndexMap<String, JobEnvelope>,
    queues: [VecDeque<String>; 2],
    leases: BTreeSet<(Millis, String)>,
    finished: HashSet<String>,
    completed: usize,
    dropped: usize,
    syncs: HashMap<String, SyncState>,
    unreported: Vec<Reaped>,
}

fn slot(queue: QueueName) -> usize {
    match queue {
        QueueName::Residential => 0,
        QueueName::Common => 1,
    }
}

impl BrokerCore {
    pub fn enqueue(&mut self, queue: QueueName, mut job: JobEnvelope, now: Millis) -> Result<(), BrokerError> {
        if self.jobs.contains_key(&job.job_id) || self.finished.contains(&job.job_id) {
            return Err(BrokerError::DuplicateJobId(job.job_id));
        }
        job.enqueue_time = now;
        job.lease = None;
        job.queue = queue;
        self.queues[slot(queue)].push_back(job.job_id.clone());
        self.jobs.insert(job.job_id.clone(), job);
        Ok(())
    }

    /// Lease the oldest job of `queue` (restricted to `vp` when given).
    pub fn dequeue(
        &mut self,
        queue: QueueName,
        worker_id: &str,
        lease_ms: Millis,
        vp: Option<VantagePoint>,
        now: Millis,
    ) -> Result<Option<JobEnvelope>, BrokerError> {
        if lease_ms == 0 {
            return Err(BrokerError::InvalidLease);
        }
        self.expire(now);
        let q = &mut self.queues[slot(queue)];
        let pos = match vp {
            None => (!q.is_empty()).then_some(0),
            Some(vp) => q.iter().position(|id| self.jobs[id].config.vp == vp),
        };
        let Some(id) = pos.and_then(|p| q.remove(p)) else {
            return Ok(None);
        };
        let job = self.jobs.get_mut(&id).expect("queued job is live");
        let expiry = now + lease_ms;
        job.lease = Some(Lease { worker_id: worker_id.to_string(), expiry });
        job.attempt += 1;
        self.leases.insert((expiry, id));
        Ok(Some(job.clone()))
    }

    fn holder(&mut self, job_id: &str, worker_id: &str, now: Millis) -> Result<Millis, BrokerError> {
        self.expire(now);
        let lost = || BrokerError::LeaseLost { job_id: job_id.to_string(), worker_id: worker_id.to_string() };
        let job = self.jobs.get(job_id).ok_or_else(lost)?;
        match &job.lease {
            Some(l) if l.worker_id == worker_id => Ok(l.expiry),
            _ => Err(lost()),
        }
    }

    pub fn renew(&mut self, job_id: &str, worker_id: &str, lease_ms: Millis, now: Millis) -> Result<Millis, BrokerError> {
        if lease_ms == 0 {
            return Err(BrokerError::InvalidLease);
        }
        let old = self.holder(job_id, worker_id, now)?;
        self.leases.remove(&(old, job_id.to_string()));
        let expiry = now + lease_ms;
        self.leases.insert((expiry, job_id.to_string()));
        self.jobs[job_id].lease.as_mut().expect("holder checked").expiry = expiry;
        Ok(expiry)
    }

    pub fn complete(&mut self, job_id: &str, worker_id: &str, now: Millis) -> Result<(), BrokerError> {
        let expiry = self.holder(job_id, worker_id, now)?;
        self.leases.remove(&(expiry, job_id.to_string()));
        self.jobs.shift_remove(job_id);
        self.finished.insert(job_id.to_string());
        self.completed += 1;
        Ok(())
    }

    /// Process every lease that has expired by `now`: the first expiry
    /// requeues the job flagged `requeued`, the second drops it.
    fn expire(&mut self, now: Millis) {
        while let Some((expiry, id)) = self.leases.first().cloned() {
            if expiry > now {
                break;
            }
            self.leases.pop_first();
            let mut job = self.jobs.get(&id).expect("leased job is live").clone();
            if job.config.requeued {
                self.jobs.shift_remove(&id);
                self.finished.insert(id);
                self.dropped += 1;
                self.unreported.push(Reaped { job, action: ReapAction::Dropped, at: now });
            } else {
                job.config.requeued = true;
                job.lease = None;
                job.enqueue_time = now;
                self.queues[slot(job.queue)].push_back(id.clone());
                self.jobs.insert(id, job.clone());
                self.unreported.push(Reaped { job, action: ReapAction::Requeued, at: now });
            }
        }
    }

    /// Expire leases and hand over every action not yet reported.
    pub fn reap(&mut self, now: Millis) -> Vec<Reaped> {
        self.expire(now);
        std::mem::take(&mut self.unreported)
    }

    pub fn sync_arrive(&mut self, tag: &str, party_size: u32, now: Millis) -> Result<ArriveOutcome, BrokerError> {
        if party_size == 0 {
            return Err(BrokerError::PartySizeMismatch { tag: tag.to_string(), expected: 1, got: 0 });
        }
        let state = self
            .syncs
            .entry(tag.to_string())
            .or_insert_with(|| SyncState { party_size, ..SyncState::default() });
        if state.party_size != party_size {
            return Err(BrokerError::PartySizeMismatch {
                tag: tag.to_string(),
                expected: state.party_size,
                got: party_size,
            });
        }
        state.arrivals += 1;
        if let Some(at) = state.released_at {
            return Ok(ArriveOutcome::Released { at });
        }
        if state.arrivals == state.party_size {
            state.released_at = Some(now);
            state.waiters.drain(..).for_each(Waker::wake);
            return Ok(ArriveOutcome::Released { at: now });
        }
        Ok(ArriveOutcome::Waiting { arrivals: state.arrivals })
    }

    /// Release time of `tag`, registering `waker` when not yet released.
    pub fn poll_release(&mut self, tag: &str, waker: Option<&Waker>) -> Result<Option<Millis>, BrokerError> {
        let state = self.syncs.get_mut(tag).ok_or_else(|| BrokerError::UnknownTag(tag.to_string()))?;
        if state.released_at.is_none() {
            if let Some(w) = waker {
                if !state.waiters.iter().any(|x| x.will_wake(w)) {
                    state.waiters.push(w.clone());
                }
            }
        }
        Ok(state.released_at)
    }

    pub fn sync_state(&self, tag: &str) -> Option<&SyncState> {
        self.syncs.get(tag)
    }

    pub fn status(&self) -> BrokerStatus {
        BrokerStatus {
            queued_residential: self.queues[0].len(),
            queued_common: self.queues[1].len(),
            leased: self.leases.len(),
            completed: self.completed,
            dropped: self.dropped,
            sync_tags: self.syncs.len(),
            released_tags: self.syncs.values().filter(|s| s.released()).count(),
        }
    }
}
