//! Single-threaded deterministic executor for simulations.
//!
//! Ready tasks run in wake order; when none is ready the [`SimClock`] jumps
//! to the next timer. Given the same spawned tasks, every run interleaves
//! them identically.

use std::collections::VecDeque;
use std::future::Future;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};

use futures::future::BoxFuture;
use futures::task::{waker_ref, ArcWake};
use thiserror::Error;

use crate::clock::SimClock;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecutorError {
    #[error("{0} task(s) blocked with no pending timer")]
    Deadlock(usize),
}

struct TaskWaker {
    id: usize,
    queued: AtomicBool,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl ArcWake for TaskWaker {
    fn wake_by_ref(arc_self: &Arc<Self>) {
        if !arc_self.queued.swap(true, Ordering::SeqCst) {
            arc_self.ready.lock().unwrap().push_back(arc_self.id);
        }
    }
}

struct Task {
    future: BoxFuture<'static, ()>,
    waker: Arc<TaskWaker>,
}

/// Handle for spawning tasks onto a running [`SimExecutor`].
#[derive(Clone, Default)]
pub struct Spawner {
    pending: Arc<Mutex<Vec<BoxFuture<'static, ()>>>>,
}

impl Spawner {
    pub fn spawn(&self, fut: impl Future<Output = ()> + Send + 'static) {
        self.pending.lock().unwrap().push(Box::pin(fut));
    }
}

pub struct SimExecutor {
    clock: SimClock,
    tasks: Vec<Option<Task>>,
    ready: Arc<Mutex<VecDeque<usize>>>,
    spawner: Spawner,
    polls: u64,
}

impl SimExecutor {
    pub fn new(clock: SimClock) -> Self {
        SimExecutor {
            clock,
            tasks: Vec::new(),
            ready: Arc::default(),
            spawner: Spawner::default(),
            polls: 0,
        }
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn spawner(&self) -> Spawner {
        self.spawner.clone()
    }

    pub fn spawn(&mut self, fut: impl Future<Output = ()> + Send + 'static) {
        self.spawner.spawn(fut);
    }

    fn adopt_spawned(&mut self) {
        let pending = std::mem::take(&mut *self.spawner.pending.lock().unwrap());
        for future in pending {
            let id = self.tasks.len();
            let waker = Arc::new(TaskWaker { id, queued: AtomicBool::new(true), ready: Arc::clone(&self.ready) });
            self.tasks.push(Some(Task { future, waker }));
            self.ready.lock().unwrap().push_back(id);
        }
    }

    fn live(&self) -> usize {
        self.tasks.iter().filter(|t| t.is_some()).count()
    }

    /// Run until every task has finished.
    pub fn run(&mut self) -> Result<u64, ExecutorError> {
        loop {
            self.adopt_spawned();
            loop {
                let next = self.ready.lock().unwrap().pop_front();
                let Some(id) = next else { break };
                let Some(task) = self.tasks[id].as_mut() else { continue };
                task.waker.queued.store(false, Ordering::SeqCst);
                let waker = waker_ref(&task.waker);
                let mut cx = Context::from_waker(&waker);
                self.polls += 1;
                if let Poll::Ready(()) = task.future.as_mut().poll(&mut cx) {
                    self.tasks[id] = None;
                }
                self.adopt_spawned();
            }
            let live = self.live();
            if live == 0 {
                return Ok(self.polls);
            }
            if !self.clock.advance() {
                return Err(ExecutorError::Deadlock(live));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;

    #[test]
    fn interleaving_is_deterministic() {
        let run = || {
            let clock = SimClock::starting_at(0);
            let mut exec = SimExecutor::new(clock.clone());
            let log = Arc::new(Mutex::new(Vec::new()));
            for i in 0..5u64 {
                let (c, l) = (clock.clone(), Arc::clone(&log));
                exec.spawn(async move {
                    for step in 0..3u64 {
                        c.sleep_until((5 - i) * 10 + step * 7).await;
                        l.lock().unwrap().push((c.now_ms(), i));
                    }
                });
            }
            exec.run().unwrap();
            let out = log.lock().unwrap().clone();
            out
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn reports_deadlock() {
        let mut exec = SimExecutor::new(SimClock::default());
        exec.spawn(futures::future::pending::<()>());
        assert_eq!(exec.run(), Err(ExecutorError::Deadlock(1)));
    }

    #[test]
    fn tasks_can_spawn_tasks() {
        let clock = SimClock::default();
        let mut exec = SimExecutor::new(clock.clone());
        let spawner = exec.spawner();
        let hits = Arc::new(Mutex::new(0));
        let h = Arc::clone(&hits);
        exec.spawn(async move {
            let h2 = Arc::clone(&h);
            spawner.spawn(async move {
                *h2.lock().unwrap() += 1;
            });
            *h.lock().unwrap() += 1;
        });
        exec.run().unwrap();
        assert_eq!(*hits.lock().unwrap(), 2);
    }
}
