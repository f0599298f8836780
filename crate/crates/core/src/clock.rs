//! Injected time sources.
//!
//! Everything that waits goes through [`Clock`]: the wall clock for
//! distributed runs, [`SimClock`] for simulation, where time only moves
//! when the executor finds every task blocked.

use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Waker};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use futures::future::{self, BoxFuture, Either};

use crate::model::Millis;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> Millis;
    fn sleep_until(&self, deadline: Millis) -> BoxFuture<'static, ()>;
}

/// A deadline passed before the guarded future finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Elapsed;

/// Run `fut` until `deadline`. A future that completes at the deadline
/// instant counts as finished, since it is polled before the timer.
pub async fn with_deadline<F: Future>(clock: &dyn Clock, deadline: Millis, fut: F) -> Result<F::Output, Elapsed> {
    let fut = std::pin::pin!(fut);
    match future::select(fut, clock.sleep_until(deadline)).await {
        Either::Left((out, _)) => Ok(out),
        Either::Right(((), _)) => Err(Elapsed),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn now_ms(&self) -> Millis {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as Millis).unwrap_or(0)
    }

    fn sleep_until(&self, deadline: Millis) -> BoxFuture<'static, ()> {
        let wait = deadline.saturating_sub(self.now_ms());
        Box::pin(tokio::time::sleep(Duration::from_millis(wait)))
    }
}

#[derive(Default)]
struct SimState {
    now: Millis,
    seq: u64,
    timers: BTreeMap<(Millis, u64), Waker>,
}

/// Discrete simulated time shared by every task of a simulation.
#[derive(Clone, Default)]
pub struct SimClock {
    state: Arc<Mutex<SimState>>,
}

impl SimClock {
    pub fn starting_at(now: Millis) -> Self {
        let clock = SimClock::default();
        clock.state.lock().unwrap().now = now;
        clock
    }

    /// Jump to the earliest pending timer and wake everything due.
    /// Returns false when no timer is pending.
    pub fn advance(&self) -> bool {
        let due = {
            let mut st = self.state.lock().unwrap();
            let Some((&(at, _), _)) = st.timers.iter().next() else {
                return false;
            };
            st.now = st.now.max(at);
            let later = st.timers.split_off(&(at + 1, 0));
            std::mem::replace(&mut st.timers, later)
        };
        due.into_values().for_each(Waker::wake);
        true
    }

    pub fn pending_timers(&self) -> usize {
        self.state.lock().unwrap().timers.len()
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> Millis {
        self.state.lock().unwrap().now
    }

    fn sleep_until(&self, deadline: Millis) -> BoxFuture<'static, ()> {
        Box::pin(SimSleep { state: Arc::clone(&self.state), deadline, key: None })
    }
}

struct SimSleep {
    state: Arc<Mutex<SimState>>,
    deadline: Millis,
    key: Option<(Millis, u64)>,
}

impl Future for SimSleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        let this = &mut *self;
        let mut st = this.state.lock().unwrap();
        if st.now >= this.deadline {
            if let Some(key) = this.key.take() {
                st.timers.remove(&key);
            }
            return Poll::Ready(());
        }
        let key = *this.key.get_or_insert_with(|| {
            st.seq += 1;
            (this.deadline, st.seq)
        });
        st.timers.insert(key, cx.waker().clone());
        Poll::Pending
    }
}

impl Drop for SimSleep {
    fn drop(&mut self) {
        if let Some(key) = self.key.take() {
            if let Ok(mut st) = self.state.lock() {
                st.timers.remove(&key);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::SimExecutor;
    use std::sync::atomic::{AtomicU64, Ordering};

    #[test]
    fn sim_sleep_advances_only_when_blocked() {
        let clock = SimClock::starting_at(1_000);
        let mut exec = SimExecutor::new(clock.clone());
        let seen = Arc::new(AtomicU64::new(0));
        let (c, s) = (clock.clone(), Arc::clone(&seen));
        exec.spawn(async move {
            c.sleep_until(5_000).await;
            s.store(c.now_ms(), Ordering::SeqCst);
        });
        exec.run().unwrap();
        assert_eq!(seen.load(Ordering::SeqCst), 5_000);
        assert_eq!(clock.pending_timers(), 0);
    }

    #[test]
    fn deadline_prefers_the_future_on_ties() {
        let clock = SimClock::starting_at(0);
        let mut exec = SimExecutor::new(clock.clone());
        let out = Arc::new(Mutex::new(Vec::new()));
        let (c, o) = (clock.clone(), Arc::clone(&out));
        exec.spawn(async move {
            let tie = with_deadline(&c, 100, c.sleep_until(100)).await;
            let late = with_deadline(&c, 200, c.sleep_until(201)).await;
            o.lock().unwrap().extend([tie.is_ok(), late.is_ok()]);
            o.lock().unwrap().push(c.now_ms() == 200);
        });
        exec.run().unwrap();
        assert_eq!(*out.lock().unwrap(), vec![true, false, true]);
        assert_eq!(clock.pending_timers(), 0);
    }
}
