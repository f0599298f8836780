//! Barrier verification: exhaustive interleaving exploration for small
//! parties and a multi-threaded stress run over many crawl sets.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};
use std::thread;

use futures::executor::LocalPool;
use futures::task::{waker, ArcWake, LocalSpawnExt};

use super::{ArriveOutcome, BrokerCore};
use crate::detrand::DetRand;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckReport {
    /// Complete schedules explored (model check) or crawl sets run (stress).
    pub runs: usize,
    pub early_releases: usize,
    pub lost_waiters: usize,
    /// Late arrivals that were not admitted immediately.
    pub reset_violations: usize,
    /// Sets whose final arrival counter differs from the number of arrivals.
    pub miscounts: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.runs > 0 && self.early_releases + self.lost_waiters + self.reset_violations + self.miscounts == 0
    }

    fn absorb(&mut self, other: &CheckReport) {
        self.runs += other.runs;
        self.early_releases += other.early_releases;
        self.lost_waiters += other.lost_waiters;
        self.reset_violations += other.reset_violations;
        self.miscounts += other.miscounts;
    }
}

struct Flag(AtomicBool);

impl ArcWake for Flag {
    fn wake_by_ref(arc_self: &Arc<Self>) {
        arc_self.0.store(true, Ordering::SeqCst);
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pc {
    Arrive,
    Await,
    Done,
}

/// Replay `schedule` on a fresh broker and return the resulting process
/// states together with any violations observed along the way.
fn replay(party: u32, procs: usize, schedule: &[usize], report: &mut CheckReport) -> (Vec<Pc>, Vec<bool>) {
    const TAG: &str = "set";
    let mut core = BrokerCore::default();
    let mut pcs = vec![Pc::Arrive; procs];
    let flags: Vec<Arc<Flag>> = (0..procs).map(|_| Arc::new(Flag(AtomicBool::new(false)))).collect();
    // a blocked process is runnable again only once its waker fired
    let mut runnable = vec![true; procs];
    let mut arrivals = 0u32;
    for &p in schedule {
        match pcs[p] {
            Pc::Arrive => {
                let was_released = core.sync_state(TAG).is_some_and(|s| s.released());
                arrivals += 1;
                match core.sync_arrive(TAG, party, arrivals as u64).expect("consistent party") {
                    ArriveOutcome::Released { .. } => {
                        if arrivals < party {
                            report.early_releases += 1;
                        }
                        pcs[p] = Pc::Done;
                    }
                    ArriveOutcome::Waiting { .. } => {
                        if was_released {
                            report.reset_violations += 1;
                        }
                        pcs[p] = Pc::Await;
                    }
                }
            }
            Pc::Await => {
                flags[p].0.store(false, Ordering::SeqCst);
                let w = waker(Arc::clone(&flags[p]));
                match core.poll_release(TAG, Some(&w)).expect("tag exists") {
                    Some(_) => {
                        if core.sync_state(TAG).unwrap().arrivals < party {
                            report.early_releases += 1;
                        }
                        pcs[p] = Pc::Done;
                    }
                    None => runnable[p] = false,
                }
            }
            Pc::Done => unreachable!("done processes are never scheduled"),
        }
        for (i, f) in flags.iter().enumerate() {
            if f.0.load(Ordering::SeqCst) {
                runnable[i] = true;
            }
        }
        if let Some(s) = core.sync_state(TAG) {
            if s.released() && s.arrivals < party {
                report.early_releases += 1;
            }
            if s.arrivals != arrivals {
                report.miscounts += 1;
            }
        }
    }
    (pcs, runnable)
}

fn explore(party: u32, procs: usize, schedule: &mut Vec<usize>, report: &mut CheckReport) {
    let mut scratch = CheckReport::default();
    let (pcs, runnable) = replay(party, procs, schedule, &mut scratch);
    let enabled: Vec<usize> = (0..procs).filter(|&p| pcs[p] != Pc::Done && runnable[p]).collect();
    if enabled.is_empty() {
        // terminal: with at least `party` processes every one must be done
        scratch.runs = 1;
        if procs as u32 >= party {
            scratch.lost_waiters += pcs.iter().filter(|&&pc| pc != Pc::Done).count();
        }
        report.absorb(&scratch);
        return;
    }
    for p in enabled {
        schedule.push(p);
        explore(party, procs, schedule, report);
        schedule.pop();
    }
}

/// Explore every interleaving of `party` members plus one late arrival
/// (arrive, then await) for each party size up to `max_party`.
pub fn model_check(max_party: u32) -> CheckReport {
    let mut report = CheckReport::default();
    for party in 1..=max_party {
        for procs in [party as usize, party as usize + 1] {
            explore(party, procs, &mut Vec::new(), &mut report);
        }
    }
    report
}

/// `threads` OS threads each play one member of every one of `sets` crawl
/// sets, in a per-thread shuffled order, through real waker-driven waits.
pub fn stress(sets: usize, threads: usize, seed: u64) -> CheckReport {
    let core = Arc::new(Mutex::new(BrokerCore::default()));
    let early = Arc::new(AtomicUsize::new(0));
    let handles: Vec<_> = (0..threads)
        .map(|t| {
            let (core, early) = (Arc::clone(&core), Arc::clone(&early));
            thread::spawn(move || {
                let mut order: Vec<usize> = (0..sets).collect();
                let mut rng = DetRand::substream(seed, &format!("stress:{t}"));
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.range(0, i as u64) as usize);
                }
                let done = Arc::new(AtomicUsize::new(0));
                let mut pool = LocalPool::new();
                for set in order {
                    let (core, early, done) = (Arc::clone(&core), Arc::clone(&early), Arc::clone(&done));
                    let party = threads as u32;
                    pool.spawner()
                        .spawn_local(async move {
                            let tag = format!("set-{set}");
                            let out = core.lock().unwrap().sync_arrive(&tag, party, 0).unwrap();
                            if let ArriveOutcome::Waiting { .. } = out {
                                futures::future::poll_fn(|cx: &mut Context<'_>| {
                                    let mut c = core.lock().unwrap();
                                    match c.poll_release(&tag, Some(cx.waker())).unwrap() {
                                        Some(_) => Poll::Ready(()),
                                        None => Poll::Pending,
                                    }
                                })
                                .await;
                            }
                            if core.lock().unwrap().sync_state(&tag).unwrap().arrivals < party {
                                early.fetch_add(1, Ordering::SeqCst);
                            }
                            done.fetch_add(1, Ordering::SeqCst);
                        })
                        .expect("spawn");
                    pool.run_until_stalled();
                }
                // block until every waiter has been woken
                let deadline = std::time::Instant::now() + std::time::Duration::from_secs(60);
                while done.load(Ordering::SeqCst) < sets && std::time::Instant::now() < deadline {
                    pool.run_until_stalled();
                    thread::yield_now();
                }
                sets - done.load(Ordering::SeqCst)
            })
        })
        .collect();
    let lost: usize = handles.into_iter().map(|h| h.join().expect("stress thread")).sum();
    let core = core.lock().unwrap();
    let miscounts = (0..sets)
        .filter(|s| {
            let st = core.sync_state(&format!("set-{s}")).unwrap();
            st.arrivals != threads as u32 || !st.released()
        })
        .count();
    CheckReport {
        runs: sets,
        early_releases: early.load(Ordering::SeqCst),
        lost_waiters: lost,
        reset_violations: 0,
        miscounts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_interleavings_up_to_three() {
        let report = model_check(3);
        assert!(report.passed(), "{report:?}");
        // party 3 plus a late arrival alone has thousands of schedules
        assert!(report.runs > 1_000, "{}", report.runs);
    }

    #[test]
    fn small_stress_run() {
        let report = stress(500, 4, 7);
        assert!(report.passed(), "{report:?}");
    }
}
