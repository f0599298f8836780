//! Turning visit-level outcome targets into per-site behaviour.
//!
//! A crawl stops descending when a page fails, so failure rates measured
//! over *visits* are not the per-visit probabilities a page draws from:
//! sites that work attract more visits. The calibration splits each VP's
//! population into classes and solves for the per-visit failure
//! probability on troubled sites that makes the expected visit-weighted
//! rates hit their targets.
//!
//! Classes, in precedence order:
//!
//! * **dead** — the host is unreachable; every landing visit is a
//!   connectivity failure;
//! * **wall** — a CAPTCHA interstitial replaces the landing page;
//! * **troubled** — pages fail with the solved probabilities;
//! * **robust** — pages always load.

/// Visit-level targets for one VP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Targets {
    pub connectivity: f64,
    pub teardown: f64,
    pub navigation: f64,
    pub other: f64,
    /// CAPTCHA pages / completed pages.
    pub captcha: f64,
}

impl Targets {
    pub fn failure(&self) -> f64 {
        self.connectivity + self.teardown + self.navigation + self.other
    }
}

/// Realized class sizes. Single/multi refers to the site's link
/// structure: a single-page site offers no same-site links.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub dead: usize,
    pub wall: usize,
    pub robust_single: usize,
    pub robust_multi: usize,
    pub troubled_single: usize,
    pub troubled_multi: usize,
}

/// Crawl geometry plus the dead-end rate on troubled pages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub width: u32,
    pub depth: u32,
    pub dead_end: f64,
}

impl Geometry {
    /// Expected visits per crawl on a multi-page site whose pages each
    /// yield links with probability `q`.
    pub fn visits_multi(&self, q: f64) -> f64 {
        (0..self.depth).map(|k| (self.width as f64 * q).powi(k as i32)).sum()
    }
}

/// Per-visit probabilities on troubled pages.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Probabilities {
    pub connectivity: f64,
    pub teardown: f64,
    pub navigation: f64,
    pub other: f64,
}

impl Probabilities {
    pub fn total(&self) -> f64 {
        self.connectivity + self.teardown + self.navigation + self.other
    }
}

/// Expected per-crawl visit totals for given counts and troubled failure
/// probability `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub visits: f64,
    pub troubled_visits: f64,
    pub completed: f64,
}

pub fn expectation(c: &ClassCounts, g: &Geometry, f: f64) -> Expectation {
    let q = (1.0 - f) * (1.0 - g.dead_end);
    let full = g.visits_multi(1.0);
    let troubled_visits = c.troubled_single as f64 + c.troubled_multi as f64 * g.visits_multi(q);
    let robust = c.robust_single as f64 + c.robust_multi as f64 * full;
    Expectation {
        visits: c.dead as f64 + c.wall as f64 + robust + troubled_visits,
        troubled_visits,
        completed: c.wall as f64 + robust + (1.0 - f) * troubled_visits,
    }
}

/// Troubled-page failure probability `f` such that the expected failure
/// share over all visits equals `target`. `None` if even `f = 1` falls
/// short; `Some(0)` if dead sites alone exceed it.
pub fn solve_failure(c: &ClassCounts, g: &Geometry, target: f64) -> Option<f64> {
    let gap = |f: f64| {
        let e = expectation(c, g, f);
        c.dead as f64 + f * e.troubled_visits - target * e.visits
    };
    if gap(0.0) >= 0.0 {
        return Some(0.0);
    }
    if gap(1.0) < -1e-9 {
        return None;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = (lo + hi) / 2.0;
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}

/// Split the solved failure probability by cause so each cause hits its
/// own visit-level target. Dead sites already supply part of the
/// connectivity share.
pub fn split(c: &ClassCounts, g: &Geometry, t: &Targets, f: f64) -> Probabilities {
    let e = expectation(c, g, f);
    if e.troubled_visits <= 0.0 {
        return Probabilities::default();
    }
    let per = |target: f64, offset: f64| ((target * e.visits - offset) / e.troubled_visits).clamp(0.0, 1.0);
    let mut p = Probabilities {
        connectivity: per(t.connectivity, c.dead as f64),
        teardown: per(t.teardown, 0.0),
        navigation: per(t.navigation, 0.0),
        other: per(t.other, 0.0),
    };
    // keep degenerate configurations exact
    let total = p.total();
    if total > 1.0 || (1.0 - total).abs() < 1e-9 {
        for x in [&mut p.connectivity, &mut p.teardown, &mut p.navigation, &mut p.other] {
            *x /= total;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: Geometry = Geometry { width: 3, depth: 2, dead_end: 0.0 };

    #[test]
    fn expectation_counts_visits_by_hand() {
        let c = ClassCounts {
            dead: 1,
            wall: 2,
            robust_single: 3,
            robust_multi: 4,
            troubled_single: 5,
            troubled_multi: 6,
        };
        // q = 0.5: troubled multi = 1 + 1.5 = 2.5 visits
        let e = expectation(&c, &G, 0.5);
        assert_eq!(e.troubled_visits, 5.0 + 6.0 * 2.5);
        assert_eq!(e.visits, 1.0 + 2.0 + 3.0 + 16.0 + 20.0);
        assert_eq!(e.completed, 2.0 + 3.0 + 16.0 + 10.0);
    }

    #[test]
    fn all_troubled_means_probabilities_equal_targets() {
        let c = ClassCounts { troubled_single: 10, ..ClassCounts::default() };
        let t = Targets { connectivity: 0.04, teardown: 0.03, navigation: 0.2, other: 0.03, captcha: 0.0 };
        let f = solve_failure(&c, &G, t.failure()).unwrap();
        assert!((f - 0.3).abs() < 1e-12);
        let p = split(&c, &G, &t, f);
        assert!((p.navigation - 0.2).abs() < 1e-9);
        assert!((p.connectivity - 0.04).abs() < 1e-9);
    }

    #[test]
    fn solved_rate_hits_target() {
        let c = ClassCounts {
            dead: 7,
            wall: 20,
            robust_single: 40,
            robust_multi: 90,
            troubled_single: 60,
            troubled_multi: 140,
        };
        let g = Geometry { dead_end: 0.05, ..G };
        let f = solve_failure(&c, &g, 0.2).unwrap();
        let e = expectation(&c, &g, f);
        assert!(((c.dead as f64 + f * e.troubled_visits) / e.visits - 0.2).abs() < 1e-9);
    }

    #[test]
    fn too_few_troubled_sites_is_reported() {
        let c = ClassCounts { robust_multi: 100, troubled_single: 1, ..ClassCounts::default() };
        assert_eq!(solve_failure(&c, &G, 0.5), None);
    }

    #[test]
    fn certain_failure_is_exact() {
        let c = ClassCounts { troubled_multi: 3, ..ClassCounts::default() };
        let t = Targets { connectivity: 0.0, teardown: 0.0, navigation: 1.0, other: 0.0, captcha: 0.0 };
        let f = solve_failure(&c, &G, 1.0).unwrap();
        assert_eq!(split(&c, &G, &t, f).navigation, 1.0);
    }
}
