//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run with `cargo test -p mvp-cli --test acceptance` (add `--release` for
//! the fastest end-to-end criteria).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mvp_core::analytics::synth::SynthSpec;
use mvp_core::broker::verify;
use mvp_core::conformance::{
    abp_differential, check_abp_cases, check_analytics, load_abp_cases, timing_scenarios, visit_bound_sweep,
};
use mvp_core::detrand::DetRand;
use mvp_core::model::VantagePoint;
use mvp_core::simweb::Scenario;

type Verdict = Result<String, String>;

const SEED: u64 = 2019;
const SCENARIO_DOMAINS: usize = 500;

fn mvp(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mvp"))
        .args(args)
        .env_remove("MVP_OUT_DIR")
        .output()
        .map_err(|e| format!("spawning mvp: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("mvp {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------

fn plan_arithmetic(tmp: &Path) -> Verdict {
    let out = tmp.join("plan.jsonl");
    mvp(&["plan", "--out", arg(&out)])?;
    let text = fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let mut configs = 0usize;
    let mut tags = BTreeSet::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("plan line {configs}: {e}"))?;
        tags.insert(v["sync-tag"].as_str().ok_or("config without sync-tag")?.to_string());
        configs += 1;
    }
    ensure(configs == 300_000 && tags.len() == 75_000, || {
        format!("{configs} configs, {} sync tags (want 300000, 75000)", tags.len())
    })?;
    Ok(format!("{configs} configs, {} sync tags", tags.len()))
}

fn barrier_correctness() -> Verdict {
    let mc = verify::model_check(3);
    ensure(mc.passed(), || format!("model check: {mc:?}"))?;
    let st = verify::stress(10_000, 4, SEED);
    ensure(st.passed() && st.runs == 10_000, || format!("stress: {st:?}"))?;
    Ok(format!("{} interleavings, {} stressed sets, no violations", mc.runs, st.runs))
}

fn visit_timing() -> Verdict {
    let fixed = timing_scenarios();
    ensure(fixed.passed(), || format!("{:?}", fixed.mismatches))?;
    let sweep = visit_bound_sweep(200, SEED);
    ensure(sweep.passed(), || format!("{:?}", sweep.mismatches))?;
    Ok(format!("{} exact checks, {} sweep checks", fixed.total, sweep.total))
}

fn abp_matcher() -> Verdict {
    let cases = load_abp_cases(workspace_root().join("fixtures/abp/reference_cases.json"))
        .map_err(|e| format!("fixture: {e}"))?;
    ensure(cases.len() == 30, || format!("fixture has {} cases", cases.len()))?;
    let fixture = check_abp_cases(&cases);
    ensure(fixture.passed(), || format!("fixture: {:?}", fixture.mismatches))?;
    let diff = abp_differential(10_000, SEED);
    ensure(diff.passed(), || format!("differential: {:?}", diff.mismatches))?;
    Ok(format!("{}/{} fixture cases, {}/{} differential trials", fixture.agreed, fixture.total, diff.agreed, diff.total))
}

fn analytics_oracle() -> Verdict {
    let mut rng = DetRand::substream(SEED, "acceptance-stores");
    let mut records = 0;
    for i in 0..50 {
        let spec = SynthSpec {
            domains: rng.range(1, 10) as u32,
            reps: rng.range(1, 3) as u32,
            max_visits: rng.range(0, 6) as u32,
            max_requests: rng.range(0, 10) as u32,
            max_frames: rng.range(0, 4) as u32,
        };
        let seed = rng.next_bits();
        let n = check_analytics(seed, &spec).map_err(|e| format!("store {i}: {e}"))?;
        ensure(n <= 10_000, || format!("store {i} has {n} records"))?;
        records += n;
    }
    Ok(format!("50 stores, {records} records, all analyses agree"))
}

// ---------------------------------------------------------------------------

fn simulate(tmp: &Path, name: &str) -> Result<PathBuf, String> {
    let scenario = tmp.join("scenario.json");
    if !scenario.exists() {
        let out = Command::new(env!("CARGO_BIN_EXE_mvp"))
            .args(["scenario", "--reference"])
            .output()
            .map_err(|e| e.to_string())?;
        fs::write(&scenario, &out.stdout).map_err(|e| e.to_string())?;
    }
    let dir = tmp.join(name);
    let top = SCENARIO_DOMAINS.to_string();
    let seed = SEED.to_string();
    mvp(&["simulate", "--scenario", arg(&scenario), "--seed", &seed, "--top", &top, "--out", arg(&dir)])?;
    Ok(dir)
}

/// Label column -> per-VP cells of a `label,university,residential,cloud,tor` CSV.
fn read_table(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty table")?.split(',').collect();
    let mut rows = BTreeMap::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let row = header[1..].iter().zip(&cells[1..]).map(|(h, c)| (h.to_string(), c.to_string())).collect();
        rows.insert(cells[0].to_string(), row);
    }
    Ok(rows)
}

fn pct(rows: &BTreeMap<String, BTreeMap<String, String>>, row: &str, vp: &str) -> Result<f64, String> {
    rows.get(row)
        .and_then(|r| r.get(vp))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| format!("no numeric cell {row}/{vp}"))
}

const VPS: [&str; 4] = ["university", "residential", "cloud", "tor"];

fn scenario_reproduction(tmp: &Path, run: &Path) -> Verdict {
    let report = tmp.join("report");
    mvp(&["report", "--in", arg(run), "--out", arg(&report)])?;
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: String| {
        if ok {
            notes.push(what);
        } else {
            failures.push(what);
        }
    };

    // CAPTCHA rates
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("summary.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    for vp in VPS {
        let got: f64 = summary["captcha-rate"][vp]["percent"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("no captcha rate for {vp}"))?;
        let want = if vp == "tor" { 12.0 } else { 8.0 };
        check((got - want).abs() <= 2.0, format!("captcha {vp} {got:.2}% (target {want}±2)"));
    }

    // navigation timeouts: tolerance and strict ordering
    let aborts = read_table(&report.join("tables/abort_causes.csv"))?;
    let targets = [("tor", 19.90), ("residential", 13.36), ("university", 10.69), ("cloud", 9.32)];
    let mut nav = Vec::new();
    for (vp, want) in targets {
        let got = pct(&aborts, "Navigation timeout", vp)?;
        check((got - want).abs() <= 2.0, format!("nav-timeout {vp} {got:.2}% (target {want}±2)"));
        nav.push(got);
    }
    check(nav.windows(2).all(|w| w[0] > w[1]), format!("nav-timeout ordering tor>residential>university>cloud {nav:?}"));

    // teardown: residential strictly highest
    let res = pct(&aborts, "Teardown", "residential")?;
    let others = ["university", "cloud", "tor"].map(|vp| pct(&aborts, "Teardown", vp));
    let max_other = others.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().fold(f64::MIN, f64::max);
    check(res > max_other, format!("teardown residential {res:.2}% vs others max {max_other:.2}%"));

    // cloud-cloaked frame origins
    let scenario: Scenario = serde_json::from_str(&fs::read_to_string(tmp.join("scenario.json")).map_err(|e| e.to_string())?)
        .map_err(|e| format!("scenario: {e}"))?;
    let configured = &scenario.policy(VantagePoint::Cloud).cloak_block;
    let found: BTreeSet<String> = summary["cloud-zero-origins"]["origins"]
        .as_array()
        .ok_or("no cloud-zero origins")?
        .iter()
        .filter_map(|o| o.as_str().map(str::to_string))
        .collect();
    check(&found == configured, format!("cloud-zero origins {}/{} recovered, {} extra", found.intersection(configured).count(), configured.len(), found.difference(configured).count()));

    // dead-end histogram modes, per VP and overall
    let hist = read_table(&report.join("figures/dead_end_histogram.csv"))?;
    let top2 = |col: Option<&str>| -> BTreeSet<u64> {
        let mut bins: Vec<(u64, u64)> = hist
            .iter()
            .map(|(pages, row)| {
                let n = match col {
                    Some(vp) => row[vp].parse().unwrap_or(0),
                    None => row.values().map(|c| c.parse::<u64>().unwrap_or(0)).sum(),
                };
                (n, pages.parse().unwrap_or(0))
            })
            .collect();
        bins.sort_by(|a, b| b.cmp(a));
        bins.iter().take(2).map(|(_, p)| *p).collect()
    };
    let want = BTreeSet::from([15, 60]);
    let mut all = vec![("all", top2(None))];
    all.extend(VPS.iter().map(|vp| (*vp, top2(Some(vp)))));
    for (who, modes) in all {
        check(modes == want, format!("dead-end modes {who} {modes:?}"));
    }

    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(failures.join("; "))
    }
}

fn record_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for e in fs::read_dir(dir.join("records")).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        files.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

fn determinism(a: &Path, b: &Path) -> Verdict {
    let (fa, fb) = (record_files(a)?, record_files(b)?);
    ensure(!fa.is_empty(), || "no record files".into())?;
    ensure(fa.keys().eq(fb.keys()), || "record file sets differ".into())?;
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("files differ: {differing:?}"))?;
    let bytes: usize = fa.values().map(Vec::len).sum();
    Ok(format!("{} record files, {bytes} bytes, identical", fa.len()))
}

// ---------------------------------------------------------------------------

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, n: u32, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let result = f();
        let took = t.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget")),
            Err(e) => (false, e),
        };
        if !ok {
            self.failed += 1;
        }
        println!(
            "criterion {n} [{}] {name} ({:.1}s, budget {}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let tmp = tmp.path();
    let mut suite = Suite { failed: 0 };
    let secs = Duration::from_secs;

    suite.run(1, "plan arithmetic", secs(10), || plan_arithmetic(tmp));
    suite.run(2, "barrier correctness", secs(120), barrier_correctness);
    suite.run(3, "page-visit timing", secs(10), visit_timing);
    suite.run(4, "filter-list matcher", secs(60), abp_matcher);
    suite.run(5, "analytics oracle equivalence", secs(120), analytics_oracle);

    let mut first = None;
    suite.run(6, "simulated-scenario reproduction", secs(600), || {
        let run = simulate(tmp, "run-a")?;
        first = Some(run.clone());
        scenario_reproduction(tmp, &run)
    });
    suite.run(7, "end-to-end determinism", secs(600), || {
        let a = match first.take() {
            Some(a) => a,
            None => simulate(tmp, "run-a")?,
        };
        let b = simulate(tmp, "run-b")?;
        determinism(&a, &b)
    });

    println!("acceptance: {} of 7 criteria passed", 7 - suite.failed);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
