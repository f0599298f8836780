//! Run manifest: what a simulation was run with, rewritten atomically at
//! start and at completion.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use mvp_core::simulation::SimulationSummary;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunManifest {
    pub scenario: String,
    pub seed: u64,
    pub plan: String,
    pub broker: String,
    pub out_dir: String,
    /// Wall-clock milliseconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub versions: BTreeMap<&'static str, &'static str>,
    pub summary: Option<SimulationSummary>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl RunManifest {
    pub fn start(scenario: &str, seed: u64, plan: &Path, broker: &str, out: &Path) -> Self {
        RunManifest {
            scenario: scenario.to_string(),
            seed,
            plan: plan.display().to_string(),
            broker: broker.to_string(),
            out_dir: out.display().to_string(),
            started_at: now(),
            finished_at: None,
            versions: BTreeMap::from([("mvp-cli", env!("CARGO_PKG_VERSION")), ("mvp-core", mvp_core::VERSION)]),
            summary: None,
        }
    }

    pub fn finish(&mut self, summary: &SimulationSummary) {
        self.finished_at = Some(now());
        self.summary = Some(summary.clone());
    }

    /// Write via a temporary file and rename, so readers never see a torn
    /// manifest.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)? + "\n";
        fs::write(&tmp, text)?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE))
    }
}
