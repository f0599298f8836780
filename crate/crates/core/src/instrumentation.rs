//! Contract with the in-page script bundle a browser driver injects into
//! every frame. The bundle itself lives outside this workspace; what is
//! fixed here is the configuration it is handed, the message it returns at
//! tear-down, and the fixtures both sides test against
//! (`fixtures/detrand/`, `fixtures/instrumentation/`).

use serde::{Deserialize, Serialize};

use crate::model::{fnv1a64, CrawlConfig, Millis};

/// Global the driver defines ahead of the bundle.
pub const CONFIG_GLOBAL: &str = "__MVP_INJECTION_CONFIG__";

/// Default extra weight for click targets by area. Not calibrated
/// against anything; a tunable.
pub const DEFAULT_CLICK_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ClickBias {
    /// Exponent on element area when choosing a click target: 0 is uniform,
    /// 1 proportional to area.
    pub large_target_weight: f64,
}

/// Serialized as one JSON literal. The seed travels as two 32-bit halves
/// because page scripts cannot hold a 64-bit integer exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct InjectionConfig {
    pub seed_hi: u32,
    pub seed_lo: u32,
    pub page_ordinal: u32,
    pub interaction_end_epoch_ms: Millis,
    pub click_bias: ClickBias,
}

impl InjectionConfig {
    pub fn new(seed: u64, page_ordinal: u32, interaction_end_epoch_ms: Millis) -> Self {
        InjectionConfig {
            seed_hi: (seed >> 32) as u32,
            seed_lo: seed as u32,
            page_ordinal,
            interaction_end_epoch_ms,
            click_bias: ClickBias { large_target_weight: DEFAULT_CLICK_BIAS },
        }
    }

    /// Configuration for a visit: seeding the page's generator with
    /// [`InjectionConfig::seed`] reproduces the worker's interaction stream
    /// for the same crawl set and ordinal, on every VP.
    pub fn for_visit(cfg: &CrawlConfig, ordinal: u32, interaction_end_epoch_ms: Millis) -> Self {
        let seed = fnv1a64(format!("page:{ordinal}").as_bytes()) ^ cfg.set_seed;
        InjectionConfig::new(seed, ordinal, interaction_end_epoch_ms)
    }

    pub fn seed(&self) -> u64 {
        (u64::from(self.seed_hi) << 32) | u64::from(self.seed_lo)
    }

    /// Script prologue the driver evaluates before the bundle.
    pub fn prologue(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("const {CONFIG_GLOBAL} = Object.freeze({json});\n")
    }
}

/// The bundle's single message to the driver at tear-down.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BundleReport {
    /// Navigations triggered by synthetic events, intercepted, in order.
    pub event_links: Vec<String>,
    /// Absolute anchor targets in document order.
    pub anchors: Vec<String>,
    pub clicks: u32,
    pub scrolls: u32,
    /// Exceptions swallowed while interacting.
    pub errors: u32,
}
