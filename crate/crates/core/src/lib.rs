//! Multi-vantage-point web measurement: crawl orchestration, page-visit
//! lifecycle, request classification, a deterministic simulated web and
//! cross-VP analytics.

pub mod abp;
pub mod analytics;
pub mod broker;
pub mod captcha;
pub mod clock;
pub mod conformance;
pub mod detrand;
pub mod driver;
pub mod executor;
pub mod instrumentation;
pub mod model;
pub mod scheduler;
pub mod simulation;
pub mod simweb;
pub mod suffix;
pub mod worker;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
