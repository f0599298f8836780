//! The browser-automation contract the worker drives. The simulated web
//! implements it for desk-scale runs; a real browser driver would too.

use async_trait::async_trait;
use thiserror::Error;

use crate::detrand::DetRand;
use crate::model::{AbortCause, CrawlConfig, Millis, NavigationEvent, RequestOutcome, ResourceType, VisitEvent};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("browser launch failed: {0}")]
pub struct DriverError(pub String);

/// What the session needs to know about the visit it serves.
#[derive(Debug, Clone, Copy)]
pub struct SessionContext<'a> {
    pub config: &'a CrawlConfig,
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Navigation {
    /// URL after redirects.
    pub landed_url: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub dom_html: String,
    /// Absolute anchor targets in document order.
    pub anchor_links: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedRequest {
    pub url: String,
    pub resource_type: ResourceType,
    pub frame_id: String,
    pub document_url: String,
    pub outcome: RequestOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedFrame {
    pub frame_id: String,
    pub parent_frame_id: Option<String>,
    pub frame_url: String,
    pub navigation_events: Vec<NavigationEvent>,
}

/// Everything a session observed so far; taken once per visit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Capture {
    pub requests: Vec<CapturedRequest>,
    pub frames: Vec<CapturedFrame>,
    /// Navigations triggered by interaction, intercepted rather than followed.
    pub event_links: Vec<String>,
    pub events: Vec<VisitEvent>,
}

#[async_trait]
pub trait FetchDriver: Send + Sync {
    /// Launch a fresh browser with an empty profile.
    async fn open_session(&self, ctx: SessionContext<'_>) -> Result<Box<dyn BrowserSession>, DriverError>;
}

/// One browser instance, used for exactly one page visit. Deadlines are
/// enforced by the caller; dropping a session kills it.
#[async_trait]
pub trait BrowserSession: Send {
    async fn navigate(&mut self, url: &str) -> Result<Navigation, AbortCause>;
    /// Seeded clicking and scrolling until `end`. Alerts and new windows
    /// are dismissed; triggered navigations are recorded, not followed.
    async fn interact(&mut self, rng: &mut DetRand, end: Millis);
    async fn snapshot(&mut self) -> Snapshot;
    async fn close(&mut self);
    fn take_capture(&mut self) -> Capture;
}
