//! Browser sessions against a [`SimWorld`], driven by the simulated clock.

use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;

use super::{ServedPage, SimOutcome, SimWorld};
use crate::clock::Clock;
use crate::detrand::DetRand;
use crate::driver::{
    BrowserSession, Capture, CapturedFrame, CapturedRequest, DriverError, FetchDriver, Navigation, SessionContext,
    Snapshot,
};
use crate::model::{
    fnv1a64, AbortCause, BrowserProfile, Millis, NavigationEvent, RequestOutcome, ResourceType, VantagePoint, VisitEvent,
};

pub struct SimDriver {
    world: Arc<SimWorld>,
    clock: Arc<dyn Clock>,
}

impl SimDriver {
    pub fn new(world: Arc<SimWorld>, clock: Arc<dyn Clock>) -> Self {
        SimDriver { world, clock }
    }
}

fn visit_rng(world: &SimWorld, set_seed: u64, what: &str, vp: VantagePoint, ordinal: u32) -> DetRand {
    DetRand::substream(set_seed ^ world.seed, &format!("{what}:{}:page:{ordinal}", vp.name()))
}

#[async_trait]
impl FetchDriver for SimDriver {
    async fn open_session(&self, ctx: SessionContext<'_>) -> Result<Box<dyn BrowserSession>, DriverError> {
        let cfg = ctx.config;
        let p_hang = self.world.scenario.policy(cfg.vp).p_hang;
        if visit_rng(&self.world, cfg.set_seed, "launch", cfg.vp, ctx.ordinal).chance(p_hang) {
            futures::future::pending::<()>().await;
        }
        Ok(Box::new(SimSession {
            world: Arc::clone(&self.world),
            clock: Arc::clone(&self.clock),
            vp: cfg.vp,
            profile: cfg.profile,
            serve_rng: visit_rng(&self.world, cfg.set_seed, "serve", cfg.vp, ctx.ordinal),
            page: None,
            capture: Capture::default(),
        }))
    }
}

pub struct SimSession {
    world: Arc<SimWorld>,
    clock: Arc<dyn Clock>,
    vp: VantagePoint,
    profile: BrowserProfile,
    serve_rng: DetRand,
    page: Option<Box<ServedPage>>,
    capture: Capture,
}

fn content_type(rtype: ResourceType) -> &'static str {
    match rtype {
        ResourceType::Document | ResourceType::Subdocument => "text/html",
        ResourceType::Stylesheet => "text/css",
        ResourceType::Image => "image/png",
        ResourceType::Media => "video/mp4",
        ResourceType::Font => "font/woff2",
        ResourceType::Script => "application/javascript",
        ResourceType::Xhr | ResourceType::Fetch => "application/json",
        ResourceType::Websocket | ResourceType::Other => "application/octet-stream",
    }
}

fn response(status: u16, url: &str, rtype: ResourceType, size: Option<u64>, location: Option<&str>) -> RequestOutcome {
    let hash = fnv1a64(url.as_bytes());
    let mut headers = BTreeMap::from([("content-type".to_string(), content_type(rtype).to_string())]);
    if let Some(l) = location {
        headers.insert("location".into(), l.into());
    }
    RequestOutcome::Response {
        status,
        headers,
        body_hash: format!("{hash:016x}"),
        body_size: size.unwrap_or(hash % 40_000 + 200),
    }
}

impl SimSession {
    fn record(&mut self, url: &str, rtype: ResourceType, frame_id: &str, document_url: &str, outcome: RequestOutcome) {
        self.capture.requests.push(CapturedRequest {
            url: url.to_string(),
            resource_type: rtype,
            frame_id: frame_id.to_string(),
            document_url: document_url.to_string(),
            outcome,
        });
    }

    fn load(&mut self, requested: &str, page: &ServedPage, at: Millis) {
        let landed = page.landed_url.as_str();
        let mut nav_events = Vec::new();
        if page.redirected && requested != landed {
            self.record(
                requested,
                ResourceType::Document,
                "main",
                requested,
                response(301, requested, ResourceType::Document, Some(0), Some(landed)),
            );
            nav_events.push(NavigationEvent { timestamp: at, url: requested.to_string() });
        }
        let doc = response(200, landed, ResourceType::Document, Some(page.html.len() as u64), None);
        self.record(landed, ResourceType::Document, "main", landed, doc);
        nav_events.push(NavigationEvent { timestamp: at, url: landed.to_string() });
        self.capture.frames.push(CapturedFrame {
            frame_id: "main".into(),
            parent_frame_id: None,
            frame_url: landed.to_string(),
            navigation_events: nav_events,
        });
        for f in &page.frames {
            let id = format!("f{}", f.index);
            let ok = response(200, &f.frame.url, ResourceType::Subdocument, None, None);
            self.record(&f.frame.url, ResourceType::Subdocument, &id, landed, ok);
            self.capture.frames.push(CapturedFrame {
                frame_id: id,
                parent_frame_id: Some("main".into()),
                frame_url: f.frame.url.clone(),
                navigation_events: vec![NavigationEvent { timestamp: at, url: f.frame.url.clone() }],
            });
        }
        for r in &page.requests {
            let (frame_id, doc_url) = match r.frame {
                None => ("main".to_string(), landed.to_string()),
                Some(k) => {
                    let f = page.frames.iter().find(|f| f.index == k).expect("served frame");
                    (format!("f{k}"), f.frame.url.clone())
                }
            };
            let outcome = if r.dropped {
                RequestOutcome::Failed { error: "net::ERR_TIMED_OUT".into() }
            } else {
                response(200, &r.sub.url, r.sub.rtype, None, None)
            };
            self.record(&r.sub.url, r.sub.rtype, &frame_id, &doc_url, outcome);
        }
        self.capture.events.push(VisitEvent { at, event: "load".into() });
    }
}

#[async_trait]
impl BrowserSession for SimSession {
    async fn navigate(&mut self, url: &str) -> Result<Navigation, AbortCause> {
        let resp = self.world.serve(url, self.vp, self.profile, &mut self.serve_rng);
        let start = self.clock.now_ms();
        match resp.outcome {
            SimOutcome::NavError(AbortCause::NavigationTimeout) => {
                let failed = RequestOutcome::Failed { error: "net::ERR_TIMED_OUT".into() };
                self.record(url, ResourceType::Document, "main", url, failed);
                futures::future::pending::<()>().await;
                unreachable!()
            }
            SimOutcome::NavError(cause) => {
                self.clock.sleep_until(start + resp.latency_ms).await;
                let failed = RequestOutcome::Failed { error: cause.label().to_string() };
                self.record(url, ResourceType::Document, "main", url, failed);
                Err(cause)
            }
            SimOutcome::Page(page) => {
                self.clock.sleep_until(start + resp.latency_ms).await;
                let now = self.clock.now_ms();
                self.load(url, &page, now);
                let landed_url = page.landed_url.clone();
                self.page = Some(page);
                Ok(Navigation { landed_url })
            }
        }
    }

    async fn interact(&mut self, rng: &mut DetRand, end: Millis) {
        let Some(page) = self.page.as_ref() else { return };
        let targets = page.event_links.len() as u64 + page.inert_targets as u64;
        loop {
            let at = self.clock.now_ms() + rng.range(1_500, 4_000);
            if at >= end || targets == 0 {
                return;
            }
            self.clock.sleep_until(at).await;
            let hit = rng.range(0, targets - 1) as usize;
            if let Some(link) = page.event_links.get(hit) {
                if !self.capture.event_links.contains(link) {
                    self.capture.event_links.push(link.clone());
                }
            }
        }
    }

    async fn snapshot(&mut self) -> Snapshot {
        let Some(page) = self.page.as_ref() else { return Snapshot::default() };
        if page.stall_teardown {
            futures::future::pending::<()>().await;
        }
        let took = 250 + page.html.len() as Millis / 20;
        self.clock.sleep_until(self.clock.now_ms() + took).await;
        let page = self.page.as_ref().expect("checked above");
        Snapshot { dom_html: page.html.clone(), anchor_links: page.anchor_links.clone() }
    }

    async fn close(&mut self) {}

    fn take_capture(&mut self) -> Capture {
        std::mem::take(&mut self.capture)
    }
}
