//! TCP transport for the broker.
//!
//! Each frame is a 4-byte big-endian length followed by one UTF-8 JSON
//! object. Requests carry a client-chosen `id` echoed by the response, so
//! one connection can have many requests in flight; a blocked
//! `AWAIT_RELEASE` never holds up other traffic.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};

use super::{
    ArriveOutcome, Broker, BrokerClient, BrokerError, BrokerStatus, JobEnvelope, QueueName, Reaped,
    ReleaseOutcome,
};
use crate::model::{Millis, VantagePoint};

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE", rename_all_fields = "kebab-case")]
pub enum Request {
    Enqueue { queue: QueueName, job: JobEnvelope },
    Dequeue { queue: QueueName, worker_id: String, lease_ms: Millis, vp: Option<VantagePoint> },
    SyncArrive { tag: String, party_size: u32 },
    AwaitRelease { tag: String, timeout_ms: Millis },
    Renew { job_id: String, worker_id: String, lease_ms: Millis },
    Complete { job_id: String, worker_id: String },
    Reap,
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE", rename_all_fields = "kebab-case")]
pub enum Response {
    Ack,
    Job { job: JobEnvelope },
    Empty,
    Released { at: Millis },
    Waiting { arrivals: u32 },
    TimedOut,
    Renewed { expiry: Millis },
    Reaped { actions: Vec<Reaped> },
    Status { status: BrokerStatus },
    Error { error: BrokerError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub id: u64,
    #[serde(flatten)]
    pub body: T,
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, value: &impl Serialize) -> std::io::Result<()> {
    let bytes = serde_json::to_vec(value).map_err(std::io::Error::other)?;
    if bytes.len() > MAX_FRAME {
        return Err(std::io::Error::other("frame too large"));
    }
    w.write_all(&(bytes.len() as u32).to_be_bytes()).await?;
    w.write_all(&bytes).await?;
    w.flush().await
}

/// Next frame, or `None` on a clean end of stream.
pub async fn read_frame<R: AsyncRead + Unpin, T: for<'de> Deserialize<'de>>(r: &mut R) -> std::io::Result<Option<T>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).await?;
    serde_json::from_slice(&buf).map(Some).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub async fn handle(broker: &Broker, req: Request) -> Response {
    let res = match req {
        Request::Enqueue { queue, job } => broker.enqueue(queue, job).await.map(|()| Response::Ack),
        Request::Dequeue { queue, worker_id, lease_ms, vp } => broker
            .dequeue(queue, &worker_id, lease_ms, vp)
            .await
            .map(|j| j.map_or(Response::Empty, |job| Response::Job { job })),
        Request::SyncArrive { tag, party_size } => broker.sync_arrive(&tag, party_size).await.map(|o| match o {
            ArriveOutcome::Released { at } => Response::Released { at },
            ArriveOutcome::Waiting { arrivals } => Response::Waiting { arrivals },
        }),
        Request::AwaitRelease { tag, timeout_ms } => broker.await_release(&tag, timeout_ms).await.map(|o| match o {
            ReleaseOutcome::Released { at } => Response::Released { at },
            ReleaseOutcome::TimedOut => Response::TimedOut,
        }),
        Request::Renew { job_id, worker_id, lease_ms } => {
            broker.renew(&job_id, &worker_id, lease_ms).await.map(|expiry| Response::Renewed { expiry })
        }
        Request::Complete { job_id, worker_id } => broker.complete(&job_id, &worker_id).await.map(|()| Response::Ack),
        Request::Reap => broker.reap().await.map(|actions| Response::Reaped { actions }),
        Request::Status => broker.status().await.map(|status| Response::Status { status }),
    };
    res.unwrap_or_else(|error| Response::Error { error })
}

/// Accept connections forever, serving each request on its own task.
pub async fn serve(listener: TcpListener, broker: Broker) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        tracing::debug!(%peer, "broker connection");
        let broker = broker.clone();
        tokio::spawn(async move {
            if let Err(e) = serve_connection(stream, broker).await {
                tracing::warn!(%peer, error = %e, "connection closed with error");
            }
        });
    }
}

async fn serve_connection(stream: TcpStream, broker: Broker) -> std::io::Result<()> {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Envelope<Response>>();
    let writer = tokio::spawn(async move {
        while let Some(resp) = rx.recv().await {
            write_frame(&mut wr, &resp).await?;
        }
        Ok::<_, std::io::Error>(())
    });
    while let Some(req) = read_frame::<_, Envelope<Request>>(&mut rd).await? {
        let (broker, tx) = (broker.clone(), tx.clone());
        tokio::spawn(async move {
            let body = handle(&broker, req.body).await;
            let _ = tx.send(Envelope { id: req.id, body });
        });
    }
    drop(tx);
    writer.await.map_err(std::io::Error::other)?
}

type Pending = Arc<Mutex<HashMap<u64, oneshot::Sender<Response>>>>;

/// Client side of the TCP protocol.
pub struct RemoteBroker {
    next_id: AtomicU64,
    outgoing: mpsc::UnboundedSender<Envelope<Request>>,
    pending: Pending,
}

impl RemoteBroker {
    /// Connect, retrying `retries` times with exponential backoff starting
    /// at `backoff`.
    pub async fn connect(addr: &str, retries: u32, backoff: Duration) -> Result<Self, BrokerError> {
        let mut delay = backoff;
        let mut attempt = 0;
        let stream = loop {
            match TcpStream::connect(addr).await {
                Ok(s) => break s,
                Err(e) if attempt < retries => {
                    tracing::warn!(addr, error = %e, ?delay, "broker connect failed, retrying");
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(BrokerError::Unreachable(format!("{addr}: {e}"))),
            }
        };
        stream.set_nodelay(true).ok();
        let (mut rd, mut wr) = stream.into_split();
        let pending: Pending = Arc::default();
        let (tx, mut rx) = mpsc::unbounded_channel::<Envelope<Request>>();
        tokio::spawn(async move {
            while let Some(req) = rx.recv().await {
                if write_frame(&mut wr, &req).await.is_err() {
                    break;
                }
            }
        });
        let p = Arc::clone(&pending);
        tokio::spawn(async move {
            while let Ok(Some(resp)) = read_frame::<_, Envelope<Response>>(&mut rd).await {
                if let Some(waiter) = p.lock().unwrap().remove(&resp.id) {
                    let _ = waiter.send(resp.body);
                }
            }
            // connection gone: fail everything still waiting
            p.lock().unwrap().clear();
        });
        Ok(RemoteBroker { next_id: AtomicU64::new(1), outgoing: tx, pending })
    }

    pub async fn call(&self, body: Request) -> Result<Response, BrokerError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        self.pending.lock().unwrap().insert(id, tx);
        let lost = || BrokerError::Unreachable("connection lost".into());
        self.outgoing.send(Envelope { id, body }).map_err(|_| lost())?;
        match rx.await.map_err(|_| lost())? {
            Response::Error { error } => Err(error),
            other => Ok(other),
        }
    }
}

fn unexpected(resp: Response) -> BrokerError {
    BrokerError::Protocol(format!("unexpected response {resp:?}"))
}

#[async_trait]
impl BrokerClient for RemoteBroker {
    async fn enqueue(&self, queue: QueueName, job: JobEnvelope) -> Result<(), BrokerError> {
        match self.call(Request::Enqueue { queue, job }).await? {
            Response::Ack => Ok(()),
            r => Err(unexpected(r)),
        }
    }

    async fn dequeue(
        &self,
        queue: QueueName,
        worker_id: &str,
        lease_ms: Millis,
        vp: Option<VantagePoint>,
    ) -> Result<Option<JobEnvelope>, BrokerError> {
        match self.call(Request::Dequeue { queue, worker_id: worker_id.into(), lease_ms, vp }).await? {
            Response::Job { job } => Ok(Some(job)),
            Response::Empty => Ok(None),
            r => Err(unexpected(r)),
        }
    }

    async fn sync_arrive(&self, tag: &str, party_size: u32) -> Result<ArriveOutcome, BrokerError> {
        match self.call(Request::SyncArrive { tag: tag.into(), party_size }).await? {
            Response::Released { at } => Ok(ArriveOutcome::Released { at }),
            Response::Waiting { arrivals } => Ok(ArriveOutcome::Waiting { arrivals }),
            r => Err(unexpected(r)),
        }
    }

    async fn await_release(&self, tag: &str, timeout_ms: Millis) -> Result<ReleaseOutcome, BrokerError> {
        match self.call(Request::AwaitRelease { tag: tag.into(), timeout_ms }).await? {
            Response::Released { at } => Ok(ReleaseOutcome::Released { at }),
            Response::TimedOut => Ok(ReleaseOutcome::TimedOut),
            r => Err(unexpected(r)),
        }
    }

    async fn renew(&self, job_id: &str, worker_id: &str, lease_ms: Millis) -> Result<Millis, BrokerError> {
        match self.call(Request::Renew { job_id: job_id.into(), worker_id: worker_id.into(), lease_ms }).await? {
            Response::Renewed { expiry } => Ok(expiry),
            r => Err(unexpected(r)),
        }
    }

    async fn complete(&self, job_id: &str, worker_id: &str) -> Result<(), BrokerError> {
        match self.call(Request::Complete { job_id: job_id.into(), worker_id: worker_id.into() }).await? {
            Response::Ack => Ok(()),
            r => Err(unexpected(r)),
        }
    }

    async fn reap(&self) -> Result<Vec<Reaped>, BrokerError> {
        match self.call(Request::Reap).await? {
            Response::Reaped { actions } => Ok(actions),
            r => Err(unexpected(r)),
        }
    }

    async fn status(&self) -> Result<BrokerStatus, BrokerError> {
        match self.call(Request::Status).await? {
            Response::Status { status } => Ok(status),
            r => Err(unexpected(r)),
        }
    }
}

/// Resolve `host:port`, defaulting the port.
pub fn parse_addr(addr: &str) -> Result<SocketAddr, BrokerError> {
    use std::net::ToSocketAddrs;
    let full = if addr.contains(':') { addr.to_string() } else { format!("{addr}:{}", super::DEFAULT_PORT) };
    full.to_socket_addrs()
        .map_err(|e| BrokerError::Unreachable(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| BrokerError::Unreachable(format!("{addr}: no address")))
}
