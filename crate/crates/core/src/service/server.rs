//! WebSocket front end: one task per connection, one task per room.

use std::collections::{HashMap, HashSet};
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message as Frame;

use super::persist::{valid_room_id, PersistError, PersistentRoom};
use super::protocol::{parse_client_envelope, ClientRequest, RejectCode, ServerEnvelope};
use super::session::{ConnId, RoomSession, RoomStore};
use super::ServiceError;
use crate::engine::{Room, RoomSpec};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Settings for rooms created on first join; `room_id` is replaced.
    pub room_template: RoomSpec,
    /// Where room logs and snapshots live. `None` keeps rooms in memory.
    pub data_dir: Option<PathBuf>,
    pub snapshot_every: u64,
    /// How often due elections are checked.
    pub tick_interval: Duration,
}

impl ServiceConfig {
    pub fn new(listen: SocketAddr) -> Self {
        Self {
            listen,
            room_template: RoomSpec::new("template"),
            data_dir: None,
            snapshot_every: PersistentRoom::DEFAULT_SNAPSHOT_EVERY,
            tick_interval: Duration::from_secs(1),
        }
    }
}

type Outgoing = mpsc::UnboundedSender<ServerEnvelope>;

enum RoomCommand {
    Request {
        conn: ConnId,
        reply: Outgoing,
        request_id: u64,
        request: ClientRequest,
    },
    Disconnect(ConnId),
}

/// Logical time from the wall clock, continuing from where a restored room
/// left off.
struct Clock {
    start: Instant,
    base: u64,
    ticks_per_second: f64,
}

impl Clock {
    fn now(&self) -> u64 {
        self.base + (self.start.elapsed().as_secs_f64() * self.ticks_per_second) as u64
    }
}

struct Shared {
    config: ServiceConfig,
    rooms: Mutex<HashMap<String, mpsc::UnboundedSender<RoomCommand>>>,
    next_conn: AtomicU64,
}

impl Shared {
    fn open_store(&self, room_id: &str) -> Result<RoomStore, PersistError> {
        let spec = RoomSpec {
            room_id: room_id.to_owned(),
            ..self.config.room_template.clone()
        };
        Ok(match &self.config.data_dir {
            Some(dir) => RoomStore::Persistent(
                PersistentRoom::open_or_create(dir, &spec, None)?
                    .with_snapshot_every(self.config.snapshot_every),
            ),
            None => RoomStore::Memory(Room::from_spec(&spec, None)?),
        })
    }

    fn room(&self, room_id: &str) -> Result<mpsc::UnboundedSender<RoomCommand>, PersistError> {
        let mut rooms = self.rooms.lock().expect("room map lock");
        if let Some(tx) = rooms.get(room_id) {
            return Ok(tx.clone());
        }
        let session = RoomSession::new(self.open_store(room_id)?);
        let (tx, rx) = mpsc::unbounded_channel();
        tokio::spawn(run_room(session, rx, self.config.tick_interval));
        rooms.insert(room_id.to_owned(), tx.clone());
        Ok(tx)
    }
}

async fn run_room(
    mut session: RoomSession,
    mut rx: mpsc::UnboundedReceiver<RoomCommand>,
    tick_interval: Duration,
) {
    let clock = Clock {
        start: Instant::now(),
        base: session.room().state().last_time,
        ticks_per_second: session.room().config().ticks_per_minute / 60.0,
    };
    let mut outgoing: HashMap<ConnId, Outgoing> = HashMap::new();
    let mut ticker = tokio::time::interval(tick_interval);
    loop {
        let out = tokio::select! {
            cmd = rx.recv() => match cmd {
                None => break,
                Some(RoomCommand::Disconnect(conn)) => {
                    session.disconnect(conn);
                    outgoing.remove(&conn);
                    continue;
                }
                Some(RoomCommand::Request { conn, reply, request_id, request }) => {
                    outgoing.entry(conn).or_insert(reply);
                    session.handle(conn, request_id, &request, clock.now())
                }
            },
            _ = ticker.tick() => session.tick(clock.now()),
        };
        for (conn, env) in out {
            if let Some(tx) = outgoing.get(&conn) {
                let _ = tx.send(env);
            }
        }
        outgoing.retain(|conn, _| session.member_of(*conn).is_some());
    }
}

/// A bound, not yet running server.
pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl Server {
    pub async fn bind(config: ServiceConfig) -> Result<Self, ServiceError> {
        if let Some(dir) = &config.data_dir {
            std::fs::create_dir_all(dir).map_err(|source| ServiceError::Io {
                context: format!("creating {}", dir.display()),
                source,
            })?;
        }
        crate::engine::Room::from_spec(&config.room_template, None).map_err(ServiceError::Room)?;
        let listener =
            TcpListener::bind(config.listen)
                .await
                .map_err(|source| ServiceError::Io {
                    context: format!("binding {}", config.listen),
                    source,
                })?;
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                config,
                rooms: Mutex::new(HashMap::new()),
                next_conn: AtomicU64::new(1),
            }),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Accepts connections until `shutdown` resolves.
    pub async fn run_until(self, shutdown: impl Future<Output = ()>) -> Result<(), ServiceError> {
        tokio::pin!(shutdown);
        loop {
            tokio::select! {
                _ = &mut shutdown => return Ok(()),
                accepted = self.listener.accept() => {
                    let (stream, peer) = accepted.map_err(|source| ServiceError::Io {
                        context: "accepting a connection".into(),
                        source,
                    })?;
                    let shared = Arc::clone(&self.shared);
                    tokio::spawn(async move {
                        if let Err(e) = handle_connection(shared, stream).await {
                            log::debug!("connection {peer}: {e}");
                        }
                    });
                }
            }
        }
    }

    pub async fn run(self) -> Result<(), ServiceError> {
        self.run_until(std::future::pending()).await
    }
}

async fn handle_connection(
    shared: Arc<Shared>,
    stream: TcpStream,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut source) = ws.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerEnvelope>();
    let writer = tokio::spawn(async move {
        while let Some(env) = rx.recv().await {
            let text = serde_json::to_string(&env).expect("envelope serializes");
            if sink.send(Frame::text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let mut seen_ids = HashSet::new();
    let mut rooms: HashMap<String, mpsc::UnboundedSender<RoomCommand>> = HashMap::new();
    while let Some(frame) = source.next().await {
        let text = match frame? {
            Frame::Text(t) => t,
            Frame::Binary(_) => {
                let _ = tx.send(ServerEnvelope::reject(
                    None,
                    None,
                    RejectCode::MalformedEnvelope,
                    "binary frames are not supported",
                ));
                continue;
            }
            Frame::Close(_) => break,
            _ => continue,
        };
        let env = match parse_client_envelope(text.as_str()) {
            Ok(env) => env,
            Err(reject) => {
                let _ = tx.send(reject);
                continue;
            }
        };
        let rid = env.request_id;
        if !seen_ids.insert(rid) {
            let _ = tx.send(ServerEnvelope::reject(
                Some(rid),
                env.room_id,
                RejectCode::DuplicateRequest,
                "request ids must be unique per connection",
            ));
            continue;
        }
        if env.request == ClientRequest::Ping {
            let _ = tx.send(ServerEnvelope::Pong { request_id: rid });
            continue;
        }
        let Some(room_id) = env.room_id.filter(|r| valid_room_id(r)) else {
            let _ = tx.send(ServerEnvelope::reject(
                Some(rid),
                None,
                RejectCode::InvalidRoom,
                "room_id must be 1-64 characters of [A-Za-z0-9_-]",
            ));
            continue;
        };
        let room = match rooms.get(&room_id) {
            Some(r) => r.clone(),
            None => match shared.room(&room_id) {
                Ok(r) => {
                    rooms.insert(room_id.clone(), r.clone());
                    r
                }
                Err(e) => {
                    log::error!("opening room {room_id}: {e}");
                    let _ = tx.send(ServerEnvelope::reject(
                        Some(rid),
                        Some(room_id),
                        RejectCode::Internal,
                        e.to_string(),
                    ));
                    continue;
                }
            },
        };
        let _ = room.send(RoomCommand::Request {
            conn,
            reply: tx.clone(),
            request_id: rid,
            request: env.request,
        });
    }
    for room in rooms.values() {
        let _ = room.send(RoomCommand::Disconnect(conn));
    }
    drop(tx);
    let _ = writer.await;
    Ok(())
}
