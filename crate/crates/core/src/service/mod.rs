//! Multi-room chat server over WebSocket, with persistent room logs.

mod persist;
mod protocol;
mod server;
mod session;

use thiserror::Error;

pub use persist::{
    log_path, persist_room, read_log, read_snapshot, restore_room, snapshot_path, valid_room_id,
    write_snapshot, LogContents, LogRecord, PersistError, PersistentRoom, Restored, RoomLog,
    Snapshot, FORMAT_VERSION, LOG_MAGIC, SNAPSHOT_MAGIC,
};
pub use protocol::{
    parse_client_envelope, ClientEnvelope, ClientRequest, MessageView, RejectCode, ServerEnvelope,
};
pub use server::{Server, ServiceConfig};
pub use session::{ConnId, Outbox, RoomSession, RoomStore, RESYNC_MESSAGES};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid room template: {0}")]
    Room(#[source] crate::engine::EngineError),
}
