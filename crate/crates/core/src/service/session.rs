//! Protocol handling for one room, independent of any transport.
//!
//! A [`RoomSession`] turns requests from attached connections into engine
//! entries and returns the envelopes to deliver, already addressed. The
//! server runs one session per room on its own task, which gives every
//! member the same message order.

use std::collections::BTreeMap;

use crate::domain::{Action, ActionKind, MemberId, Message};
use crate::engine::{ActionOutcome, EngineError, Room, RoomEntry, RoomEvent};

use super::persist::{PersistError, PersistentRoom};
use super::protocol::{ClientRequest, MessageView, RejectCode, ServerEnvelope};

pub type ConnId = u64;

/// Envelopes to deliver, in order.
pub type Outbox = Vec<(ConnId, ServerEnvelope)>;

/// How many past messages a joining connection is sent.
pub const RESYNC_MESSAGES: usize = 50;

#[derive(Debug)]
pub enum RoomStore {
    Memory(Room),
    Persistent(PersistentRoom),
}

impl RoomStore {
    pub fn room(&self) -> &Room {
        match self {
            Self::Memory(r) => r,
            Self::Persistent(p) => p.room(),
        }
    }

    fn apply(&mut self, entry: &RoomEntry) -> Result<Option<ActionOutcome>, PersistError> {
        match self {
            Self::Memory(r) => r.apply(entry).map_err(PersistError::from),
            Self::Persistent(p) => p.apply(entry),
        }
    }
}

#[derive(Debug)]
pub struct RoomSession {
    store: RoomStore,
    attached: BTreeMap<ConnId, MemberId>,
}

fn message_view(m: &Message) -> MessageView {
    MessageView {
        id: m.id,
        author: m.author.clone(),
        text: m.text.clone(),
        logical_time: m.logical_time,
        atmosphere_value: m.atmosphere_value,
        withdrawn: m.withdrawn,
    }
}

impl RoomSession {
    pub fn new(store: RoomStore) -> Self {
        Self {
            store,
            attached: BTreeMap::new(),
        }
    }

    pub fn room(&self) -> &Room {
        self.store.room()
    }

    pub fn room_id(&self) -> &str {
        &self.room().state().field.room_id
    }

    pub fn member_of(&self, conn: ConnId) -> Option<&MemberId> {
        self.attached.get(&conn)
    }

    pub fn connections(&self) -> impl Iterator<Item = ConnId> + '_ {
        self.attached.keys().copied()
    }

    fn reject(
        &self,
        request_id: u64,
        code: RejectCode,
        detail: impl Into<String>,
    ) -> ServerEnvelope {
        ServerEnvelope::reject(
            Some(request_id),
            Some(self.room_id().to_owned()),
            code,
            detail,
        )
    }

    fn ack(
        &self,
        request_id: u64,
        member_id: Option<MemberId>,
        outcome: Option<&ActionOutcome>,
    ) -> ServerEnvelope {
        ServerEnvelope::Ack {
            request_id,
            room_id: self.room_id().to_owned(),
            member_id,
            message_id: outcome.and_then(|o| o.message_id),
            task_id: outcome.and_then(|o| o.task_id),
            assigned_budget: outcome
                .and_then(|o| o.decision.as_ref())
                .map(|d| d.new_budget),
        }
    }

    fn clamp_time(&self, now: u64) -> u64 {
        now.max(self.room().state().last_time)
    }

    /// The id a display name maps to: the name itself when free or left
    /// behind by an earlier connection, otherwise the first free `name#k`.
    fn pick_member_id(&self, name: &str) -> MemberId {
        let in_use = |id: &MemberId| self.attached.values().any(|m| m == id);
        let mut k = 1;
        loop {
            let candidate = if k == 1 {
                name.to_owned()
            } else {
                format!("{name}#{k}")
            };
            let id = MemberId::new(candidate).expect("nonempty");
            if !in_use(&id) {
                return id;
            }
            k += 1;
        }
    }

    pub fn state_update(&self, member: &MemberId, now: u64) -> Option<ServerEnvelope> {
        let room = self.room();
        let now = self.clamp_time(now);
        let rs = room.projected_structure(member, now)?;
        let state = room.state();
        Some(ServerEnvelope::StateUpdate {
            room_id: self.room_id().to_owned(),
            member_id: member.clone(),
            budget: rs.count,
            proportion: rs.proportion,
            muted: state.ledger.get(member).is_some_and(|r| r.is_muted(now)),
            atmosphere: *state.field.atmosphere.values(),
            atmosphere_mean: state.field.atmosphere.mean(),
            admin: state.votes.admin.clone(),
            logical_time: now,
        })
    }

    fn broadcast(&self, out: &mut Outbox, env: &ServerEnvelope) {
        for conn in self.attached.keys() {
            out.push((*conn, env.clone()));
        }
    }

    fn broadcast_state(&self, out: &mut Outbox, now: u64) {
        for (conn, member) in &self.attached {
            if let Some(env) = self.state_update(member, now) {
                out.push((*conn, env));
            }
        }
    }

    /// Handles a request from `conn`. Exactly one ack or reject addressed
    /// to `conn` carries `request_id`.
    pub fn handle(
        &mut self,
        conn: ConnId,
        request_id: u64,
        request: &ClientRequest,
        now: u64,
    ) -> Outbox {
        match request {
            ClientRequest::Join { display_name } => self.join(conn, request_id, display_name, now),
            ClientRequest::Leave => match self.attached.remove(&conn) {
                Some(_) => vec![(conn, self.ack(request_id, None, None))],
                None => vec![(
                    conn,
                    self.reject(request_id, RejectCode::NotJoined, "not in this room"),
                )],
            },
            ClientRequest::Ping => vec![(conn, ServerEnvelope::Pong { request_id })],
            ClientRequest::Speak { text } => {
                self.act(conn, request_id, ActionKind::speak(text.clone()), now)
            }
            ClientRequest::Withdraw { message_id } => self.act(
                conn,
                request_id,
                ActionKind::Withdraw {
                    message_id: *message_id,
                },
                now,
            ),
            ClientRequest::IssueTask { description } => self.act(
                conn,
                request_id,
                ActionKind::IssueTask {
                    description: description.clone(),
                },
                now,
            ),
            ClientRequest::Vote { ballot } => self.act(
                conn,
                request_id,
                ActionKind::Vote {
                    ballot: ballot.clone(),
                },
                now,
            ),
        }
    }

    /// Detaches a closed connection. The member stays in the room.
    pub fn disconnect(&mut self, conn: ConnId) {
        self.attached.remove(&conn);
    }

    fn join(&mut self, conn: ConnId, request_id: u64, display_name: &str, now: u64) -> Outbox {
        if self.attached.contains_key(&conn) {
            return vec![(
                conn,
                self.reject(request_id, RejectCode::AlreadyJoined, "already joined"),
            )];
        }
        let name = display_name.trim();
        if name.is_empty() {
            return vec![(
                conn,
                self.reject(
                    request_id,
                    RejectCode::MalformedEnvelope,
                    "display_name is empty",
                ),
            )];
        }
        let member = self.pick_member_id(name);
        if !self.room().state().field.tribe.contains(&member) {
            match self.store.apply(&RoomEntry::Join {
                member: member.clone(),
            }) {
                Ok(_) => {}
                Err(PersistError::Engine(EngineError::RoomFull(cap))) => {
                    return vec![(
                        conn,
                        self.reject(
                            request_id,
                            RejectCode::RoomFull,
                            format!("room holds {cap} members"),
                        ),
                    )]
                }
                Err(e) => {
                    log::error!("join in {}: {e}", self.room_id());
                    return vec![(
                        conn,
                        self.reject(request_id, RejectCode::Internal, e.to_string()),
                    )];
                }
            }
        }
        self.attached.insert(conn, member.clone());

        let mut out = vec![(conn, self.ack(request_id, Some(member.clone()), None))];
        let state = self.room().state();
        let transcript = &state.field.transcript;
        for m in &transcript[transcript.len().saturating_sub(RESYNC_MESSAGES)..] {
            out.push((
                conn,
                ServerEnvelope::Message {
                    room_id: self.room_id().to_owned(),
                    message: message_view(m),
                },
            ));
        }
        for task in state.open_tasks() {
            out.push((
                conn,
                ServerEnvelope::TaskUpdate {
                    room_id: self.room_id().to_owned(),
                    task: task.clone(),
                },
            ));
        }
        self.broadcast_state(&mut out, now);
        out
    }

    fn act(&mut self, conn: ConnId, request_id: u64, kind: ActionKind, now: u64) -> Outbox {
        let Some(member) = self.attached.get(&conn).cloned() else {
            return vec![(
                conn,
                self.reject(request_id, RejectCode::NotJoined, "join the room first"),
            )];
        };
        let now = self.clamp_time(now);
        let action = Action::new(member, kind, now);
        let outcome = match self.store.apply(&RoomEntry::Action {
            action: action.clone(),
        }) {
            Ok(Some(outcome)) => outcome,
            Ok(None) => unreachable!("actions always produce an outcome"),
            Err(e) => {
                log::error!("action in {}: {e}", self.room_id());
                return vec![(
                    conn,
                    self.reject(request_id, RejectCode::Internal, e.to_string()),
                )];
            }
        };
        if !outcome.accepted {
            return vec![(
                conn,
                self.reject(
                    request_id,
                    outcome.reason.into(),
                    outcome.reason.to_string(),
                ),
            )];
        }

        let mut out = vec![(conn, self.ack(request_id, None, Some(&outcome)))];
        let state = self.room().state();
        let room_id = self.room_id().to_owned();
        let touched_message = match &action.kind {
            ActionKind::Speak { .. } => outcome.message_id,
            ActionKind::Withdraw { message_id } => Some(*message_id),
            _ => None,
        };
        if let Some(m) = touched_message.and_then(|id| state.field.message(id)) {
            let env = ServerEnvelope::Message {
                room_id: room_id.clone(),
                message: message_view(m),
            };
            self.broadcast(&mut out, &env);
        }
        let mut touched_tasks: Vec<_> = outcome.task_id.into_iter().collect();
        if let ActionKind::Vote {
            ballot: crate::domain::Ballot::CloseTask(id),
        } = &action.kind
        {
            touched_tasks.push(*id);
        }
        for event in &outcome.events {
            match event {
                RoomEvent::ElectionResult { winner, tallies } => {
                    let env = ServerEnvelope::ElectionResult {
                        room_id: room_id.clone(),
                        winner: winner.clone(),
                        tallies: tallies.clone(),
                    };
                    self.broadcast(&mut out, &env);
                }
                RoomEvent::TaskOpened { task_id } | RoomEvent::TaskCompleted { task_id } => {
                    touched_tasks.push(*task_id);
                }
                RoomEvent::ElectionOpened { .. } | RoomEvent::MessageWithdrawn { .. } => {}
            }
        }
        touched_tasks.sort_unstable();
        touched_tasks.dedup();
        for id in touched_tasks {
            if let Some(task) = state.tasks.get(&id) {
                let env = ServerEnvelope::TaskUpdate {
                    room_id: room_id.clone(),
                    task: task.clone(),
                };
                self.broadcast(&mut out, &env);
            }
        }
        self.broadcast_state(&mut out, now);
        out
    }

    /// Closes an election whose deadline has passed.
    pub fn tick(&mut self, now: u64) -> Outbox {
        let now = self.clamp_time(now);
        let tallies = match &self.room().state().votes.open {
            Some(e) if e.deadline <= now => e.tallies.clone(),
            _ => return Vec::new(),
        };
        let winner = match self.store.apply(&RoomEntry::Tally { now }) {
            Ok(_) => self.room().state().votes.admin.clone(),
            Err(e) => {
                log::error!("tally in {}: {e}", self.room_id());
                return Vec::new();
            }
        };
        let mut out = Vec::new();
        let env = ServerEnvelope::ElectionResult {
            room_id: self.room_id().to_owned(),
            winner,
            tallies,
        };
        self.broadcast(&mut out, &env);
        self.broadcast_state(&mut out, now);
        out
    }
}
