//! JSON envelopes exchanged over the WebSocket, one per text frame.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Ballot, MemberId, MessageId, ATMOSPHERE_SLOTS};
use crate::engine::{Reason, TaskRecord};

/// A client request. `request_id` must be unique per connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEnvelope {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room_id: Option<String>,
    #[serde(flatten)]
    pub request: ClientRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "payload")]
pub enum ClientRequest {
    Join { display_name: String },
    Leave,
    Speak { text: String },
    Withdraw { message_id: MessageId },
    IssueTask { description: String },
    Vote { ballot: Ballot },
    Ping,
}

impl ClientRequest {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Join { .. } => "join",
            Self::Leave => "leave",
            Self::Speak { .. } => "speak",
            Self::Withdraw { .. } => "withdraw",
            Self::IssueTask { .. } => "issue_task",
            Self::Vote { .. } => "vote",
            Self::Ping => "ping",
        }
    }
}

/// Why a request was refused. Engine rejections keep their engine names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectCode {
    MalformedEnvelope,
    DuplicateRequest,
    InvalidRoom,
    NotJoined,
    AlreadyJoined,
    RoomFull,
    BudgetExhausted,
    UnknownMember,
    InvalidTarget,
    OutOfOrder,
    Internal,
}

impl From<Reason> for RejectCode {
    fn from(r: Reason) -> Self {
        match r {
            Reason::BudgetExhausted => Self::BudgetExhausted,
            Reason::UnknownMember => Self::UnknownMember,
            Reason::InvalidTarget => Self::InvalidTarget,
            Reason::OutOfOrder => Self::OutOfOrder,
            Reason::Ok => Self::Internal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageView {
    pub id: MessageId,
    pub author: MemberId,
    pub text: String,
    pub logical_time: u64,
    pub atmosphere_value: f64,
    pub withdrawn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ServerEnvelope {
    Ack {
        request_id: u64,
        room_id: String,
        /// Set on join: the id the room assigned to this connection.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        member_id: Option<MemberId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message_id: Option<MessageId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task_id: Option<crate::domain::TaskId>,
        /// The budget the matrix assigned before the action's cost.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        assigned_budget: Option<f64>,
    },
    Reject {
        request_id: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        room_id: Option<String>,
        code: RejectCode,
        detail: String,
    },
    Message {
        room_id: String,
        message: MessageView,
    },
    StateUpdate {
        room_id: String,
        member_id: MemberId,
        budget: f64,
        proportion: f64,
        muted: bool,
        atmosphere: [f64; ATMOSPHERE_SLOTS],
        atmosphere_mean: f64,
        admin: Option<MemberId>,
        logical_time: u64,
    },
    ElectionResult {
        room_id: String,
        winner: Option<MemberId>,
        tallies: BTreeMap<MemberId, u32>,
    },
    TaskUpdate {
        room_id: String,
        task: TaskRecord,
    },
    Pong {
        request_id: u64,
    },
}

impl ServerEnvelope {
    pub fn reject(
        request_id: Option<u64>,
        room_id: Option<String>,
        code: RejectCode,
        detail: impl Into<String>,
    ) -> Self {
        Self::Reject {
            request_id,
            room_id,
            code,
            detail: detail.into(),
        }
    }

    pub fn request_id(&self) -> Option<u64> {
        match self {
            Self::Ack { request_id, .. } | Self::Pong { request_id } => Some(*request_id),
            Self::Reject { request_id, .. } => *request_id,
            _ => None,
        }
    }
}

/// Parses one frame. On failure returns the reject to send, echoing the
/// request id when the frame had a readable one.
pub fn parse_client_envelope(text: &str) -> Result<ClientEnvelope, ServerEnvelope> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
        ServerEnvelope::reject(None, None, RejectCode::MalformedEnvelope, e.to_string())
    })?;
    let request_id = value.get("request_id").and_then(serde_json::Value::as_u64);
    let room_id = value
        .get("room_id")
        .and_then(serde_json::Value::as_str)
        .map(str::to_owned);
    serde_json::from_value(value).map_err(|e| {
        ServerEnvelope::reject(
            request_id,
            room_id,
            RejectCode::MalformedEnvelope,
            e.to_string(),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_envelope_wire_shape() {
        let env = ClientEnvelope {
            request_id: 7,
            room_id: Some("lobby".into()),
            request: ClientRequest::Speak {
                text: "hello".into(),
            },
        };
        let json = serde_json::to_value(&env).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "request_id": 7, "room_id": "lobby",
                "type": "speak", "payload": {"text": "hello"}
            })
        );
        assert_eq!(parse_client_envelope(&json.to_string()).unwrap(), env);
    }

    #[test]
    fn unit_requests_need_no_payload() {
        let env = parse_client_envelope(r#"{"request_id":1,"type":"ping"}"#).unwrap();
        assert_eq!(env.request, ClientRequest::Ping);
        assert_eq!(env.room_id, None);
        let leave = parse_client_envelope(r#"{"request_id":2,"room_id":"r","type":"leave"}"#);
        assert_eq!(leave.unwrap().request, ClientRequest::Leave);
    }

    #[test]
    fn every_request_type_round_trips() {
        let requests = [
            ClientRequest::Join {
                display_name: "ann".into(),
            },
            ClientRequest::Leave,
            ClientRequest::Speak { text: "x".into() },
            ClientRequest::Withdraw {
                message_id: MessageId(3),
            },
            ClientRequest::IssueTask {
                description: "d".into(),
            },
            ClientRequest::Vote {
                ballot: Ballot::Admin(MemberId::new("bob").unwrap()),
            },
            ClientRequest::Ping,
        ];
        for (i, request) in requests.into_iter().enumerate() {
            let env = ClientEnvelope {
                request_id: i as u64,
                room_id: Some("r".into()),
                request,
            };
            let text = serde_json::to_string(&env).unwrap();
            assert!(text.contains(&format!("\"type\":\"{}\"", env.request.kind())));
            assert_eq!(parse_client_envelope(&text).unwrap(), env);
        }
    }

    #[test]
    fn malformed_frames_echo_what_they_can() {
        let r = parse_client_envelope("{not json").unwrap_err();
        assert!(matches!(
            r,
            ServerEnvelope::Reject {
                request_id: None,
                code: RejectCode::MalformedEnvelope,
                ..
            }
        ));
        let r =
            parse_client_envelope(r#"{"request_id":9,"room_id":"r","type":"speak","payload":{}}"#)
                .unwrap_err();
        assert_eq!(r.request_id(), Some(9));
        let r = parse_client_envelope(r#"{"request_id":4,"type":"dance"}"#).unwrap_err();
        assert_eq!(r.request_id(), Some(4));
    }

    #[test]
    fn server_envelopes_are_tagged_by_type() {
        let env = ServerEnvelope::Pong { request_id: 3 };
        assert_eq!(
            serde_json::to_value(&env).unwrap(),
            serde_json::json!({"type": "pong", "request_id": 3})
        );
        let rej = ServerEnvelope::reject(Some(1), None, RejectCode::NotJoined, "join first");
        let v = serde_json::to_value(&rej).unwrap();
        assert_eq!(v["type"], "reject");
        assert_eq!(v["code"], "not_joined");
        let back: ServerEnvelope = serde_json::from_value(v).unwrap();
        assert_eq!(back, rej);
    }
}
