//! Shared helpers for the integration tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttm::domain::{Action, ActionKind, Ballot, MemberId, MessageId, TaskId};
use ttm::engine::{EngineConfig, Room, RoomEntry, RoomSpec};
use ttm::matrix::{HeuristicConfig, MatrixSpec, RuleConfig};

const WORDS: &[&str] = &[
    "good", "great", "thanks", "love", "nice", "bad", "awful", "sad", "wrong", "plan", "meeting",
    "notes", "idiot", "trash", "stupid", "happy", "the", "a", "we", "again", "docs", "ship",
];

pub fn id(s: &str) -> MemberId {
    MemberId::new(s).unwrap()
}

/// Fuzz room: allocator chosen by `seed % 3`, short elections.
pub fn fuzz_spec(seed: u64) -> RoomSpec {
    let matrix = match seed % 3 {
        0 => MatrixSpec::Rule(RuleConfig::default()),
        1 => MatrixSpec::Heuristic(HeuristicConfig::default()),
        _ => MatrixSpec::Noop,
    };
    RoomSpec {
        matrix,
        engine: EngineConfig {
            election_duration: 40,
            ..EngineConfig::default()
        },
        ..RoomSpec::new(format!("fuzz-{seed}"))
    }
}

/// Per-step invariant violations found by [`fuzz_room`].
#[derive(Debug, Default)]
pub struct FuzzFindings {
    pub negative_budget: usize,
    pub over_cap: usize,
    pub changed_on_reject: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl FuzzFindings {
    pub fn clean(&self) -> bool {
        self.negative_budget == 0 && self.over_cap == 0 && self.changed_on_reject == 0
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.03) {
        return " ?! ".into();
    }
    let n = rng.random_range(1..=8);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Drives `actions` random actions (plus joins and tallies) through a room,
/// checking budgets after every step and that rejected actions change
/// nothing. Returns the room, every entry applied and the findings.
pub fn fuzz_room(seed: u64, actions: usize) -> (Room, Vec<RoomEntry>, FuzzFindings) {
    let spec = fuzz_spec(seed);
    let mut room = Room::from_spec(&spec, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut members: Vec<MemberId> = Vec::new();
    let mut findings = FuzzFindings::default();
    let cap = spec.engine.resources.budget_cap;

    let join = |room: &mut Room, entries: &mut Vec<RoomEntry>, members: &mut Vec<MemberId>| {
        let m = id(&format!("m{}", members.len()));
        let e = RoomEntry::Join { member: m.clone() };
        room.apply(&e).unwrap();
        entries.push(e);
        members.push(m);
    };
    for _ in 0..4 {
        join(&mut room, &mut entries, &mut members);
    }

    let mut t: u64 = 0;
    for step in 0..actions {
        if step % 500 == 499 && members.len() < 10 {
            join(&mut room, &mut entries, &mut members);
        }
        t += rng.random_range(0..4);
        let time = if t > 0 && rng.random_bool(0.03) {
            t.saturating_sub(rng.random_range(1..20))
        } else {
            t
        };
        if let Some(e) = &room.state().votes.open {
            if e.deadline <= t && rng.random_bool(0.5) {
                let entry = RoomEntry::Tally { now: t };
                room.apply(&entry).unwrap();
                entries.push(entry);
            }
        }
        let actor = if rng.random_bool(0.05) {
            id("stranger")
        } else {
            members.choose(&mut rng).unwrap().clone()
        };
        let next_msg = room.state().next_message_id().0;
        let next_task = room.state().next_task_id().0;
        let kind = match rng.random_range(0..100) {
            0..55 => ActionKind::speak(random_text(&mut rng)),
            55..65 => ActionKind::Withdraw {
                message_id: MessageId(rng.random_range(0..next_msg + 2)),
            },
            65..75 => ActionKind::IssueTask {
                description: random_text(&mut rng),
            },
            75..90 => {
                let target = if rng.random_bool(0.1) {
                    id("stranger")
                } else {
                    members.choose(&mut rng).unwrap().clone()
                };
                ActionKind::vote_admin(target)
            }
            _ => ActionKind::Vote {
                ballot: Ballot::CloseTask(TaskId(rng.random_range(0..next_task + 1))),
            },
        };
        let action = Action::new(actor, kind, time);
        let before = room.state_hash();
        let snapshot = (step % 25 == 0).then(|| room.state().clone());
        let outcome = room.submit(&action).unwrap();
        if outcome.accepted {
            findings.accepted += 1;
        } else {
            findings.rejected += 1;
            let changed =
                room.state_hash() != before || snapshot.is_some_and(|s| &s != room.state());
            if changed {
                findings.changed_on_reject += 1;
            }
        }
        for (_, r) in room.state().ledger.iter() {
            if r.budget < 0.0 {
                findings.negative_budget += 1;
            }
            if r.budget > cap {
                findings.over_cap += 1;
            }
        }
        entries.push(RoomEntry::Action { action });
    }
    (room, entries, findings)
}
