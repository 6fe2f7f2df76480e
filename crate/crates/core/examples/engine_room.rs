//! A room driven by hand: speaking, withdrawing, an admin election and a
//! task, then a replay that reproduces the state hash.
//!
//!     cargo run --example engine_room

use std::sync::Arc;

use ttm::domain::{Action, ActionKind, Ballot, MemberId};
use ttm::engine::{replay, EngineConfig, Room, RoomEntry, RoomSpec};
use ttm::matrix::{HeuristicConfig, MatrixSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = RoomSpec::new("design-review");
    spec.topic = "q3 roadmap".into();
    spec.matrix = MatrixSpec::Heuristic(HeuristicConfig::default());
    spec.engine = EngineConfig {
        election_duration: 20,
        ..EngineConfig::default()
    };
    let mut room = Room::from_spec(&spec, None)?;
    let [ann, bob, cid] = ["ann", "bob", "cid"].map(|n| MemberId::new(n).unwrap());

    let mut entries = Vec::new();
    for m in [&ann, &bob, &cid] {
        entries.push(RoomEntry::Join { member: m.clone() });
    }
    let act = |who: &MemberId, kind, t| RoomEntry::Action {
        action: Action::new(who.clone(), kind, t),
    };
    entries.extend([
        act(
            &ann,
            ActionKind::speak("great progress, thanks everyone"),
            1,
        ),
        act(&bob, ActionKind::speak("agreed, the plan looks good"), 2),
        act(&cid, ActionKind::speak("this is a waste of time"), 3),
        act(
            &cid,
            ActionKind::Withdraw {
                message_id: ttm::domain::MessageId(2),
            },
            4,
        ),
        act(
            &ann,
            ActionKind::IssueTask {
                description: "draft the release notes".into(),
            },
            5,
        ),
        act(&bob, ActionKind::vote_admin(ann.clone()), 6),
        act(&cid, ActionKind::vote_admin(ann.clone()), 7),
        act(
            &bob,
            ActionKind::Vote {
                ballot: Ballot::CloseTask(ttm::domain::TaskId(0)),
            },
            8,
        ),
        RoomEntry::Tally { now: 30 },
    ]);

    for entry in &entries {
        if let Some(outcome) = room.apply(entry)? {
            let budget = outcome.decision.as_ref().map(|d| d.new_budget);
            println!(
                "{:>9} accepted={} reason={:?} budget={budget:?} events={:?}",
                match entry {
                    RoomEntry::Action { action } => action.actor.as_str(),
                    _ => "-",
                },
                outcome.accepted,
                outcome.reason,
                outcome.events
            );
        }
    }

    let state = room.state();
    println!("admin: {:?}", state.votes.admin);
    println!("atmosphere mean: {:+.3}", state.field.atmosphere.mean());
    for (id, r) in state.ledger.iter() {
        println!("  {id}: budget {:.2}, tokens {}", r.budget, r.vote_tokens);
    }
    let again = replay(&spec, None::<Arc<_>>, &entries)?;
    println!("state hash  {}", room.state_hash());
    println!("replay hash {}", again.state_hash());
    Ok(())
}
