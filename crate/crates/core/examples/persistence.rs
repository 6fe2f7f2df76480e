//! Writes a room's append-only log, restores it, then shows that an edited
//! log is refused.
//!
//!     cargo run --example persistence

use ttm::domain::{Action, ActionKind, MemberId};
use ttm::engine::{RoomEntry, RoomSpec};
use ttm::service::{log_path, restore_room, PersistentRoom};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("ttm-persist-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let spec = RoomSpec::new("standup");
    let mut room = PersistentRoom::create(&dir, &spec, None)?;
    let (ann, bob) = (MemberId::new("ann")?, MemberId::new("bob")?);
    room.apply(&RoomEntry::Join {
        member: ann.clone(),
    })?;
    room.apply(&RoomEntry::Join {
        member: bob.clone(),
    })?;
    for t in 1..=6 {
        let who = if t % 2 == 0 { &ann } else { &bob };
        let action = Action::new(
            who.clone(),
            ActionKind::speak(format!("update number {t}")),
            t,
        );
        room.apply(&RoomEntry::Action { action })?;
    }
    room.snapshot()?;
    let hash = room.room().state_hash();
    println!("{} records, hash {hash}", room.records());
    drop(room);

    let log = log_path(&dir, "standup")?;
    let restored = restore_room(&log, None, None)?;
    println!(
        "restored hash equal: {}",
        restored.room.state_hash() == hash
    );

    let text = std::fs::read_to_string(&log)?;
    std::fs::write(&log, text.replacen("update number 3", "update number 4", 1))?;
    match restore_room(&log, None, None) {
        Err(e) => println!("tampered log refused: {e}"),
        Ok(_) => println!("tampered log accepted?!"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
