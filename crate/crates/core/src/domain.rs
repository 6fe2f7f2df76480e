//! Shared domain types: members, the room field, resources and actions.
//!
//! Everything here is plain data. Mutation happens inside
//! [`crate::engine::Room`], which serializes all actions for one room.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of slots in the atmosphere window.
pub const ATMOSPHERE_SLOTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("unknown member `{0}`")]
    UnknownMember(MemberId),
    #[error("member id must be nonempty")]
    EmptyMemberId,
}

/// Opaque member identifier, unique within a room.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemberId(String);

impl MemberId {
    pub fn new(id: impl Into<String>) -> Result<Self, DomainError> {
        let id = id.into();
        if id.is_empty() {
            return Err(DomainError::EmptyMemberId);
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// The last ten atmosphere values of a room, oldest first.
///
/// Zero-filled until ten messages exist. Values are clamped into `[-1, 1]`
/// on entry so the window invariant holds for any scorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereWindow {
    values: [f64; ATMOSPHERE_SLOTS],
}

impl Default for AtmosphereWindow {
    fn default() -> Self {
        Self {
            values: [0.0; ATMOSPHERE_SLOTS],
        }
    }
}

impl AtmosphereWindow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a window from the most recent values (oldest first). Only the
    /// last ten are kept.
    pub fn from_recent<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let mut window = Self::default();
        for v in values {
            window.push(v);
        }
        window
    }

    /// Appends a value, evicting the oldest.
    pub fn push(&mut self, value: f64) {
        let value = if value.is_nan() {
            0.0
        } else {
            value.clamp(-1.0, 1.0)
        };
        self.values.rotate_left(1);
        self.values[ATMOSPHERE_SLOTS - 1] = value;
    }

    pub fn values(&self) -> &[f64; ATMOSPHERE_SLOTS] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / ATMOSPHERE_SLOTS as f64
    }
}

/// A chat message. Withdrawn messages stay in the transcript as tombstones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub author: MemberId,
    pub text: String,
    pub logical_time: u64,
    pub withdrawn: bool,
    pub atmosphere_value: f64,
}

/// The interaction environment: the tribe, its topic, atmosphere and transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub room_id: String,
    pub tribe: BTreeSet<MemberId>,
    pub topic: String,
    pub atmosphere: AtmosphereWindow,
    pub transcript: Vec<Message>,
}

impl Field {
    pub fn new(room_id: impl Into<String>, topic: impl Into<String>) -> Self {
        Self {
            room_id: room_id.into(),
            tribe: BTreeSet::new(),
            topic: topic.into(),
            atmosphere: AtmosphereWindow::default(),
            transcript: Vec::new(),
        }
    }

    /// Rebuilds the window from the ten most recent live messages.
    pub fn recompute_atmosphere(&mut self) {
        let mut recent: Vec<f64> = self
            .transcript
            .iter()
            .rev()
            .filter(|m| !m.withdrawn)
            .take(ATMOSPHERE_SLOTS)
            .map(|m| m.atmosphere_value)
            .collect();
        recent.reverse();
        self.atmosphere = AtmosphereWindow::from_recent(recent);
    }

    pub fn message(&self, id: MessageId) -> Option<&Message> {
        // ids are assigned densely in append order
        self.transcript
            .get(id.0 as usize)
            .filter(|m| m.id == id)
            .or_else(|| self.transcript.iter().find(|m| m.id == id))
    }
}

/// Per-member resource parameters applied when a member joins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceConfig {
    /// Messages per minute.
    pub refill_rate: f64,
    pub budget_cap: f64,
    pub initial_vote_tokens: u32,
}

impl Default for ResourceConfig {
    fn default() -> Self {
        Self {
            refill_rate: 5.0,
            budget_cap: 5.0,
            initial_vote_tokens: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberResources {
    pub budget: f64,
    pub vote_tokens: u32,
    pub refill_rate: f64,
    pub budget_cap: f64,
    /// Refill is suspended while `logical_time < muted_until`.
    pub muted_until: Option<u64>,
}

impl MemberResources {
    pub fn new(cfg: &ResourceConfig) -> Self {
        Self {
            budget: cfg.budget_cap,
            vote_tokens: cfg.initial_vote_tokens,
            refill_rate: cfg.refill_rate,
            budget_cap: cfg.budget_cap,
            muted_until: None,
        }
    }

    /// Sets the budget, clamped into `[0, budget_cap]`. Non-finite values
    /// collapse to zero.
    pub fn set_budget(&mut self, budget: f64) {
        self.budget = if budget.is_finite() {
            budget.clamp(0.0, self.budget_cap)
        } else {
            0.0
        };
    }

    pub fn refill(&mut self, elapsed_minutes: f64) {
        if elapsed_minutes > 0.0 {
            self.set_budget(self.budget + self.refill_rate * elapsed_minutes);
        }
    }

    /// Refill over the logical interval `(from, to]`, honouring any mute.
    pub fn refill_between(&mut self, from: u64, to: u64, ticks_per_minute: f64) {
        let start = match self.muted_until {
            Some(until) => from.max(until),
            None => from,
        };
        if to > start {
            self.refill((to - start) as f64 / ticks_per_minute);
        }
    }

    pub fn is_muted(&self, now: u64) -> bool {
        self.muted_until.is_some_and(|until| now < until)
    }
}

/// Per-member message budgets and vote tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceLedger {
    members: BTreeMap<MemberId, MemberResources>,
}

impl ResourceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: MemberId, resources: MemberResources) {
        self.members.insert(id, resources);
    }

    /// Convenience for tests and fixtures: members with explicit budgets,
    /// default rate and a cap of at least the budget.
    pub fn with_budgets<'a, I>(budgets: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut ledger = Self::new();
        for (id, budget) in budgets {
            let cfg = ResourceConfig {
                budget_cap: ResourceConfig::default().budget_cap.max(budget),
                ..ResourceConfig::default()
            };
            let mut res = MemberResources::new(&cfg);
            res.set_budget(budget);
            ledger.insert(MemberId::new(id).expect("nonempty id"), res);
        }
        ledger
    }

    pub fn get(&self, id: &MemberId) -> Option<&MemberResources> {
        self.members.get(id)
    }

    pub fn get_mut(&mut self, id: &MemberId) -> Option<&mut MemberResources> {
        self.members.get_mut(id)
    }

    pub fn contains(&self, id: &MemberId) -> bool {
        self.members.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MemberId, &MemberResources)> {
        self.members.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&MemberId, &mut MemberResources)> {
        self.members.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn total_budget(&self) -> f64 {
        self.members.values().map(|r| r.budget).sum()
    }

    /// Adds `refill_rate * elapsed_minutes` to every budget, capped.
    pub fn refill(&mut self, elapsed_minutes: f64) {
        for res in self.members.values_mut() {
            res.refill(elapsed_minutes);
        }
    }
}

/// The actor's budget and its share of the room total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceStructure {
    pub count: f64,
    pub proportion: f64,
}

pub fn resource_structure(
    ledger: &ResourceLedger,
    actor: &MemberId,
) -> Result<ResourceStructure, DomainError> {
    let own = ledger
        .get(actor)
        .ok_or_else(|| DomainError::UnknownMember(actor.clone()))?;
    let total = ledger.total_budget();
    let proportion = if total > 0.0 {
        (own.budget / total).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(ResourceStructure {
        count: own.budget,
        proportion,
    })
}

/// What a vote is cast for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "for", content = "target")]
pub enum Ballot {
    /// Candidate for temporary administrator.
    Admin(MemberId),
    /// Closing vote on an open task.
    CloseTask(TaskId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionKind {
    Speak { text: String },
    Withdraw { message_id: MessageId },
    IssueTask { description: String },
    Vote { ballot: Ballot },
}

impl ActionKind {
    pub fn speak(text: impl Into<String>) -> Self {
        Self::Speak { text: text.into() }
    }

    pub fn vote_admin(candidate: MemberId) -> Self {
        Self::Vote {
            ballot: Ballot::Admin(candidate),
        }
    }

    /// Text fed to the vectorizer, if the action carries any.
    pub fn text(&self) -> Option<&str> {
        match self {
            Self::Speak { text } => Some(text),
            Self::IssueTask { description } => Some(description),
            Self::Withdraw { .. } | Self::Vote { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub actor: MemberId,
    pub kind: ActionKind,
    pub logical_time: u64,
}

impl Action {
    pub fn new(actor: MemberId, kind: ActionKind, logical_time: u64) -> Self {
        Self {
            actor,
            kind,
            logical_time,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(s: &str) -> MemberId {
        MemberId::new(s).unwrap()
    }

    #[test]
    fn resource_structure_examples() {
        let ledger = ResourceLedger::with_budgets([("a", 5.0), ("b", 5.0)]);
        let rs = resource_structure(&ledger, &id("a")).unwrap();
        assert_eq!((rs.count, rs.proportion), (5.0, 0.5));

        let ledger = ResourceLedger::with_budgets([("a", 0.0), ("b", 0.0)]);
        let rs = resource_structure(&ledger, &id("a")).unwrap();
        assert_eq!((rs.count, rs.proportion), (0.0, 0.0));

        let ledger = ResourceLedger::with_budgets([("a", 5.0)]);
        let rs = resource_structure(&ledger, &id("a")).unwrap();
        assert_eq!((rs.count, rs.proportion), (5.0, 1.0));
    }

    #[test]
    fn unknown_member_is_an_error() {
        let ledger = ResourceLedger::with_budgets([("a", 5.0)]);
        assert_eq!(
            resource_structure(&ledger, &id("zed")),
            Err(DomainError::UnknownMember(id("zed")))
        );
    }

    #[test]
    fn empty_member_id_rejected() {
        assert_eq!(MemberId::new(""), Err(DomainError::EmptyMemberId));
    }

    #[test]
    fn window_fills_newest_last_and_evicts() {
        let mut w = AtmosphereWindow::new();
        for v in [0.2, -0.1, 0.5] {
            w.push(v);
        }
        assert_eq!(
            w.values(),
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, -0.1, 0.5]
        );
        let mut w = AtmosphereWindow::new();
        for i in 1..=11 {
            w.push(i as f64 / 100.0);
        }
        assert_eq!(w.values()[0], 0.02);
        assert_eq!(w.values()[9], 0.11);
    }

    #[test]
    fn withdrawn_messages_leave_the_window() {
        let mut field = Field::new("r", "topic");
        for (i, v) in [0.5, -0.5, 0.25].into_iter().enumerate() {
            field.transcript.push(Message {
                id: MessageId(i as u64),
                author: id("a"),
                text: String::new(),
                logical_time: i as u64 + 1,
                withdrawn: false,
                atmosphere_value: v,
            });
        }
        field.transcript[1].withdrawn = true;
        field.recompute_atmosphere();
        assert_eq!(&field.atmosphere.values()[8..], &[0.5, 0.25]);
        assert_eq!(field.message(MessageId(2)).unwrap().atmosphere_value, 0.25);
    }

    #[test]
    fn muted_member_refills_only_after_mute() {
        let mut r = MemberResources::new(&ResourceConfig::default());
        r.set_budget(0.0);
        r.muted_until = Some(15);
        r.refill_between(10, 20, 10.0);
        // 5 ticks unmuted at 5/min with 10 ticks per minute
        assert!((r.budget - 2.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn proportions_sum_to_one(budgets in proptest::collection::vec(0.0f64..5.0, 1..12)) {
            let names: Vec<String> = (0..budgets.len()).map(|i| format!("m{i}")).collect();
            let ledger = ResourceLedger::with_budgets(
                names.iter().map(|n| n.as_str()).zip(budgets.iter().copied()),
            );
            let total = ledger.total_budget();
            let sum: f64 = names
                .iter()
                .map(|n| resource_structure(&ledger, &id(n)).unwrap().proportion)
                .sum();
            if total > 0.0 {
                prop_assert!((sum - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }

        #[test]
        fn window_length_and_range_hold(values in proptest::collection::vec(-3.0f64..3.0, 0..40)) {
            let w = AtmosphereWindow::from_recent(values);
            prop_assert_eq!(w.values().len(), ATMOSPHERE_SLOTS);
            prop_assert!(w.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
