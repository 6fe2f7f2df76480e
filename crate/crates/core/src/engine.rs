//! The per-room interaction loop.
//!
//! [`Room::submit`] processes one action at a time:
//!
//! 1. refill every budget for the logical time elapsed since the last
//!    accepted action (mutes suspend refill);
//! 2. close an election whose deadline has passed;
//! 3. validate the action against the refilled ledger, rejecting with no
//!    state change if it cannot be paid for or targets nothing valid;
//! 4. apply its effect (append, tombstone, vote, open task);
//! 5. assemble `[action vector | resource structure | atmosphere]`, where the
//!    atmosphere is the window as it stood before the action, and ask the
//!    matrix for the actor's new budget;
//! 6. set that budget and deduct the action's cost.
//!
//! Everything a submission needs is computed before anything is written, so a
//! rejection leaves the room bit-identical.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    resource_structure, Action, ActionKind, Ballot, Field, MemberId, MemberResources, Message,
    MessageId, ResourceConfig, ResourceLedger, ResourceStructure, TaskId,
};
use crate::matrix::{
    allocate, assemble_features, AllocationContext, FeatureVector, MatrixDecision, MatrixError,
    MatrixKind, MatrixSpec,
};
use crate::sentiment::{
    atmosphere_value, score_text, ScorerConfig, SentimentError, SentimentScorer,
};
use crate::vectorizer::{tokenize, weighted_embedding, ActionVector, CorpusStats, EmbeddingCache};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("`{0}` is already a member")]
    AlreadyMember(MemberId),
    #[error("room is full ({0} members)")]
    RoomFull(usize),
    #[error("no election is open")]
    NoOpenElection,
    #[error("election is open until logical time {0}")]
    ElectionPending(u64),
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Sentiment(#[from] SentimentError),
}

/// Budget and vote-token price of an action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    pub budget: f64,
    pub vote_tokens: u32,
}

pub fn cost(kind: &ActionKind) -> Cost {
    match kind {
        ActionKind::Speak { .. } | ActionKind::Withdraw { .. } => Cost {
            budget: 1.0,
            vote_tokens: 0,
        },
        ActionKind::IssueTask { .. } => Cost {
            budget: 2.0,
            vote_tokens: 0,
        },
        ActionKind::Vote { .. } => Cost {
            budget: 0.0,
            vote_tokens: 1,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub resources: ResourceConfig,
    /// Logical ticks per minute of refill.
    pub ticks_per_minute: f64,
    /// Logical ticks an election stays open after its first ballot.
    pub election_duration: u64,
    /// Vote tokens granted to an elected admin.
    pub admin_bonus: u32,
    /// Closing votes from non-issuers that complete a task.
    pub task_quorum: u32,
    pub max_members: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            resources: ResourceConfig::default(),
            ticks_per_minute: 10.0,
            election_duration: 100,
            admin_bonus: 2,
            task_quorum: 1,
            max_members: 64,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let r = &self.resources;
        if !(self.ticks_per_minute > 0.0 && self.ticks_per_minute.is_finite()) {
            return Err(EngineError::InvalidConfig(
                "ticks_per_minute must be > 0".into(),
            ));
        }
        if !(r.budget_cap >= 0.0 && r.budget_cap.is_finite()) {
            return Err(EngineError::InvalidConfig("budget_cap must be >= 0".into()));
        }
        if !(r.refill_rate >= 0.0 && r.refill_rate.is_finite()) {
            return Err(EngineError::InvalidConfig(
                "refill_rate must be >= 0".into(),
            ));
        }
        if self.task_quorum == 0 || self.max_members == 0 {
            return Err(EngineError::InvalidConfig(
                "task_quorum and max_members must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Ok,
    BudgetExhausted,
    UnknownMember,
    InvalidTarget,
    /// Logical time earlier than the last accepted action.
    OutOfOrder,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::Ok => "ok",
            Reason::BudgetExhausted => "budget_exhausted",
            Reason::UnknownMember => "unknown_member",
            Reason::InvalidTarget => "invalid_target",
            Reason::OutOfOrder => "out_of_order",
        })
    }
}

/// Side effects worth announcing besides the action itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum RoomEvent {
    ElectionOpened {
        deadline: u64,
    },
    ElectionResult {
        winner: Option<MemberId>,
        tallies: BTreeMap<MemberId, u32>,
    },
    TaskOpened {
        task_id: TaskId,
    },
    TaskCompleted {
        task_id: TaskId,
    },
    MessageWithdrawn {
        message_id: MessageId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub accepted: bool,
    pub reason: Reason,
    pub decision: Option<MatrixDecision>,
    pub message_id: Option<MessageId>,
    pub task_id: Option<TaskId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<RoomEvent>,
}

impl ActionOutcome {
    fn rejected(reason: Reason) -> Self {
        Self {
            accepted: false,
            reason,
            decision: None,
            message_id: None,
            task_id: None,
            events: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Election {
    pub tallies: BTreeMap<MemberId, u32>,
    /// voter → candidate
    pub ballots: BTreeMap<MemberId, MemberId>,
    pub deadline: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoteState {
    pub open: Option<Election>,
    pub admin: Option<MemberId>,
}

/// Strict majority of cast votes, if any candidate has one.
pub fn election_winner(tallies: &BTreeMap<MemberId, u32>) -> Option<MemberId> {
    let total: u32 = tallies.values().sum();
    tallies
        .iter()
        .find(|(_, &n)| 2 * n > total)
        .map(|(m, _)| m.clone())
}

/// Vote-token credits that closing `election` produces.
fn election_refunds(
    election: &Election,
    winner: Option<&MemberId>,
    bonus: u32,
) -> BTreeMap<MemberId, u32> {
    let mut refunds = BTreeMap::new();
    match winner {
        Some(w) => {
            let own = u32::from(election.ballots.contains_key(w));
            refunds.insert(w.clone(), own + bonus);
        }
        None => {
            for voter in election.ballots.keys() {
                refunds.insert(voter.clone(), 1);
            }
        }
    }
    refunds
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: TaskId,
    pub description: String,
    pub issuer: MemberId,
    pub status: TaskStatus,
    pub closers: BTreeSet<MemberId>,
    pub issued_at: u64,
    pub completed_at: Option<u64>,
}

/// Everything that makes up a room; equal states hash equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomState {
    pub field: Field,
    pub ledger: ResourceLedger,
    pub votes: VoteState,
    pub tasks: BTreeMap<TaskId, TaskRecord>,
    pub corpus: CorpusStats,
    /// Feature vectors of recent accepted actions, oldest first.
    pub history: VecDeque<Arc<FeatureVector>>,
    pub last_time: u64,
    pub accepted: u64,
    /// Rolling SHA-256 over every committed change, hex.
    pub content_digest: String,
}

impl RoomState {
    fn new(room_id: &str, topic: &str) -> Self {
        Self {
            field: Field::new(room_id, topic),
            ledger: ResourceLedger::new(),
            votes: VoteState::default(),
            tasks: BTreeMap::new(),
            corpus: CorpusStats::new(),
            history: VecDeque::new(),
            last_time: 0,
            accepted: 0,
            content_digest: hex::encode([0u8; 32]),
        }
    }

    /// SHA-256 over the compact parts of the state plus the rolling digest,
    /// which stands in for transcript, corpus and history.
    pub fn state_hash(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            room_id: &'a str,
            topic: &'a str,
            tribe: &'a BTreeSet<MemberId>,
            ledger: &'a ResourceLedger,
            atmosphere: &'a [f64],
            votes: &'a VoteState,
            tasks: &'a BTreeMap<TaskId, TaskRecord>,
            transcript_len: usize,
            withdrawn: usize,
            doc_count: u64,
            vocabulary: usize,
            history_len: usize,
            last_time: u64,
            accepted: u64,
            content_digest: &'a str,
        }
        let view = View {
            room_id: &self.field.room_id,
            topic: &self.field.topic,
            tribe: &self.field.tribe,
            ledger: &self.ledger,
            atmosphere: self.field.atmosphere.values(),
            votes: &self.votes,
            tasks: &self.tasks,
            transcript_len: self.field.transcript.len(),
            withdrawn: self.field.transcript.iter().filter(|m| m.withdrawn).count(),
            doc_count: self.corpus.doc_count,
            vocabulary: self.corpus.doc_frequency.len(),
            history_len: self.history.len(),
            last_time: self.last_time,
            accepted: self.accepted,
            content_digest: &self.content_digest,
        };
        let bytes = serde_json::to_vec(&view).expect("state view serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn fold_digest(&mut self, record: &impl Serialize) {
        let mut h = Sha256::new();
        h.update(self.content_digest.as_bytes());
        h.update(serde_json::to_vec(record).expect("record serializes"));
        self.content_digest = hex::encode(h.finalize());
    }

    pub fn open_tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values().filter(|t| t.status == TaskStatus::Open)
    }

    pub fn next_message_id(&self) -> MessageId {
        MessageId(self.field.transcript.len() as u64)
    }

    pub fn next_task_id(&self) -> TaskId {
        TaskId(self.tasks.len() as u64)
    }
}

/// Serializable recipe for a room: everything except its evolving state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub room_id: String,
    #[serde(default)]
    pub topic: String,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub matrix: MatrixSpec,
    #[serde(default)]
    pub scorer: ScorerConfig,
}

impl RoomSpec {
    pub fn new(room_id: impl Into<String>) -> Self {
        Self {
            room_id: room_id.into(),
            topic: String::new(),
            engine: EngineConfig::default(),
            matrix: MatrixSpec::default(),
            scorer: ScorerConfig::default(),
        }
    }
}

/// One replayable state transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "entry")]
pub enum RoomEntry {
    Join { member: MemberId },
    Action { action: Action },
    Tally { now: u64 },
}

/// A chat room: configuration, allocator, scorer and state.
#[derive(Clone)]
pub struct Room {
    config: EngineConfig,
    matrix: MatrixKind,
    scorer: Arc<dyn SentimentScorer>,
    state: RoomState,
    history_cap: usize,
    cache: EmbeddingCache,
}

impl fmt::Debug for Room {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Room")
            .field("room_id", &self.state.field.room_id)
            .field("matrix", &self.matrix.name())
            .field("members", &self.state.field.tribe.len())
            .field("accepted", &self.state.accepted)
            .finish()
    }
}

struct Plan {
    ledger: ResourceLedger,
    tally: Option<(
        Option<MemberId>,
        BTreeMap<MemberId, u32>,
        BTreeMap<MemberId, u32>,
    )>,
    tokens: Option<Vec<String>>,
    features: Arc<FeatureVector>,
    decision: MatrixDecision,
}

impl Room {
    pub fn new(
        room_id: impl Into<String>,
        topic: impl Into<String>,
        config: EngineConfig,
        matrix: MatrixKind,
        scorer: Arc<dyn SentimentScorer>,
    ) -> Result<Self, EngineError> {
        let (room_id, topic) = (room_id.into(), topic.into());
        let state = RoomState::new(&room_id, &topic);
        Self::from_state(config, matrix, scorer, state)
    }

    pub fn from_spec(
        spec: &RoomSpec,
        external: Option<Arc<dyn SentimentScorer>>,
    ) -> Result<Self, EngineError> {
        Self::new(
            spec.room_id.clone(),
            spec.topic.clone(),
            spec.engine,
            spec.matrix.build()?,
            spec.scorer.build(external)?,
        )
    }

    /// Reassembles a room around a previously saved state.
    pub fn from_state(
        config: EngineConfig,
        matrix: MatrixKind,
        scorer: Arc<dyn SentimentScorer>,
        state: RoomState,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        matrix.validate()?;
        let history_cap = matrix.sequence_len();
        Ok(Self {
            config,
            matrix,
            scorer,
            state,
            history_cap,
            cache: EmbeddingCache::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn matrix(&self) -> &MatrixKind {
        &self.matrix
    }

    pub fn state(&self) -> &RoomState {
        &self.state
    }

    pub fn into_state(self) -> RoomState {
        self.state
    }

    pub fn state_hash(&self) -> String {
        self.state.state_hash()
    }

    /// The ledger as refill would leave it at `now`, without committing.
    pub fn projected_ledger(&self, now: u64) -> ResourceLedger {
        let mut ledger = self.state.ledger.clone();
        let from = self.state.last_time;
        for (_, r) in ledger.iter_mut() {
            r.refill_between(from, now, self.config.ticks_per_minute);
        }
        ledger
    }

    /// The resource structure `member` would present to the allocator at `now`.
    pub fn projected_structure(&self, member: &MemberId, now: u64) -> Option<ResourceStructure> {
        resource_structure(
            &self.projected_ledger(now.max(self.state.last_time)),
            member,
        )
        .ok()
    }

    pub fn join(&mut self, member: MemberId) -> Result<(), EngineError> {
        if self.state.field.tribe.contains(&member) {
            return Err(EngineError::AlreadyMember(member));
        }
        if self.state.field.tribe.len() >= self.config.max_members {
            return Err(EngineError::RoomFull(self.config.max_members));
        }
        self.state
            .ledger
            .insert(member.clone(), MemberResources::new(&self.config.resources));
        self.state.field.tribe.insert(member.clone());
        self.state.fold_digest(&RoomEntry::Join { member });
        Ok(())
    }

    /// Closes the open election explicitly once its deadline has passed.
    pub fn tally_votes(&mut self, now: u64) -> Result<Option<MemberId>, EngineError> {
        let election = self
            .state
            .votes
            .open
            .as_ref()
            .ok_or(EngineError::NoOpenElection)?;
        if election.deadline > now {
            return Err(EngineError::ElectionPending(election.deadline));
        }
        let (winner, _, refunds) = self.projected_tally(now).expect("election is due");
        self.commit_tally(winner.clone(), &refunds);
        self.state.fold_digest(&RoomEntry::Tally { now });
        Ok(winner)
    }

    pub fn apply(&mut self, entry: &RoomEntry) -> Result<Option<ActionOutcome>, EngineError> {
        match entry {
            RoomEntry::Join { member } => self.join(member.clone()).map(|_| None),
            RoomEntry::Action { action } => self.submit(action).map(Some),
            RoomEntry::Tally { now } => self.tally_votes(*now).map(|_| None),
        }
    }

    #[allow(clippy::type_complexity)]
    fn projected_tally(
        &self,
        now: u64,
    ) -> Option<(
        Option<MemberId>,
        BTreeMap<MemberId, u32>,
        BTreeMap<MemberId, u32>,
    )> {
        let election = self.state.votes.open.as_ref()?;
        if election.deadline > now {
            return None;
        }
        let winner = election_winner(&election.tallies);
        let refunds = election_refunds(election, winner.as_ref(), self.config.admin_bonus);
        Some((winner, election.tallies.clone(), refunds))
    }

    fn commit_tally(&mut self, winner: Option<MemberId>, refunds: &BTreeMap<MemberId, u32>) {
        for (member, credit) in refunds {
            if let Some(r) = self.state.ledger.get_mut(member) {
                r.vote_tokens += credit;
            }
        }
        self.state.votes.open = None;
        self.state.votes.admin = winner;
    }

    fn validate(
        &self,
        action: &Action,
        ledger: &ResourceLedger,
        tally_due: bool,
        refund: u32,
    ) -> Reason {
        let actor = &action.actor;
        let Some(res) = ledger.get(actor) else {
            return Reason::UnknownMember;
        };
        let c = cost(&action.kind);
        if res.budget < c.budget || res.vote_tokens + refund < c.vote_tokens {
            return Reason::BudgetExhausted;
        }
        let st = &self.state;
        match &action.kind {
            ActionKind::Speak { .. } | ActionKind::IssueTask { .. } => Reason::Ok,
            ActionKind::Withdraw { message_id } => match st.field.message(*message_id) {
                Some(m) if &m.author == actor && !m.withdrawn => Reason::Ok,
                _ => Reason::InvalidTarget,
            },
            ActionKind::Vote {
                ballot: Ballot::Admin(candidate),
            } => {
                let already = !tally_due
                    && st
                        .votes
                        .open
                        .as_ref()
                        .is_some_and(|e| e.ballots.contains_key(actor));
                if !st.field.tribe.contains(candidate) || already {
                    Reason::InvalidTarget
                } else {
                    Reason::Ok
                }
            }
            ActionKind::Vote {
                ballot: Ballot::CloseTask(task_id),
            } => match st.tasks.get(task_id) {
                Some(t)
                    if t.status == TaskStatus::Open
                        && &t.issuer != actor
                        && !t.closers.contains(actor) =>
                {
                    Reason::Ok
                }
                _ => Reason::InvalidTarget,
            },
        }
    }

    fn plan(&mut self, action: &Action) -> Result<Result<Plan, Reason>, EngineError> {
        let t = action.logical_time;
        if !self.state.field.tribe.contains(&action.actor) {
            return Ok(Err(Reason::UnknownMember));
        }
        if t < self.state.last_time {
            return Ok(Err(Reason::OutOfOrder));
        }
        let ledger = self.projected_ledger(t);
        let tally = self.projected_tally(t);
        let refund = tally
            .as_ref()
            .and_then(|(_, _, refunds)| refunds.get(&action.actor).copied())
            .unwrap_or(0);
        match self.validate(action, &ledger, tally.is_some(), refund) {
            Reason::Ok => {}
            reason => return Ok(Err(reason)),
        }

        let tokens = action.kind.text().map(tokenize);
        let action_vector = match &tokens {
            Some(tokens) => weighted_embedding(&self.state.corpus, tokens, &mut self.cache),
            None => ActionVector::zeros(),
        };
        let rs = resource_structure(&ledger, &action.actor).expect("actor validated");
        let features = Arc::new(assemble_features(
            action_vector.as_slice(),
            &rs,
            self.state.field.atmosphere.values(),
        )?);
        let cap = ledger.get(&action.actor).map_or(0.0, |r| r.budget_cap);
        let ctx = AllocationContext {
            actor: &action.actor,
            budget_cap: cap,
            tribe_size: self.state.field.tribe.len(),
        };
        let history = self.state.history.make_contiguous();
        let decision = allocate(&self.matrix, &features, history, action, &rs, &ctx)?;
        Ok(Ok(Plan {
            ledger,
            tally,
            tokens,
            features,
            decision,
        }))
    }

    /// Runs one action through the loop. `Err` only for allocator failures,
    /// in which case nothing was changed either.
    pub fn submit(&mut self, action: &Action) -> Result<ActionOutcome, EngineError> {
        let plan = match self.plan(action)? {
            Ok(plan) => plan,
            Err(reason) => return Ok(ActionOutcome::rejected(reason)),
        };
        let t = action.logical_time;
        let actor = &action.actor;
        let mut events = Vec::new();

        self.state.ledger = plan.ledger;
        self.state.last_time = t;
        if let Some((winner, tallies, refunds)) = plan.tally {
            self.commit_tally(winner.clone(), &refunds);
            events.push(RoomEvent::ElectionResult { winner, tallies });
        }

        let mut message_id = None;
        let mut task_id = None;
        match &action.kind {
            ActionKind::Speak { text } => {
                let score = score_text(self.scorer.as_ref(), text);
                let value = atmosphere_value(score)?;
                let id = self.state.next_message_id();
                self.state.field.transcript.push(Message {
                    id,
                    author: actor.clone(),
                    text: text.clone(),
                    logical_time: t,
                    withdrawn: false,
                    atmosphere_value: value,
                });
                self.state.field.atmosphere.push(value);
                message_id = Some(id);
            }
            ActionKind::Withdraw { message_id: id } => {
                let idx = self
                    .state
                    .field
                    .transcript
                    .iter()
                    .position(|m| m.id == *id)
                    .expect("target validated");
                self.state.field.transcript[idx].withdrawn = true;
                self.state.field.recompute_atmosphere();
                events.push(RoomEvent::MessageWithdrawn { message_id: *id });
            }
            ActionKind::IssueTask { description } => {
                let id = self.state.next_task_id();
                self.state.tasks.insert(
                    id,
                    TaskRecord {
                        id,
                        description: description.clone(),
                        issuer: actor.clone(),
                        status: TaskStatus::Open,
                        closers: BTreeSet::new(),
                        issued_at: t,
                        completed_at: None,
                    },
                );
                task_id = Some(id);
                events.push(RoomEvent::TaskOpened { task_id: id });
            }
            ActionKind::Vote { ballot } => {
                self.spend_token(actor);
                match ballot {
                    Ballot::Admin(candidate) => {
                        let duration = self.config.election_duration;
                        let election = self.state.votes.open.get_or_insert_with(|| {
                            events.push(RoomEvent::ElectionOpened {
                                deadline: t.saturating_add(duration),
                            });
                            Election {
                                tallies: BTreeMap::new(),
                                ballots: BTreeMap::new(),
                                deadline: t.saturating_add(duration),
                            }
                        });
                        *election.tallies.entry(candidate.clone()).or_insert(0) += 1;
                        election.ballots.insert(actor.clone(), candidate.clone());
                    }
                    Ballot::CloseTask(id) => {
                        task_id = Some(*id);
                        let quorum = self.config.task_quorum as usize;
                        let task = self.state.tasks.get_mut(id).expect("target validated");
                        task.closers.insert(actor.clone());
                        if task.closers.len() >= quorum {
                            task.status = TaskStatus::Completed;
                            task.completed_at = Some(t);
                            let closers: Vec<_> = task.closers.iter().cloned().collect();
                            for c in closers {
                                if let Some(r) = self.state.ledger.get_mut(&c) {
                                    r.vote_tokens += 1;
                                }
                            }
                            events.push(RoomEvent::TaskCompleted { task_id: *id });
                        }
                    }
                }
            }
        }
        if let Some(tokens) = &plan.tokens {
            self.state.corpus.add_document(tokens);
        }

        let c = cost(&action.kind);
        let res = self.state.ledger.get_mut(actor).expect("actor validated");
        res.set_budget(plan.decision.new_budget);
        if let Some(ticks) = plan.decision.mute_for {
            res.muted_until = Some(t.saturating_add(ticks));
        }
        res.set_budget(res.budget - c.budget);

        if self.history_cap > 0 {
            if self.state.history.len() == self.history_cap {
                self.state.history.pop_front();
            }
            self.state.history.push_back(plan.features);
        }
        self.state.accepted += 1;
        self.state.fold_digest(&(action, &plan.decision));

        Ok(ActionOutcome {
            accepted: true,
            reason: Reason::Ok,
            decision: Some(plan.decision),
            message_id,
            task_id,
            events,
        })
    }

    fn spend_token(&mut self, actor: &MemberId) {
        let r = self.state.ledger.get_mut(actor).expect("actor validated");
        r.vote_tokens = r.vote_tokens.saturating_sub(1);
    }

    /// The feature sequence the allocator saw for the most recent accepted
    /// action, front-padded to `len`.
    pub fn last_sequence(&self, len: usize) -> Option<Vec<Arc<FeatureVector>>> {
        let history = &self.state.history;
        let last = Arc::clone(history.back()?);
        let rest: Vec<_> = history.iter().take(history.len() - 1).cloned().collect();
        Some(crate::matrix::build_sequence(&rest, last, len))
    }
}

/// Applies `entries` to a fresh room built from `spec`.
pub fn replay<'a>(
    spec: &RoomSpec,
    external: Option<Arc<dyn SentimentScorer>>,
    entries: impl IntoIterator<Item = &'a RoomEntry>,
) -> Result<Room, EngineError> {
    let mut room = Room::from_spec(spec, external)?;
    for e in entries {
        room.apply(e)?;
    }
    Ok(room)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{HeuristicConfig, RuleConfig};
    use crate::sentiment::{ConstantScorer, LexiconScorer, SentimentScore};

    fn id(s: &str) -> MemberId {
        MemberId::new(s).unwrap()
    }

    fn room_with(matrix: MatrixKind, members: &[&str]) -> Room {
        let mut room = Room::new(
            "r",
            "topic",
            EngineConfig::default(),
            matrix,
            Arc::new(LexiconScorer::default()),
        )
        .unwrap();
        for m in members {
            room.join(id(m)).unwrap();
        }
        room
    }

    fn act(who: &str, kind: ActionKind, t: u64) -> Action {
        Action::new(id(who), kind, t)
    }

    fn budget(room: &Room, who: &str) -> f64 {
        room.state().ledger.get(&id(who)).unwrap().budget
    }

    fn tokens(room: &Room, who: &str) -> u32 {
        room.state().ledger.get(&id(who)).unwrap().vote_tokens
    }

    fn vote(room: &mut Room, who: &str, candidate: &str, t: u64) -> ActionOutcome {
        room.submit(&act(who, ActionKind::vote_admin(id(candidate)), t))
            .unwrap()
    }

    #[test]
    fn cost_table() {
        assert_eq!(cost(&ActionKind::speak("x")).budget, 1.0);
        let withdraw = ActionKind::Withdraw {
            message_id: MessageId(0),
        };
        assert_eq!(cost(&withdraw).budget, 1.0);
        let task = ActionKind::IssueTask {
            description: "x".into(),
        };
        assert_eq!(cost(&task).budget, 2.0);
        let v = cost(&ActionKind::vote_admin(id("a")));
        assert_eq!((v.budget, v.vote_tokens), (0.0, 1));
    }

    #[test]
    fn speak_under_noop_costs_one() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b"]);
        let out = room
            .submit(&act("a", ActionKind::speak("hello"), 1))
            .unwrap();
        assert!(out.accepted);
        assert_eq!(out.reason, Reason::Ok);
        assert_eq!(out.message_id, Some(MessageId(0)));
        assert_eq!(budget(&room, "a"), 4.0);
        assert_eq!(room.state().field.transcript.len(), 1);
    }

    #[test]
    fn speak_with_empty_budget_is_rejected_without_change() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b"]);
        for _ in 0..5 {
            assert!(
                room.submit(&act("a", ActionKind::speak("hi"), 0))
                    .unwrap()
                    .accepted
            );
        }
        assert_eq!(budget(&room, "a"), 0.0);
        let before = room.state().clone();
        let hash = room.state_hash();
        let out = room.submit(&act("a", ActionKind::speak("hi"), 0)).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.reason, Reason::BudgetExhausted);
        assert_eq!(room.state(), &before);
        assert_eq!(room.state_hash(), hash);
    }

    #[test]
    fn noop_conservation() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b"]);
        for k in 1..=3 {
            room.submit(&act("a", ActionKind::speak("hi"), 0)).unwrap();
            assert_eq!(budget(&room, "a"), 5.0 - k as f64);
        }
        // 2 ticks at 10 ticks/minute and 5/minute refill one message
        room.submit(&act("b", ActionKind::speak("hi"), 2)).unwrap();
        assert_eq!(budget(&room, "a"), 3.0);
    }

    #[test]
    fn refill_from_two_over_a_fifth_of_a_minute() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b"]);
        for _ in 0..3 {
            room.submit(&act("a", ActionKind::speak("x"), 0)).unwrap();
        }
        assert_eq!(budget(&room, "a"), 2.0);
        // vote costs no budget, so the refill is visible directly
        vote(&mut room, "b", "a", 2);
        assert_eq!(budget(&room, "a"), 3.0);
    }

    #[test]
    fn unknown_member_and_stale_time() {
        let mut room = room_with(MatrixKind::NoOp, &["a"]);
        let out = room.submit(&act("zed", ActionKind::speak("x"), 1)).unwrap();
        assert_eq!(out.reason, Reason::UnknownMember);
        room.submit(&act("a", ActionKind::speak("x"), 5)).unwrap();
        let out = room.submit(&act("a", ActionKind::speak("x"), 4)).unwrap();
        assert_eq!(out.reason, Reason::OutOfOrder);
    }

    #[test]
    fn withdraw_rules() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b"]);
        room.submit(&act("a", ActionKind::speak("great wonderful"), 1))
            .unwrap();
        let before = room.state().clone();
        let w = ActionKind::Withdraw {
            message_id: MessageId(0),
        };
        let out = room.submit(&act("b", w.clone(), 2)).unwrap();
        assert_eq!(out.reason, Reason::InvalidTarget);
        assert_eq!(room.state(), &before);
        let missing = ActionKind::Withdraw {
            message_id: MessageId(9),
        };
        assert_eq!(
            room.submit(&act("a", missing, 2)).unwrap().reason,
            Reason::InvalidTarget
        );

        assert!(room.state().field.atmosphere.values()[9] > 0.0);
        assert!(room.submit(&act("a", w.clone(), 2)).unwrap().accepted);
        assert!(room.state().field.transcript[0].withdrawn);
        assert_eq!(room.state().field.atmosphere.values(), &[0.0; 10]);
        assert_eq!(
            room.submit(&act("a", w, 3)).unwrap().reason,
            Reason::InvalidTarget
        );
    }

    #[test]
    fn majority_election() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b", "c", "d"]);
        let out = vote(&mut room, "a", "a", 1);
        assert!(matches!(
            out.events[0],
            RoomEvent::ElectionOpened { deadline: 101 }
        ));
        vote(&mut room, "b", "a", 2);
        vote(&mut room, "c", "a", 3);
        vote(&mut room, "d", "b", 4);
        assert_eq!(vote(&mut room, "d", "c", 5).reason, Reason::InvalidTarget);
        assert!(matches!(
            room.tally_votes(50),
            Err(EngineError::ElectionPending(101))
        ));
        assert_eq!(room.tally_votes(101).unwrap(), Some(id("a")));
        assert_eq!(room.state().votes.admin, Some(id("a")));
        // 3 - 1 spent + 1 refunded + 2 bonus
        assert_eq!(tokens(&room, "a"), 5);
        assert_eq!(
            (tokens(&room, "b"), tokens(&room, "c"), tokens(&room, "d")),
            (2, 2, 2)
        );
        assert!(matches!(
            room.tally_votes(200),
            Err(EngineError::NoOpenElection)
        ));
    }

    #[test]
    fn tied_election_refunds_everyone() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b", "c", "d"]);
        vote(&mut room, "a", "a", 1);
        vote(&mut room, "b", "a", 1);
        vote(&mut room, "c", "b", 1);
        vote(&mut room, "d", "b", 1);
        // the next accepted action past the deadline closes the election
        let out = room.submit(&act("a", ActionKind::speak("x"), 200)).unwrap();
        match &out.events[0] {
            RoomEvent::ElectionResult { winner, tallies } => {
                assert_eq!(winner, &None);
                assert_eq!(tallies.values().sum::<u32>(), 4);
            }
            e => panic!("unexpected {e:?}"),
        }
        for m in ["a", "b", "c", "d"] {
            assert_eq!(tokens(&room, m), 3);
        }
        assert_eq!(room.state().votes.admin, None);
    }

    #[test]
    fn winner_helper() {
        let t = |v: &[(&str, u32)]| v.iter().map(|(m, n)| (id(m), *n)).collect();
        assert_eq!(election_winner(&t(&[("a", 3), ("b", 1)])), Some(id("a")));
        assert_eq!(election_winner(&t(&[("a", 2), ("b", 2)])), None);
        assert_eq!(election_winner(&BTreeMap::new()), None);
    }

    #[test]
    fn out_of_tokens() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b"]);
        vote(&mut room, "a", "b", 1);
        room.tally_votes(101).unwrap();
        vote(&mut room, "a", "b", 102);
        room.tally_votes(202).unwrap();
        vote(&mut room, "a", "b", 203);
        room.tally_votes(303).unwrap();
        assert_eq!(tokens(&room, "a"), 0);
        assert_eq!(
            vote(&mut room, "a", "b", 304).reason,
            Reason::BudgetExhausted
        );
    }

    #[test]
    fn tasks_close_by_vote_of_a_non_issuer() {
        let mut room = room_with(MatrixKind::NoOp, &["a", "b"]);
        let issue = ActionKind::IssueTask {
            description: "write the summary".into(),
        };
        let out = room.submit(&act("a", issue, 1)).unwrap();
        let task = out.task_id.unwrap();
        assert_eq!(budget(&room, "a"), 3.0);
        let close = ActionKind::Vote {
            ballot: Ballot::CloseTask(task),
        };
        assert_eq!(
            room.submit(&act("a", close.clone(), 2)).unwrap().reason,
            Reason::InvalidTarget
        );
        let out = room.submit(&act("b", close.clone(), 3)).unwrap();
        assert!(out
            .events
            .contains(&RoomEvent::TaskCompleted { task_id: task }));
        assert_eq!(room.state().tasks[&task].status, TaskStatus::Completed);
        assert_eq!(tokens(&room, "b"), 3);
        assert_eq!(
            room.submit(&act("b", close, 4)).unwrap().reason,
            Reason::InvalidTarget
        );
    }

    #[test]
    fn rule_mute_suspends_refill() {
        let mut room = room_with(MatrixKind::Rule(RuleConfig::default()), &["a", "b"]);
        let out = room
            .submit(&act("a", ActionKind::speak("you idiot"), 1))
            .unwrap();
        assert_eq!(out.decision.unwrap().mute_for, Some(100));
        assert_eq!(budget(&room, "a"), 0.0);
        room.submit(&act("b", ActionKind::speak("ok"), 50)).unwrap();
        assert_eq!(budget(&room, "a"), 0.0);
        // mute ends at 101, then 10 ticks refill 5
        room.submit(&act("b", ActionKind::speak("ok"), 111))
            .unwrap();
        assert_eq!(budget(&room, "a"), 5.0);
    }

    #[test]
    fn features_use_the_window_before_the_action() {
        let mut room = room_with(
            MatrixKind::Heuristic(HeuristicConfig::default()),
            &["a", "b"],
        );
        room.submit(&act("a", ActionKind::speak("great"), 1))
            .unwrap();
        let first = room.state().history.back().unwrap().clone();
        assert_eq!(first.atmosphere(), &[0.0; 10]);
        room.submit(&act("b", ActionKind::speak("awful"), 2))
            .unwrap();
        let second = room.state().history.back().unwrap().clone();
        assert_eq!(second.atmosphere()[9], 1.0);
        let seq = room.last_sequence(16).unwrap();
        assert_eq!(seq.len(), 16);
        assert_eq!(seq[14], first);
        assert_eq!(seq[15], second);
    }

    #[test]
    fn learned_without_weights_is_refused() {
        let err = Room::new(
            "r",
            "",
            EngineConfig::default(),
            MatrixKind::Learned(None),
            Arc::new(LexiconScorer::default()),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            EngineError::Matrix(MatrixError::WeightsMissing)
        ));
    }

    #[test]
    fn scorer_is_substitutable() {
        let score = SentimentScore::new(0.8, 0.1, 0.5).unwrap();
        let mut room = Room::new(
            "r",
            "",
            EngineConfig::default(),
            MatrixKind::NoOp,
            Arc::new(ConstantScorer(score)),
        )
        .unwrap();
        room.join(id("a")).unwrap();
        room.submit(&act("a", ActionKind::speak("anything at all"), 1))
            .unwrap();
        let v = room.state().field.transcript[0].atmosphere_value;
        assert!((v - 0.35).abs() < 1e-12);
    }

    #[test]
    fn join_errors() {
        let mut room = room_with(MatrixKind::NoOp, &["a"]);
        assert!(matches!(
            room.join(id("a")),
            Err(EngineError::AlreadyMember(_))
        ));
        let mut cfg = EngineConfig::default();
        cfg.max_members = 1;
        let mut small = Room::new(
            "r",
            "",
            cfg,
            MatrixKind::NoOp,
            Arc::new(LexiconScorer::default()),
        )
        .unwrap();
        small.join(id("a")).unwrap();
        assert!(matches!(small.join(id("b")), Err(EngineError::RoomFull(1))));
    }

    #[test]
    fn replay_reproduces_hash() {
        let mut spec = RoomSpec::new("r");
        spec.matrix = MatrixSpec::Heuristic(HeuristicConfig::default());
        let mut room = Room::from_spec(&spec, None).unwrap();
        let mut log = Vec::new();
        for m in ["a", "b", "c"] {
            let e = RoomEntry::Join { member: id(m) };
            room.apply(&e).unwrap();
            log.push(e);
        }
        let texts = ["hello there", "what a mess", "nice idea", "no", "thanks"];
        for (i, text) in texts.iter().enumerate() {
            let who = ["a", "b", "c"][i % 3];
            let e = RoomEntry::Action {
                action: act(who, ActionKind::speak(*text), i as u64),
            };
            room.apply(&e).unwrap();
            log.push(e);
        }
        let again = replay(&spec, None, &log).unwrap();
        assert_eq!(again.state(), room.state());
        assert_eq!(again.state_hash(), room.state_hash());
    }
}
