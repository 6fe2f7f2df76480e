//! Deterministic multi-agent harness: scripted personas chat in one room under
//! a chosen regulation regime, and the run is summarized as a report.
//!
//! Regimes map to allocators: high control → keyword rule with mutes, low
//! control → no-op, TTM → heuristic or learned matrix. Agents act round-robin,
//! each with its own ChaCha stream, so `(config, seed)` fixes every byte of
//! the output.
//!
//! The report's metrics are proxies: `mean_atmosphere` for interactive
//! quality, `mute_event_rate` (rejections per submission) for surveillance,
//! `interactive_freedom` for accepted/attempted, and the task counts for task
//! completion.

mod agents;
mod dataset;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agents::{agent_step, AgentPolicy, AgentState, Observation, Persona, TaskView, Templates};
pub use dataset::{generate_dataset, quantize, Oracle};

use crate::domain::{Action, ActionKind, MemberId, MessageId};
use crate::engine::{cost, ActionOutcome, EngineConfig, EngineError, Room, TaskStatus};
use crate::matrix::{HeuristicConfig, MatrixKind, RuleConfig};
use crate::sentiment::LexiconScorer;
use crate::ttransformer::{load_weights, ModelError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error("cannot read scenario {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    HighControl,
    LowControl,
    TtmHeuristic,
    TtmLearned,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::HighControl => "high-control",
            Regime::LowControl => "low-control",
            Regime::TtmHeuristic => "ttm-heuristic",
            Regime::TtmLearned => "ttm-learned",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Roster {
    pub cooperative: usize,
    pub antagonist: usize,
    pub lurker: usize,
    pub task_focused: usize,
}

impl Roster {
    pub fn total(&self) -> usize {
        self.cooperative + self.antagonist + self.lurker + self.task_focused
    }

    /// `(persona, index within persona)` in turn order.
    pub fn seats(&self) -> Vec<(Persona, usize)> {
        let groups = [
            (Persona::Cooperative, self.cooperative),
            (Persona::Antagonist, self.antagonist),
            (Persona::Lurker, self.lurker),
            (Persona::TaskFocused, self.task_focused),
        ];
        groups
            .into_iter()
            .flat_map(|(p, n)| (0..n).map(move |i| (p, i)))
            .collect()
    }
}

/// Per-persona policy overrides; missing personas use their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Personas {
    pub cooperative: AgentPolicy,
    pub antagonist: AgentPolicy,
    pub lurker: AgentPolicy,
    pub task_focused: AgentPolicy,
}

impl Default for Personas {
    fn default() -> Self {
        Self {
            cooperative: AgentPolicy::for_persona(Persona::Cooperative),
            antagonist: AgentPolicy::for_persona(Persona::Antagonist),
            lurker: AgentPolicy::for_persona(Persona::Lurker),
            task_focused: AgentPolicy::for_persona(Persona::TaskFocused),
        }
    }
}

impl Personas {
    pub fn get(&self, persona: Persona) -> &AgentPolicy {
        match persona {
            Persona::Cooperative => &self.cooperative,
            Persona::Antagonist => &self.antagonist,
            Persona::Lurker => &self.lurker,
            Persona::TaskFocused => &self.task_focused,
        }
    }
}

/// How agents react to regulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Behaviour {
    /// Multiplicative decay of grievance and frustration per tick.
    pub grievance_decay: f64,
    pub rejection_frustration: f64,
    /// Added to both grievance and frustration of a muted member.
    pub mute_grievance: f64,
    /// Frustration per unit of budget the matrix takes beyond the action cost.
    pub cut_frustration: f64,
    /// Grievance every other member feels when someone is muted.
    pub surveillance: f64,
    /// How strongly grievance turns an agent's tone negative.
    pub grievance_weight: f64,
}

impl Default for Behaviour {
    fn default() -> Self {
        Self {
            grievance_decay: 0.97,
            rejection_frustration: 0.15,
            mute_grievance: 0.6,
            cut_frustration: 10.0,
            surveillance: 0.05,
            grievance_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub regime: Regime,
    pub roster: Roster,
    pub ticks: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub topic: String,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub heuristic: HeuristicConfig,
    #[serde(default)]
    pub rule: RuleConfig,
    /// Weight file for `ttm-learned`, relative to the scenario file.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub personas: Personas,
    #[serde(default)]
    pub behaviour: Behaviour,
}

fn default_name() -> String {
    "scenario".into()
}

impl ScenarioConfig {
    pub fn from_toml(src: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(src)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML scenario; a relative `weights` path is resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let src = fs::read_to_string(path).map_err(|source| SimError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::from_toml(&src)?;
        if let Some(w) = &cfg.weights {
            if w.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.weights = Some(base.join(w));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        if self.roster.total() < 2 {
            return bad("at least 2 agents are required".into());
        }
        if self.ticks == 0 {
            return bad("ticks must be >= 1".into());
        }
        if self.regime == Regime::TtmLearned && self.weights.is_none() {
            return bad("regime ttm-learned needs `weights`".into());
        }
        for p in [
            Persona::Cooperative,
            Persona::Antagonist,
            Persona::Lurker,
            Persona::TaskFocused,
        ] {
            self.personas
                .get(p)
                .validate()
                .or_else(|e| bad(format!("{p:?}: {e}")))?;
        }
        let b = &self.behaviour;
        if !(0.0..=1.0).contains(&b.grievance_decay) {
            return bad("grievance_decay must be in [0, 1]".into());
        }
        self.engine.validate()?;
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_regime(&self, regime: Regime) -> Self {
        Self {
            regime,
            ..self.clone()
        }
    }

    pub fn build_matrix(&self) -> Result<MatrixKind, SimError> {
        Ok(match self.regime {
            Regime::HighControl => MatrixKind::Rule(self.rule.clone()),
            Regime::LowControl => MatrixKind::NoOp,
            Regime::TtmHeuristic => MatrixKind::Heuristic(self.heuristic.clone()),
            Regime::TtmLearned => {
                let path = self.weights.as_ref().ok_or_else(|| {
                    SimError::ConfigInvalid("regime ttm-learned needs `weights`".into())
                })?;
                MatrixKind::Learned(Some(Arc::new(load_weights(path)?)))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub regime: Regime,
    pub seed: u64,
    pub ticks: usize,
    pub agents: usize,
    pub submitted: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub messages: u64,
    pub mean_atmosphere: f64,
    pub participation_gini: f64,
    pub mute_event_rate: f64,
    pub interactive_freedom: f64,
    pub mutes: u64,
    pub matrix_budget_changes: u64,
    pub tasks_issued: u64,
    pub tasks_completed: u64,
    pub admin: Option<MemberId>,
    pub final_state_hash: String,
    /// Mean of the atmosphere window after each tick.
    pub trajectory: Vec<f64>,
}

impl SimulationReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn write_trajectory_csv(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "tick,atmosphere")?;
        for (t, a) in self.trajectory.iter().enumerate() {
            writeln!(out, "{},{}", t + 1, a)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Gini coefficient `Σᵢ Σⱼ |xᵢ − xⱼ| / (2 n Σx)`; 0 for an empty or all-zero
/// distribution.
pub fn gini(counts: &[f64]) -> f64 {
    let n = counts.len();
    let total: f64 = counts.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σᵢ Σⱼ |xᵢ − xⱼ| = 2 Σᵢ (2i − n + 1) x₍ᵢ₎ over the sorted values
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n as f64 + 1.0) * x)
        .sum();
    (weighted / (n as f64 * total)).clamp(0.0, 1.0)
}

struct Agent {
    id: MemberId,
    policy: AgentPolicy,
    state: AgentState,
    rng: ChaCha8Rng,
    live_messages: Vec<MessageId>,
    spoken: u64,
}

/// Everything the simulator hands to an observer after each submission.
pub struct StepRecord<'a> {
    pub room: &'a Room,
    pub action: &'a Action,
    pub outcome: &'a ActionOutcome,
    /// The actor's budget after refill, as the allocator saw it.
    pub observed_budget: f64,
}

/// Runs the scenario with its regime's allocator.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimulationReport, SimError> {
    let matrix = cfg.build_matrix()?;
    simulate(cfg, matrix, &mut |_| {})
}

/// Runs the scenario with an explicit allocator, calling `observe` after
/// every submitted action.
pub fn simulate(
    cfg: &ScenarioConfig,
    matrix: MatrixKind,
    observe: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<SimulationReport, SimError> {
    cfg.validate()?;
    let matrix_name = matrix.name();
    let mut room = Room::new(
        cfg.name.clone(),
        cfg.topic.clone(),
        cfg.engine,
        matrix,
        Arc::new(LexiconScorer::default()),
    )?;
    let templates = Templates::default();
    let seats = cfg.roster.seats();
    let mut agents = Vec::with_capacity(seats.len());
    for (slot, (persona, i)) in seats.iter().enumerate() {
        let id = MemberId::new(format!("{}-{i}", persona.prefix())).expect("nonempty");
        room.join(id.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(slot as u64);
        agents.push(Agent {
            id,
            policy: *cfg.personas.get(*persona),
            state: AgentState::default(),
            rng,
            live_messages: Vec::new(),
            spoken: 0,
        });
    }
    let members: Vec<MemberId> = agents.iter().map(|a| a.id.clone()).collect();
    let n = agents.len() as u64;
    let b = cfg.behaviour;

    let (mut submitted, mut accepted, mut mutes, mut changes) = (0u64, 0u64, 0u64, 0u64);
    let mut trajectory = Vec::with_capacity(cfg.ticks);
    let mut mutes_last_tick: Vec<usize> = Vec::new();

    for tick in 0..cfg.ticks as u64 {
        let mut mutes_this_tick = Vec::new();
        for (slot, agent) in agents.iter_mut().enumerate() {
            agent.state.decay(b.grievance_decay);
            let others = mutes_last_tick.iter().filter(|&&m| m != slot).count();
            agent
                .state
                .aggrieve(b.surveillance * agent.policy.temper * others as f64);

            let now = tick * n + slot as u64 + 1;
            let rs = room
                .projected_structure(&agent.id, now)
                .expect("agent is a member");
            let tokens = room
                .state()
                .ledger
                .get(&agent.id)
                .map_or(0, |r| r.vote_tokens);
            let st = room.state();
            let open_tasks = st
                .open_tasks()
                .map(|t| TaskView {
                    id: t.id,
                    mine: t.issuer == agent.id,
                    closed_by_me: t.closers.contains(&agent.id),
                })
                .collect();
            let may_vote_admin = !st
                .votes
                .open
                .as_ref()
                .is_some_and(|e| e.ballots.contains_key(&agent.id));
            let obs = Observation {
                atmosphere: *st.field.atmosphere.values(),
                budget: rs.count,
                proportion: rs.proportion,
                vote_tokens: tokens,
                open_tasks,
                may_vote_admin,
                members: &members,
                own_live_messages: &agent.live_messages,
            };
            let Some(kind) = agent_step(
                &agent.policy,
                &agent.state,
                &obs,
                &templates,
                b.grievance_weight,
                &mut agent.rng,
            ) else {
                continue;
            };

            let action = Action::new(agent.id.clone(), kind, now);
            let outcome = room.submit(&action)?;
            submitted += 1;
            observe(&StepRecord {
                room: &room,
                action: &action,
                outcome: &outcome,
                observed_budget: rs.count,
            });
            if !outcome.accepted {
                agent
                    .state
                    .frustrate(b.rejection_frustration * agent.policy.temper);
                continue;
            }
            accepted += 1;
            match &action.kind {
                ActionKind::Speak { .. } => {
                    agent.spoken += 1;
                    agent.live_messages.extend(outcome.message_id);
                }
                ActionKind::Withdraw { message_id } => {
                    agent.live_messages.retain(|m| m != message_id);
                }
                ActionKind::IssueTask { .. } | ActionKind::Vote { .. } => {}
            }
            let decision = outcome
                .decision
                .as_ref()
                .expect("accepted carries a decision");
            if decision.new_budget != rs.count {
                changes += 1;
            }
            if decision.mute_for.is_some() {
                mutes += 1;
                mutes_this_tick.push(slot);
                agent.state.aggrieve(b.mute_grievance * agent.policy.temper);
                agent
                    .state
                    .frustrate(b.mute_grievance * agent.policy.temper);
            } else {
                let expected = (rs.count - cost(&action.kind).budget).max(0.0);
                let after = room.state().ledger.get(&agent.id).map_or(0.0, |r| r.budget);
                let cut = expected - after;
                if cut > 1e-9 {
                    agent
                        .state
                        .frustrate(b.cut_frustration * cut * agent.policy.temper);
                }
            }
        }
        mutes_last_tick = mutes_this_tick;
        trajectory.push(room.state().field.atmosphere.mean());
    }

    let st = room.state();
    let live: Vec<f64> = st
        .field
        .transcript
        .iter()
        .filter(|m| !m.withdrawn)
        .map(|m| m.atmosphere_value)
        .collect();
    let mean_atmosphere = if live.is_empty() {
        0.0
    } else {
        live.iter().sum::<f64>() / live.len() as f64
    };
    let counts: Vec<f64> = agents.iter().map(|a| a.spoken as f64).collect();
    let rejected = submitted - accepted;
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    log::debug!(
        "{} [{}] seed {}: {} submitted, {} accepted",
        cfg.name,
        matrix_name,
        cfg.seed,
        submitted,
        accepted
    );
    Ok(SimulationReport {
        scenario: cfg.name.clone(),
        regime: cfg.regime,
        seed: cfg.seed,
        ticks: cfg.ticks,
        agents: agents.len(),
        submitted,
        accepted,
        rejected,
        messages: st.field.transcript.len() as u64,
        mean_atmosphere,
        participation_gini: gini(&counts),
        mute_event_rate: ratio(rejected, submitted),
        interactive_freedom: if submitted == 0 {
            1.0
        } else {
            ratio(accepted, submitted)
        },
        mutes,
        matrix_budget_changes: changes,
        tasks_issued: st.tasks.len() as u64,
        tasks_completed: st
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Completed)
            .count() as u64,
        admin: st.votes.admin.clone(),
        final_state_hash: room.state_hash(),
        trajectory,
    })
}

/// Side-by-side runs of two scenarios over the same seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub seeds: Vec<u64>,
    pub reports_a: Vec<SimulationReport>,
    pub reports_b: Vec<SimulationReport>,
}

impl Comparison {
    /// Seeds on which `metric(a) > metric(b)`.
    pub fn wins_a(&self, metric: impl Fn(&SimulationReport) -> f64) -> usize {
        self.reports_a
            .iter()
            .zip(&self.reports_b)
            .filter(|(a, b)| metric(a) > metric(b))
            .count()
    }

    /// Fixed-width table, one row per seed plus a mean row.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>6}  {:>10} {:>10}  {:>10} {:>10}  {:>8} {:>8}  {:>6} {:>6}\n",
            "seed", "atm A", "atm B", "mute A", "mute B", "gini A", "gini B", "task A", "task B"
        );
        for ((seed, a), b) in self.seeds.iter().zip(&self.reports_a).zip(&self.reports_b) {
            out += &format!(
                "{:>6}  {:>10.4} {:>10.4}  {:>10.4} {:>10.4}  {:>8.3} {:>8.3}  {:>6} {:>6}\n",
                seed,
                a.mean_atmosphere,
                b.mean_atmosphere,
                a.mute_event_rate,
                b.mute_event_rate,
                a.participation_gini,
                b.participation_gini,
                a.tasks_completed,
                b.tasks_completed,
            );
        }
        let mean = |rs: &[SimulationReport], f: fn(&SimulationReport) -> f64| {
            rs.iter().map(f).sum::<f64>() / rs.len().max(1) as f64
        };
        out += &format!(
            "{:>6}  {:>10.4} {:>10.4}  {:>10.4} {:>10.4}  {:>8.3} {:>8.3}\n",
            "mean",
            mean(&self.reports_a, |r| r.mean_atmosphere),
            mean(&self.reports_b, |r| r.mean_atmosphere),
            mean(&self.reports_a, |r| r.mute_event_rate),
            mean(&self.reports_b, |r| r.mute_event_rate),
            mean(&self.reports_a, |r| r.participation_gini),
            mean(&self.reports_b, |r| r.participation_gini),
        );
        out += &format!(
            "A = {} ({}), B = {} ({}); A higher atmosphere on {}/{} seeds, A higher mute rate on {}/{}\n",
            self.a,
            self.reports_a.first().map_or("-", |r| r.regime.name()),
            self.b,
            self.reports_b.first().map_or("-", |r| r.regime.name()),
            self.wins_a(|r| r.mean_atmosphere),
            self.seeds.len(),
            self.wins_a(|r| r.mute_event_rate),
            self.seeds.len(),
        );
        out
    }
}

/// Runs `a` and `b` on seeds `first_seed .. first_seed + k`.
pub fn compare(
    a: &ScenarioConfig,
    b: &ScenarioConfig,
    first_seed: u64,
    k: usize,
) -> Result<Comparison, SimError> {
    let seeds: Vec<u64> = (0..k as u64).map(|i| first_seed + i).collect();
    let run_all = |cfg: &ScenarioConfig| {
        seeds
            .iter()
            .map(|&s| run_scenario(&cfg.with_seed(s)))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(Comparison {
        a: a.name.clone(),
        b: b.name.clone(),
        seeds: seeds.clone(),
        reports_a: run_all(a)?,
        reports_b: run_all(b)?,
    })
}
