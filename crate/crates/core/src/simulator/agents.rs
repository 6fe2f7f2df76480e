//! Scripted habitus: persona policies that turn an observation into at most
//! one action per tick.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ActionKind, Ballot, MemberId, MessageId, TaskId, ATMOSPHERE_SLOTS};

const POSITIVE: &str = include_str!("../../fixtures/templates/positive.txt");
const NEGATIVE: &str = include_str!("../../fixtures/templates/negative.txt");
const HOSTILE: &str = include_str!("../../fixtures/templates/hostile.txt");
const TASKS: &str = include_str!("../../fixtures/templates/tasks.txt");

/// Phrase pools. Lines starting with `#` and blank lines are skipped.
#[derive(Debug, Clone)]
pub struct Templates {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub hostile: Vec<String>,
    pub tasks: Vec<String>,
}

fn lines(src: &str) -> Vec<String> {
    src.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            positive: lines(POSITIVE),
            negative: lines(NEGATIVE),
            hostile: lines(HOSTILE),
            tasks: lines(TASKS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persona {
    Cooperative,
    Antagonist,
    Lurker,
    TaskFocused,
}

impl Persona {
    pub fn prefix(self) -> &'static str {
        match self {
            Persona::Cooperative => "coop",
            Persona::Antagonist => "antag",
            Persona::Lurker => "lurk",
            Persona::TaskFocused => "task",
        }
    }
}

/// How a persona acts. Probabilities are per tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPolicy {
    pub speak_probability: f64,
    /// Baseline tone in `[-1, 1]`.
    pub sentiment_bias: f64,
    /// How much the room's atmosphere pulls the agent's tone along.
    pub contagion: f64,
    /// Chance that a negative line is drawn from the hostile pool.
    pub hostility: f64,
    /// Multiplier on every grievance increment.
    pub temper: f64,
    /// Skip actions the current budget cannot pay for.
    pub budget_aware: bool,
    pub task_probability: f64,
    pub close_probability: f64,
    pub vote_probability: f64,
    pub withdraw_probability: f64,
}

impl AgentPolicy {
    pub fn for_persona(persona: Persona) -> Self {
        let base = Self {
            speak_probability: 0.3,
            sentiment_bias: 0.6,
            contagion: 0.5,
            hostility: 0.0,
            temper: 1.0,
            budget_aware: true,
            task_probability: 0.0,
            close_probability: 0.0,
            vote_probability: 0.01,
            withdraw_probability: 0.0,
        };
        match persona {
            Persona::Cooperative => base,
            Persona::Antagonist => Self {
                speak_probability: 0.6,
                sentiment_bias: -0.7,
                contagion: 0.2,
                hostility: 0.5,
                temper: 1.5,
                withdraw_probability: 0.02,
                ..base
            },
            Persona::Lurker => Self {
                speak_probability: 0.02,
                sentiment_bias: 0.2,
                vote_probability: 0.0,
                ..base
            },
            Persona::TaskFocused => Self {
                speak_probability: 0.25,
                sentiment_bias: 0.4,
                task_probability: 0.15,
                close_probability: 0.5,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            ("speak_probability", self.speak_probability),
            ("hostility", self.hostility),
            ("task_probability", self.task_probability),
            ("close_probability", self.close_probability),
            ("vote_probability", self.vote_probability),
            ("withdraw_probability", self.withdraw_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(-1.0..=1.0).contains(&self.sentiment_bias) {
            return Err("sentiment_bias must be in [-1, 1]".into());
        }
        if !(self.temper >= 0.0 && self.contagion.is_finite()) {
            return Err("temper must be >= 0 and contagion finite".into());
        }
        Ok(())
    }
}

/// An open task as seen by one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskView {
    pub id: TaskId,
    pub mine: bool,
    pub closed_by_me: bool,
}

/// What an agent can see before acting.
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub atmosphere: [f64; ATMOSPHERE_SLOTS],
    /// Budget after refill up to the agent's slot.
    pub budget: f64,
    pub proportion: f64,
    pub vote_tokens: u32,
    pub open_tasks: Vec<TaskView>,
    pub may_vote_admin: bool,
    pub members: &'a [MemberId],
    pub own_live_messages: &'a [MessageId],
}

impl Observation<'_> {
    pub fn atmosphere_mean(&self) -> f64 {
        self.atmosphere.iter().sum::<f64>() / ATMOSPHERE_SLOTS as f64
    }
}

/// The persona's mood, both parts in `[0, 1]`. Grievance sours the tone;
/// frustration makes the agent act without checking its budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub grievance: f64,
    pub frustration: f64,
}

impl AgentState {
    pub fn aggrieve(&mut self, amount: f64) {
        self.grievance = (self.grievance + amount).clamp(0.0, 1.0);
    }

    pub fn frustrate(&mut self, amount: f64) {
        self.frustration = (self.frustration + amount).clamp(0.0, 1.0);
    }

    pub fn decay(&mut self, factor: f64) {
        self.grievance *= factor;
        self.frustration *= factor;
    }
}

/// One tick of habitus. `grievance_weight` scales how far grievance drags
/// the tone down.
pub fn agent_step(
    policy: &AgentPolicy,
    state: &AgentState,
    obs: &Observation<'_>,
    templates: &Templates,
    grievance_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Option<ActionKind> {
    let g = state.grievance;
    let f = state.frustration;
    let reckless = f > 0.0 && rng.random::<f64>() < f;
    let affordable = |c: f64| !policy.budget_aware || reckless || obs.budget >= c;

    if policy.task_probability > 0.0 || policy.close_probability > 0.0 {
        let has_own = obs.open_tasks.iter().any(|t| t.mine);
        if !has_own && rng.random::<f64>() < policy.task_probability && affordable(2.0) {
            let description = pick(&templates.tasks, rng)?;
            return Some(ActionKind::IssueTask { description });
        }
        let closable: Vec<TaskId> = obs
            .open_tasks
            .iter()
            .filter(|t| !t.mine && !t.closed_by_me)
            .map(|t| t.id)
            .collect();
        if !closable.is_empty()
            && obs.vote_tokens >= 1
            && rng.random::<f64>() < policy.close_probability
        {
            let id = closable[rng.random_range(0..closable.len())];
            return Some(ActionKind::Vote {
                ballot: Ballot::CloseTask(id),
            });
        }
    }

    if obs.may_vote_admin
        && obs.vote_tokens >= 1
        && !obs.members.is_empty()
        && rng.random::<f64>() < policy.vote_probability
    {
        let candidate = obs.members[rng.random_range(0..obs.members.len())].clone();
        return Some(ActionKind::vote_admin(candidate));
    }

    if let Some(&last) = obs.own_live_messages.last() {
        if rng.random::<f64>() < policy.withdraw_probability && affordable(1.0) {
            return Some(ActionKind::Withdraw { message_id: last });
        }
    }

    let p_speak = (policy.speak_probability * (1.0 + g + f)).min(1.0);
    if rng.random::<f64>() >= p_speak || !affordable(1.0) {
        return None;
    }
    let tone =
        policy.sentiment_bias + policy.contagion * obs.atmosphere_mean() - grievance_weight * g;
    let p_positive = (0.5 + 0.5 * tone).clamp(0.0, 1.0);
    let pool = if rng.random::<f64>() < p_positive {
        &templates.positive
    } else if rng.random::<f64>() < (policy.hostility + g).min(1.0) {
        &templates.hostile
    } else {
        &templates.negative
    };
    Some(ActionKind::speak(pick(pool, rng)?))
}

fn pick(pool: &[String], rng: &mut ChaCha8Rng) -> Option<String> {
    if pool.is_empty() {
        return None;
    }
    Some(pool[rng.random_range(0..pool.len())].clone())
}
