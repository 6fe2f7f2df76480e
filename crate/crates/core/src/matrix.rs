//! Feature assembly and the pluggable resource allocators.
//!
//! A feature vector is laid out as
//! `[action (1024) | resource count (1) | resource proportion (1) | atmosphere (10)]`.
//! Every allocator maps one action's features to a new budget for the actor,
//! clamped to `[0, budget_cap]`.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Action, ActionKind, MemberId, ResourceStructure, ATMOSPHERE_SLOTS};
use crate::ttransformer::{load_weights, ModelError, ModelWeights};
use crate::vectorizer::{tokenize, EMBEDDING_DIM};

pub const RESOURCE_COUNT_INDEX: usize = EMBEDDING_DIM;
pub const RESOURCE_PROPORTION_INDEX: usize = EMBEDDING_DIM + 1;
pub const ATMOSPHERE_OFFSET: usize = EMBEDDING_DIM + 2;
pub const FEATURE_DIM: usize = EMBEDDING_DIM + 2 + ATMOSPHERE_SLOTS;

/// Default number of feature vectors the learned allocator sees.
pub const DEFAULT_HISTORY: usize = 16;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("dimension mismatch: {what} has {got} values, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("learned allocator has no weights loaded")]
    WeightsMissing,
    #[error("learned allocator expects {expected}-dim features, weights take {got}")]
    IncompatibleWeights { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn zeros() -> Self {
        Self(vec![0.0; FEATURE_DIM])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self, MatrixError> {
        if values.len() != FEATURE_DIM {
            return Err(MatrixError::DimensionMismatch {
                what: "feature vector",
                got: values.len(),
                expected: FEATURE_DIM,
            });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn action(&self) -> &[f64] {
        &self.0[..EMBEDDING_DIM]
    }

    pub fn resource_structure(&self) -> ResourceStructure {
        ResourceStructure {
            count: self.0[RESOURCE_COUNT_INDEX],
            proportion: self.0[RESOURCE_PROPORTION_INDEX],
        }
    }

    pub fn atmosphere(&self) -> &[f64] {
        &self.0[ATMOSPHERE_OFFSET..]
    }

    pub fn atmosphere_mean(&self) -> f64 {
        self.atmosphere().iter().sum::<f64>() / ATMOSPHERE_SLOTS as f64
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn assemble_features(
    action: &[f64],
    rs: &ResourceStructure,
    atmosphere: &[f64],
) -> Result<FeatureVector, MatrixError> {
    if action.len() != EMBEDDING_DIM {
        return Err(MatrixError::DimensionMismatch {
            what: "action vector",
            got: action.len(),
            expected: EMBEDDING_DIM,
        });
    }
    if atmosphere.len() != ATMOSPHERE_SLOTS {
        return Err(MatrixError::DimensionMismatch {
            what: "atmosphere vector",
            got: atmosphere.len(),
            expected: ATMOSPHERE_SLOTS,
        });
    }
    let mut v = Vec::with_capacity(FEATURE_DIM);
    v.extend_from_slice(action);
    v.push(rs.count);
    v.push(rs.proportion);
    v.extend(atmosphere.iter().map(|a| a.clamp(-1.0, 1.0)));
    Ok(FeatureVector(v))
}

/// The allocator's verdict for one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDecision {
    pub actor: MemberId,
    pub new_budget: f64,
    /// Suspend refill for this many logical ticks; `Some(u64::MAX)` is an
    /// indefinite mute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mute_for: Option<u64>,
}

/// What an allocator knows about the room besides the features.
#[derive(Debug, Clone, Copy)]
pub struct AllocationContext<'a> {
    pub actor: &'a MemberId,
    pub budget_cap: f64,
    pub tribe_size: usize,
}

fn clamp_budget(value: f64, cap: f64) -> f64 {
    if value.is_finite() {
        value.clamp(0.0, cap)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub k_atm: f64,
    pub k_eq: f64,
    /// Target share of the room's budget; `None` means `1 / |tribe|`.
    #[serde(default)]
    pub target_share: Option<f64>,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            k_atm: 1.0,
            k_eq: 2.0,
            target_share: None,
        }
    }
}

/// `clamp(count + k_atm·atm_mean + k_eq·(s* − proportion), 0, cap)`.
pub fn heuristic_allocate(
    cfg: &HeuristicConfig,
    rs: &ResourceStructure,
    atm_mean: f64,
    ctx: &AllocationContext<'_>,
) -> MatrixDecision {
    let target = cfg
        .target_share
        .unwrap_or(1.0 / ctx.tribe_size.max(1) as f64);
    let raw = rs.count + cfg.k_atm * atm_mean + cfg.k_eq * (target - rs.proportion);
    MatrixDecision {
        actor: ctx.actor.clone(),
        new_budget: clamp_budget(raw, ctx.budget_cap),
        mute_for: None,
    }
}

/// Human-admin style moderation: a banned word mutes the speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub banned: BTreeSet<String>,
    /// Logical ticks of suspended refill; `None` mutes indefinitely.
    pub mute_duration: Option<u64>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            banned: DEFAULT_BANNED.iter().map(|s| (*s).to_owned()).collect(),
            mute_duration: Some(100),
        }
    }
}

pub const DEFAULT_BANNED: &[&str] = &[
    "idiot", "stupid", "shut", "shutup", "moron", "loser", "losers", "crap", "damn", "hell",
    "sucks", "trash", "garbage", "jerk", "pathetic", "dumb", "spam", "troll",
];

pub fn rule_allocate(
    cfg: &RuleConfig,
    action: &Action,
    rs: &ResourceStructure,
    ctx: &AllocationContext<'_>,
) -> MatrixDecision {
    let violates = match &action.kind {
        ActionKind::Speak { text } => tokenize(text).iter().any(|t| cfg.banned.contains(t)),
        _ => false,
    };
    if violates {
        MatrixDecision {
            actor: ctx.actor.clone(),
            new_budget: 0.0,
            mute_for: Some(cfg.mute_duration.unwrap_or(u64::MAX)),
        }
    } else {
        MatrixDecision {
            actor: ctx.actor.clone(),
            new_budget: clamp_budget(rs.count, ctx.budget_cap),
            mute_for: None,
        }
    }
}

/// The active allocator of a room.
#[derive(Debug, Clone)]
pub enum MatrixKind {
    NoOp,
    Rule(RuleConfig),
    Heuristic(HeuristicConfig),
    Learned(Option<Arc<ModelWeights>>),
}

impl MatrixKind {
    /// Checks that the allocator can run before a room depends on it.
    pub fn validate(&self) -> Result<(), MatrixError> {
        if let MatrixKind::Learned(weights) = self {
            let w = weights.as_ref().ok_or(MatrixError::WeightsMissing)?;
            if w.config.input_dim != FEATURE_DIM {
                return Err(MatrixError::IncompatibleWeights {
                    expected: FEATURE_DIM,
                    got: w.config.input_dim,
                });
            }
            if !w.all_finite() {
                return Err(ModelError::NonFiniteWeights.into());
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            MatrixKind::NoOp => "noop",
            MatrixKind::Rule(_) => "rule",
            MatrixKind::Heuristic(_) => "heuristic",
            MatrixKind::Learned(_) => "learned",
        }
    }

    /// Sequence length fed to the allocator, including the current step.
    pub fn sequence_len(&self) -> usize {
        match self {
            MatrixKind::Learned(Some(w)) => w.config.seq_len,
            _ => DEFAULT_HISTORY,
        }
    }
}

/// `[history ‖ current]`, keeping the last `len` steps and zero-padding at
/// the front.
pub fn build_sequence(
    history: &[Arc<FeatureVector>],
    current: Arc<FeatureVector>,
    len: usize,
) -> Vec<Arc<FeatureVector>> {
    let keep = len.saturating_sub(1).min(history.len());
    let zeros = Arc::new(FeatureVector::zeros());
    let mut seq = Vec::with_capacity(len);
    for _ in 0..len.saturating_sub(keep + 1) {
        seq.push(Arc::clone(&zeros));
    }
    seq.extend(history[history.len() - keep..].iter().cloned());
    seq.push(current);
    seq
}

pub fn allocate(
    matrix: &MatrixKind,
    features: &Arc<FeatureVector>,
    history: &[Arc<FeatureVector>],
    action: &Action,
    rs: &ResourceStructure,
    ctx: &AllocationContext<'_>,
) -> Result<MatrixDecision, MatrixError> {
    match matrix {
        MatrixKind::NoOp => Ok(MatrixDecision {
            actor: ctx.actor.clone(),
            new_budget: clamp_budget(rs.count, ctx.budget_cap),
            mute_for: None,
        }),
        MatrixKind::Rule(cfg) => Ok(rule_allocate(cfg, action, rs, ctx)),
        MatrixKind::Heuristic(cfg) => {
            Ok(heuristic_allocate(cfg, rs, features.atmosphere_mean(), ctx))
        }
        MatrixKind::Learned(weights) => {
            let weights = weights.as_ref().ok_or(MatrixError::WeightsMissing)?;
            let seq = build_sequence(history, Arc::clone(features), weights.config.seq_len);
            let steps: Vec<&[f64]> = seq.iter().map(|f| f.as_slice()).collect();
            let predicted = weights.forward(&steps)?;
            Ok(MatrixDecision {
                actor: ctx.actor.clone(),
                new_budget: clamp_budget(predicted, ctx.budget_cap),
                mute_for: None,
            })
        }
    }
}

/// Serializable allocator choice (the `matrix.kind` configuration key).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MatrixSpec {
    #[default]
    Noop,
    Rule(RuleConfig),
    Heuristic(HeuristicConfig),
    Learned {
        weights: PathBuf,
    },
}

impl MatrixSpec {
    pub fn build(&self) -> Result<MatrixKind, MatrixError> {
        let kind = match self {
            MatrixSpec::Noop => MatrixKind::NoOp,
            MatrixSpec::Rule(cfg) => MatrixKind::Rule(cfg.clone()),
            MatrixSpec::Heuristic(cfg) => MatrixKind::Heuristic(cfg.clone()),
            MatrixSpec::Learned { weights } => {
                MatrixKind::Learned(Some(Arc::new(load_weights(weights)?)))
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ttransformer::ModelConfig;
    use proptest::prelude::*;

    fn member() -> MemberId {
        MemberId::new("a").unwrap()
    }

    fn ctx(actor: &MemberId) -> AllocationContext<'_> {
        AllocationContext {
            actor,
            budget_cap: 5.0,
            tribe_size: 4,
        }
    }

    fn speak(text: &str) -> Action {
        Action::new(member(), ActionKind::speak(text), 1)
    }

    fn rs(count: f64, proportion: f64) -> ResourceStructure {
        ResourceStructure { count, proportion }
    }

    #[test]
    fn zero_inputs_assemble_to_zero_features() {
        let f = assemble_features(&[0.0; EMBEDDING_DIM], &rs(0.0, 0.0), &[0.0; 10]).unwrap();
        assert_eq!(f.as_slice().len(), 1036);
        assert_eq!(FEATURE_DIM, 1024 + 2 + 10);
        assert!(f.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sentinel_layout_audit() {
        let action: Vec<f64> = (0..EMBEDDING_DIM).map(|i| i as f64).collect();
        let atm: Vec<f64> = (0..10).map(|i| -(i as f64) / 10.0).collect();
        let f = assemble_features(&action, &rs(7777.0, 0.25), &atm).unwrap();
        let s = f.as_slice();
        for i in 0..EMBEDDING_DIM {
            assert_eq!(s[i], i as f64);
        }
        assert_eq!(s[1024], 7777.0);
        assert_eq!(s[1025], 0.25);
        for i in 0..10 {
            assert_eq!(s[1026 + i], -(i as f64) / 10.0);
        }
    }

    #[test]
    fn wrong_dimensions_are_errors() {
        assert!(matches!(
            assemble_features(&[0.0; 3], &rs(0.0, 0.0), &[0.0; 10]),
            Err(MatrixError::DimensionMismatch {
                what: "action vector",
                ..
            })
        ));
        assert!(assemble_features(&[0.0; EMBEDDING_DIM], &rs(0.0, 0.0), &[0.0; 9]).is_err());
        assert!(FeatureVector::from_vec(vec![0.0; 5]).is_err());
    }

    #[test]
    fn heuristic_examples() {
        let a = member();
        let c = ctx(&a);
        let cfg = HeuristicConfig::default();
        // proportion equals the 1/|tribe| target and neutral air: fixed point
        assert_eq!(
            heuristic_allocate(&cfg, &rs(3.0, 0.25), 0.0, &c).new_budget,
            3.0
        );
        let cfg1 = HeuristicConfig {
            k_atm: 1.0,
            k_eq: 0.0,
            target_share: None,
        };
        assert_eq!(
            heuristic_allocate(&cfg1, &rs(5.0, 0.5), -1.0, &c).new_budget,
            4.0
        );
        assert_eq!(
            heuristic_allocate(&cfg, &rs(0.0, 0.25), -1.0, &c).new_budget,
            0.0
        );
    }

    #[test]
    fn rule_examples() {
        let a = member();
        let c = ctx(&a);
        let cfg = RuleConfig::default();
        let d = rule_allocate(&cfg, &speak("what a lovely day"), &rs(5.0, 0.5), &c);
        assert_eq!((d.new_budget, d.mute_for), (5.0, None));
        let d = rule_allocate(&cfg, &speak("you IDIOT"), &rs(5.0, 0.5), &c);
        assert_eq!((d.new_budget, d.mute_for), (0.0, Some(100)));
        let d = rule_allocate(&cfg, &speak("fine"), &rs(0.0, 0.0), &c);
        assert_eq!(d.new_budget, 0.0);
        let forever = RuleConfig {
            mute_duration: None,
            ..RuleConfig::default()
        };
        assert_eq!(
            rule_allocate(&forever, &speak("stupid"), &rs(5.0, 0.5), &c).mute_for,
            Some(u64::MAX)
        );
    }

    fn dummy_features(atm: f64) -> Arc<FeatureVector> {
        Arc::new(assemble_features(&[0.01; EMBEDDING_DIM], &rs(5.0, 0.5), &[atm; 10]).unwrap())
    }

    #[test]
    fn noop_returns_current_budget() {
        let a = member();
        let d = allocate(
            &MatrixKind::NoOp,
            &dummy_features(-1.0),
            &[],
            &speak("x"),
            &rs(5.0, 0.5),
            &ctx(&a),
        )
        .unwrap();
        assert_eq!(d.new_budget, 5.0);
    }

    #[test]
    fn heuristic_dispatch_matches_direct_call() {
        let a = member();
        let cfg = HeuristicConfig::default();
        let f = dummy_features(-0.4);
        let via = allocate(
            &MatrixKind::Heuristic(cfg.clone()),
            &f,
            &[],
            &speak("x"),
            &rs(5.0, 0.5),
            &ctx(&a),
        )
        .unwrap();
        let direct = heuristic_allocate(&cfg, &rs(5.0, 0.5), f.atmosphere_mean(), &ctx(&a));
        assert_eq!(via, direct);
    }

    #[test]
    fn rule_dispatch_matches_direct_call() {
        let a = member();
        let cfg = RuleConfig::default();
        let act = speak("shut up");
        let via = allocate(
            &MatrixKind::Rule(cfg.clone()),
            &dummy_features(0.0),
            &[],
            &act,
            &rs(4.0, 0.5),
            &ctx(&a),
        )
        .unwrap();
        assert_eq!(via, rule_allocate(&cfg, &act, &rs(4.0, 0.5), &ctx(&a)));
    }

    #[test]
    fn learned_requires_weights() {
        let a = member();
        let err = allocate(
            &MatrixKind::Learned(None),
            &dummy_features(0.0),
            &[],
            &speak("x"),
            &rs(5.0, 0.5),
            &ctx(&a),
        )
        .unwrap_err();
        assert!(matches!(err, MatrixError::WeightsMissing));
        assert!(MatrixKind::Learned(None).validate().is_err());
    }

    #[test]
    fn learned_zero_network_gives_zero() {
        let a = member();
        let w = ModelWeights::zeros(ModelConfig::tiny()).unwrap();
        let m = MatrixKind::Learned(Some(Arc::new(w)));
        m.validate().unwrap();
        let d = allocate(
            &m,
            &dummy_features(0.3),
            &[],
            &speak("x"),
            &rs(5.0, 0.5),
            &ctx(&a),
        )
        .unwrap();
        assert_eq!(d.new_budget, 0.0);
    }

    #[test]
    fn learned_dispatch_matches_direct_forward() {
        let a = member();
        let w = Arc::new(ModelWeights::init(ModelConfig::tiny(), 3).unwrap());
        let hist: Vec<_> = (0..6).map(|i| dummy_features(i as f64 / 10.0)).collect();
        let cur = dummy_features(-0.2);
        let d = allocate(
            &MatrixKind::Learned(Some(Arc::clone(&w))),
            &cur,
            &hist,
            &speak("x"),
            &rs(5.0, 0.5),
            &ctx(&a),
        )
        .unwrap();
        let seq = [&hist[3], &hist[4], &hist[5], &cur];
        let steps: Vec<&[f64]> = seq.iter().map(|f| f.as_slice()).collect();
        let direct = w.forward(&steps).unwrap().clamp(0.0, 5.0);
        assert_eq!(d.new_budget, direct);
    }

    #[test]
    fn sequence_is_front_padded() {
        let cur = dummy_features(0.1);
        let seq = build_sequence(&[dummy_features(0.2)], Arc::clone(&cur), 4);
        assert_eq!(seq.len(), 4);
        assert!(seq[0].as_slice().iter().all(|v| *v == 0.0));
        assert!(seq[1].as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(seq[2].atmosphere()[0], 0.2);
        assert_eq!(seq[3], cur);
    }

    #[test]
    fn matrix_spec_from_toml() {
        let spec: MatrixSpec =
            toml::from_str("kind = \"heuristic\"\nk_atm = 1.0\nk_eq = 2.0").unwrap();
        assert_eq!(spec, MatrixSpec::Heuristic(HeuristicConfig::default()));
        let spec: MatrixSpec = toml::from_str("kind = \"noop\"").unwrap();
        assert!(matches!(spec.build().unwrap(), MatrixKind::NoOp));
    }

    proptest! {
        #[test]
        fn allocations_stay_in_range(
            count in -1e6f64..1e6,
            prop in -2.0f64..2.0,
            atm in -1.0f64..1.0,
            k_atm in 0.0f64..100.0,
            k_eq in 0.0f64..100.0,
            text in "[a-z ]{0,30}",
        ) {
            let a = member();
            let c = ctx(&a);
            let f = dummy_features(atm);
            let act = speak(&text);
            let kinds = [
                MatrixKind::NoOp,
                MatrixKind::Rule(RuleConfig::default()),
                MatrixKind::Heuristic(HeuristicConfig { k_atm, k_eq, target_share: None }),
            ];
            for m in &kinds {
                let d = allocate(m, &f, &[], &act, &rs(count, prop), &c).unwrap();
                prop_assert!(d.new_budget.is_finite());
                prop_assert!((0.0..=5.0).contains(&d.new_budget));
            }
        }
    }
}
