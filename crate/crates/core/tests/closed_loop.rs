//! Constructed dialogues, replayed as timed ASR partials against the oracle,
//! must come back as the same system micro-turns.

use std::collections::BTreeMap;

use microturn_core::constructor::{build_plan, synthetic_corpus, ConstructionConfig, ConstructionStats, SourceDialogue};
use microturn_core::orchestrator::{run_session, EngineConfig, PlaybackModel, RecordKind};
use microturn_core::policy::OraclePolicy;
use microturn_core::protocol::{ControlToken, MicroTurn, Role};
use microturn_core::rng::seeded;

/// Marker after every fifth user word.
fn with_markers(mut corpus: Vec<SourceDialogue>) -> Vec<SourceDialogue> {
    for d in &mut corpus {
        for t in d.turns.iter_mut().filter(|t| t.role == Role::User) {
            let words: Vec<&str> = t.text.split_whitespace().collect();
            t.text = words
                .chunks(5)
                .map(|c| c.join(" "))
                .collect::<Vec<_>>()
                .join(" <BC/> ");
        }
    }
    corpus
}

/// Returns how often each system control appeared across the replays.
fn replay_matches(cfg: &ConstructionConfig, corpus: &[SourceDialogue], seed: u64) -> BTreeMap<ControlToken, usize> {
    let mut seen = BTreeMap::new();
    let engine = EngineConfig {
        delta_t_ms: 600,
        playback: PlaybackModel { tokens_per_second: 1000.0, policy_latency_ms: 0 },
        ..EngineConfig::default()
    };
    for (i, d) in corpus.iter().enumerate() {
        let plan = build_plan(d, cfg, &mut seeded(seed + i as u64), &mut ConstructionStats::default()).unwrap();
        let replay = plan.replay(600);
        let mut oracle = OraclePolicy::new(replay.truth.clone()).with_system_backchannel(cfg.enable_system_backchannel);
        let tr = run_session(&replay.events, replay.horizon_ms, &mut oracle, &engine).unwrap();
        assert_eq!(tr.of_kind(RecordKind::PolicyError).count(), 0, "{}", d.id);
        let got: Vec<MicroTurn> = tr
            .of_kind(RecordKind::Policy)
            .map(|r| {
                let mut t = MicroTurn::system_with(r.control, r.tokens.clone().unwrap_or_default());
                t.t_start = 0;
                t
            })
            .collect();
        let want: Vec<MicroTurn> = replay.expected.iter().map(|t| MicroTurn { t_start: 0, ..t.clone() }).collect();
        assert_eq!(got, want, "{}", d.id);
        for c in got.iter().filter_map(|t| t.control) {
            *seen.entry(c).or_default() += 1;
        }
    }
    seen
}

#[test]
fn plain_segmentation_round_trips() {
    let cfg = ConstructionConfig { p_pause: 0.0, p_interrupt: 0.0, p_user_backchannel: 0.0, ..Default::default() };
    let seen = replay_matches(&cfg, &synthetic_corpus(40, 1..=4, 1), 1);
    assert!(seen.contains_key(&ControlToken::UserFinishSpeaking));
    assert!(!seen.contains_key(&ControlToken::UserIsInterrupting));
}

#[test]
fn augmented_dialogues_round_trip() {
    let cfg = ConstructionConfig { p_pause: 0.3, p_interrupt: 0.5, p_user_backchannel: 0.3, ..Default::default() };
    let seen = replay_matches(&cfg, &with_markers(synthetic_corpus(80, 1..=4, 2)), 2);
    use ControlToken::*;
    for c in [UserIsSpeaking, UserFinishSpeaking, UserIsInterrupting, UserBackchannel, UserIsThinking, SystemBackchannel] {
        assert!(seen.get(&c).copied().unwrap_or(0) > 0, "{c:?} never exercised: {seen:?}");
    }
}
