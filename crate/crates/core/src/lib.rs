//! Online experiential learning at desk scale.
//!
//! A policy plays text games, turns its own trajectories into textual
//! knowledge, and then folds that knowledge into its weights by on-policy
//! context distillation against a frozen copy of itself that sees the
//! knowledge in context. No reward is used anywhere.
//!
//! Modules follow the pipeline: [`textgames`] and [`trajectory`] on the user
//! side, [`knowledge`] and [`distill`] on the server side, [`orchestrator`]
//! to alternate them, and [`harness`] to measure the result.

pub mod audit;
pub mod chat;
pub mod config;
pub mod distill;
pub mod harness;
pub mod knowledge;
pub mod orchestrator;
pub mod policy;
pub mod textgames;
pub mod trajectory;
pub mod util;

/// Texts whose words become single tokens in the standard vocabulary.
pub(crate) fn lexicon_sources() -> Vec<&'static str> {
    use textgames::*;
    let mut out = vec![
        TASK_DESCRIPTION,
        FEEDBACK_INVALID_FORMAT,
        FEEDBACK_OFF_GRID,
        FEEDBACK_HIT_WALL,
        FEEDBACK_BOX_BLOCKED,
        FEEDBACK_HOLE,
        FEEDBACK_GOAL,
        FEEDBACK_BOX_ON_TARGET,
        "You moved. You pushed the box. Environment: Response:",
        knowledge::templates::STRUCTURED_EXTRACTION,
        knowledge::templates::UNSTRUCTURED_EXTRACTION,
        knowledge::templates::SOLVING_WRAPPER,
        "Additional Experience (Rules or Strategies):",
    ];
    out.extend(knowledge::scripted::all_statements());
    out.extend(policy::pretrain::RATIONALE_WORDS);
    for (prompt, answer) in harness::ood::OOD_SUITE {
        out.push(prompt);
        out.push(answer);
    }
    out
}
