//! Ablation tables: raw transcripts vs extracted knowledge, self vs another
//! extractor, and on- vs off-policy consolidation.

use serde::{Deserialize, Serialize};

use super::{eval_pass_rate, ood};
use crate::config::OelConfig;
use crate::distill::Mode;
use crate::knowledge::scripted::ScriptedExtractor;
use crate::knowledge::{build_knowledge_set, raw_trajectory_knowledge, KnowledgeSet};
use crate::orchestrator::{base_model, collect_role, consolidate, round_seed, OrchestratorError, Role};
use crate::policy::{Policy, PolicyHandle};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    RawVsKnowledge,
    SelfVsOther,
    OnVsOffPolicy,
}

impl std::str::FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw-vs-knowledge" | "raw_vs_knowledge" => Ok(AblationKind::RawVsKnowledge),
            "self-vs-other" | "self_vs_other" => Ok(AblationKind::SelfVsOther),
            "on-vs-off-policy" | "on_vs_off_policy" => Ok(AblationKind::OnVsOffPolicy),
            other => Err(format!("unknown ablation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.label == row)?.values[c]
    }

    /// Percentages with one decimal; missing cells print as `-`.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("| |{}|\n|---|{}\n", self.columns.join("|"), "---|".repeat(self.columns.len()));
        for r in &self.rows {
            let cells: Vec<String> =
                r.values.iter().map(|v| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x))).collect();
            out.push_str(&format!("|{}|{}|\n", r.label, cells.join("|")));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("arm,{}\n", self.columns.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.values.iter().map(|v| v.map_or(String::new(), |x| x.to_string())).collect();
            out.push_str(&format!("{},{}\n", r.label, cells.join(",")));
        }
        out
    }
}

pub const IN_CONTEXT: &str = "In-Context";
pub const CONSOLIDATE: &str = "Consolidate";
pub const PASS_RATE: &str = "Pass Rate";
pub const OOD_BEFORE: &str = "OOD Before";
pub const OOD_AFTER: &str = "OOD After";
pub const OOD_DROP: &str = "OOD Drop";

/// Everything one round of ablation shares: the starting model and the two
/// trajectory sets it collected.
struct Setup {
    base: PolicyHandle,
    extract: Vec<Trajectory>,
    consolidate: Vec<Trajectory>,
}

fn setup(config: &OelConfig) -> Result<Setup, OrchestratorError> {
    let base = PolicyHandle::toy(base_model(config)?, "base");
    let extract = collect_role(&base, config, 1, Role::Extract)?;
    let consolidate = collect_role(&base, config, 1, Role::Consolidate)?;
    Ok(Setup { base, extract, consolidate })
}

fn seed(config: &OelConfig) -> u64 {
    round_seed(config.seed, 1, Role::Distill)
}

/// In-context and consolidated pass rates for one knowledge set.
fn arm(s: &Setup, config: &OelConfig, set: &KnowledgeSet) -> Result<[Option<f64>; 2], OrchestratorError> {
    let spec = config.eval_spec();
    let ic = eval_pass_rate(&s.base, Some(&set.entries), &spec).pass_rate;
    let (trained, _) = consolidate(&s.base, &s.consolidate, set, config, Mode::OnPolicy, seed(config))?;
    let cons = eval_pass_rate(&trained, None, &spec).pass_rate;
    Ok([Some(ic), Some(cons)])
}

fn knowledge_from(s: &Setup, config: &OelConfig, extractor: &dyn Policy) -> Result<KnowledgeSet, OrchestratorError> {
    let mut ecfg = config.extraction_config();
    ecfg.n = ecfg.n.min(s.extract.len());
    Ok(build_knowledge_set(&s.extract[..ecfg.n], extractor, &ecfg, 1)?)
}

fn base_row(s: &Setup, config: &OelConfig) -> AblationRow {
    let rate = eval_pass_rate(&s.base, None, &config.eval_spec()).pass_rate;
    AblationRow { label: "w/o".into(), values: vec![Some(rate), None] }
}

fn two_columns() -> Vec<String> {
    vec![IN_CONTEXT.into(), CONSOLIDATE.into()]
}

/// One round from the base model, comparing arms that differ only in the
/// knowledge they consolidate (or, for on/off, in the training mode).
pub fn run_ablation(kind: AblationKind, config: &OelConfig) -> Result<AblationTable, OrchestratorError> {
    match kind {
        AblationKind::RawVsKnowledge => raw_vs_knowledge(config),
        AblationKind::SelfVsOther => self_vs_other(config, &ScriptedExtractor::new(), "Scripted"),
        AblationKind::OnVsOffPolicy => on_vs_off_policy(config),
    }
}

fn extracted(s: &Setup, config: &OelConfig) -> Result<KnowledgeSet, OrchestratorError> {
    crate::orchestrator::extract_knowledge(&s.extract, config, &s.base, 1)
}

pub fn raw_vs_knowledge(config: &OelConfig) -> Result<AblationTable, OrchestratorError> {
    let s = setup(config)?;
    let n = config.extraction.n.min(s.extract.len());
    let raw = KnowledgeSet {
        round: 1,
        entries: (0..config.extraction.k as u64)
            .map(|k| raw_trajectory_knowledge(&s.extract[..n], config.extraction.l_max, k))
            .collect(),
    };
    let knowledge = extracted(&s, config)?;
    Ok(AblationTable {
        kind: AblationKind::RawVsKnowledge,
        columns: two_columns(),
        rows: vec![
            base_row(&s, config),
            AblationRow { label: "Raw Trajectory".into(), values: arm(&s, config, &raw)?.to_vec() },
            AblationRow { label: "Knowledge".into(), values: arm(&s, config, &knowledge)?.to_vec() },
        ],
    })
}

/// The student extracting its own knowledge against `other` doing it.
pub fn self_vs_other(
    config: &OelConfig,
    other: &dyn Policy,
    other_label: &str,
) -> Result<AblationTable, OrchestratorError> {
    let s = setup(config)?;
    let own = knowledge_from(&s, config, &s.base.frozen_copy())?;
    let theirs = knowledge_from(&s, config, other)?;
    Ok(AblationTable {
        kind: AblationKind::SelfVsOther,
        columns: two_columns(),
        rows: vec![
            base_row(&s, config),
            AblationRow { label: "Self".into(), values: arm(&s, config, &own)?.to_vec() },
            AblationRow { label: other_label.into(), values: arm(&s, config, &theirs)?.to_vec() },
        ],
    })
}

/// Both consolidation modes on the same knowledge, data and budget, with
/// the pass rate and the OOD suite before and after.
pub fn on_vs_off_policy(config: &OelConfig) -> Result<AblationTable, OrchestratorError> {
    let s = setup(config)?;
    let knowledge = extracted(&s, config)?;
    let spec = config.eval_spec();
    let base = s.base.toy_model().expect("toy base");
    let before = ood::ood_accuracy(base);
    let mut rows = vec![AblationRow {
        label: "Base".into(),
        values: vec![Some(eval_pass_rate(&s.base, None, &spec).pass_rate), Some(before), Some(before), Some(0.0)],
    }];
    for (label, mode) in [("On-Policy", Mode::OnPolicy), ("Off-Policy", Mode::OffPolicy)] {
        let (trained, _) = consolidate(&s.base, &s.consolidate, &knowledge, config, mode, seed(config))?;
        let after = ood::ood_accuracy(trained.toy_model().expect("toy student"));
        let rate = eval_pass_rate(&trained, None, &spec).pass_rate;
        rows.push(AblationRow {
            label: label.into(),
            values: vec![Some(rate), Some(before), Some(after), Some(before - after)],
        });
    }
    Ok(AblationTable {
        kind: AblationKind::OnVsOffPolicy,
        columns: vec![PASS_RATE.into(), OOD_BEFORE.into(), OOD_AFTER.into(), OOD_DROP.into()],
        rows,
    })
}
