//! Alternates user-side collection and server-side consolidation across
//! rounds, exchanging only files under the run directory.
//!
//! Layout, for round `r >= 1` (round 0 holds only the base checkpoint and
//! its evaluation):
//!
//! ```text
//! run/manifest.json
//! run/{r}/user/extract/{game}.traj.ndjson
//! run/{r}/user/consolidate/{game}.traj.ndjson
//! run/{r}/server/knowledge/{seed}.json
//! run/{r}/server/kl.csv
//! run/{r}/server/student_final.ckpt
//! run/{r}/metrics.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BackendKind, ExtractorKind, OelConfig};
use crate::distill::{train_consolidation, write_kl_csv, DistillError, KLStats, Mode, PrefixDataset};
use crate::harness::{eval_pass_rate, EvalReport};
use crate::knowledge::scripted::ScriptedExtractor;
use crate::knowledge::{build_knowledge_set, read_knowledge_set, write_knowledge_set, KnowledgeError, KnowledgeSet};
use crate::policy::{pretrain, Policy, PolicyError, PolicyHandle};
use crate::textgames::{generate_map_in_split, GameError, MapSplit};
use crate::trajectory::{collect_many, extract_prefixes, load_all, write_all, StoreError, Trajectory};
use crate::util::mix_seed;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("run directory {dir} belongs to a different config (hash {found}, expected {expected})")]
    ConfigMismatch { dir: PathBuf, found: String, expected: String },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Collection(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Harness(#[from] crate::harness::HarnessError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which stream of training maps a seed feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Trajectories for knowledge extraction.
    Extract = 1,
    /// Trajectories whose prefixes feed consolidation.
    Consolidate = 2,
    /// Consolidation sampling on the server.
    Distill = 4,
}

impl Role {
    fn dir(self) -> &'static str {
        match self {
            Role::Extract => "extract",
            Role::Consolidate => "consolidate",
            Role::Distill => "distill",
        }
    }
}

/// Seed for `(run seed, round, role)`.
pub fn round_seed(seed: u64, round: usize, role: Role) -> u64 {
    mix_seed(mix_seed(seed, round as u64), role as u64)
}

/// Paths of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn round_dir(&self, round: usize) -> PathBuf {
        self.root.join(round.to_string())
    }

    pub fn trajectories(&self, round: usize, role: Role, game: crate::textgames::Game) -> PathBuf {
        self.round_dir(round).join("user").join(role.dir()).join(format!("{game}.traj.ndjson"))
    }

    pub fn knowledge_dir(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("server").join("knowledge")
    }

    pub fn checkpoint(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("server").join("student_final.ckpt")
    }

    pub fn kl_csv(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("server").join("kl.csv")
    }

    pub fn metrics(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("metrics.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Started,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Keyed `"{round}/{stage}"`.
    pub stages: BTreeMap<String, StageStatus>,
}

impl Manifest {
    pub fn load_or_new(layout: &RunLayout, config: &OelConfig) -> Result<Self, OrchestratorError> {
        let path = layout.manifest();
        let expected = config.hash();
        if !path.exists() {
            return Ok(Manifest { config_hash: expected, stages: BTreeMap::new() });
        }
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if m.config_hash != expected {
            return Err(OrchestratorError::ConfigMismatch { dir: layout.root.clone(), found: m.config_hash, expected });
        }
        Ok(m)
    }

    pub fn is_complete(&self, round: usize, stage: &str) -> bool {
        self.stages.get(&format!("{round}/{stage}")) == Some(&StageStatus::Complete)
    }

    fn mark(
        &mut self,
        layout: &RunLayout,
        round: usize,
        stage: &str,
        status: StageStatus,
    ) -> Result<(), OrchestratorError> {
        self.stages.insert(format!("{round}/{stage}"), status);
        std::fs::create_dir_all(&layout.root)?;
        let tmp = layout.manifest().with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, layout.manifest())?;
        Ok(())
    }
}

/// Held-out evaluation of one checkpoint, written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub pass_rate: f64,
    pub per_seed: Vec<f64>,
    pub mean_response_tokens: f64,
    /// The incoming model with this round's knowledge in context.
    pub in_context_pass_rate: Option<f64>,
    pub final_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: usize,
    pub checkpoint: PathBuf,
    pub knowledge_dir: Option<PathBuf>,
    pub trajectories: Vec<PathBuf>,
    pub metrics: RoundMetrics,
}

/// The student policy stored at `path`, or the remote model.
pub fn load_student(config: &OelConfig, path: &Path) -> Result<PolicyHandle, OrchestratorError> {
    match config.backend.kind {
        BackendKind::Toy => load_toy(config, path),
        #[cfg(feature = "remote")]
        BackendKind::Remote => {
            Ok(PolicyHandle::remote(crate::policy::remote::RemoteClient::new(config.remote_config())))
        }
        #[cfg(not(feature = "remote"))]
        BackendKind::Remote => Err(PolicyError::Unsupported("the remote backend in this build").into()),
    }
}

/// A toy checkpoint tagged by its path inside the run directory, so that
/// runs in different directories write identical files.
fn load_toy(config: &OelConfig, path: &Path) -> Result<PolicyHandle, OrchestratorError> {
    let tag = path.strip_prefix(&config.run_dir).unwrap_or(path).display().to_string();
    Ok(PolicyHandle::toy(crate::policy::ToyModel::load(path, crate::policy::Vocab::standard())?, tag))
}

/// Writes the round-0 checkpoint: a copy of `init_checkpoint` or the
/// pretrained toy base.
pub fn init_base(config: &OelConfig) -> Result<PathBuf, OrchestratorError> {
    let layout = RunLayout::new(&config.run_dir);
    let out = layout.checkpoint(0);
    std::fs::create_dir_all(out.parent().expect("checkpoint has a parent"))?;
    base_model(config)?.save(&out)?;
    Ok(out)
}

/// The starting toy model: `init_checkpoint` if set, else the cached or
/// freshly pretrained base.
pub fn base_model(config: &OelConfig) -> Result<crate::policy::ToyModel, OrchestratorError> {
    Ok(match &config.init_checkpoint {
        Some(path) => crate::policy::ToyModel::load(path, crate::policy::Vocab::standard())?,
        None => pretrain::load_or_pretrain(&config.pretrain_config(), &config.toy.cache_dir)?,
    })
}

fn training_maps(
    config: &OelConfig,
    round: usize,
    role: Role,
    count: usize,
) -> Result<Vec<(crate::textgames::GridMap, u64)>, OrchestratorError> {
    let base = round_seed(config.seed, round, role);
    (0..count as u64)
        .map(|i| {
            let s = mix_seed(base, i);
            Ok((generate_map_in_split(config.game, s, MapSplit::Train)?, mix_seed(s, 0xe91_50de)))
        })
        .collect()
}

/// Trajectories of `policy` on the round's fresh training maps for `role`:
/// `n` for extraction, `steps × games_per_step` for consolidation.
pub fn collect_role(
    policy: &dyn Policy,
    config: &OelConfig,
    round: usize,
    role: Role,
) -> Result<Vec<Trajectory>, OrchestratorError> {
    let count = match role {
        Role::Extract => config.extraction.n,
        _ => config.distill_config().trajectories_needed(),
    };
    let jobs = training_maps(config, round, role, count)?;
    let (trajs, failed) = collect_many(&jobs, policy, None, &config.episode_config(), 2);
    if failed > 0 {
        return Err(OrchestratorError::Collection(format!("{failed} of {count} {} episodes failed", role.dir())));
    }
    Ok(trajs)
}

/// User side of round `round`: plays fresh training maps with the previous
/// round's checkpoint and writes both trajectory files. Reads no knowledge.
pub fn run_user_side(round: usize, config: &OelConfig) -> Result<Vec<PathBuf>, OrchestratorError> {
    let layout = RunLayout::new(&config.run_dir);
    let ckpt = layout.checkpoint(round - 1);
    if config.backend.kind == BackendKind::Toy && !ckpt.exists() {
        return Err(OrchestratorError::MissingArtifact(ckpt));
    }
    let policy = load_student(config, &ckpt)?;
    let mut out = Vec::new();
    for role in [Role::Extract, Role::Consolidate] {
        let trajs = collect_role(&policy, config, round, role)?;
        let path = layout.trajectories(round, role, config.game);
        std::fs::create_dir_all(path.parent().expect("trajectory file has a parent"))?;
        write_all(&path, &trajs)?;
        out.push(path);
    }
    Ok(out)
}

/// Stage 1 of the server side: the incoming model (or the scripted
/// extractor) turns the extraction trajectories into `K` knowledge entries.
pub fn run_extraction(
    round: usize,
    config: &OelConfig,
    student: &PolicyHandle,
) -> Result<KnowledgeSet, OrchestratorError> {
    let layout = RunLayout::new(&config.run_dir);
    let path = layout.trajectories(round, Role::Extract, config.game);
    if !path.exists() {
        return Err(OrchestratorError::MissingArtifact(path));
    }
    let trajs: Vec<Trajectory> = load_all(&path)?;
    let set = extract_knowledge(&trajs, config, student, round)?;
    write_knowledge_set(&layout.knowledge_dir(round), &set)?;
    Ok(set)
}

/// The configured extractor applied to the first `n` trajectories.
pub fn extract_knowledge(
    trajs: &[Trajectory],
    config: &OelConfig,
    student: &PolicyHandle,
    round: usize,
) -> Result<KnowledgeSet, OrchestratorError> {
    let mut ecfg = config.extraction_config();
    ecfg.n = trajs.len().min(ecfg.n);
    let trajs = &trajs[..ecfg.n];
    Ok(match config.extraction.extractor {
        ExtractorKind::Scripted => build_knowledge_set(trajs, &ScriptedExtractor::new(), &ecfg, round)?,
        ExtractorKind::SelfModel => build_knowledge_set(trajs, &student.frozen_copy(), &ecfg, round)?,
    })
}

/// Trains a copy of `student` against its own frozen copy on the prefixes
/// of `trajs`. With zero steps the copy is returned unchanged.
pub fn consolidate(
    student: &PolicyHandle,
    trajs: &[Trajectory],
    knowledge: &KnowledgeSet,
    config: &OelConfig,
    mode: Mode,
    seed: u64,
) -> Result<(PolicyHandle, Vec<KLStats>), OrchestratorError> {
    let dcfg = config.distill_config();
    if dcfg.steps == 0 {
        return Ok((student.clone(), Vec::new()));
    }
    let data = PrefixDataset::from_records(trajs.iter().flat_map(extract_prefixes).collect());
    let teacher = student.frozen_copy();
    Ok(train_consolidation(student, &teacher, &data, knowledge, &dcfg, mode, seed, |_| {})?)
}

/// Stage 2 of the server side: consolidates `knowledge` into the incoming
/// model against a frozen copy of it and writes the final checkpoint.
pub fn run_consolidation(
    round: usize,
    config: &OelConfig,
    student: &PolicyHandle,
    knowledge: &KnowledgeSet,
    mode: Mode,
) -> Result<(PathBuf, Vec<KLStats>), OrchestratorError> {
    let layout = RunLayout::new(&config.run_dir);
    let path = layout.trajectories(round, Role::Consolidate, config.game);
    if !path.exists() {
        return Err(OrchestratorError::MissingArtifact(path));
    }
    let trajs: Vec<Trajectory> = load_all(&path)?;
    let (trained, stats) =
        consolidate(student, &trajs, knowledge, config, mode, round_seed(config.seed, round, Role::Distill))?;
    let out = layout.checkpoint(round);
    std::fs::create_dir_all(out.parent().expect("checkpoint has a parent"))?;
    trained.toy_model().ok_or(PolicyError::Unsupported("saving a remote model"))?.save(&out)?;
    write_kl_csv(&layout.kl_csv(round), &stats)?;
    Ok((out, stats))
}

/// Server side of round `round`: extraction, then consolidation. Never
/// constructs an environment.
pub fn run_server_side(
    round: usize,
    config: &OelConfig,
    mode: Mode,
) -> Result<(KnowledgeSet, PathBuf), OrchestratorError> {
    let layout = RunLayout::new(&config.run_dir);
    let ckpt = layout.checkpoint(round - 1);
    if !ckpt.exists() {
        return Err(OrchestratorError::MissingArtifact(ckpt));
    }
    let student = load_toy(config, &ckpt)?;
    let knowledge = run_extraction(round, config, &student)?;
    let (out, _) = run_consolidation(round, config, &student, &knowledge, mode)?;
    Ok((knowledge, out))
}

/// Evaluates the checkpoint of `round` on held-out maps and writes
/// `metrics.json`. For `round >= 1` the incoming model is also evaluated
/// with the round's knowledge in context.
pub fn evaluate_round(round: usize, config: &OelConfig) -> Result<RoundMetrics, OrchestratorError> {
    let layout = RunLayout::new(&config.run_dir);
    let spec = config.eval_spec();
    let ckpt = layout.checkpoint(round);
    let report: EvalReport = eval_pass_rate(&load_student(config, &ckpt)?, None, &spec);
    let (in_context, final_kl) = if round == 0 {
        (None, None)
    } else {
        for role in [Role::Extract, Role::Consolidate] {
            let path = layout.trajectories(round, role, config.game);
            if path.exists() {
                crate::harness::check_heldout(&load_all::<Trajectory>(&path)?, &report.map_ids)?;
            }
        }
        let set = read_knowledge_set(&layout.knowledge_dir(round), round)?;
        let incoming = load_student(config, &layout.checkpoint(round - 1))?;
        let r = eval_pass_rate(&incoming, Some(&set.entries), &spec);
        let kl = crate::distill::read_kl_csv(&layout.kl_csv(round)).ok().and_then(|s| s.last().map(|x| x.mean_kl));
        (Some(r.pass_rate), kl)
    };
    let metrics = RoundMetrics {
        round,
        config_hash: config.hash(),
        checkpoint: ckpt,
        pass_rate: report.pass_rate,
        per_seed: report.per_seed,
        mean_response_tokens: report.mean_response_tokens,
        in_context_pass_rate: in_context,
        final_kl,
    };
    std::fs::create_dir_all(layout.round_dir(round))?;
    std::fs::write(layout.metrics(round), serde_json::to_string_pretty(&metrics)?)?;
    Ok(metrics)
}

/// Runs (or resumes) every round. Stages recorded complete in the manifest
/// are skipped; a failure leaves earlier artifacts in place.
pub fn run_loop(
    config: &OelConfig,
    mut on_round: impl FnMut(&RoundMetrics),
) -> Result<Vec<RoundState>, OrchestratorError> {
    let layout = RunLayout::new(&config.run_dir);
    let mut manifest = Manifest::load_or_new(&layout, config)?;
    let stage =
        |manifest: &mut Manifest, round: usize, name: &str, f: &mut dyn FnMut() -> Result<(), OrchestratorError>| {
            if manifest.is_complete(round, name) {
                return Ok(());
            }
            manifest.mark(&layout, round, name, StageStatus::Started)?;
            f()?;
            manifest.mark(&layout, round, name, StageStatus::Complete)
        };
    stage(&mut manifest, 0, "init", &mut || init_base(config).map(|_| ()))?;
    stage(&mut manifest, 0, "eval", &mut || evaluate_round(0, config).map(|m| on_round(&m)))?;
    let mut states = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        stage(&mut manifest, round, "user", &mut || run_user_side(round, config).map(|_| ()))?;
        stage(&mut manifest, round, "server", &mut || run_server_side(round, config, Mode::OnPolicy).map(|_| ()))?;
        stage(&mut manifest, round, "eval", &mut || evaluate_round(round, config).map(|m| on_round(&m)))?;
        let metrics: RoundMetrics = serde_json::from_str(&std::fs::read_to_string(layout.metrics(round))?)?;
        states.push(RoundState {
            round,
            checkpoint: layout.checkpoint(round),
            knowledge_dir: Some(layout.knowledge_dir(round)),
            trajectories: vec![
                layout.trajectories(round, Role::Extract, config.game),
                layout.trajectories(round, Role::Consolidate, config.game),
            ],
            metrics,
        });
    }
    Ok(states)
}

/// Pass rates of rounds `0..=rounds` read back from `metrics.json`.
pub fn pass_rate_curve(config: &OelConfig) -> Result<Vec<f64>, OrchestratorError> {
    let layout = RunLayout::new(&config.run_dir);
    (0..=config.rounds)
        .map(|r| {
            let path = layout.metrics(r);
            let text = std::fs::read_to_string(&path).map_err(|_| OrchestratorError::MissingArtifact(path))?;
            Ok(serde_json::from_str::<RoundMetrics>(&text)?.pass_rate)
        })
        .collect()
}
