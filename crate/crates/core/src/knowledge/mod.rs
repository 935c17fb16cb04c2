//! Experiential knowledge: extraction prompts, parsing, and recursive
//! accumulation `e_i = [e_{i-1}; e_i']` capped at `L_max` tokens.

pub mod scripted;
pub mod templates;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit;
use crate::chat::{strip_thinking, Chat, Role, THINK_CLOSE, THINK_OPEN};
use crate::policy::{Policy, PolicyError, Vocab};
use crate::trajectory::Trajectory;
use crate::util::{mix_seed, par_map};

pub use scripted::ScriptedExtractor;

pub const ITEM_MARKER: &str = "- EXPERIENCE ITEM:";

/// Separator placed between accumulated steps.
pub const STEP_SEPARATOR: &str = "\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeFormat {
    Structured,
    Unstructured,
}

impl std::str::FromStr for KnowledgeFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structured" => Ok(KnowledgeFormat::Structured),
            "unstructured" => Ok(KnowledgeFormat::Unstructured),
            other => Err(format!("unknown knowledge format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceItem {
    pub text: String,
    pub origin_trajectory_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperientialKnowledge {
    pub knowledge_id: String,
    pub format: KnowledgeFormat,
    pub body: String,
    pub token_count: usize,
    pub accumulation_step: usize,
    pub seed: u64,
}

impl ExperientialKnowledge {
    pub fn new(format: KnowledgeFormat, body: String, step: usize, seed: u64) -> Self {
        let token_count = Vocab::standard().count_tokens(&body);
        let mut h = Sha256::new();
        h.update(body.as_bytes());
        h.update(step.to_le_bytes());
        h.update(seed.to_le_bytes());
        let knowledge_id = h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();
        ExperientialKnowledge { knowledge_id, format, body, token_count, accumulation_step: step, seed }
    }

    pub fn empty(format: KnowledgeFormat, seed: u64) -> Self {
        ExperientialKnowledge::new(format, String::new(), 0, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSet {
    pub round: usize,
    pub entries: Vec<ExperientialKnowledge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub format: KnowledgeFormat,
    pub n: usize,
    pub l_max: usize,
    pub k: usize,
    pub include_previous: bool,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            format: KnowledgeFormat::Unstructured,
            n: 15,
            l_max: 2048,
            k: 10,
            include_previous: false,
            temperature: 0.7,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("extraction output holds no `{ITEM_MARKER}` lines")]
    EmptyExtraction,
    #[error("accumulation needs {expected} trajectories, got {got}")]
    WrongTrajectoryCount { expected: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Instantiates the extraction template for one trajectory.
pub fn build_extraction_prompt(t: &Trajectory, previous: &str, format: KnowledgeFormat) -> String {
    let template = match format {
        KnowledgeFormat::Structured => templates::STRUCTURED_EXTRACTION,
        KnowledgeFormat::Unstructured => templates::UNSTRUCTURED_EXTRACTION,
    };
    templates::fill(template, &[("latest_experience", &t.transcript()), ("previous_experience", previous)])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Extracted {
    Items(Vec<String>),
    Text(String),
}

impl Extracted {
    pub fn render(&self) -> String {
        match self {
            Extracted::Items(lines) => lines.join("\n"),
            Extracted::Text(t) => t.clone(),
        }
    }
}

/// Keeps marker lines (structured) or the whole text (unstructured). Input
/// must already have thinking removed.
pub fn parse_extraction_output(raw: &str, format: KnowledgeFormat) -> Result<Extracted, KnowledgeError> {
    match format {
        KnowledgeFormat::Structured => {
            let items: Vec<String> =
                raw.lines().map(|l| l.trim_end()).filter(|l| l.starts_with(ITEM_MARKER)).map(str::to_string).collect();
            if items.is_empty() {
                Err(KnowledgeError::EmptyExtraction)
            } else {
                Ok(Extracted::Items(items))
            }
        }
        KnowledgeFormat::Unstructured => Ok(Extracted::Text(raw.trim().to_string())),
    }
}

/// Splits a structured body back into items, tagged with their origin.
pub fn items_of(body: &str, origin: &str) -> Vec<ExperienceItem> {
    body.lines()
        .filter(|l| l.starts_with(ITEM_MARKER))
        .map(|l| ExperienceItem { text: l.to_string(), origin_trajectory_id: origin.to_string() })
        .collect()
}

/// Longest head of `body` within `l_max` tokens.
pub fn truncate_to(body: &str, l_max: usize) -> String {
    let vocab = Vocab::standard();
    let mut limit = l_max;
    loop {
        let cut = vocab.truncate(body, limit);
        if vocab.count_tokens(&cut) <= l_max || limit == 0 {
            return cut;
        }
        limit -= 1;
    }
}

/// Runs the recursion and returns `e_1 … e_n`.
pub fn accumulate_steps(
    trajectories: &[Trajectory],
    extractor: &dyn Policy,
    config: &ExtractionConfig,
    seed: u64,
) -> Result<Vec<ExperientialKnowledge>, KnowledgeError> {
    if trajectories.len() != config.n {
        return Err(KnowledgeError::WrongTrajectoryCount { expected: config.n, got: trajectories.len() });
    }
    let mut body = String::new();
    let mut steps = Vec::with_capacity(trajectories.len());
    for (i, t) in trajectories.iter().enumerate() {
        let previous = if config.include_previous { body.as_str() } else { "" };
        let prompt = build_extraction_prompt(t, previous, config.format);
        let context = Chat::single_user(prompt).generation_prompt();
        let reply =
            extractor.sample_response(&context, config.temperature, config.max_tokens, mix_seed(seed, i as u64))?;
        let answer = strip_thinking(&reply.text, THINK_OPEN, THINK_CLOSE);
        match parse_extraction_output(&answer, config.format) {
            Ok(new) => {
                let new = new.render();
                if !new.is_empty() {
                    if !body.is_empty() {
                        body.push_str(STEP_SEPARATOR);
                    }
                    body.push_str(&new);
                    body = truncate_to(&body, config.l_max);
                }
            }
            Err(KnowledgeError::EmptyExtraction) => {}
            Err(e) => return Err(e),
        }
        steps.push(ExperientialKnowledge::new(config.format, body.clone(), i + 1, seed));
    }
    Ok(steps)
}

pub fn accumulate(
    trajectories: &[Trajectory],
    extractor: &dyn Policy,
    config: &ExtractionConfig,
    seed: u64,
) -> Result<ExperientialKnowledge, KnowledgeError> {
    let mut steps = accumulate_steps(trajectories, extractor, config, seed)?;
    Ok(steps.pop().unwrap_or_else(|| ExperientialKnowledge::empty(config.format, seed)))
}

/// `K` independent accumulations with seeds `0..K`, no selection.
pub fn build_knowledge_set(
    trajectories: &[Trajectory],
    extractor: &dyn Policy,
    config: &ExtractionConfig,
    round: usize,
) -> Result<KnowledgeSet, KnowledgeError> {
    let seeds: Vec<u64> = (0..config.k as u64).collect();
    let entries = par_map(&seeds, |&s| accumulate(trajectories, extractor, config, s))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(KnowledgeSet { round, entries })
}

/// The solving wrapper around one observation.
pub fn wrap_solving(experience: &str, prompt: &str) -> String {
    templates::fill(templates::SOLVING_WRAPPER, &[("experience", experience), ("prompt", prompt)])
}

/// Rewrites a rendered conversation so its first user message carries the
/// knowledge wrapper.
pub fn wrap_context(rendered_open: &str, experience: &str) -> String {
    let mut chat = Chat::parse_open(rendered_open).expect("well-formed rendered chat");
    if let Some(first) = chat.messages.iter_mut().find(|m| m.role == Role::User) {
        first.content = wrap_solving(experience, &first.content);
    }
    chat.render_open()
}

/// Pseudo-knowledge made of raw transcripts, concatenated and capped.
pub fn raw_trajectory_knowledge(trajectories: &[Trajectory], l_max: usize, seed: u64) -> ExperientialKnowledge {
    let joined = trajectories.iter().map(Trajectory::transcript).collect::<Vec<_>>().join(STEP_SEPARATOR);
    ExperientialKnowledge::new(KnowledgeFormat::Unstructured, truncate_to(&joined, l_max), trajectories.len(), seed)
}

pub fn knowledge_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("{seed}.json"))
}

pub fn write_knowledge_set(dir: &Path, set: &KnowledgeSet) -> Result<(), KnowledgeError> {
    fs::create_dir_all(dir)?;
    for e in &set.entries {
        let json = serde_json::to_vec_pretty(e).expect("knowledge serializes");
        let path = knowledge_path(dir, e.seed);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(&tmp, &path)?;
    }
    Ok(())
}

/// Reads every `{seed}.json` in `dir`, ordered by seed. Each file read is
/// recorded by the boundary audit.
pub fn read_knowledge_set(dir: &Path, round: usize) -> Result<KnowledgeSet, KnowledgeError> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let seed = p.file_stem()?.to_str()?.parse().ok()?;
            (p.extension()? == "json").then_some((seed, p))
        })
        .collect();
    files.sort();
    let mut entries = Vec::with_capacity(files.len());
    for (_, path) in files {
        audit::record_knowledge_read();
        let bytes = fs::read(&path)?;
        let e = serde_json::from_slice(&bytes)
            .map_err(|err| KnowledgeError::File { path: path.clone(), message: err.to_string() })?;
        entries.push(e);
    }
    Ok(KnowledgeSet { round, entries })
}
