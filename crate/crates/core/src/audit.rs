//! Process-wide counters for the user/server boundary.
//!
//! Environments live only on the user side and accumulated knowledge is only
//! read on the server side. Tests take a [`snapshot`] before and after a stage
//! and assert on the difference.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

static ENV_INSTANTIATIONS: AtomicU64 = AtomicU64::new(0);
static KNOWLEDGE_READS: AtomicU64 = AtomicU64::new(0);
static CHECKPOINT_LOADS: Mutex<Vec<PathBuf>> = Mutex::new(Vec::new());

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub env_instantiations: u64,
    pub knowledge_reads: u64,
    pub checkpoint_loads: usize,
}

pub(crate) fn record_env_instantiation() {
    ENV_INSTANTIATIONS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn record_knowledge_read() {
    KNOWLEDGE_READS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn record_checkpoint_load(path: &Path) {
    CHECKPOINT_LOADS.lock().unwrap_or_else(|e| e.into_inner()).push(path.to_path_buf());
}

pub fn snapshot() -> Snapshot {
    Snapshot {
        env_instantiations: ENV_INSTANTIATIONS.load(Ordering::Relaxed),
        knowledge_reads: KNOWLEDGE_READS.load(Ordering::Relaxed),
        checkpoint_loads: CHECKPOINT_LOADS.lock().unwrap_or_else(|e| e.into_inner()).len(),
    }
}

/// Checkpoint paths loaded since `since` was taken.
pub fn checkpoints_loaded_since(since: &Snapshot) -> Vec<PathBuf> {
    let loads = CHECKPOINT_LOADS.lock().unwrap_or_else(|e| e.into_inner());
    loads[since.checkpoint_loads.min(loads.len())..].to_vec()
}
