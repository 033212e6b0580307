//! Versioned run checkpoints: the tree, every stage's state, the search
//! RNG and budget counters, enough to resume a run exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::SearchRng;
use crate::stage::StageState;
use crate::tree::ExperimentTree;

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ideation,
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    Writeup,
    Done,
    Aborted,
}

impl RunStatus {
    pub fn for_stage(stage: u8) -> Self {
        match stage {
            1 => RunStatus::Stage1,
            2 => RunStatus::Stage2,
            3 => RunStatus::Stage3,
            _ => RunStatus::Stage4,
        }
    }

    /// Stage number for the stage statuses.
    pub fn stage(self) -> Option<u8> {
        match self {
            RunStatus::Stage1 => Some(1),
            RunStatus::Stage2 => Some(2),
            RunStatus::Stage3 => Some(3),
            RunStatus::Stage4 => Some(4),
            _ => None,
        }
    }

    /// Forward-only progression; any status may move to `Aborted`.
    pub fn can_advance_to(self, next: RunStatus) -> bool {
        next == RunStatus::Aborted || (self != RunStatus::Aborted && next >= self)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetUsage {
    /// Wall-clock seconds spent across all sessions of the run.
    pub elapsed_seconds: f64,
    /// Nodes that reached a terminal status.
    pub terminations: u64,
    pub checkpoints_written: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub run_id: String,
    pub status: RunStatus,
    /// Why the run stopped, for aborted runs.
    #[serde(default)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tree: ExperimentTree,
    pub stages: Vec<StageState>,
    pub rng_state: SearchRng,
    pub budget: BudgetUsage,
    pub progress: Progress,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("no checkpoint found under {0}")]
    MissingCheckpoint(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path} has format version {found}, expected {FORMAT_VERSION}")]
    UnsupportedVersion { path: PathBuf, found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn checkpoint_path(run_dir: &Path, index: u32) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("checkpoint-{index:04}.json"))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    /// Writes the checkpoint under the index `budget.checkpoints_written`;
    /// the file is written to a temporary name and renamed into place.
    pub fn write(&self, run_dir: &Path) -> Result<PathBuf, CheckpointError> {
        let path = checkpoint_path(run_dir, self.budget.checkpoints_written);
        let dir = path.parent().expect("checkpoint path has a parent");
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CheckpointError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                path: path.to_path_buf(),
                found,
            });
        }
        serde_json::from_value(value).map_err(|e| CheckpointError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// The checkpoint with the highest index in the run directory.
    pub fn latest(run_dir: &Path) -> Result<(PathBuf, Self), CheckpointError> {
        let dir = run_dir.join(CHECKPOINT_DIR);
        let missing = || CheckpointError::MissingCheckpoint(run_dir.to_path_buf());
        let listing = std::fs::read_dir(&dir).map_err(|_| missing())?;
        let newest = listing
            .flatten()
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("checkpoint-") && n.ends_with(".json"))
            })
            .max()
            .ok_or_else(missing)?;
        let checkpoint = Self::load(&newest)?;
        Ok((newest, checkpoint))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::StageId;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = SearchRng::seed_from_u64(9);
        let _: f64 = rng.gen();
        Checkpoint {
            format_version: FORMAT_VERSION,
            tree: ExperimentTree::new(3),
            stages: StageId::ALL.iter().map(|s| StageState::new(*s, 2)).collect(),
            rng_state: rng,
            budget: BudgetUsage::default(),
            progress: Progress {
                run_id: "r".into(),
                status: RunStatus::Stage1,
                reason: None,
            },
        }
    }

    #[test]
    fn round_trip_preserves_rng_stream() {
        let dir = tempfile::tempdir().unwrap();
        let mut cp = sample();
        cp.write(dir.path()).unwrap();
        cp.budget.checkpoints_written = 1;
        cp.write(dir.path()).unwrap();
        let (path, mut loaded) = Checkpoint::latest(dir.path()).unwrap();
        assert!(path.ends_with("checkpoint-0001.json"));
        assert_eq!(loaded, cp);
        let a: u64 = cp.rng_state.gen();
        let b: u64 = loaded.rng_state.gen();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_and_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::latest(dir.path()),
            Err(CheckpointError::MissingCheckpoint(_))
        ));
        let path = sample().write(dir.path()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn status_order() {
        assert!(RunStatus::Stage1.can_advance_to(RunStatus::Stage2));
        assert!(!RunStatus::Stage3.can_advance_to(RunStatus::Stage2));
        assert!(RunStatus::Writeup.can_advance_to(RunStatus::Aborted));
        assert!(!RunStatus::Aborted.can_advance_to(RunStatus::Done));
        assert_eq!(serde_json::to_string(&RunStatus::Stage3).unwrap(), "\"stage3\"");
    }
}
