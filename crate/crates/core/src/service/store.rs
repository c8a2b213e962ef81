use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{RunMeta, ServiceError, Task};
use crate::gateway::write_atomic;

/// One directory per task and per run under a common root. Every write
/// goes through a temp file and rename.
#[derive(Clone, Debug)]
pub struct FileStore {
    root: PathBuf,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ServiceError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| ServiceError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| ServiceError::Internal(e.to_string()))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ServiceError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ServiceError> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| ServiceError::Internal(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out).map_err(|e| ServiceError::Internal(e.to_string()))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServiceError> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
    src.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        for sub in ["tasks", "runs"] {
            std::fs::create_dir_all(root.join(sub))
                .map_err(|e| ServiceError::Internal(e.to_string()))?;
        }
        Ok(FileStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn task_dir(&self, id: &str) -> Result<PathBuf, ServiceError> {
        if !valid_id(id) {
            return Err(ServiceError::UnknownTask(id.into()));
        }
        Ok(self.root.join("tasks").join(id))
    }

    pub fn run_dir(&self, id: &str) -> Result<PathBuf, ServiceError> {
        if !valid_id(id) {
            return Err(ServiceError::UnknownRun(id.into()));
        }
        Ok(self.root.join("runs").join(id))
    }

    pub fn save_task(&self, task: &Task) -> Result<(), ServiceError> {
        let dir = self.task_dir(&task.id)?;
        std::fs::create_dir_all(&dir).map_err(|e| ServiceError::Internal(e.to_string()))?;
        write_json(&dir.join("task.json"), task)
    }

    pub fn load_task(&self, id: &str) -> Result<Task, ServiceError> {
        let path = self.task_dir(id)?.join("task.json");
        if !path.exists() {
            return Err(ServiceError::UnknownTask(id.into()));
        }
        read_json(&path)
    }

    pub fn task_ids(&self) -> Result<Vec<String>, ServiceError> {
        list_dirs(&self.root.join("tasks"))
    }

    pub fn save_run(&self, meta: &RunMeta) -> Result<(), ServiceError> {
        let dir = self.run_dir(&meta.run_id)?;
        std::fs::create_dir_all(&dir).map_err(|e| ServiceError::Internal(e.to_string()))?;
        write_json(&dir.join("run.json"), meta)
    }

    pub fn load_run(&self, id: &str) -> Result<RunMeta, ServiceError> {
        let path = self.run_dir(id)?.join("run.json");
        if !path.exists() {
            return Err(ServiceError::UnknownRun(id.into()));
        }
        read_json(&path)
    }

    pub fn run_ids(&self) -> Result<Vec<String>, ServiceError> {
        list_dirs(&self.root.join("runs"))
    }
}

fn list_dirs(dir: &Path) -> Result<Vec<String>, ServiceError> {
    let mut out: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    out.sort();
    Ok(out)
}
