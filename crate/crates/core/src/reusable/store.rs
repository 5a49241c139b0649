use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EntityStore;
use crate::ldp::{CliquePartition, SamplingPlan};
use crate::{Error, Result};

const ENTRIES_FILE: &str = "entities.jsonl";
const MANIFEST_FILE: &str = "manifest.json";
const PLANS_FILE: &str = "plans.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub task_id: String,
    pub version: u32,
    pub rho: f64,
    pub epsilon_sem: f64,
    pub epsilon_ldp: f64,
    pub created_at_unix: u64,
    pub entry_count: usize,
    pub content_hash: String,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PlansDocument {
    partition: Option<CliquePartition>,
    plans: Vec<SamplingPlan>,
}

/// Immutable versioned stores under `root/<task>/v<N>/`.
///
/// Committing never touches an existing version; files are created with
/// `create_new` so a concurrent writer racing for the same version fails
/// instead of overwriting.
#[derive(Clone, Debug)]
pub struct StoreRepository {
    root: PathBuf,
}

impl StoreRepository {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn task_dir(&self, task_id: &str) -> PathBuf {
        self.root.join(task_id)
    }

    pub fn version_dir(&self, task_id: &str, version: u32) -> PathBuf {
        self.task_dir(task_id).join(format!("v{version}"))
    }

    pub fn entries_path(&self, task_id: &str, version: u32) -> PathBuf {
        self.version_dir(task_id, version).join(ENTRIES_FILE)
    }

    /// Existing versions of a task, ascending.
    pub fn versions(&self, task_id: &str) -> Result<Vec<u32>> {
        let dir = self.task_dir(task_id);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut versions: Vec<u32> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_prefix('v')).and_then(|n| n.parse().ok()))
            .collect();
        versions.sort_unstable();
        Ok(versions)
    }

    pub fn latest(&self, task_id: &str) -> Result<Option<u32>> {
        Ok(self.versions(task_id)?.last().copied())
    }

    /// Writes `store` as the next version of its task and returns the
    /// version number. `config_hash` is recorded in the manifest.
    pub fn commit(&self, store: &mut EntityStore, config_hash: Option<&str>) -> Result<u32> {
        let version = self.latest(&store.task_id)?.map_or(1, |v| v + 1);
        let dir = self.version_dir(&store.task_id, version);
        fs::create_dir_all(self.task_dir(&store.task_id))?;
        fs::create_dir(&dir)?;
        store.version = version;
        let manifest = StoreManifest {
            task_id: store.task_id.clone(),
            version,
            rho: store.rho,
            epsilon_sem: store.epsilon_sem,
            epsilon_ldp: store.epsilon_ldp,
            created_at_unix: store.created_at_unix,
            entry_count: store.len(),
            content_hash: store.content_hash()?,
            config_hash: config_hash.map(str::to_string),
        };
        let plans = PlansDocument { partition: store.partition.clone(), plans: store.plans.clone() };
        write_new(&dir.join(ENTRIES_FILE), store.to_jsonl()?.as_bytes())?;
        write_new(&dir.join(PLANS_FILE), serde_json::to_string_pretty(&plans)?.as_bytes())?;
        write_new(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(version)
    }

    pub fn manifest(&self, task_id: &str, version: u32) -> Result<StoreManifest> {
        let raw = fs::read_to_string(self.version_dir(task_id, version).join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&raw)?)
    }

    /// Loads a version, or the latest one when `version` is `None`.
    pub fn load(&self, task_id: &str, version: Option<u32>) -> Result<EntityStore> {
        let version = match version {
            Some(v) => v,
            None => self
                .latest(task_id)?
                .ok_or_else(|| Error::InvalidConfig(format!("no stored versions for task {task_id:?}")))?,
        };
        let dir = self.version_dir(task_id, version);
        let manifest = self.manifest(task_id, version)?;
        let mut store = EntityStore::from_jsonl(task_id, &fs::read_to_string(dir.join(ENTRIES_FILE))?)?;
        if store.content_hash()? != manifest.content_hash {
            return Err(Error::InvalidConfig(format!("store {task_id} v{version} does not match its manifest hash")));
        }
        if let Ok(raw) = fs::read_to_string(dir.join(PLANS_FILE)) {
            let plans: PlansDocument = serde_json::from_str(&raw)?;
            store.partition = plans.partition;
            store.plans = plans.plans;
        }
        store.version = version;
        store.rho = manifest.rho;
        store.epsilon_sem = manifest.epsilon_sem;
        store.epsilon_ldp = manifest.epsilon_ldp;
        store.created_at_unix = manifest.created_at_unix;
        Ok(store)
    }
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = OpenOptions::new().write(true).create_new(true).open(path)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    Ok(())
}
