//! On-disk policy library.
//!
//! ```text
//! <root>/index.json                 {"version":1,"entries":[{hash, motor_count, family, final_reward}]}
//! <root>/entries/<hash>/airframe.json
//! <root>/entries/<hash>/box.json
//! <root>/entries/<hash>/alloc.bin   allocation network
//! <root>/entries/<hash>/policy.bin  actor, log-std, critic and both Adam states
//! <root>/entries/<hash>/manifest.json
//! ```
//!
//! Entries are written to a temporary directory and renamed into place, and the index
//! is replaced the same way, so readers never observe a half-written entry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TransferError;
use crate::airframe::{AirframeConfig, WrenchBox};
use crate::alloc::AllocationNet;
use crate::rl::PolicyPair;
use crate::sim::{Fidelity, RewardMode};

const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub hash: String,
    /// Groups a base airframe with its sampled neighbors.
    pub family: String,
    pub final_reward: f64,
    pub interactions: u64,
    pub seed: u64,
    pub fidelity: Fidelity,
    pub reward_mode: RewardMode,
    /// Deterministic evaluation reward on the entry's own airframe, if recorded,
    /// and the initial-state seed it was measured with.
    pub eval_reward: Option<f64>,
    pub eval_seed: Option<u64>,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub airframe: AirframeConfig,
    pub wrench_box: WrenchBox,
    pub alloc: AllocationNet,
    pub policy: PolicyPair,
    pub meta: EntryMeta,
}

impl LibraryEntry {
    pub fn hash(&self) -> &str {
        &self.meta.hash
    }

    pub fn motor_count(&self) -> usize {
        self.airframe.motor_count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexRecord {
    hash: String,
    motor_count: usize,
    family: String,
    final_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    version: u32,
    entries: Vec<IndexRecord>,
}

/// Entries ordered by config hash; optionally backed by a directory.
#[derive(Debug, Clone, Default)]
pub struct Library {
    root: Option<PathBuf>,
    entries: Vec<LibraryEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TransferError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Library {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the library at `root`, creating an empty one if the directory has no index.
    pub fn open(root: &Path) -> Result<Self, TransferError> {
        fs::create_dir_all(root.join("entries"))?;
        let mut lib = Self { root: Some(root.to_path_buf()), entries: Vec::new() };
        let index_path = root.join("index.json");
        if !index_path.exists() {
            lib.write_index()?;
            return Ok(lib);
        }
        let index: Index = serde_json::from_slice(&fs::read(&index_path)?)?;
        if index.version != INDEX_VERSION {
            return Err(TransferError::Corrupt(format!("index version {}", index.version)));
        }
        for rec in index.entries {
            lib.entries.push(Self::read_entry(&root.join("entries").join(&rec.hash))?);
        }
        lib.entries.sort_by(|a, b| a.meta.hash.cmp(&b.meta.hash));
        Ok(lib)
    }

    pub fn read_entry(dir: &Path) -> Result<LibraryEntry, TransferError> {
        let airframe = AirframeConfig::load(&dir.join("airframe.json"))?;
        let wrench_box: WrenchBox = serde_json::from_slice(&fs::read(dir.join("box.json"))?)?;
        let alloc = AllocationNet::from_bytes(&fs::read(dir.join("alloc.bin"))?)?;
        let policy = PolicyPair::from_bytes(&fs::read(dir.join("policy.bin"))?)?;
        let meta: EntryMeta = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if meta.hash != airframe.config_hash() || alloc.config_hash != meta.hash {
            return Err(TransferError::Corrupt(format!("hash mismatch in {}", dir.display())));
        }
        Ok(LibraryEntry { airframe, wrench_box, alloc, policy, meta })
    }

    fn write_index(&self) -> Result<(), TransferError> {
        let Some(root) = &self.root else { return Ok(()) };
        let index = Index {
            version: INDEX_VERSION,
            entries: self
                .entries
                .iter()
                .map(|e| IndexRecord {
                    hash: e.meta.hash.clone(),
                    motor_count: e.motor_count(),
                    family: e.meta.family.clone(),
                    final_reward: e.meta.final_reward,
                })
                .collect(),
        };
        write_atomic(&root.join("index.json"), &serde_json::to_vec_pretty(&index)?)
    }

    /// Adds or replaces the entry for this airframe.
    pub fn add(&mut self, entry: LibraryEntry) -> Result<(), TransferError> {
        if entry.meta.hash != entry.airframe.config_hash() {
            return Err(TransferError::Corrupt("entry hash does not match its airframe".into()));
        }
        if let Some(root) = &self.root {
            let entries = root.join("entries");
            let tmp = entries.join(format!(".tmp-{}-{}", entry.meta.hash, std::process::id()));
            if tmp.exists() {
                fs::remove_dir_all(&tmp)?;
            }
            fs::create_dir_all(&tmp)?;
            fs::write(tmp.join("airframe.json"), entry.airframe.to_json())?;
            fs::write(tmp.join("box.json"), serde_json::to_vec_pretty(&entry.wrench_box)?)?;
            fs::write(tmp.join("alloc.bin"), entry.alloc.to_bytes())?;
            fs::write(tmp.join("policy.bin"), entry.policy.to_bytes())?;
            fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&entry.meta)?)?;
            let dest = entries.join(&entry.meta.hash);
            if dest.exists() {
                fs::remove_dir_all(&dest)?;
            }
            fs::rename(&tmp, &dest)?;
        }
        match self.entries.binary_search_by(|e| e.meta.hash.cmp(&entry.meta.hash)) {
            Ok(i) => self.entries[i] = entry,
            Err(i) => self.entries.insert(i, entry),
        }
        self.write_index()
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn get(&self, hash: &str) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.meta.hash == hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }
}
