//! The record pool: an append-only JSONL file of trajectory records with a
//! binary offset index, plus versioned dataset manifests that name which
//! records each dataset release contains.
//!
//! Layout under the pool directory:
//!
//! ```text
//! pool/
//!   records.jsonl   one record per line, append-only
//!   index.bin       record_id -> byte offset cache, rebuildable
//!   versions/       D0.json, D1.json, ... dataset manifests
//!   writer.lock     present while a writer holds the pool
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thoughtforge_core::corpus::{FilterReport, MixSpec};
use thoughtforge_core::record::{RecordError, TrajectoryRecord};

use crate::config::TrainingMeta;

/// Magic header identifying the index cache format.
const INDEX_MAGIC: &[u8; 8] = b"TFIDX001";

/// Failures from pool storage and version bookkeeping.
#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("pool is locked by pid {pid}; remove {path} if that process is gone")]
    Locked { pid: String, path: PathBuf },
    #[error("pool data is corrupt at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("record {0} is not in the pool")]
    UnknownRecord(String),
    #[error("version id {0} is not of the form D<n>")]
    BadVersionId(String),
    #[error("version {0} does not exist")]
    UnknownVersion(String),
    #[error("version {version_id} expects parent {expected}, which does not exist")]
    LineageGap {
        version_id: String,
        expected: String,
    },
    #[error("version {version_id} drops {count} records present in its parent")]
    NotMonotone { version_id: String, count: usize },
    #[error("version {version_id}: {count} additions already belong to the parent")]
    OverlappingAdditions { version_id: String, count: usize },
    #[error("version {0} already exists")]
    VersionExists(String),
    #[error("invalid record: {0}")]
    InvalidRecord(#[from] RecordError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot parse stored data: {0}")]
    Json(#[from] serde_json::Error),
}

/// A single-writer pool of trajectory records.
///
/// Opening acquires an exclusive lock (released on drop). Appends are
/// idempotent on record id, so replaying a batch after a crash is safe. A
/// torn final line — the signature of a crash mid-append — is truncated
/// away on open and reported via [`Pool::repaired_bytes`].
pub struct Pool {
    dir: PathBuf,
    file: File,
    index: BTreeMap<String, u64>,
    data_len: u64,
    /// Bytes dropped from an incomplete final line during open.
    pub repaired_bytes: u64,
}

/// Only the id is needed when scanning lines into the index.
#[derive(Deserialize)]
struct IdOnly {
    record_id: String,
}

impl Pool {
    /// Opens (creating if necessary) the pool at `dir` and takes the writer
    /// lock.
    pub fn open(dir: &Path) -> Result<Pool, PoolError> {
        fs::create_dir_all(dir.join("versions"))?;
        let lock_path = dir.join("writer.lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(mut lock) => {
                write!(lock, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let pid = fs::read_to_string(&lock_path).unwrap_or_else(|_| "unknown".into());
                return Err(PoolError::Locked {
                    pid,
                    path: lock_path,
                });
            }
            Err(e) => return Err(e.into()),
        }

        let records_path = dir.join("records.jsonl");
        let file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&records_path)?;
        let mut pool = Pool {
            dir: dir.to_path_buf(),
            file,
            index: BTreeMap::new(),
            data_len: 0,
            repaired_bytes: 0,
        };
        if let Err(e) = pool.load_index() {
            // Make sure a failed open never leaves the lock behind.
            let _ = fs::remove_file(&lock_path);
            return Err(e);
        }
        Ok(pool)
    }

    /// Loads the index cache when it is consistent with the data file, then
    /// scans any unindexed tail, repairing a torn final line.
    fn load_index(&mut self) -> Result<(), PoolError> {
        let file_len = self.file.metadata()?.len();
        let mut scan_from = 0u64;
        if let Some((indexed_len, entries)) = self.read_index_cache()? {
            if indexed_len <= file_len {
                self.index = entries;
                scan_from = indexed_len;
            }
            // A cache claiming more data than exists is stale: fall through
            // to a full rescan.
        }
        self.data_len = scan_from;
        self.scan_records(scan_from, file_len)?;
        Ok(())
    }

    fn read_index_cache(&self) -> Result<Option<(u64, BTreeMap<String, u64>)>, PoolError> {
        let path = self.dir.join("index.bin");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        Ok(parse_index_bytes(&bytes))
    }

    /// Scans `[from, until)` of the data file line by line, extending the
    /// index. An incomplete final line is truncated away.
    fn scan_records(&mut self, from: u64, until: u64) -> Result<(), PoolError> {
        if from >= until {
            return Ok(());
        }
        self.file.seek(SeekFrom::Start(from))?;
        let mut reader = BufReader::new(&self.file);
        let mut offset = from;
        let mut line = String::new();
        loop {
            line.clear();
            let read = reader.read_line(&mut line)?;
            if read == 0 {
                break;
            }
            if !line.ends_with('\n') {
                // Torn tail from an interrupted append: drop it.
                self.repaired_bytes = until - offset;
                self.file.set_len(offset)?;
                break;
            }
            let parsed: IdOnly = serde_json::from_str(&line).map_err(|e| PoolError::Corrupt {
                offset,
                reason: e.to_string(),
            })?;
            self.index.insert(parsed.record_id, offset);
            offset += read as u64;
            self.data_len = offset;
        }
        Ok(())
    }

    /// Serializes the in-memory index in its canonical byte layout.
    pub fn index_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&self.data_len.to_le_bytes());
        out.extend_from_slice(&(self.index.len() as u64).to_le_bytes());
        for (id, offset) in &self.index {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
        }
        out
    }

    /// Writes the index cache next to the data file.
    pub fn write_index(&self) -> Result<(), PoolError> {
        let tmp = self.dir.join("index.bin.tmp");
        fs::write(&tmp, self.index_bytes())?;
        fs::rename(&tmp, self.dir.join("index.bin"))?;
        Ok(())
    }

    /// Appends one record; returns false when a record with the same id is
    /// already stored (making replays no-ops). The record must be
    /// internally consistent.
    pub fn append(&mut self, record: &TrajectoryRecord) -> Result<bool, PoolError> {
        record.check()?;
        if self.index.contains_key(&record.record_id) {
            return Ok(false);
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.index.insert(record.record_id.clone(), self.data_len);
        self.data_len += line.len() as u64;
        Ok(true)
    }

    /// Appends a batch and flushes the index cache once at the end.
    pub fn append_all(&mut self, records: &[TrajectoryRecord]) -> Result<usize, PoolError> {
        let mut added = 0;
        for record in records {
            if self.append(record)? {
                added += 1;
            }
        }
        self.write_index()?;
        Ok(added)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, record_id: &str) -> bool {
        self.index.contains_key(record_id)
    }

    /// All record ids, ascending.
    pub fn record_ids(&self) -> Vec<String> {
        self.index.keys().cloned().collect()
    }

    /// Fetches one record by id.
    pub fn get(&mut self, record_id: &str) -> Result<Option<TrajectoryRecord>, PoolError> {
        let Some(&offset) = self.index.get(record_id) else {
            return Ok(None);
        };
        self.file.seek(SeekFrom::Start(offset))?;
        let mut reader = BufReader::new(&self.file);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        Ok(Some(serde_json::from_str(&line).map_err(|e| {
            PoolError::Corrupt {
                offset,
                reason: e.to_string(),
            }
        })?))
    }

    /// Loads every record in append order.
    pub fn load_all(&mut self) -> Result<Vec<TrajectoryRecord>, PoolError> {
        self.file.seek(SeekFrom::Start(0))?;
        let mut buf = String::new();
        self.file.read_to_string(&mut buf)?;
        let mut records = Vec::with_capacity(self.index.len());
        let mut offset = 0u64;
        for line in buf.lines() {
            if offset >= self.data_len {
                break;
            }
            records.push(serde_json::from_str(line).map_err(|e| PoolError::Corrupt {
                offset,
                reason: e.to_string(),
            })?);
            offset += line.len() as u64 + 1;
        }
        Ok(records)
    }

    /// Loads the records named by `ids`, erroring on the first unknown id.
    pub fn members(&mut self, ids: &[String]) -> Result<Vec<TrajectoryRecord>, PoolError> {
        ids.iter()
            .map(|id| {
                self.get(id)?
                    .ok_or_else(|| PoolError::UnknownRecord(id.clone()))
            })
            .collect()
    }

    fn version_path(&self, version_id: &str) -> PathBuf {
        self.dir.join("versions").join(format!("{version_id}.json"))
    }

    /// Writes a dataset manifest after validating lineage and membership.
    pub fn write_version(&self, version: &DatasetVersion) -> Result<(), PoolError> {
        let iteration = parse_version_id(&version.version_id)?;
        if iteration != version.iteration {
            return Err(PoolError::BadVersionId(version.version_id.clone()));
        }
        let path = self.version_path(&version.version_id);
        if path.exists() {
            return Err(PoolError::VersionExists(version.version_id.clone()));
        }
        for id in &version.member_ids {
            if !self.contains(id) {
                return Err(PoolError::UnknownRecord(id.clone()));
            }
        }
        match iteration {
            0 => {
                if version.parent.is_some() {
                    return Err(PoolError::BadVersionId(version.version_id.clone()));
                }
            }
            t => {
                let expected = format!("D{}", t - 1);
                if version.parent.as_deref() != Some(expected.as_str()) {
                    return Err(PoolError::LineageGap {
                        version_id: version.version_id.clone(),
                        expected,
                    });
                }
                let parent = self.read_version(&expected).map_err(|_| PoolError::LineageGap {
                    version_id: version.version_id.clone(),
                    expected: expected.clone(),
                })?;
                let members: BTreeSet<&String> = version.member_ids.iter().collect();
                let dropped = parent
                    .member_ids
                    .iter()
                    .filter(|id| !members.contains(id))
                    .count();
                if dropped > 0 {
                    return Err(PoolError::NotMonotone {
                        version_id: version.version_id.clone(),
                        count: dropped,
                    });
                }
            }
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(version)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn read_version(&self, version_id: &str) -> Result<DatasetVersion, PoolError> {
        let path = self.version_path(version_id);
        let bytes = fs::read(&path)
            .map_err(|_| PoolError::UnknownVersion(version_id.to_owned()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Version ids present on disk, ascending by iteration.
    pub fn version_ids(&self) -> Result<Vec<String>, PoolError> {
        let mut iterations: Vec<u32> = Vec::new();
        for entry in fs::read_dir(self.dir.join("versions"))? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".json") {
                if let Ok(t) = parse_version_id(stem) {
                    iterations.push(t);
                }
            }
        }
        iterations.sort_unstable();
        Ok(iterations.into_iter().map(|t| format!("D{t}")).collect())
    }

    /// The newest dataset manifest, if any exist.
    pub fn latest_version(&self) -> Result<Option<DatasetVersion>, PoolError> {
        match self.version_ids()?.last() {
            Some(id) => Ok(Some(self.read_version(id)?)),
            None => Ok(None),
        }
    }

    /// Creates and writes the seed manifest `D0`.
    #[allow(clippy::too_many_arguments)]
    pub fn initial_version(
        &self,
        member_ids: Vec<String>,
        mix_spec: Option<MixSpec>,
        filter_report: Option<FilterReport>,
        training_meta: TrainingMeta,
        settings: serde_json::Value,
        created_at: Option<String>,
    ) -> Result<DatasetVersion, PoolError> {
        let version = DatasetVersion {
            version_id: "D0".to_owned(),
            iteration: 0,
            parent: None,
            member_ids: sorted_unique(member_ids),
            mix_spec,
            filter_report,
            training_meta,
            settings,
            created_at,
        };
        self.write_version(&version)?;
        Ok(version)
    }

    /// Creates and writes the next manifest from `parent` plus `additions`.
    /// Additions must be new: ids already in the parent are an error, since
    /// they signal the caller derived them incorrectly.
    pub fn derive_version(
        &self,
        parent: &DatasetVersion,
        additions: Vec<String>,
        filter_report: Option<FilterReport>,
        training_meta: TrainingMeta,
        settings: serde_json::Value,
        created_at: Option<String>,
    ) -> Result<DatasetVersion, PoolError> {
        let version_id = format!("D{}", parent.iteration + 1);
        let parent_set: BTreeSet<&String> = parent.member_ids.iter().collect();
        let overlap = additions.iter().filter(|id| parent_set.contains(id)).count();
        if overlap > 0 {
            return Err(PoolError::OverlappingAdditions {
                version_id,
                count: overlap,
            });
        }
        let mut member_ids = parent.member_ids.clone();
        member_ids.extend(additions);
        let version = DatasetVersion {
            version_id,
            iteration: parent.iteration + 1,
            parent: Some(parent.version_id.clone()),
            member_ids: sorted_unique(member_ids),
            mix_spec: parent.mix_spec.clone(),
            filter_report,
            training_meta,
            settings,
            created_at,
        };
        self.write_version(&version)?;
        Ok(version)
    }
}

impl Drop for Pool {
    fn drop(&mut self) {
        let _ = self.write_index();
        let _ = fs::remove_file(self.dir.join("writer.lock"));
    }
}

/// One released dataset: a named, ordered set of pool record ids plus the
/// bookkeeping needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetVersion {
    /// `D<n>` where `n` is the iteration number.
    pub version_id: String,
    pub iteration: u32,
    /// The previous version; `None` only for `D0`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parent: Option<String>,
    /// Sorted, unique record ids.
    pub member_ids: Vec<String>,
    /// The mixture that shaped the seed dataset, carried forward.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mix_spec: Option<MixSpec>,
    /// Filter accounting for the records admitted at this version.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub filter_report: Option<FilterReport>,
    pub training_meta: TrainingMeta,
    /// Echo of the pipeline configuration in force when this version was
    /// created.
    pub settings: serde_json::Value,
    /// RFC 3339 UTC; unset for deterministic runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub created_at: Option<String>,
}

impl DatasetVersion {
    /// Member ids as a set, for difference arithmetic.
    pub fn member_set(&self) -> BTreeSet<String> {
        self.member_ids.iter().cloned().collect()
    }
}

fn sorted_unique(mut ids: Vec<String>) -> Vec<String> {
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn parse_version_id(version_id: &str) -> Result<u32, PoolError> {
    version_id
        .strip_prefix('D')
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| PoolError::BadVersionId(version_id.to_owned()))
}

fn parse_index_bytes(bytes: &[u8]) -> Option<(u64, BTreeMap<String, u64>)> {
    let rest = bytes.strip_prefix(INDEX_MAGIC.as_slice())?;
    if rest.len() < 16 {
        return None;
    }
    let data_len = u64::from_le_bytes(rest[..8].try_into().ok()?);
    let count = u64::from_le_bytes(rest[8..16].try_into().ok()?);
    let mut rest = &rest[16..];
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        if rest.len() < 2 {
            return None;
        }
        let id_len = u16::from_le_bytes(rest[..2].try_into().ok()?) as usize;
        rest = &rest[2..];
        if rest.len() < id_len + 8 {
            return None;
        }
        let id = std::str::from_utf8(&rest[..id_len]).ok()?.to_owned();
        let offset = u64::from_le_bytes(rest[id_len..id_len + 8].try_into().ok()?);
        entries.insert(id, offset);
        rest = &rest[id_len + 8..];
    }
    if !rest.is_empty() {
        return None;
    }
    Some((data_len, entries))
}
