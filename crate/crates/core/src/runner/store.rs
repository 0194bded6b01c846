//! Append-only observation log.
//!
//! File layout: an 8-byte magic header, then records of
//! `u32 LE length | u32 LE crc32 | JSON observation`. A torn or corrupt tail
//! (a crash mid-append) is truncated on open; anything before it is kept.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{AuditError, Result};
use crate::scoring::{Observation, ObservationKey};

pub const MAGIC: &[u8; 8] = b"EAOBS01\n";

/// Final state of one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyState {
    Ok,
    Failed,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct CompletionIndex {
    entries: BTreeMap<ObservationKey, Observation>,
}

impl CompletionIndex {
    /// Applies one log record. An ok observation is never replaced; a failed
    /// one is replaced by any later record for the same key.
    /// Returns whether the record changed the index.
    pub fn apply(&mut self, obs: Observation) -> bool {
        match self.entries.get(&obs.key) {
            Some(prev) if prev.is_ok() => false,
            Some(prev) if *prev == obs => false,
            _ => {
                self.entries.insert(obs.key.clone(), obs);
                true
            }
        }
    }

    pub fn state(&self, key: &ObservationKey) -> Option<KeyState> {
        self.entries.get(key).map(|o| if o.is_ok() { KeyState::Ok } else { KeyState::Failed })
    }

    pub fn get(&self, key: &ObservationKey) -> Option<&Observation> {
        self.entries.get(key)
    }

    pub fn is_done(&self, key: &ObservationKey) -> bool {
        self.state(key) == Some(KeyState::Ok)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ok_count(&self) -> usize {
        self.entries.values().filter(|o| o.is_ok()).count()
    }

    /// Observations in key order.
    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.entries.values()
    }
}

/// Single-writer append-only store backed by a file.
#[derive(Debug)]
pub struct ObservationStore {
    path: PathBuf,
    writer: BufWriter<File>,
    index: CompletionIndex,
    appended: u64,
}

fn encode(obs: &Observation) -> Vec<u8> {
    let json = serde_json::to_vec(obs).expect("observation serializes");
    let mut buf = Vec::with_capacity(json.len() + 8);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    buf.extend_from_slice(&json);
    buf
}

/// Decodes every intact record; returns them with the byte length of the
/// valid prefix (header included).
pub fn read_log(bytes: &[u8]) -> Result<(Vec<Observation>, u64)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(AuditError::CorruptStore { offset: 0, message: "bad magic header".into() });
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    while pos + 8 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let end = pos + 8 + len;
        if end > bytes.len() {
            break;
        }
        let body = &bytes[pos + 8..end];
        if crc32fast::hash(body) != crc {
            break;
        }
        match serde_json::from_slice::<Observation>(body) {
            Ok(o) => out.push(o),
            Err(_) => break,
        }
        pos = end;
    }
    Ok((out, pos as u64))
}

impl ObservationStore {
    /// Opens or creates the log, replaying existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| AuditError::io(&path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| AuditError::io(&path, e))?;
        let mut index = CompletionIndex::default();
        if bytes.is_empty() {
            file.write_all(MAGIC).map_err(|e| AuditError::io(&path, e))?;
        } else {
            let (records, valid) = read_log(&bytes)?;
            if valid < bytes.len() as u64 {
                tracing::warn!(path = %path.display(), dropped = bytes.len() as u64 - valid, "truncating torn store tail");
                file.set_len(valid).map_err(|e| AuditError::io(&path, e))?;
            }
            for r in records {
                index.apply(r);
            }
        }
        file.seek(SeekFrom::End(0)).map_err(|e| AuditError::io(&path, e))?;
        Ok(Self { path, writer: BufWriter::new(file), index, appended: 0 })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn index(&self) -> &CompletionIndex {
        &self.index
    }

    /// Records appended through this handle.
    pub fn appended(&self) -> u64 {
        self.appended
    }

    /// Appends unless the key is already ok. Returns whether it was written.
    pub fn append(&mut self, obs: Observation) -> Result<bool> {
        if self.index.is_done(&obs.key) {
            return Ok(false);
        }
        self.writer.write_all(&encode(&obs)).map_err(|e| AuditError::io(&self.path, e))?;
        self.index.apply(obs);
        self.appended += 1;
        Ok(true)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| AuditError::io(&self.path, e))?;
        self.writer.get_ref().sync_data().map_err(|e| AuditError::io(&self.path, e))
    }

    /// Rewrites the log with exactly one record per key, in key order.
    pub fn compact(&mut self) -> Result<()> {
        self.flush()?;
        let tmp = self.path.with_extension("compact");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(|e| AuditError::io(&tmp, e))?);
            w.write_all(MAGIC).map_err(|e| AuditError::io(&tmp, e))?;
            for o in self.index.observations() {
                w.write_all(&encode(o)).map_err(|e| AuditError::io(&tmp, e))?;
            }
            w.flush().map_err(|e| AuditError::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, &self.path).map_err(|e| AuditError::io(&self.path, e))?;
        let mut file = OpenOptions::new().append(true).open(&self.path).map_err(|e| AuditError::io(&self.path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| AuditError::io(&self.path, e))?;
        self.writer = BufWriter::new(file);
        Ok(())
    }

    /// Text snapshot: one JSON observation per line, sorted by key.
    pub fn write_snapshot(&self, out: impl Write) -> Result<()> {
        write_snapshot(&self.index, out)
    }

    pub fn snapshot_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8 json")
    }
}

pub fn write_snapshot(index: &CompletionIndex, mut out: impl Write) -> Result<()> {
    for o in index.observations() {
        serde_json::to_writer(&mut out, o).map_err(|e| AuditError::Invalid(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| AuditError::io("snapshot", e))?;
    }
    Ok(())
}

/// Rebuilds the index from a log file without opening it for writing.
pub fn replay(path: impl AsRef<Path>) -> Result<CompletionIndex> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| AuditError::io(path, e))?;
    let (records, _) = read_log(&bytes)?;
    let mut index = CompletionIndex::default();
    for r in records {
        index.apply(r);
    }
    Ok(index)
}

/// Reads observations from a log or a JSONL snapshot.
pub fn load_observations(path: impl AsRef<Path>) -> Result<Vec<Observation>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| AuditError::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        let (records, _) = read_log(&bytes)?;
        let mut index = CompletionIndex::default();
        for r in records {
            index.apply(r);
        }
        return Ok(index.observations().cloned().collect());
    }
    let text = String::from_utf8(bytes).map_err(|e| AuditError::Invalid(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| AuditError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}
