//! Append-only JSON-lines response cache keyed by a cryptographic hash of
//! (model id, rendered prompt, scoring mode). Readers share an in-memory
//! index; appends are serialized behind a mutex.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TessError};
use crate::extract::backend::{ScoringMode, TokenLogProbs};
use crate::primitives::PrimitiveKind;

/// Raw backend output for one prompt, stored whole so a warm cache never
/// triggers network traffic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CachedResponse {
    Logprob {
        scores: Vec<(PrimitiveKind, Vec<TokenLogProbs>)>,
    },
    Parse {
        text: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    response: CachedResponse,
    timestamp: u64,
}

pub fn cache_key(model_id: &str, prompt: &str, mode: ScoringMode) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    hasher.update([0]);
    hasher.update(prompt.as_bytes());
    hasher.update([0]);
    hasher.update(match mode {
        ScoringMode::Logprob => b"logprob".as_slice(),
        ScoringMode::Parse => b"parse".as_slice(),
    });
    hex::encode(hasher.finalize())
}

pub struct ExtractionCache {
    path: PathBuf,
    index: RwLock<HashMap<String, CachedResponse>>,
    append_lock: Mutex<()>,
}

impl ExtractionCache {
    /// Open (or create) a cache file and load its index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut index = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (line_no, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord = serde_json::from_str(&line).map_err(|e| {
                    TessError::Cache(format!("corrupt record on line {}: {e}", line_no + 1))
                })?;
                index.insert(record.key, record.response);
            }
        }
        Ok(Self {
            path,
            index: RwLock::new(index),
            append_lock: Mutex::new(()),
        })
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        self.index.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: &str, response: &CachedResponse) -> Result<()> {
        let record = CacheRecord {
            key: key.to_string(),
            response: response.clone(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let line = serde_json::to_string(&record)?;
        {
            let _guard = self.append_lock.lock().unwrap();
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)?;
            writeln!(file, "{line}")?;
        }
        self.index
            .write()
            .unwrap()
            .insert(key.to_string(), response.clone());
        Ok(())
    }
}
