use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{query_id, SearchMode};

/// A query as issued, so that a ranking can be recomputed from its id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub class: String,
    pub text: String,
    pub mode: SearchMode,
}

impl QueryRecord {
    pub fn new(class: impl Into<String>, text: impl Into<String>, mode: SearchMode) -> Self {
        let (class, text) = (class.into(), text.into());
        Self {
            query_id: query_id(&class, &text, mode),
            class,
            text,
            mode,
        }
    }
}

/// Append-only JSON-lines log of distinct queries, kept beside a judgment
/// journal.
#[derive(Debug)]
pub struct QueryLog {
    path: PathBuf,
    file: File,
    known: HashMap<String, QueryRecord>,
}

impl QueryLog {
    /// `<journal file name>.queries` in the journal's directory.
    pub fn beside(journal: &Path) -> PathBuf {
        let mut name = journal.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".queries");
        journal.with_file_name(name)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let known = Self::replay(path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            file,
            known,
        })
    }

    /// Reads a log without opening it for writing; a missing file is empty.
    pub fn replay(path: &Path) -> Result<HashMap<String, QueryRecord>> {
        let mut known = HashMap::new();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(known),
            Err(e) => return Err(Error::io(path, e)),
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_owned(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
            known.insert(r.query_id.clone(), r);
        }
        Ok(known)
    }

    /// Appends `record` unless its id is already logged.
    pub fn record(&mut self, record: QueryRecord) -> Result<()> {
        if self.known.contains_key(&record.query_id) {
            return Ok(());
        }
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.known.insert(record.query_id.clone(), record);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&QueryRecord> {
        self.known.get(query_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_once_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = QueryLog::beside(&dir.path().join("j.jsonl"));
        assert_eq!(path.file_name().unwrap(), "j.jsonl.queries");
        let rec = QueryRecord::new("person", "police man", SearchMode::ObjectLevel);
        {
            let mut log = QueryLog::open(&path).unwrap();
            log.record(rec.clone()).unwrap();
            log.record(rec.clone()).unwrap();
        }
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        let log = QueryLog::open(&path).unwrap();
        assert_eq!(log.get(&rec.query_id), Some(&rec));
        assert!(log.get("0000").is_none());
    }
}
