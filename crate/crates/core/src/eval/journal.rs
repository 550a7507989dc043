use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ImageId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TruePositive,
    FalsePositive,
    Unjudged,
}

/// One human relevance verdict. Serialized as a journal line
/// `{"query_id","image_id","verdict","judge","ts"}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub image_id: ImageId,
    pub verdict: Verdict,
    pub judge: String,
    pub ts: String,
}

impl Judgment {
    pub fn new(
        query_id: impl Into<String>,
        image_id: ImageId,
        verdict: Verdict,
        judge: impl Into<String>,
        ts: impl Into<String>,
    ) -> Self {
        Self {
            query_id: query_id.into(),
            image_id,
            verdict,
            judge: judge.into(),
            ts: ts.into(),
        }
    }
}

/// Latest verdict per `(query_id, image_id)`.
#[derive(Clone, Debug, Default)]
pub struct JudgmentSet {
    latest: HashMap<(String, ImageId), Judgment>,
}

impl JudgmentSet {
    pub fn record(&mut self, j: Judgment) {
        self.latest.insert((j.query_id.clone(), j.image_id.clone()), j);
    }

    pub fn verdict(&self, query_id: &str, image_id: &ImageId) -> Verdict {
        self.latest
            .get(&(query_id.to_owned(), image_id.clone()))
            .map(|j| j.verdict)
            .unwrap_or(Verdict::Unjudged)
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn for_query<'a>(&'a self, query_id: &'a str) -> impl Iterator<Item = &'a Judgment> + 'a {
        self.latest.values().filter(move |j| j.query_id == query_id)
    }
}

/// Append-only JSON-lines journal, replayed into a [`JudgmentSet`] on open.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    set: JudgmentSet,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Self> {
        let set = Self::replay(path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            file,
            set,
        })
    }

    /// Reads a journal without opening it for writing. A missing file is an
    /// empty journal.
    pub fn replay(path: &Path) -> Result<JudgmentSet> {
        let mut set = JudgmentSet::default();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(set),
            Err(e) => return Err(Error::io(path, e)),
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let j: Judgment = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_owned(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
            set.record(j);
        }
        Ok(set)
    }

    pub fn append(&mut self, j: Judgment) -> Result<()> {
        let mut line = serde_json::to_vec(&j)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.set.record(j);
        Ok(())
    }

    pub fn judgments(&self) -> &JudgmentSet {
        &self.set
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        {
            let mut j = Journal::open(&path).unwrap();
            j.append(Judgment::new("q", "a".into(), Verdict::TruePositive, "ann", "1")).unwrap();
            j.append(Judgment::new("q", "a".into(), Verdict::FalsePositive, "ann", "2")).unwrap();
            j.append(Judgment::new("q", "b".into(), Verdict::TruePositive, "bob", "3")).unwrap();
        }
        let set = Journal::replay(&path).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.verdict("q", &"a".into()), Verdict::FalsePositive);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    }

    #[test]
    fn line_format() {
        let j = Judgment::new("q1", "img".into(), Verdict::TruePositive, "ann", "2024-01-01T00:00:00Z");
        assert_eq!(
            serde_json::to_string(&j).unwrap(),
            r#"{"query_id":"q1","image_id":"img","verdict":"true_positive","judge":"ann","ts":"2024-01-01T00:00:00Z"}"#
        );
    }

    #[test]
    fn missing_journal_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Journal::replay(&dir.path().join("none.jsonl")).unwrap().is_empty());
    }
}
