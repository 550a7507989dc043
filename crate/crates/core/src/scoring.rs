//! Records, queries and the scoring rules: class-gated cosine per object,
//! max over the objects of an image, then a deterministic sort.
//!
//! A class mismatch is never given a numeric score. Such objects are simply
//! excluded, and an image with no surviving object is excluded as well.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{cosine_similarity, ClassLabel, EmbeddingVector};
use crate::error::{Error, Result};
use crate::preprocess::BoundingBox;

/// Opaque image identifier. Ordered bytewise; ties in ranking resolve on it.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(Arc<str>);

impl ImageId {
    pub fn new(id: impl AsRef<str>) -> Self {
        Self(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&*self.0, f)
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// SHA-256 of an image's encoded bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 64 || !s.is_ascii() {
            return Err(Error::InvalidInput(format!("bad content hash `{s}`")));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::InvalidInput(format!("bad content hash `{s}`")))?;
        }
        Ok(Self(out))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &self.to_hex()[..12])
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// A search request: a class from the class set plus free text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub class: ClassLabel,
    pub text: String,
}

impl Query {
    pub fn new(class: ClassLabel, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("query text is empty".into()));
        }
        Ok(Self { class, text })
    }
}

/// One detected object of an image, as stored in the index.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub image_id: ImageId,
    pub object_index: u32,
    pub class: ClassLabel,
    pub bbox: BoundingBox,
    pub confidence: Option<f32>,
    pub embedding: EmbeddingVector,
}

impl ObjectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.bbox.width == 0 || self.bbox.height == 0 {
            return Err(Error::InvalidInput(format!(
                "object {}/{} has an empty bounding box",
                self.image_id, self.object_index
            )));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidInput(format!(
                    "object {}/{} has confidence {c} outside [0, 1]",
                    self.image_id, self.object_index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub source_uri: String,
    pub content_hash: ContentHash,
    pub object_count: u32,
    pub full_image_embedding: Option<EmbeddingVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredObject {
    pub image_id: ImageId,
    pub object_index: u32,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub image_id: ImageId,
    pub score: f32,
    /// Absent for full-image ranking.
    pub best_object_index: Option<u32>,
}

/// Total order for ranked output: score descending, then image id, then
/// object index ascending.
pub fn result_order(a: &RankedResult, b: &RankedResult) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.best_object_index.cmp(&b.best_object_index))
}

/// Same order for per-object hits.
pub fn object_order(a: &ScoredObject, b: &ScoredObject) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.object_index.cmp(&b.object_index))
}

/// Scores one object against a query. `None` stands for the excluded case
/// (class mismatch).
pub fn score_object(
    query_embedding: &EmbeddingVector,
    query_class: &ClassLabel,
    obj: &ObjectRecord,
) -> Result<Option<ScoredObject>> {
    let score = cosine_similarity(&obj.embedding, query_embedding)?;
    if &obj.class != query_class {
        return Ok(None);
    }
    Ok(Some(ScoredObject {
        image_id: obj.image_id.clone(),
        object_index: obj.object_index,
        score,
    }))
}

/// Reduces the scored objects of one image to its best object.
pub fn aggregate_image(scored: &[ScoredObject]) -> Result<Option<RankedResult>> {
    let Some(first) = scored.first() else {
        return Ok(None);
    };
    let mut best = first;
    for s in &scored[1..] {
        if s.image_id != first.image_id {
            return Err(Error::Invariant(format!(
                "aggregate_image got objects from `{}` and `{}`",
                first.image_id, s.image_id
            )));
        }
        if object_order(s, best) == Ordering::Less {
            best = s;
        }
    }
    Ok(Some(RankedResult {
        image_id: best.image_id.clone(),
        score: best.score,
        best_object_index: Some(best.object_index),
    }))
}

/// Keeps the best `k` results in total order.
pub fn rank(mut results: Vec<RankedResult>, k: usize) -> Vec<RankedResult> {
    top_k_by(&mut results, k, result_order);
    results
}

/// Sorts the best `k` items to the front and truncates. Partial selection
/// keeps this linear in the input when `k` is small.
pub(crate) fn top_k_by<T>(items: &mut Vec<T>, k: usize, cmp: impl Fn(&T, &T) -> Ordering) {
    if k == 0 {
        items.clear();
        return;
    }
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, &cmp);
        items.truncate(k);
    }
    items.sort_unstable_by(cmp);
}
