//! Query execution: encode the text once, then search the index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::index::{Index, SearchParams};
use crate::scoring::{Query, RankedResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SearchMode {
    /// Class-gated object scores, max per image.
    #[default]
    #[serde(rename = "object")]
    ObjectLevel,
    /// Whole-image embeddings, no class gate.
    #[serde(rename = "full")]
    FullImage,
}

impl SearchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SearchMode::ObjectLevel => "object",
            SearchMode::FullImage => "full",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SearchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" | "object_level" => Ok(SearchMode::ObjectLevel),
            "full" | "full_image" => Ok(SearchMode::FullImage),
            other => Err(Error::InvalidInput(format!(
                "unknown search mode `{other}` (expected object or full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub results: Vec<RankedResult>,
    /// Fewer than `k` images matched.
    pub exhausted: bool,
}

/// Runs `query` against `index`. The query text is encoded verbatim, exactly
/// once; no prompt template is applied.
pub fn run_query(
    index: &Index,
    encoder: &dyn Encoder,
    query: &Query,
    k: usize,
    mode: SearchMode,
) -> Result<QueryOutcome> {
    run_query_with(index, encoder, query, k, mode, &SearchParams::default())
}

pub fn run_query_with(
    index: &Index,
    encoder: &dyn Encoder,
    query: &Query,
    k: usize,
    mode: SearchMode,
    params: &SearchParams,
) -> Result<QueryOutcome> {
    if mode == SearchMode::ObjectLevel {
        // Validate before paying for an encoder call.
        index.resolve_class(query.class.as_str())?;
    }
    let dim = encoder.descriptor().dim;
    if dim != index.dim() {
        return Err(Error::Configuration(format!(
            "encoder `{}` produces {dim}-d vectors, index holds {}-d",
            encoder.descriptor().encoder_id,
            index.dim()
        )));
    }
    if k == 0 {
        return Ok(QueryOutcome {
            results: Vec::new(),
            exhausted: false,
        });
    }
    let text = encoder.encode_text(&query.text)?;
    let results = match mode {
        SearchMode::ObjectLevel => index.search_topk_images_with(&query.class, &text, k, params)?,
        SearchMode::FullImage => index.search_topk_full_images(&text, k)?,
    };
    Ok(QueryOutcome {
        exhausted: results.len() < k,
        results,
    })
}

/// Stable identifier of a `(class, text, mode)` triple, used to key
/// relevance judgments.
pub fn query_id(class: &str, text: &str, mode: SearchMode) -> String {
    let mut h = Sha256::new();
    h.update(class.as_bytes());
    h.update([0x1f]);
    h.update(text.as_bytes());
    h.update([0x1f]);
    h.update(mode.as_str().as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}
