//! Request and response bodies of the `/v1` API.

use serde::{Deserialize, Serialize};

use objseek_core::index::IndexStats;
use objseek_core::preprocess::BoundingBox;
use objseek_core::{ImageId, Index, RankedResult, SearchMode};

fn default_k() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub class: String,
    pub text: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub mode: SearchMode,
}

/// One ranked image. `bbox` is the box of the best-matching object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub image_id: ImageId,
    pub score: f32,
    pub best_object_index: Option<u32>,
    pub bbox: Option<BoundingBox>,
}

impl SearchHit {
    pub fn from_results(index: &Index, results: &[RankedResult]) -> Vec<SearchHit> {
        results
            .iter()
            .map(|r| SearchHit {
                bbox: r.best_object_index.and_then(|j| index.object_bbox(&r.image_id, j)),
                image_id: r.image_id.clone(),
                score: r.score,
                best_object_index: r.best_object_index,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRequest {
    pub query_id: String,
    pub image_id: ImageId,
    pub verdict: objseek_core::eval::Verdict,
    #[serde(default)]
    pub judge: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub query_id: String,
    #[serde(default = "default_k")]
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub index_version: u16,
    pub encoder_id: String,
}

pub type ClassesResponse = IndexStats;
