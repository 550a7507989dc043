//! Class-partitioned store of object embeddings with exact top-k search.
//!
//! Every object lives in the partition of its class, so a query only ever
//! scans the partition of the query class; objects of other classes are
//! excluded without being touched. Image scores are the maximum over that
//! image's rows, kept during a single scan.

mod partition;
mod storage;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

pub use partition::{ClassPartition, RowMeta};

use crate::embedding::{ClassLabel, EmbeddingVector};
use crate::encoder::EncoderDescriptor;
use crate::error::{Error, Result};
use crate::preprocess::BoundingBox;
use crate::scoring::{
    object_order, result_order, top_k_by, ContentHash, ImageId, ImageRecord, ObjectRecord, RankedResult,
    ScoredObject,
};

pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u16,
    pub encoder: EncoderDescriptor,
    pub class_set: Vec<ClassLabel>,
    pub image_count: u64,
    pub object_count: u64,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub modified: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IngestWarning {
    UnknownClass {
        image_id: ImageId,
        object_index: u32,
        class: ClassLabel,
    },
    InvalidObject {
        image_id: ImageId,
        object_index: u32,
        reason: String,
    },
    DuplicateImageId {
        image_id: ImageId,
    },
    EmptyMask {
        image_id: ImageId,
        instance_id: u32,
    },
    SkippedImage {
        image_id: ImageId,
        reason: String,
    },
}

impl fmt::Display for IngestWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IngestWarning::UnknownClass {
                image_id,
                object_index,
                class,
            } => write!(f, "{image_id}/{object_index}: class `{class}` is not in the class set"),
            IngestWarning::InvalidObject {
                image_id,
                object_index,
                reason,
            } => write!(f, "{image_id}/{object_index}: {reason}"),
            IngestWarning::DuplicateImageId { image_id } => {
                write!(f, "{image_id}: id already used by different content")
            }
            IngestWarning::EmptyMask { image_id, instance_id } => {
                write!(f, "{image_id}: instance {instance_id} has an empty mask")
            }
            IngestWarning::SkippedImage { image_id, reason } => write!(f, "{image_id}: {reason}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub added_images: u64,
    pub skipped_duplicates: u64,
    pub added_objects: u64,
    /// Images that went through cropping and encoding. Filled in by the
    /// ingestion pipeline; duplicates are recognized before this step.
    pub processed_images: u64,
    pub warnings: Vec<IngestWarning>,
}

impl IngestReport {
    pub fn merge(&mut self, other: IngestReport) {
        self.added_images += other.added_images;
        self.skipped_duplicates += other.skipped_duplicates;
        self.added_objects += other.added_objects;
        self.processed_images += other.processed_images;
        self.warnings.extend(other.warnings);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassStats {
    pub class: ClassLabel,
    pub rows: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexStats {
    pub classes: Vec<ClassStats>,
    pub image_count: u64,
    pub object_count: u64,
    pub dim: usize,
    pub encoder_id: String,
}

/// Optional query knobs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SearchParams {
    /// Rows below this detector confidence are ignored. Rows without a
    /// confidence always pass.
    pub min_confidence: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ObjectLoc {
    pub object_index: u32,
    pub slot: u32,
    pub row: u32,
}

#[derive(Clone, Debug)]
pub(crate) struct StoredImage {
    pub image_id: ImageId,
    pub source_uri: String,
    pub content_hash: ContentHash,
    pub object_count: u32,
    pub full_row: Option<u32>,
    pub objects: Vec<ObjectLoc>,
}

/// Read-only view of a stored image.
#[derive(Clone, Copy, Debug)]
pub struct ImageView<'a> {
    index: &'a Index,
    image: &'a StoredImage,
}

impl<'a> ImageView<'a> {
    pub fn image_id(&self) -> &'a ImageId {
        &self.image.image_id
    }

    pub fn source_uri(&self) -> &'a str {
        &self.image.source_uri
    }

    pub fn content_hash(&self) -> ContentHash {
        self.image.content_hash
    }

    pub fn object_count(&self) -> u32 {
        self.image.object_count
    }

    pub fn has_full_embedding(&self) -> bool {
        self.image.full_row.is_some()
    }

    /// Objects as `(object_index, class, row metadata)`.
    pub fn objects(&self) -> impl Iterator<Item = (u32, &'a ClassLabel, &'a RowMeta)> + 'a {
        let index = self.index;
        self.image.objects.iter().map(move |loc| {
            let part = &index.partitions[loc.slot as usize];
            (loc.object_index, part.class(), &part.meta()[loc.row as usize])
        })
    }

    pub fn object(&self, object_index: u32) -> Option<(&'a ClassLabel, &'a RowMeta)> {
        self.objects()
            .find(|(j, _, _)| *j == object_index)
            .map(|(_, c, m)| (c, m))
    }
}

#[derive(Debug, Default)]
struct Counters {
    rows_scanned: AtomicU64,
    queries: AtomicU64,
}

#[derive(Debug)]
pub struct Index {
    manifest: IndexManifest,
    images: Vec<StoredImage>,
    by_id: HashMap<ImageId, u32>,
    by_hash: HashMap<ContentHash, u32>,
    partitions: Vec<ClassPartition>,
    slot_of: HashMap<ClassLabel, usize>,
    full_rows: Vec<f32>,
    full_owner: Vec<u32>,
    counters: Counters,
}

impl Index {
    pub fn new(encoder: EncoderDescriptor, class_set: Vec<ClassLabel>) -> Result<Self> {
        if encoder.dim == 0 {
            return Err(Error::Configuration("index dimension must be positive".into()));
        }
        let mut seen = HashSet::new();
        let class_set: Vec<ClassLabel> = class_set.into_iter().filter(|c| seen.insert(c.clone())).collect();
        if class_set.is_empty() {
            return Err(Error::Configuration("class set is empty".into()));
        }
        let now = now_unix();
        let manifest = IndexManifest {
            format_version: FORMAT_VERSION,
            encoder,
            class_set,
            image_count: 0,
            object_count: 0,
            created: now,
            modified: now,
        };
        Ok(Self::assemble(manifest, Vec::new(), Vec::new(), Vec::new(), Vec::new()))
    }

    fn assemble(
        manifest: IndexManifest,
        images: Vec<StoredImage>,
        partitions: Vec<ClassPartition>,
        full_rows: Vec<f32>,
        full_owner: Vec<u32>,
    ) -> Self {
        let dim = manifest.encoder.dim;
        let partitions = if partitions.is_empty() {
            manifest
                .class_set
                .iter()
                .map(|c| ClassPartition::new(c.clone(), dim))
                .collect()
        } else {
            partitions
        };
        let slot_of = manifest.class_set.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let by_id = images.iter().enumerate().map(|(i, im)| (im.image_id.clone(), i as u32)).collect();
        let by_hash = images.iter().enumerate().map(|(i, im)| (im.content_hash, i as u32)).collect();
        Self {
            manifest,
            images,
            by_id,
            by_hash,
            partitions,
            slot_of,
            full_rows,
            full_owner,
            counters: Counters::default(),
        }
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.encoder.dim
    }

    pub fn encoder(&self) -> &EncoderDescriptor {
        &self.manifest.encoder
    }

    pub fn class_set(&self) -> &[ClassLabel] {
        &self.manifest.class_set
    }

    pub fn partition(&self, class: &ClassLabel) -> Option<&ClassPartition> {
        self.slot_of.get(class).map(|&s| &self.partitions[s])
    }

    pub fn partitions(&self) -> &[ClassPartition] {
        &self.partitions
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn contains_hash(&self, hash: &ContentHash) -> bool {
        self.by_hash.contains_key(hash)
    }

    pub fn image(&self, id: &ImageId) -> Option<ImageView<'_>> {
        self.by_id.get(id).map(|&i| ImageView {
            index: self,
            image: &self.images[i as usize],
        })
    }

    pub fn images(&self) -> impl Iterator<Item = ImageView<'_>> {
        self.images.iter().map(move |image| ImageView { index: self, image })
    }

    pub fn has_full_image_embeddings(&self) -> bool {
        !self.full_owner.is_empty()
    }

    /// Total rows visited by searches since this index was created or loaded.
    pub fn rows_scanned(&self) -> u64 {
        self.counters.rows_scanned.load(AtomicOrdering::Relaxed)
    }

    pub fn queries_served(&self) -> u64 {
        self.counters.queries.load(AtomicOrdering::Relaxed)
    }

    pub fn resolve_class(&self, name: &str) -> Result<ClassLabel> {
        self.manifest
            .class_set
            .iter()
            .find(|c| c.as_str() == name)
            .cloned()
            .ok_or_else(|| self.unknown_class(name))
    }

    fn unknown_class(&self, name: &str) -> Error {
        Error::UnknownClass {
            class: name.to_owned(),
            valid: self.manifest.class_set.iter().map(|c| c.as_str().to_owned()).collect(),
        }
    }

    fn slot(&self, class: &ClassLabel) -> Result<usize> {
        self.slot_of.get(class).copied().ok_or_else(|| self.unknown_class(class.as_str()))
    }

    /// Adds images and their objects. Images whose content hash is already
    /// stored are skipped whole. Each image is validated completely before
    /// anything of it is stored, so an error never leaves half an image.
    pub fn ingest<I>(&mut self, batch: I) -> Result<IngestReport>
    where
        I: IntoIterator<Item = (ImageRecord, Vec<ObjectRecord>)>,
    {
        let mut report = IngestReport::default();
        for (image, objects) in batch {
            self.ingest_one(image, objects, &mut report)?;
        }
        if report.added_images > 0 {
            self.manifest.modified = now_unix();
        }
        Ok(report)
    }

    fn ingest_one(
        &mut self,
        image: ImageRecord,
        objects: Vec<ObjectRecord>,
        report: &mut IngestReport,
    ) -> Result<()> {
        if self.by_hash.contains_key(&image.content_hash) {
            report.skipped_duplicates += 1;
            return Ok(());
        }
        if self.by_id.contains_key(&image.image_id) {
            report.warnings.push(IngestWarning::DuplicateImageId {
                image_id: image.image_id,
            });
            return Ok(());
        }
        let dim = self.dim();
        if let Some(full) = &image.full_image_embedding {
            full.check_dim(dim).map_err(|_| self.dim_error(full.dim()))?;
        }

        let mut accepted: Vec<(usize, ObjectRecord)> = Vec::with_capacity(objects.len());
        let mut seen = HashSet::with_capacity(objects.len());
        for obj in objects {
            if obj.embedding.dim() != dim {
                return Err(self.dim_error(obj.embedding.dim()));
            }
            let reject = |reason: String| IngestWarning::InvalidObject {
                image_id: image.image_id.clone(),
                object_index: obj.object_index,
                reason,
            };
            if obj.image_id != image.image_id {
                report.warnings.push(reject(format!("belongs to image `{}`", obj.image_id)));
                continue;
            }
            if let Err(e) = obj.validate() {
                report.warnings.push(reject(e.to_string()));
                continue;
            }
            let Some(&slot) = self.slot_of.get(&obj.class) else {
                report.warnings.push(IngestWarning::UnknownClass {
                    image_id: image.image_id.clone(),
                    object_index: obj.object_index,
                    class: obj.class.clone(),
                });
                continue;
            };
            if !seen.insert(obj.object_index) {
                report.warnings.push(reject("duplicate object index".into()));
                continue;
            }
            accepted.push((slot, obj));
        }

        // Commit.
        let ordinal = self.images.len() as u32;
        let mut locs = Vec::with_capacity(accepted.len());
        for (slot, obj) in &accepted {
            let row = self.partitions[*slot].push(
                &obj.embedding,
                RowMeta {
                    image: ordinal,
                    object_index: obj.object_index,
                    bbox: obj.bbox,
                    confidence: obj.confidence,
                },
            );
            locs.push(ObjectLoc {
                object_index: obj.object_index,
                slot: *slot as u32,
                row,
            });
        }
        locs.sort_by_key(|l| l.object_index);
        let full_row = image.full_image_embedding.as_ref().map(|full| {
            self.full_rows.extend_from_slice(full.values());
            self.full_owner.push(ordinal);
            (self.full_owner.len() - 1) as u32
        });
        self.by_id.insert(image.image_id.clone(), ordinal);
        self.by_hash.insert(image.content_hash, ordinal);
        self.images.push(StoredImage {
            image_id: image.image_id,
            source_uri: image.source_uri,
            content_hash: image.content_hash,
            object_count: accepted.len() as u32,
            full_row,
            objects: locs,
        });
        self.manifest.image_count += 1;
        self.manifest.object_count += accepted.len() as u64;
        report.added_images += 1;
        report.added_objects += accepted.len() as u64;
        Ok(())
    }

    fn dim_error(&self, actual: usize) -> Error {
        Error::Configuration(format!(
            "embedding has dimension {actual}, index `{}` expects {}",
            self.manifest.encoder.encoder_id,
            self.dim()
        ))
    }

    /// Pre-sizes a partition for bulk loading.
    pub fn reserve(&mut self, class: &ClassLabel, rows: usize) -> Result<()> {
        let slot = self.slot(class)?;
        self.partitions[slot].reserve(rows);
        Ok(())
    }

    fn scan(&self, slot: usize, query: &EmbeddingVector) -> Result<Vec<f32>> {
        query.check_dim(self.dim())?;
        let part = &self.partitions[slot];
        self.counters.queries.fetch_add(1, AtomicOrdering::Relaxed);
        self.counters
            .rows_scanned
            .fetch_add(part.len() as u64, AtomicOrdering::Relaxed);
        Ok(part.score_all(query.values()))
    }

    /// Exact top-k objects of one class.
    pub fn search_topk_objects(
        &self,
        class: &ClassLabel,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<ScoredObject>> {
        let slot = self.slot(class)?;
        if k == 0 {
            return Ok(Vec::new());
        }
        let scores = self.scan(slot, query)?;
        let part = &self.partitions[slot];
        let mut hits: Vec<ScoredObject> = part
            .meta()
            .iter()
            .zip(&scores)
            .map(|(m, &score)| ScoredObject {
                image_id: self.images[m.image as usize].image_id.clone(),
                object_index: m.object_index,
                score,
            })
            .collect();
        top_k_by(&mut hits, k, object_order);
        Ok(hits)
    }

    /// Exact top-k images, each scored by its best object of `class`.
    pub fn search_topk_images(
        &self,
        class: &ClassLabel,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<RankedResult>> {
        self.search_topk_images_with(class, query, k, &SearchParams::default())
    }

    pub fn search_topk_images_with(
        &self,
        class: &ClassLabel,
        query: &EmbeddingVector,
        k: usize,
        params: &SearchParams,
    ) -> Result<Vec<RankedResult>> {
        let slot = self.slot(class)?;
        if k == 0 {
            return Ok(Vec::new());
        }
        let scores = self.scan(slot, query)?;
        let part = &self.partitions[slot];
        let meta = part.meta();

        // Best row per image ordinal, u32::MAX when the image has no row yet.
        let mut best = vec![u32::MAX; self.images.len()];
        let mut touched: Vec<u32> = Vec::new();
        for (row, (m, &score)) in meta.iter().zip(&scores).enumerate() {
            if let Some(c) = m.confidence {
                if c < params.min_confidence {
                    continue;
                }
            }
            let slot = &mut best[m.image as usize];
            if *slot == u32::MAX {
                touched.push(m.image);
                *slot = row as u32;
                continue;
            }
            let cur = *slot as usize;
            let better = score > scores[cur]
                || (score == scores[cur] && m.object_index < meta[cur].object_index);
            if better {
                *slot = row as u32;
            }
        }

        // Select on (image, row) pairs; only the final k become results.
        let mut candidates: Vec<(u32, u32)> = touched.into_iter().map(|image| (image, best[image as usize])).collect();
        let images = &self.images;
        top_k_by(&mut candidates, k, |&(ia, ra), &(ib, rb)| {
            scores[rb as usize]
                .total_cmp(&scores[ra as usize])
                .then_with(|| images[ia as usize].image_id.cmp(&images[ib as usize].image_id))
        });
        Ok(candidates
            .into_iter()
            .map(|(image, row)| RankedResult {
                image_id: images[image as usize].image_id.clone(),
                score: scores[row as usize],
                best_object_index: Some(meta[row as usize].object_index),
            })
            .collect())
    }

    /// Top-k by whole-image embeddings, with no class gate.
    pub fn search_topk_full_images(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RankedResult>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if self.full_owner.is_empty() {
            return Err(Error::Capability(
                "index was built without full-image embeddings".into(),
            ));
        }
        query.check_dim(self.dim())?;
        self.counters.queries.fetch_add(1, AtomicOrdering::Relaxed);
        self.counters
            .rows_scanned
            .fetch_add(self.full_owner.len() as u64, AtomicOrdering::Relaxed);
        let scores = partition::score_block(&self.full_rows, query.values(), self.full_owner.len());
        let mut results: Vec<RankedResult> = self
            .full_owner
            .iter()
            .zip(scores)
            .map(|(&owner, score)| RankedResult {
                image_id: self.images[owner as usize].image_id.clone(),
                score,
                best_object_index: None,
            })
            .collect();
        top_k_by(&mut results, k, result_order);
        Ok(results)
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            classes: self
                .partitions
                .iter()
                .map(|p| ClassStats {
                    class: p.class().clone(),
                    rows: p.len() as u64,
                })
                .collect(),
            image_count: self.manifest.image_count,
            object_count: self.manifest.object_count,
            dim: self.dim(),
            encoder_id: self.manifest.encoder.encoder_id.clone(),
        }
    }

    /// Bounding box of a stored object, if present.
    pub fn object_bbox(&self, image_id: &ImageId, object_index: u32) -> Option<BoundingBox> {
        self.image(image_id)?.object(object_index).map(|(_, m)| m.bbox)
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(target_arch = "wasm32")]
fn now_unix() -> u64 {
    0
}
