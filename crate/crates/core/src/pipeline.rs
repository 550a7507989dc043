//! Directory ingestion: image files plus `{stem}.json` annotations.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::encoder::{EmbeddingKey, Encoder, ImageContent, ImageRequest};
use crate::error::{Error, Result};
use crate::index::{Index, IngestReport, IngestWarning};
use crate::preprocess::{extract_objects, pad_to_square, AnnotationFile, ObjectCrop, PixelBuffer};
use crate::scoring::{ContentHash, ImageId, ImageRecord, ObjectRecord};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub with_full_image: bool,
    /// Images decoded and encoded concurrently.
    pub workers: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            with_full_image: false,
            workers: 1,
        }
    }
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if known && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn image_id_of(path: &Path) -> Result<ImageId> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(ImageId::new)
        .ok_or_else(|| Error::InvalidInput(format!("{} has no usable file name", path.display())))
}

pub fn annotation_path(annotations_dir: &Path, image_id: &ImageId) -> PathBuf {
    annotations_dir.join(format!("{image_id}.json"))
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<PixelBuffer> {
    let rgb = image::load_from_memory(bytes)
        .map_err(|e| Error::Format {
            path: path.to_owned(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    PixelBuffer::new(w, h, rgb.into_raw())
}

pub fn load_image(path: &Path) -> Result<PixelBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

pub fn encode_png(buf: &PixelBuffer) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(buf.width(), buf.height(), buf.data().to_vec())
        .ok_or_else(|| Error::Invariant("pixel buffer size disagrees with its dimensions".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Invariant(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Recomputes the padded crop of one stored object.
pub fn object_crop(image_path: &Path, annotation_path: &Path, object_index: u32) -> Result<ObjectCrop> {
    let image = load_image(image_path)?;
    let ann = AnnotationFile::read(annotation_path)?.to_annotation()?;
    extract_objects(&image, &ann)?
        .objects
        .into_iter()
        .nth(object_index as usize)
        .ok_or_else(|| Error::InvalidInput(format!("no object {object_index} in {}", image_path.display())))
}

enum Prepared {
    Ready {
        image: ImageRecord,
        objects: Vec<ObjectRecord>,
        warnings: Vec<IngestWarning>,
    },
    Skipped(IngestWarning),
}

/// Ingests every image in `images_dir` that is not already indexed.
///
/// Files are hashed first; a file whose content is already in the index (or
/// earlier in this run) is never decoded or encoded. Encoder failures abort
/// the run; images committed before the failure stay committed.
pub fn ingest_directory(
    index: &mut Index,
    encoder: &dyn Encoder,
    images_dir: &Path,
    annotations_dir: &Path,
    options: &PipelineOptions,
) -> Result<IngestReport> {
    index.encoder().check_compatible(encoder.descriptor())?;
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    let mut pending = Vec::new();
    for path in list_images(images_dir)? {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let hash = ContentHash::of(&bytes);
        if index.contains_hash(&hash) || !seen.insert(hash) {
            report.skipped_duplicates += 1;
            continue;
        }
        pending.push((path, bytes, hash));
    }

    let workers = options.workers.max(1);
    for chunk in pending.chunks(workers * 4) {
        let prepared = prepare_all(index, encoder, chunk, annotations_dir, options, workers);
        for p in prepared {
            match p? {
                Prepared::Skipped(w) => report.warnings.push(w),
                Prepared::Ready {
                    image,
                    objects,
                    warnings,
                } => {
                    report.processed_images += 1;
                    report.warnings.extend(warnings);
                    report.merge(index.ingest([(image, objects)])?);
                }
            }
        }
    }
    Ok(report)
}

fn prepare_all(
    index: &Index,
    encoder: &dyn Encoder,
    chunk: &[(PathBuf, Vec<u8>, ContentHash)],
    annotations_dir: &Path,
    options: &PipelineOptions,
    workers: usize,
) -> Vec<Result<Prepared>> {
    let one = |(path, bytes, hash): &(PathBuf, Vec<u8>, ContentHash)| {
        prepare(index, encoder, path, bytes, *hash, annotations_dir, options)
    };
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| chunk.par_iter().map(one).collect());
        }
    }
    let _ = workers;
    chunk.iter().map(one).collect()
}

fn prepare(
    index: &Index,
    encoder: &dyn Encoder,
    path: &Path,
    bytes: &[u8],
    hash: ContentHash,
    annotations_dir: &Path,
    options: &PipelineOptions,
) -> Result<Prepared> {
    let image_id = image_id_of(path)?;
    let ann_path = annotation_path(annotations_dir, &image_id);
    if !ann_path.is_file() {
        return Ok(Prepared::Skipped(IngestWarning::SkippedImage {
            image_id,
            reason: format!("no annotation at {}", ann_path.display()),
        }));
    }
    let pixels = decode_image(bytes, path)?;
    let ann = AnnotationFile::read(&ann_path)?.to_annotation()?;
    let extraction = extract_objects(&pixels, &ann)?;

    let mut warnings: Vec<IngestWarning> = extraction
        .skipped_empty
        .iter()
        .map(|&instance_id| IngestWarning::EmptyMask {
            image_id: image_id.clone(),
            instance_id,
        })
        .collect();
    let mut objects = Vec::with_capacity(extraction.objects.len());
    for obj in &extraction.objects {
        if index.partition(&obj.class).is_none() {
            warnings.push(IngestWarning::UnknownClass {
                image_id: image_id.clone(),
                object_index: obj.object_index,
                class: obj.class.clone(),
            });
            continue;
        }
        let embedding = encoder.encode_image(&ImageRequest {
            key: EmbeddingKey::Object {
                image_id: image_id.clone(),
                object_index: obj.object_index,
            },
            content: ImageContent::Pixels(&obj.crop),
        })?;
        objects.push(ObjectRecord {
            image_id: image_id.clone(),
            object_index: obj.object_index,
            class: obj.class.clone(),
            bbox: obj.bbox,
            confidence: obj.confidence,
            embedding,
        });
    }
    let full_image_embedding = if options.with_full_image {
        let square = pad_to_square(&pixels);
        Some(encoder.encode_image(&ImageRequest {
            key: EmbeddingKey::Full {
                image_id: image_id.clone(),
            },
            content: ImageContent::Pixels(&square),
        })?)
    } else {
        None
    };
    let source_uri = std::fs::canonicalize(path)
        .unwrap_or_else(|_| path.to_owned())
        .to_string_lossy()
        .into_owned();
    Ok(Prepared::Ready {
        image: ImageRecord {
            image_id,
            source_uri,
            content_hash: hash,
            object_count: objects.len() as u32,
            full_image_embedding,
        },
        objects,
        warnings,
    })
}
