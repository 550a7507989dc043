//! On-disk layout of an index directory:
//!
//! ```text
//! manifest.json      manifest plus the partition file table
//! images.soli        image table and optional full-image embeddings
//! part-NNN.solp      one file per class partition
//! ```
//!
//! Binary files are little-endian. A partition file is the header (magic
//! `SOLP`, u16 version, u32 d, u64 row_count), a block of length-prefixed
//! row records, a CRC-64 over header and records, the row-major f32 embedding
//! block, and a CRC-64 over the embedding block. `images.soli` has the same
//! shape with magic `SOLI`, one record per image, and the embedding block
//! holding full-image rows for the images that have one.
//!
//! `persist` writes into a sibling temporary directory and swaps it in, so a
//! crash leaves either the old or the new index on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crc::{Crc, Digest, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use super::{ClassPartition, Index, IndexManifest, ObjectLoc, RowMeta, StoredImage, FORMAT_VERSION};
use crate::embedding::ClassLabel;
use crate::error::{Error, Result};
use crate::preprocess::BoundingBox;
use crate::scoring::{ContentHash, ImageId};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const PARTITION_MAGIC: &[u8; 4] = b"SOLP";
const IMAGES_MAGIC: &[u8; 4] = b"SOLI";
const MANIFEST_FILE: &str = "manifest.json";
const IMAGES_FILE: &str = "images.soli";
const MAX_STRING: u32 = 1 << 20;
/// Rows converted per I/O call for embedding blocks.
const IO_CHUNK_FLOATS: usize = 1 << 16;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    manifest: IndexManifest,
    images_file: String,
    full_image_rows: u64,
    partitions: Vec<PartitionEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionEntry {
    class: ClassLabel,
    file: String,
    rows: u64,
}

impl Index {
    /// Writes the index to directory `path`, replacing any index there.
    pub fn persist(&self, path: &Path) -> Result<()> {
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidInput(format!("bad index path {}", path.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

        let mut entries = Vec::with_capacity(self.partitions.len());
        for (i, part) in self.partitions.iter().enumerate() {
            let file = format!("part-{i:03}.solp");
            write_partition(&tmp.join(&file), part, &self.images)?;
            entries.push(PartitionEntry {
                class: part.class().clone(),
                file,
                rows: part.len() as u64,
            });
        }
        write_images(&tmp.join(IMAGES_FILE), self)?;
        let manifest = ManifestFile {
            manifest: self.manifest.clone(),
            images_file: IMAGES_FILE.into(),
            full_image_rows: self.full_owner.len() as u64,
            partitions: entries,
        };
        let manifest_path = tmp.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_synced(&manifest_path, &json)?;

        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        if path.exists() {
            std::fs::rename(path, &old).map_err(|e| Error::io(path, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        if old.exists() {
            std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Index> {
        let manifest_path = path.join(MANIFEST_FILE);
        let bytes = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let file: ManifestFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        let manifest = file.manifest;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: manifest_path,
                message: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let dim = manifest.encoder.dim;
        let classes_match = file.partitions.len() == manifest.class_set.len()
            && file.partitions.iter().zip(&manifest.class_set).all(|(p, c)| &p.class == c);
        if !classes_match {
            return Err(corrupt(&manifest_path, "manifest", "partition table does not match class set"));
        }

        let (mut images, full_rows, full_owner) =
            read_images(&path.join(&file.images_file), dim, file.full_image_rows)?;
        if images.len() as u64 != manifest.image_count {
            return Err(corrupt(
                &manifest_path,
                "manifest",
                format!("manifest lists {} images, image table has {}", manifest.image_count, images.len()),
            ));
        }
        let by_id: std::collections::HashMap<ImageId, u32> =
            images.iter().enumerate().map(|(i, im)| (im.image_id.clone(), i as u32)).collect();

        let mut partitions = Vec::with_capacity(file.partitions.len());
        let mut total_rows = 0u64;
        for (slot, entry) in file.partitions.iter().enumerate() {
            let part_path = path.join(&entry.file);
            let part = read_partition(&part_path, &entry.class, dim, &by_id)?;
            if part.len() as u64 != entry.rows {
                return Err(corrupt(
                    &part_path,
                    &format!("partition `{}`", entry.class),
                    format!("manifest lists {} rows, file has {}", entry.rows, part.len()),
                ));
            }
            for (row, m) in part.meta().iter().enumerate() {
                images[m.image as usize].objects.push(ObjectLoc {
                    object_index: m.object_index,
                    slot: slot as u32,
                    row: row as u32,
                });
            }
            total_rows += part.len() as u64;
            partitions.push(part);
        }
        if total_rows != manifest.object_count {
            return Err(corrupt(
                &manifest_path,
                "manifest",
                format!("manifest lists {} objects, partitions hold {total_rows}", manifest.object_count),
            ));
        }
        for im in &mut images {
            im.objects.sort_by_key(|o| o.object_index);
            if im.objects.len() as u32 != im.object_count {
                return Err(corrupt(
                    &path.join(&file.images_file),
                    "image table",
                    format!("image `{}` object count disagrees with partitions", im.image_id),
                ));
            }
        }
        Ok(Index::assemble(manifest, images, partitions, full_rows, full_owner))
    }
}

fn corrupt(path: &Path, what: &str, message: impl Into<String>) -> Error {
    Error::Corruption {
        path: path.to_owned(),
        what: what.to_owned(),
        message: message.into(),
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

struct BlockWriter<'a> {
    out: BufWriter<File>,
    digest: Digest<'a, u64>,
    path: PathBuf,
}

impl<'a> BlockWriter<'a> {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::with_capacity(1 << 20, f),
            digest: CRC64.digest(),
            path: path.to_owned(),
        })
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.digest.update(bytes);
        self.out.write_all(bytes).map_err(|e| Error::io(&self.path, e))
    }

    /// Writes the CRC of everything since the previous seal and restarts it.
    fn seal(&mut self) -> Result<()> {
        let digest = std::mem::replace(&mut self.digest, CRC64.digest());
        let crc = digest.finalize();
        self.out.write_all(&crc.to_le_bytes()).map_err(|e| Error::io(&self.path, e))
    }

    fn put_floats(&mut self, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(IO_CHUNK_FLOATS.min(values.len()) * 4);
        for chunk in values.chunks(IO_CHUNK_FLOATS) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            self.put(&buf)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let f = self
            .out
            .into_inner()
            .map_err(|e| Error::io(&self.path, e.into_error()))?;
        f.sync_all().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_header(w: &mut BlockWriter<'_>, magic: &[u8; 4], dim: usize, count: u64) -> Result<()> {
    w.put(magic)?;
    w.put(&FORMAT_VERSION.to_le_bytes())?;
    w.put(&(dim as u32).to_le_bytes())?;
    w.put(&count.to_le_bytes())
}

fn write_partition(path: &Path, part: &ClassPartition, images: &[StoredImage]) -> Result<()> {
    let mut w = BlockWriter::create(path)?;
    write_header(&mut w, PARTITION_MAGIC, part.dim(), part.len() as u64)?;
    let mut rec = Vec::new();
    for m in part.meta() {
        rec.clear();
        let id = images[m.image as usize].image_id.as_str();
        rec.extend_from_slice(&(id.len() as u32).to_le_bytes());
        rec.extend_from_slice(id.as_bytes());
        for v in [m.object_index, m.bbox.x, m.bbox.y, m.bbox.width, m.bbox.height] {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        rec.push(m.confidence.is_some() as u8);
        rec.extend_from_slice(&m.confidence.unwrap_or(0.0).to_le_bytes());
        w.put(&(rec.len() as u32).to_le_bytes())?;
        w.put(&rec)?;
    }
    w.seal()?;
    w.put_floats(part.rows())?;
    w.seal()?;
    w.finish()
}

fn write_images(path: &Path, index: &Index) -> Result<()> {
    let mut w = BlockWriter::create(path)?;
    write_header(&mut w, IMAGES_MAGIC, index.dim(), index.images.len() as u64)?;
    for im in &index.images {
        let mut rec = Vec::new();
        rec.extend_from_slice(&(im.image_id.as_str().len() as u32).to_le_bytes());
        rec.extend_from_slice(im.image_id.as_str().as_bytes());
        rec.extend_from_slice(&(im.source_uri.len() as u32).to_le_bytes());
        rec.extend_from_slice(im.source_uri.as_bytes());
        rec.extend_from_slice(&im.content_hash.0);
        rec.extend_from_slice(&im.object_count.to_le_bytes());
        rec.push(im.full_row.is_some() as u8);
        w.put(&(rec.len() as u32).to_le_bytes())?;
        w.put(&rec)?;
    }
    w.seal()?;
    w.put_floats(&index.full_rows)?;
    w.seal()?;
    w.finish()
}

/// Reads a block-structured file, tracking a CRC per block and turning
/// short reads into corruption errors.
struct BlockReader<'a> {
    inner: BufReader<File>,
    digest: Digest<'a, u64>,
    path: PathBuf,
    what: String,
    remaining: u64,
}

impl<'a> BlockReader<'a> {
    fn open(path: &Path, what: String) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
        Ok(Self {
            inner: BufReader::with_capacity(1 << 20, f),
            digest: CRC64.digest(),
            path: path.to_owned(),
            what,
            remaining: len,
        })
    }

    fn corrupt(&self, message: impl Into<String>) -> Error {
        corrupt(&self.path, &self.what, message)
    }

    fn raw(&mut self, buf: &mut [u8]) -> Result<()> {
        if (buf.len() as u64) > self.remaining {
            return Err(self.corrupt("file is truncated"));
        }
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.remaining -= buf.len() as u64;
        Ok(())
    }

    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        self.raw(buf)?;
        self.digest.update(buf);
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn check_seal(&mut self, block: &str) -> Result<()> {
        let mut b = [0u8; 8];
        self.raw(&mut b)?;
        let digest = std::mem::replace(&mut self.digest, CRC64.digest());
        if digest.finalize() != u64::from_le_bytes(b) {
            return Err(self.corrupt(format!("checksum mismatch in {block} block")));
        }
        Ok(())
    }

    fn header(&mut self, magic: &[u8; 4], dim: usize) -> Result<u64> {
        let mut m = [0u8; 4];
        self.take(&mut m)?;
        let version = self.u16()?;
        let file_dim = self.u32()? as usize;
        let count = self.u64()?;
        if &m != magic {
            return Err(Error::Format {
                path: self.path.clone(),
                message: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(magic)),
            });
        }
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                path: self.path.clone(),
                message: format!("unsupported version {version}"),
            });
        }
        if file_dim != dim {
            return Err(self.corrupt(format!("dimension {file_dim} does not match manifest {dim}")));
        }
        Ok(count)
    }

    /// Reads one length-prefixed record into `buf`.
    fn record(&mut self, buf: &mut Vec<u8>) -> Result<()> {
        let len = self.u32()?;
        if len > MAX_STRING * 2 + 64 {
            return Err(self.corrupt(format!("record length {len} is implausible")));
        }
        buf.resize(len as usize, 0);
        self.take(buf)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        if (n as u64).saturating_mul(4) > self.remaining {
            return Err(self.corrupt("file is truncated"));
        }
        let mut out = Vec::with_capacity(n);
        super::partition::advise_huge_pages(&out);
        let mut buf = vec![0u8; IO_CHUNK_FLOATS.min(n) * 4];
        let mut left = n;
        while left > 0 {
            let take = left.min(IO_CHUNK_FLOATS);
            let bytes = &mut buf[..take * 4];
            self.take(bytes)?;
            out.extend(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
            left -= take;
        }
        Ok(out)
    }

    fn expect_end(&self) -> Result<()> {
        if self.remaining != 0 {
            return Err(self.corrupt(format!("{} trailing bytes", self.remaining)));
        }
        Ok(())
    }
}

/// Cursor over one record's bytes.
struct Fields<'b> {
    bytes: &'b [u8],
}

impl<'b> Fields<'b> {
    fn next(&mut self, n: usize) -> Option<&'b [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }

    fn u32(&mut self) -> Option<u32> {
        self.next(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Option<f32> {
        self.next(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str(&mut self) -> Option<&'b str> {
        let len = self.u32()?;
        if len > MAX_STRING {
            return None;
        }
        std::str::from_utf8(self.next(len as usize)?).ok()
    }

    fn done(&self) -> bool {
        self.bytes.is_empty()
    }
}

fn read_partition(
    path: &Path,
    class: &ClassLabel,
    dim: usize,
    by_id: &std::collections::HashMap<ImageId, u32>,
) -> Result<ClassPartition> {
    let mut r = BlockReader::open(path, format!("partition `{class}`"))?;
    let rows = r.header(PARTITION_MAGIC, dim)?;
    // Smallest possible row: record length, empty id, five u32, flag, f32,
    // plus the embedding.
    let min_row = 4 + 4 + 20 + 1 + 4 + 4 * dim as u64;
    if rows.saturating_mul(min_row) > r.remaining {
        return Err(r.corrupt(format!("row count {rows} exceeds file size")));
    }
    let mut meta = Vec::with_capacity(rows as usize);
    let mut rec = Vec::new();
    for _ in 0..rows {
        r.record(&mut rec)?;
        let mut f = Fields { bytes: &rec };
        let parsed = (|| {
            let id = f.str()?;
            let object_index = f.u32()?;
            let (x, y, w, h) = (f.u32()?, f.u32()?, f.u32()?, f.u32()?);
            let has_conf = f.next(1)?[0];
            let conf = f.f32()?;
            Some((id, object_index, BoundingBox { x, y, width: w, height: h }, has_conf, conf))
        })();
        let Some((id, object_index, bbox, has_conf, conf)) = parsed.filter(|_| f.done()) else {
            return Err(r.corrupt("malformed row record"));
        };
        let Some(&image) = by_id.get(&ImageId::new(id)) else {
            return Err(r.corrupt(format!("row refers to unknown image `{id}`")));
        };
        meta.push(RowMeta {
            image,
            object_index,
            bbox,
            confidence: (has_conf != 0).then_some(conf),
        });
    }
    r.check_seal("row metadata")?;
    let values = r.floats(rows as usize * dim)?;
    r.check_seal("embedding")?;
    r.expect_end()?;
    Ok(ClassPartition::from_parts(class.clone(), dim, values, meta))
}

fn read_images(path: &Path, dim: usize, full_rows_expected: u64) -> Result<(Vec<StoredImage>, Vec<f32>, Vec<u32>)> {
    let mut r = BlockReader::open(path, "image table".into())?;
    let count = r.header(IMAGES_MAGIC, dim)?;
    let min_rec = 4 + 4 + 4 + 32 + 4 + 1;
    if count.saturating_mul(min_rec) > r.remaining {
        return Err(r.corrupt(format!("image count {count} exceeds file size")));
    }
    let mut images = Vec::with_capacity(count as usize);
    let mut full_owner = Vec::new();
    let mut rec = Vec::new();
    for ordinal in 0..count {
        r.record(&mut rec)?;
        let mut f = Fields { bytes: &rec };
        let parsed = (|| {
            let id = f.str()?;
            let uri = f.str()?;
            let hash: [u8; 32] = f.next(32)?.try_into().ok()?;
            let object_count = f.u32()?;
            let has_full = f.next(1)?[0];
            Some((id, uri, hash, object_count, has_full))
        })();
        let Some((id, uri, hash, object_count, has_full)) = parsed.filter(|_| f.done()) else {
            return Err(r.corrupt("malformed image record"));
        };
        let full_row = (has_full != 0).then(|| {
            full_owner.push(ordinal as u32);
            (full_owner.len() - 1) as u32
        });
        images.push(StoredImage {
            image_id: ImageId::new(id),
            source_uri: uri.to_owned(),
            content_hash: ContentHash(hash),
            object_count,
            full_row,
            objects: Vec::new(),
        });
    }
    r.check_seal("image metadata")?;
    if full_owner.len() as u64 != full_rows_expected {
        return Err(r.corrupt("full-image row count disagrees with manifest"));
    }
    let full_rows = r.floats(full_owner.len() * dim)?;
    r.check_seal("full-image embedding")?;
    r.expect_end()?;
    Ok((images, full_rows, full_owner))
}
