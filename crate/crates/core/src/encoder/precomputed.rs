//! Binary file of embeddings computed outside this process.
//!
//! Layout, all little-endian: magic `SOLE`, u16 version (1), u32 d, u64 count,
//! then `count` records of u64 key length, UTF-8 key (`image_id/object_index`
//! or `image_id/full`), and `d` f32 values.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EncoderDescriptor, ImageRequest, Modality};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SOLE";
const VERSION: u16 = 1;
const MAX_KEY_LEN: u64 = 1 << 20;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        self.entries.push((key.into(), values));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(MAGIC)?;
        put(&VERSION.to_le_bytes())?;
        put(&(self.dim as u32).to_le_bytes())?;
        put(&(self.entries.len() as u64).to_le_bytes())?;
        for (key, values) in &self.entries {
            put(&(key.len() as u64).to_le_bytes())?;
            put(key.as_bytes())?;
            for v in values {
                put(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let format = |message: String| Error::Format {
            path: path.to_owned(),
            message,
        };
        let mut read_exact = |buf: &mut [u8]| {
            r.read_exact(buf)
                .map_err(|e| format(format!("truncated embedding file: {e}")))
        };
        let mut magic = [0u8; 4];
        read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format("bad magic, expected SOLE".into()));
        }
        let mut b2 = [0u8; 2];
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        if dim == 0 {
            return Err(format("dimension is zero".into()));
        }
        read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        let mut row = vec![0u8; dim * 4];
        for _ in 0..count {
            read_exact(&mut b8)?;
            let key_len = u64::from_le_bytes(b8);
            if key_len > MAX_KEY_LEN {
                return Err(format(format!("key length {key_len} is implausible")));
            }
            let mut key = vec![0u8; key_len as usize];
            read_exact(&mut key)?;
            let key = String::from_utf8(key).map_err(|_| format("key is not UTF-8".into()))?;
            read_exact(&mut row)?;
            let values = row
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((key, values));
        }
        Ok(Self { dim, entries })
    }
}

/// Serves image embeddings by key from an [`EmbeddingFile`]. It cannot
/// encode text.
#[derive(Clone, Debug)]
pub struct PrecomputedEncoder {
    descriptor: EncoderDescriptor,
    by_key: HashMap<String, EmbeddingVector>,
}

impl PrecomputedEncoder {
    pub fn open(path: &Path, encoder_id: impl Into<String>) -> Result<Self> {
        Self::from_file(EmbeddingFile::read(path)?, encoder_id)
    }

    pub fn from_file(file: EmbeddingFile, encoder_id: impl Into<String>) -> Result<Self> {
        let mut by_key = HashMap::with_capacity(file.entries.len());
        for (key, raw) in file.entries {
            let v = EmbeddingVector::from_raw(&raw)
                .map_err(|e| Error::InvalidInput(format!("embedding `{key}`: {e}")))?;
            by_key.insert(key, v);
        }
        Ok(Self {
            descriptor: EncoderDescriptor {
                encoder_id: encoder_id.into(),
                dim: file.dim,
                modality: Modality::Image,
            },
            by_key,
        })
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }
}

impl super::Encoder for PrecomputedEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn encode_text(&self, _text: &str) -> Result<EmbeddingVector> {
        Err(Error::Capability(
            "precomputed embedding files hold image embeddings only".into(),
        ))
    }

    fn encode_image(&self, request: &ImageRequest<'_>) -> Result<EmbeddingVector> {
        let key = request.key.to_string();
        self.by_key
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no precomputed embedding for `{key}`")))
    }
}
