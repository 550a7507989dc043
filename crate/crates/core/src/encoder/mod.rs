//! Text and image encoders mapping into one shared latent space.
//!
//! Three providers sit behind [`Encoder`]: a deterministic hashing encoder
//! for tests and demos ([`ToyEncoder`]), an HTTP client for a real model
//! server (`RemoteEncoder`, feature `remote`), and a reader for embeddings
//! computed elsewhere ([`PrecomputedEncoder`]).

mod precomputed;
#[cfg(feature = "remote")]
mod remote;
mod toy;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use precomputed::{EmbeddingFile, PrecomputedEncoder};
#[cfg(feature = "remote")]
pub use remote::{RemoteConfig, RemoteEncoder};
pub use toy::{tokenize, ToyEncoder, TOY_SEED};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::preprocess::PixelBuffer;
use crate::scoring::ImageId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Both,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub encoder_id: String,
    pub dim: usize,
    pub modality: Modality,
}

impl EncoderDescriptor {
    /// Errors unless `other` produces vectors interchangeable with ours.
    pub fn check_compatible(&self, other: &EncoderDescriptor) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Configuration(format!(
                "encoder `{}` has dimension {}, index expects {}",
                other.encoder_id, other.dim, self.dim
            )));
        }
        if self.encoder_id != other.encoder_id {
            return Err(Error::Configuration(format!(
                "index was built with encoder `{}`, got `{}`",
                self.encoder_id, other.encoder_id
            )));
        }
        Ok(())
    }
}

/// Stand-in for visual content: a bag of tokens the toy encoder embeds
/// exactly like text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTokenImage {
    pub tokens: Vec<String>,
}

impl SyntheticTokenImage {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ImageContent<'a> {
    Pixels(&'a PixelBuffer),
    Tokens(&'a SyntheticTokenImage),
}

/// Which stored item an image embedding belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingKey {
    Object { image_id: ImageId, object_index: u32 },
    Full { image_id: ImageId },
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingKey::Object {
                image_id,
                object_index,
            } => write!(f, "{image_id}/{object_index}"),
            EmbeddingKey::Full { image_id } => write!(f, "{image_id}/full"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageRequest<'a> {
    pub key: EmbeddingKey,
    pub content: ImageContent<'a>,
}

pub trait Encoder: Send + Sync {
    fn descriptor(&self) -> &EncoderDescriptor;

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn encode_image(&self, request: &ImageRequest<'_>) -> Result<EmbeddingVector>;
}

impl<E: Encoder + ?Sized> Encoder for std::sync::Arc<E> {
    fn descriptor(&self) -> &EncoderDescriptor {
        (**self).descriptor()
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).encode_text(text)
    }

    fn encode_image(&self, request: &ImageRequest<'_>) -> Result<EmbeddingVector> {
        (**self).encode_image(request)
    }
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn descriptor(&self) -> &EncoderDescriptor {
        (**self).descriptor()
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).encode_text(text)
    }

    fn encode_image(&self, request: &ImageRequest<'_>) -> Result<EmbeddingVector> {
        (**self).encode_image(request)
    }
}

/// Encoder selection as written on the command line:
/// `toy`, `remote:URL` or `file:PATH`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderSpec {
    Toy,
    Remote(String),
    File(PathBuf),
}

/// Encoder id recorded for indexes built from a precomputed file.
pub const PRECOMPUTED_ID: &str = "precomputed";

impl FromStr for EncoderSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "toy" {
            return Ok(EncoderSpec::Toy);
        }
        match s.split_once(':') {
            Some(("remote", url)) if !url.is_empty() => Ok(EncoderSpec::Remote(url.to_owned())),
            Some(("file", path)) if !path.is_empty() => Ok(EncoderSpec::File(PathBuf::from(path))),
            _ => Err(Error::Configuration(format!(
                "unknown encoder `{s}` (expected toy, remote:URL or file:PATH)"
            ))),
        }
    }
}

impl EncoderSpec {
    /// The provider that can answer text queries against an index built with
    /// `descriptor`, when that can be inferred from its id.
    pub fn for_index(descriptor: &EncoderDescriptor) -> Option<Self> {
        let id = descriptor.encoder_id.as_str();
        if id == ToyEncoder::ID {
            Some(EncoderSpec::Toy)
        } else {
            id.strip_prefix("remote:").map(|url| EncoderSpec::Remote(url.to_owned()))
        }
    }

    /// Builds the encoder. `dim` is ignored for files, which carry their own.
    pub fn open(&self, dim: usize) -> Result<Box<dyn Encoder>> {
        match self {
            EncoderSpec::Toy => Ok(Box::new(ToyEncoder::new(dim)?)),
            EncoderSpec::File(path) => Ok(Box::new(PrecomputedEncoder::open(path, PRECOMPUTED_ID)?)),
            #[cfg(feature = "remote")]
            EncoderSpec::Remote(url) => Ok(Box::new(RemoteEncoder::connect(url, dim, RemoteConfig::default())?)),
            #[cfg(not(feature = "remote"))]
            EncoderSpec::Remote(_) => Err(Error::Configuration(
                "this build has no remote encoder support".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_format() {
        let obj = EmbeddingKey::Object {
            image_id: "frame_01".into(),
            object_index: 3,
        };
        assert_eq!(obj.to_string(), "frame_01/3");
        let full = EmbeddingKey::Full {
            image_id: "frame_01".into(),
        };
        assert_eq!(full.to_string(), "frame_01/full");
    }

    #[test]
    fn descriptor_compatibility() {
        let a = EncoderDescriptor {
            encoder_id: "toy".into(),
            dim: 8,
            modality: Modality::Both,
        };
        let mut b = a.clone();
        assert!(a.check_compatible(&b).is_ok());
        b.dim = 16;
        assert!(matches!(a.check_compatible(&b), Err(Error::Configuration(_))));
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("toy".parse::<EncoderSpec>().unwrap(), EncoderSpec::Toy);
        assert_eq!(
            "remote:http://h:1".parse::<EncoderSpec>().unwrap(),
            EncoderSpec::Remote("http://h:1".into())
        );
        assert_eq!(
            "file:e.bin".parse::<EncoderSpec>().unwrap(),
            EncoderSpec::File("e.bin".into())
        );
        for bad in ["", "clip", "remote:", "file:"] {
            assert!(bad.parse::<EncoderSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn spec_from_index_descriptor() {
        let toy = ToyEncoder::new(8).unwrap();
        assert_eq!(EncoderSpec::for_index(toy.descriptor()), Some(EncoderSpec::Toy));
        let mut d = toy.descriptor().clone();
        d.encoder_id = "remote:http://x".into();
        assert_eq!(EncoderSpec::for_index(&d), Some(EncoderSpec::Remote("http://x".into())));
        d.encoder_id = PRECOMPUTED_ID.into();
        assert_eq!(EncoderSpec::for_index(&d), None);
        assert_eq!(EncoderSpec::Toy.open(8).unwrap().descriptor().dim, 8);
    }
}
