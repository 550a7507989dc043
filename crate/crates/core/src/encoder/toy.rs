//! Hashing bag-of-tokens encoder.
//!
//! Each token seeds a 64-bit avalanche hash and a splitmix64 stream expands it
//! into `d` values in `[-1, 1]`; token vectors are summed and normalized. Text
//! and synthetic token images share this path, so a token image and the text
//! made of the same tokens embed to the same vector, and unrelated tokens land
//! near-orthogonal for large `d`.
//!
//! Pixel crops are reduced to color-name tokens first, which gives the toy
//! mode something to search on real images ("red", "white", ...).

use super::{EncoderDescriptor, ImageContent, ImageRequest, Modality};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::preprocess::PixelBuffer;

pub const TOY_SEED: u64 = 0x5EED_501A;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Share of object pixels a color needs to become a token.
const COLOR_SHARE: f64 = 0.25;

const PALETTE: &[(&str, [u8; 3])] = &[
    ("red", [200, 30, 30]),
    ("orange", [235, 130, 20]),
    ("yellow", [230, 210, 40]),
    ("green", [40, 160, 60]),
    ("blue", [40, 70, 210]),
    ("purple", [130, 50, 170]),
    ("white", [240, 240, 240]),
    ("gray", [128, 128, 128]),
    ("dark", [30, 30, 30]),
];

#[derive(Clone, Debug)]
pub struct ToyEncoder {
    descriptor: EncoderDescriptor,
}

impl ToyEncoder {
    pub const ID: &'static str = "toy-v1";

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Configuration("toy encoder dimension must be positive".into()));
        }
        Ok(Self {
            descriptor: EncoderDescriptor {
                encoder_id: Self::ID.into(),
                dim,
                modality: Modality::Both,
            },
        })
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<EmbeddingVector> {
        let mut all: Vec<String> = tokens.iter().flat_map(|t| tokenize(t.as_ref())).collect();
        if all.is_empty() {
            return Err(Error::InvalidInput("no tokens to encode".into()));
        }
        // Sorting fixes the f64 summation order, so any permutation of the
        // same bag yields bit-identical output.
        all.sort_unstable();
        let dim = self.descriptor.dim;
        let mut sum = vec![0.0f64; dim];
        for token in &all {
            let mut state = token_seed(token);
            for slot in sum.iter_mut() {
                state = state.wrapping_add(GOLDEN_GAMMA);
                let bits = mix64(state) >> 11;
                *slot += bits as f64 * (2.0 / (1u64 << 53) as f64) - 1.0;
            }
        }
        EmbeddingVector::from_f64(&sum)
    }
}

impl super::Encoder for ToyEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("text is empty".into()));
        }
        self.encode_tokens(&[text])
    }

    fn encode_image(&self, request: &ImageRequest<'_>) -> Result<EmbeddingVector> {
        match request.content {
            ImageContent::Tokens(img) => self.encode_tokens(&img.tokens),
            ImageContent::Pixels(buf) => self.encode_tokens(&color_tokens(buf)),
        }
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_seed(token: &str) -> u64 {
    let mut h = TOY_SEED;
    for b in token.bytes() {
        h = mix64(h ^ b as u64).wrapping_add(GOLDEN_GAMMA);
    }
    mix64(h ^ token.len() as u64)
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Names the dominant colors of the non-black pixels. Fully black crops map
/// to `["dark"]`.
pub(crate) fn color_tokens(buf: &PixelBuffer) -> Vec<&'static str> {
    let mut counts = [0usize; PALETTE.len()];
    let mut total = 0usize;
    for px in buf.data().chunks_exact(3) {
        if px == [0, 0, 0] {
            continue;
        }
        total += 1;
        let nearest = PALETTE
            .iter()
            .enumerate()
            .min_by_key(|(_, (_, c))| {
                (0..3).map(|i| (px[i] as i32 - c[i] as i32).pow(2)).sum::<i32>()
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        counts[nearest] += 1;
    }
    if total == 0 {
        return vec!["dark"];
    }
    let mut tokens: Vec<&str> = PALETTE
        .iter()
        .zip(counts)
        .filter(|(_, n)| *n as f64 >= COLOR_SHARE * total as f64)
        .map(|((name, _), _)| *name)
        .collect();
    if tokens.is_empty() {
        let best = counts.iter().enumerate().max_by_key(|(i, n)| (**n, usize::MAX - i)).unwrap().0;
        tokens.push(PALETTE[best].0);
    }
    tokens
}
