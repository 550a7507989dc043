//! Deterministic synthetic corpora: token-image collections with planted
//! objects, and small pixel scenes with panoptic annotations.

use crate::embedding::ClassLabel;
use crate::encoder::{EmbeddingKey, Encoder, ImageContent, ImageRequest, SyntheticTokenImage};
use crate::error::{Error, Result};
use crate::index::Index;
use crate::preprocess::{BoundingBox, InstanceInfo, InstanceMap, PanopticAnnotation, PixelBuffer};
use crate::scoring::{ContentHash, ImageId, ImageRecord, ObjectRecord};

/// Class vocabulary of street-scene datasets, used when none is configured.
pub const STREET_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Classes that synthetic scenes and corpora draw objects from.
pub const OBJECT_CLASSES: [&str; 8] = [
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "bicycle",
    "motorcycle",
    "traffic sign",
];

const VOCABULARY: &[&str] = &[
    "red", "blue", "green", "white", "black", "yellow", "gray", "silver", "jacket", "hat", "bag",
    "umbrella", "dog", "stroller", "helmet", "backpack", "wheel", "window", "roof", "door",
    "striped", "parked", "moving", "walking", "standing", "running", "small", "large", "old",
    "new", "shiny", "dirty", "left", "right", "front", "rear", "crowd", "child", "adult", "taxi",
    "delivery", "cargo", "sport", "vintage", "electric", "stop", "yield", "speed", "crossing",
    "arrow", "night", "rain", "shadow", "bright",
];

/// splitmix64; small, seedable and identical on every platform.
#[derive(Clone, Debug)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub images: usize,
    /// Objects per image are drawn from `1..=max_objects`.
    pub max_objects: usize,
    /// Images that get one extra object of `planted_class` showing exactly
    /// `planted_token`. No other object mentions that token.
    pub planted: usize,
    pub planted_class: String,
    pub planted_token: String,
    pub with_full_image: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 1000,
            max_objects: 5,
            planted: 0,
            planted_class: "person".into(),
            planted_token: "police".into(),
            with_full_image: false,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub classes: Vec<ClassLabel>,
    pub batch: Vec<(ImageRecord, Vec<ObjectRecord>)>,
    /// Token content of each object, parallel to `batch`.
    pub tokens: Vec<Vec<SyntheticTokenImage>>,
    /// Images holding a planted object, in ascending id order.
    pub planted: Vec<ImageId>,
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SynthConfig, encoder: &dyn Encoder) -> Result<Self> {
        if cfg.max_objects == 0 {
            return Err(Error::InvalidInput("max_objects must be at least 1".into()));
        }
        if cfg.planted > cfg.images {
            return Err(Error::InvalidInput(format!(
                "cannot plant {} objects in {} images",
                cfg.planted, cfg.images
            )));
        }
        let planted_class = ClassLabel::new(cfg.planted_class.clone())?;
        let classes: Vec<ClassLabel> = STREET_CLASSES.iter().map(|c| ClassLabel::new(*c)).collect::<Result<_>>()?;
        if !classes.contains(&planted_class) {
            return Err(Error::InvalidInput(format!("planted class `{planted_class}` is not a street class")));
        }
        let vocabulary: Vec<&str> = VOCABULARY
            .iter()
            .copied()
            .filter(|w| *w != cfg.planted_token)
            .collect();

        let mut rng = SplitMix64::new(cfg.seed);
        let mut order: Vec<usize> = (0..cfg.images).collect();
        for i in 0..cfg.planted {
            let j = i + rng.below((cfg.images - i) as u64) as usize;
            order.swap(i, j);
        }
        let mut is_planted = vec![false; cfg.images];
        for &i in &order[..cfg.planted] {
            is_planted[i] = true;
        }

        let mut out = SyntheticCorpus {
            classes,
            batch: Vec::with_capacity(cfg.images),
            tokens: Vec::with_capacity(cfg.images),
            planted: Vec::with_capacity(cfg.planted),
        };
        for (i, &planted_here) in is_planted.iter().enumerate() {
            let image_id = ImageId::new(format!("img{i:06}"));
            let n = 1 + rng.below(cfg.max_objects as u64) as usize;
            let mut objs: Vec<(ClassLabel, SyntheticTokenImage)> = (0..n)
                .map(|_| {
                    let class = OBJECT_CLASSES[rng.below(OBJECT_CLASSES.len() as u64) as usize];
                    let mut tokens = vec![class.to_owned()];
                    for _ in 0..2 {
                        tokens.push(vocabulary[rng.below(vocabulary.len() as u64) as usize].to_owned());
                    }
                    (ClassLabel::new(class).expect("static class"), SyntheticTokenImage::new(tokens))
                })
                .collect();
            if planted_here {
                let at = rng.below(objs.len() as u64 + 1) as usize;
                objs.insert(
                    at,
                    (planted_class.clone(), SyntheticTokenImage::new([cfg.planted_token.clone()])),
                );
                out.planted.push(image_id.clone());
            }

            let mut records = Vec::with_capacity(objs.len());
            for (j, (class, tokens)) in objs.iter().enumerate() {
                let embedding = encoder.encode_image(&ImageRequest {
                    key: EmbeddingKey::Object {
                        image_id: image_id.clone(),
                        object_index: j as u32,
                    },
                    content: ImageContent::Tokens(tokens),
                })?;
                let w = 8 + rng.below(200) as u32;
                let h = 8 + rng.below(200) as u32;
                records.push(ObjectRecord {
                    image_id: image_id.clone(),
                    object_index: j as u32,
                    class: class.clone(),
                    bbox: BoundingBox::new(rng.below(1800) as u32, rng.below(800) as u32, w, h)?,
                    confidence: Some(0.5 + 0.5 * rng.unit() as f32),
                    embedding,
                });
            }
            let full_image_embedding = if cfg.with_full_image {
                let scene = SyntheticTokenImage::new(objs.iter().flat_map(|(_, t)| t.tokens.iter().cloned()));
                Some(encoder.encode_image(&ImageRequest {
                    key: EmbeddingKey::Full {
                        image_id: image_id.clone(),
                    },
                    content: ImageContent::Tokens(&scene),
                })?)
            } else {
                None
            };
            let image = ImageRecord {
                image_id: image_id.clone(),
                source_uri: format!("synth://{}/{image_id}", cfg.seed),
                content_hash: ContentHash::of(format!("{}:{image_id}", cfg.seed).as_bytes()),
                object_count: records.len() as u32,
                full_image_embedding,
            };
            out.batch.push((image, records));
            out.tokens.push(objs.into_iter().map(|(_, t)| t).collect());
        }
        out.planted.sort();
        Ok(out)
    }

    pub fn empty_index(&self, encoder: &dyn Encoder) -> Result<Index> {
        Index::new(encoder.descriptor().clone(), self.classes.clone())
    }

    pub fn object_count(&self) -> usize {
        self.batch.iter().map(|(_, o)| o.len()).sum()
    }
}

const SCENE_COLORS: [[u8; 3]; 8] = [
    [200, 30, 30],
    [40, 70, 210],
    [40, 160, 60],
    [230, 210, 40],
    [240, 240, 240],
    [130, 50, 170],
    [235, 130, 20],
    [128, 128, 128],
];

/// A random street-like scene: a gradient background with `instances`
/// overlapping filled rectangles and ellipses. Later shapes occlude earlier
/// ones, so some instances may end up with no visible pixel.
pub fn random_scene(width: u32, height: u32, instances: u32, seed: u64) -> Result<(PixelBuffer, PanopticAnnotation)> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("scene must be at least 1x1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut image = PixelBuffer::black(width, height)?;
    for y in 0..height {
        for x in 0..width {
            let g = (40 + 60 * y / height.max(1)) as u8;
            let noise = (rng.below(16)) as u8;
            image.set_pixel(x, y, [g / 2 + noise, g / 2 + noise, g + noise]);
        }
    }
    let mut ids = vec![0u32; (width * height) as usize];
    let mut infos = Vec::new();
    for id in 1..=instances {
        let w = 1 + rng.below(u64::from(width.div_ceil(2))) as u32;
        let h = 1 + rng.below(u64::from(height.div_ceil(2))) as u32;
        let x0 = rng.below(u64::from(width - w + 1)) as u32;
        let y0 = rng.below(u64::from(height - h + 1)) as u32;
        let ellipse = rng.below(2) == 1;
        let color = SCENE_COLORS[rng.below(SCENE_COLORS.len() as u64) as usize];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if ellipse {
                    let dx = (f64::from(x - x0) + 0.5) / f64::from(w) - 0.5;
                    let dy = (f64::from(y - y0) + 0.5) / f64::from(h) - 0.5;
                    if dx * dx + dy * dy > 0.25 {
                        continue;
                    }
                }
                ids[(y * width + x) as usize] = id;
                image.set_pixel(x, y, color);
            }
        }
        let class = OBJECT_CLASSES[rng.below(OBJECT_CLASSES.len() as u64) as usize];
        infos.push(InstanceInfo {
            id,
            class: ClassLabel::new(class)?,
            confidence: Some((0.5 + 0.5 * rng.unit()) as f32),
        });
    }
    let ann = PanopticAnnotation::new(InstanceMap::new(width, height, ids)?, infos)?;
    Ok((image, ann))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyEncoder;

    #[test]
    fn generation_is_deterministic() {
        let enc = ToyEncoder::new(32).unwrap();
        let cfg = SynthConfig {
            images: 50,
            planted: 5,
            ..SynthConfig::default()
        };
        let a = SyntheticCorpus::generate(&cfg, &enc).unwrap();
        let b = SyntheticCorpus::generate(&cfg, &enc).unwrap();
        assert_eq!(a.batch, b.batch);
        assert_eq!(a.planted.len(), 5);
        assert_eq!(a.planted, b.planted);
    }

    #[test]
    fn planted_token_appears_only_in_planted_images() {
        let enc = ToyEncoder::new(32).unwrap();
        let cfg = SynthConfig {
            images: 200,
            planted: 7,
            ..SynthConfig::default()
        };
        let c = SyntheticCorpus::generate(&cfg, &enc).unwrap();
        for ((image, _), tokens) in c.batch.iter().zip(&c.tokens) {
            let has = tokens.iter().any(|t| t.tokens.iter().any(|w| w == "police"));
            assert_eq!(has, c.planted.contains(&image.image_id));
        }
    }

    #[test]
    fn scene_is_consistent() {
        let (img, ann) = random_scene(40, 30, 6, 3).unwrap();
        assert_eq!((img.width(), img.height()), (40, 30));
        assert_eq!(ann.instances.len(), 6);
        assert!(ann.instance_map.ids().iter().all(|&id| id <= 6));
        assert_eq!(random_scene(40, 30, 6, 3).unwrap().0, img);
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = SplitMix64::new(1);
        assert!((0..1000).all(|_| r.below(7) < 7));
        assert!((0..1000).all(|_| (0.0..1.0).contains(&r.unit())));
    }
}
