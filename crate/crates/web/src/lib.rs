//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The page drives three operations: cutting a random panoptic scene into
//! padded object crops, searching a synthetic corpus by class and text, and
//! turning a string of verdicts into a cumulative true-positive curve. Every
//! exported function is a thin wrapper over a plain Rust function so the
//! logic is testable without a browser.

use std::collections::HashMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use objseek_core::encoder::ToyEncoder;
use objseek_core::eval::{cumulative_tp_from_verdicts, Verdict};
use objseek_core::preprocess::{extract_objects, BoundingBox, PixelBuffer};
use objseek_core::retrieval::query_id;
use objseek_core::synth::{random_scene, SynthConfig, SyntheticCorpus};
use objseek_core::{run_query, ClassLabel, ImageId, Index, Query, SearchMode};

/// Embedding width used by the demo corpus.
pub const DEMO_DIM: usize = 128;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(buf: &PixelBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(buf.data().len() / 3 * 4);
    for px in buf.data().chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    out
}

/// Distinct, stable colour per instance id; id 0 is black.
pub fn instance_color(id: u32) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    let h = id.wrapping_mul(0x9E37_79B9);
    [64 + (h >> 24) as u8 % 192, 64 + (h >> 16) as u8 % 192, 64 + (h >> 8) as u8 % 192]
}

#[derive(Clone, Debug, Serialize)]
pub struct SceneObject {
    pub object_index: u32,
    pub instance_id: u32,
    pub class: String,
    pub bbox: BoundingBox,
    pub side: u32,
    #[serde(skip)]
    pub crop_rgba: Vec<u8>,
}

/// A random scene cut into padded object crops.
#[wasm_bindgen]
pub struct Scene {
    width: u32,
    height: u32,
    image_rgba: Vec<u8>,
    mask_rgba: Vec<u8>,
    objects: Vec<SceneObject>,
    skipped_empty: usize,
}

impl Scene {
    pub fn generate(width: u32, height: u32, instances: u32, seed: u64) -> Result<Scene, String> {
        if width > 1024 || height > 1024 || instances > 64 {
            return Err("scene limited to 1024x1024 and 64 instances".into());
        }
        let (image, ann) = random_scene(width, height, instances, seed).map_err(|e| e.to_string())?;
        let extraction = extract_objects(&image, &ann).map_err(|e| e.to_string())?;
        let mut mask_rgba = Vec::with_capacity((width * height * 4) as usize);
        for &id in ann.instance_map.ids() {
            mask_rgba.extend_from_slice(&instance_color(id));
            mask_rgba.push(255);
        }
        let objects = extraction
            .objects
            .iter()
            .map(|o| SceneObject {
                object_index: o.object_index,
                instance_id: o.instance_id,
                class: o.class.as_str().to_owned(),
                bbox: o.bbox,
                side: o.crop.width(),
                crop_rgba: rgba(&o.crop),
            })
            .collect();
        Ok(Scene {
            width,
            height,
            image_rgba: rgba(&image),
            mask_rgba,
            objects,
            skipped_empty: extraction.skipped_empty.len(),
        })
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(width: u32, height: u32, instances: u32, seed: u32) -> Result<Scene, JsError> {
        Scene::generate(width, height, instances, u64::from(seed)).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[wasm_bindgen(getter, js_name = skippedEmpty)]
    pub fn skipped_empty(&self) -> usize {
        self.skipped_empty
    }

    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self) -> Vec<u8> {
        self.image_rgba.clone()
    }

    #[wasm_bindgen(js_name = maskRgba)]
    pub fn mask_rgba(&self) -> Vec<u8> {
        self.mask_rgba.clone()
    }

    /// `[{object_index, instance_id, class, bbox, side}]` as JSON.
    #[wasm_bindgen(js_name = objectsJson)]
    pub fn objects_json(&self) -> String {
        serde_json::to_string(&self.objects).unwrap_or_else(|_| "[]".into())
    }

    #[wasm_bindgen(js_name = cropRgba)]
    pub fn crop_rgba(&self, object_index: usize) -> Vec<u8> {
        self.objects
            .get(object_index)
            .map(|o| o.crop_rgba.clone())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoHit {
    pub rank: usize,
    pub image_id: ImageId,
    pub score: f32,
    pub best_object_index: Option<u32>,
    /// Tokens of the best object, or of the whole image in full mode.
    pub tokens: Vec<String>,
    pub planted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoResults {
    pub query_id: String,
    pub hits: Vec<DemoHit>,
}

/// An in-memory index over a synthetic token corpus with planted objects.
#[wasm_bindgen]
pub struct SearchDemo {
    corpus: SyntheticCorpus,
    ordinals: HashMap<ImageId, usize>,
    index: Index,
    encoder: ToyEncoder,
}

impl SearchDemo {
    pub fn build(images: usize, planted: usize, seed: u64) -> Result<SearchDemo, String> {
        if images == 0 || images > 20_000 {
            return Err("corpus size must be between 1 and 20000 images".into());
        }
        let encoder = ToyEncoder::new(DEMO_DIM).map_err(|e| e.to_string())?;
        let cfg = SynthConfig {
            images,
            planted: planted.min(images),
            with_full_image: true,
            seed,
            ..SynthConfig::default()
        };
        let corpus = SyntheticCorpus::generate(&cfg, &encoder).map_err(|e| e.to_string())?;
        let mut index = corpus.empty_index(&encoder).map_err(|e| e.to_string())?;
        index.ingest(corpus.batch.clone()).map_err(|e| e.to_string())?;
        let ordinals = corpus
            .batch
            .iter()
            .enumerate()
            .map(|(i, (img, _))| (img.image_id.clone(), i))
            .collect();
        Ok(SearchDemo {
            corpus,
            ordinals,
            index,
            encoder,
        })
    }

    pub fn run(&self, class: &str, text: &str, k: usize, mode: &str) -> Result<DemoResults, String> {
        let mode: SearchMode = mode.parse().map_err(|e: objseek_core::Error| e.to_string())?;
        let label = ClassLabel::new(class).map_err(|e| e.to_string())?;
        let query = Query::new(label, text).map_err(|e| e.to_string())?;
        let outcome = run_query(&self.index, &self.encoder, &query, k, mode).map_err(|e| e.to_string())?;
        let hits = outcome
            .results
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let per_object = &self.corpus.tokens[self.ordinals[&r.image_id]];
                let tokens = match r.best_object_index {
                    Some(j) => per_object.get(j as usize).map(|t| t.tokens.clone()).unwrap_or_default(),
                    None => {
                        let mut all: Vec<String> = per_object.iter().flat_map(|t| t.tokens.clone()).collect();
                        all.sort();
                        all.dedup();
                        all
                    }
                };
                DemoHit {
                    rank: i + 1,
                    planted: self.corpus.planted.binary_search(&r.image_id).is_ok(),
                    image_id: r.image_id,
                    score: r.score,
                    best_object_index: r.best_object_index,
                    tokens,
                }
            })
            .collect();
        Ok(DemoResults {
            query_id: query_id(class, text, mode),
            hits,
        })
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn corpus(&self) -> &SyntheticCorpus {
        &self.corpus
    }
}

#[wasm_bindgen]
impl SearchDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(images: usize, planted: usize, seed: u32) -> Result<SearchDemo, JsError> {
        SearchDemo::build(images, planted, u64::from(seed)).map_err(js_err)
    }

    /// `[{class, rows}]` as JSON.
    #[wasm_bindgen(js_name = classesJson)]
    pub fn classes_json(&self) -> String {
        serde_json::to_string(&self.index.stats().classes).unwrap_or_else(|_| "[]".into())
    }

    /// `{query_id, hits}` as JSON; errors carry the message, including the
    /// list of valid classes for an unknown class.
    pub fn search(&self, class: &str, text: &str, k: usize, mode: &str) -> Result<String, JsError> {
        let results = self.run(class, text, k, mode).map_err(js_err)?;
        serde_json::to_string(&results).map_err(js_err)
    }

    #[wasm_bindgen(getter, js_name = objectCount)]
    pub fn object_count(&self) -> usize {
        self.corpus.object_count()
    }
}

/// Parses verdict characters: `T`/`+` true positive, `F`/`-` false
/// positive, `?`/`.` unjudged. Whitespace and commas are ignored.
pub fn parse_verdicts(s: &str) -> Result<Vec<Verdict>, String> {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c.to_ascii_uppercase() {
            'T' | '+' => Ok(Verdict::TruePositive),
            'F' | '-' => Ok(Verdict::FalsePositive),
            '?' | '.' => Ok(Verdict::Unjudged),
            other => Err(format!("unknown verdict `{other}` (use T, F or ?)")),
        })
        .collect()
}

/// Cumulative true positives over the first `n` ranks of `verdicts`.
#[wasm_bindgen(js_name = cumulativeTp)]
pub fn cumulative_tp(verdicts: &str, n: usize) -> Result<Vec<u32>, JsError> {
    let v = parse_verdicts(verdicts).map_err(js_err)?;
    Ok(cumulative_tp_from_verdicts(&v, n))
}
