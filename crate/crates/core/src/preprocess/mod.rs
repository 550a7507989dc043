//! Turns an image plus its panoptic annotation into isolated object crops.
//!
//! For each instance: everything outside the instance mask is blackened, the
//! tight bounding box of the mask is cut out, and the cut is zero-padded to a
//! square with the content centered. Odd padding puts the extra row or column
//! at the bottom or right.

mod annotation;

pub use annotation::{AnnotationFile, InstanceInfo, InstanceMap, PanopticAnnotation};

use serde::{Deserialize, Serialize};

use crate::embedding::ClassLabel;
use crate::error::{Error, Result};

/// Row-major RGB8 pixels.
#[derive(Clone, PartialEq, Eq)]
pub struct PixelBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for PixelBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PixelBuffer({}x{})", self.width, self.height)
    }
}

impl PixelBuffer {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "pixel buffer must be non-empty, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "pixel buffer {width}x{height} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn black(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![0; width as usize * height as usize * 3])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Axis-aligned box in pixel coordinates; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "bounding box must have positive size, got {width}x{height}"
            )));
        }
        Ok(Self {
            x,
            y,
            width,
            height,
        })
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.width as u64 <= width as u64
            && self.y as u64 + self.height as u64 <= height as u64
    }
}

/// Copies the pixels belonging to `instance_id` and blackens the rest.
pub fn apply_mask(image: &PixelBuffer, map: &InstanceMap, instance_id: u32) -> Result<PixelBuffer> {
    check_dims(image, map)?;
    if instance_id == 0 {
        return Err(Error::InvalidInput("instance id 0 means background".into()));
    }
    let mut out = vec![0u8; image.data.len()];
    for (i, &id) in map.ids().iter().enumerate() {
        if id == instance_id {
            out[i * 3..i * 3 + 3].copy_from_slice(&image.data[i * 3..i * 3 + 3]);
        }
    }
    PixelBuffer::new(image.width, image.height, out)
}

/// Smallest box containing every pixel of `instance_id`.
pub fn tight_bbox(map: &InstanceMap, instance_id: u32) -> Result<BoundingBox> {
    let mut acc = BoxAccumulator::default();
    let w = map.width() as usize;
    for (i, &id) in map.ids().iter().enumerate() {
        if id == instance_id {
            acc.add((i % w) as u32, (i / w) as u32);
        }
    }
    acc.finish().ok_or(Error::EmptyMask(instance_id))
}

/// Cuts `bbox` out of `image`.
pub fn crop(image: &PixelBuffer, bbox: BoundingBox) -> Result<PixelBuffer> {
    if !bbox.fits_within(image.width, image.height) {
        return Err(Error::InvalidInput(format!(
            "{bbox:?} does not fit inside a {}x{} image",
            image.width, image.height
        )));
    }
    let row_bytes = bbox.width as usize * 3;
    let mut out = Vec::with_capacity(row_bytes * bbox.height as usize);
    for y in bbox.y..bbox.y + bbox.height {
        let start = image.offset(bbox.x, y);
        out.extend_from_slice(&image.data[start..start + row_bytes]);
    }
    PixelBuffer::new(bbox.width, bbox.height, out)
}

/// Zero-pads to a `max(w, h)` square with the content centered.
pub fn pad_to_square(image: &PixelBuffer) -> PixelBuffer {
    if image.is_square() {
        return image.clone();
    }
    let side = image.width.max(image.height);
    let left = (side - image.width) / 2;
    let top = (side - image.height) / 2;
    let mut out = vec![0u8; side as usize * side as usize * 3];
    let row_bytes = image.width as usize * 3;
    for y in 0..image.height {
        let src = image.offset(0, y);
        let dst = ((y + top) as usize * side as usize + left as usize) * 3;
        out[dst..dst + row_bytes].copy_from_slice(&image.data[src..src + row_bytes]);
    }
    PixelBuffer {
        width: side,
        height: side,
        data: out,
    }
}

/// One isolated object, ready for the image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCrop {
    pub object_index: u32,
    pub instance_id: u32,
    pub class: ClassLabel,
    pub bbox: BoundingBox,
    pub confidence: Option<f32>,
    pub crop: PixelBuffer,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Extraction {
    pub objects: Vec<ObjectCrop>,
    /// Instances declared by the annotation that cover no pixel.
    pub skipped_empty: Vec<u32>,
}

/// Produces one padded crop per non-empty instance, in ascending instance id
/// order. The position in that order is the object index.
pub fn extract_objects(image: &PixelBuffer, ann: &PanopticAnnotation) -> Result<Extraction> {
    check_dims(image, &ann.instance_map)?;
    let mut instances: Vec<&InstanceInfo> = ann.instances.iter().collect();
    instances.sort_by_key(|inst| inst.id);

    // One pass over the map for every box.
    let slot_of: std::collections::HashMap<u32, usize> =
        instances.iter().enumerate().map(|(slot, inst)| (inst.id, slot)).collect();
    let mut boxes = vec![BoxAccumulator::default(); instances.len()];
    let w = ann.instance_map.width() as usize;
    for (i, &id) in ann.instance_map.ids().iter().enumerate() {
        if id == 0 {
            continue;
        }
        if let Some(&slot) = slot_of.get(&id) {
            boxes[slot].add((i % w) as u32, (i / w) as u32);
        }
    }

    let mut out = Extraction::default();
    for (inst, acc) in instances.into_iter().zip(boxes) {
        let Some(bbox) = acc.finish() else {
            log::warn!("instance {} has no pixels; skipping", inst.id);
            out.skipped_empty.push(inst.id);
            continue;
        };
        let masked = masked_crop(image, &ann.instance_map, inst.id, bbox);
        out.objects.push(ObjectCrop {
            object_index: out.objects.len() as u32,
            instance_id: inst.id,
            class: inst.class.clone(),
            bbox,
            confidence: inst.confidence,
            crop: pad_to_square(&masked),
        });
    }
    Ok(out)
}

// Equivalent to crop(apply_mask(..), bbox) without materializing the full
// masked frame.
fn masked_crop(image: &PixelBuffer, map: &InstanceMap, id: u32, bbox: BoundingBox) -> PixelBuffer {
    let mut out = PixelBuffer {
        width: bbox.width,
        height: bbox.height,
        data: vec![0; bbox.width as usize * bbox.height as usize * 3],
    };
    for y in 0..bbox.height {
        for x in 0..bbox.width {
            let (sx, sy) = (bbox.x + x, bbox.y + y);
            if map.get(sx, sy) == id {
                out.set_pixel(x, y, image.pixel(sx, sy));
            }
        }
    }
    out
}

fn check_dims(image: &PixelBuffer, map: &InstanceMap) -> Result<()> {
    if image.width != map.width() || image.height != map.height() {
        return Err(Error::InvalidInput(format!(
            "annotation is {}x{} but image is {}x{}",
            map.width(),
            map.height(),
            image.width,
            image.height
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct BoxAccumulator {
    min_x: u32,
    min_y: u32,
    max_x: u32,
    max_y: u32,
    seen: bool,
}

impl Default for BoxAccumulator {
    fn default() -> Self {
        Self {
            min_x: u32::MAX,
            min_y: u32::MAX,
            max_x: 0,
            max_y: 0,
            seen: false,
        }
    }
}

impl BoxAccumulator {
    #[inline]
    fn add(&mut self, x: u32, y: u32) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
        self.seen = true;
    }

    fn finish(self) -> Option<BoundingBox> {
        self.seen.then(|| BoundingBox {
            x: self.min_x,
            y: self.min_y,
            width: self.max_x - self.min_x + 1,
            height: self.max_y - self.min_y + 1,
        })
    }
}
