use std::collections::HashSet;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::embedding::ClassLabel;
use crate::error::{Error, Result};

/// Per-pixel instance ids, row-major; 0 is "no instance".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    width: u32,
    height: u32,
    ids: Vec<u32>,
}

impl InstanceMap {
    pub fn new(width: u32, height: u32, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "instance map {width}x{height} needs {} ids, got {}",
                width as usize * height as usize,
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.ids[y as usize * self.width as usize + x as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: u32,
    pub class: ClassLabel,
    #[serde(default)]
    pub confidence: Option<f32>,
}

/// Segmentation output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticAnnotation {
    pub instance_map: InstanceMap,
    pub instances: Vec<InstanceInfo>,
}

impl PanopticAnnotation {
    /// Checks that instance ids are positive and unique, and that every
    /// nonzero id in the map is declared.
    pub fn new(instance_map: InstanceMap, instances: Vec<InstanceInfo>) -> Result<Self> {
        let mut declared = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if inst.id == 0 {
                return Err(Error::InvalidInput("instance id 0 is reserved".into()));
            }
            if !declared.insert(inst.id) {
                return Err(Error::InvalidInput(format!("instance id {} declared twice", inst.id)));
            }
            if let Some(c) = inst.confidence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::InvalidInput(format!(
                        "instance {} has confidence {c} outside [0, 1]",
                        inst.id
                    )));
                }
            }
        }
        let mut checked = HashSet::new();
        for &id in instance_map.ids() {
            if id != 0 && checked.insert(id) && !declared.contains(&id) {
                return Err(Error::InvalidInput(format!(
                    "instance map uses undeclared id {id}"
                )));
            }
        }
        Ok(Self {
            instance_map,
            instances,
        })
    }
}

/// On-disk JSON form: one document per image with the instance map as
/// base64 of little-endian u32 ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceInfo>,
    pub instance_map: String,
}

impl AnnotationFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn from_annotation(image_id: impl Into<String>, ann: &PanopticAnnotation) -> Self {
        let mut raw = Vec::with_capacity(ann.instance_map.ids().len() * 4);
        for id in ann.instance_map.ids() {
            raw.extend_from_slice(&id.to_le_bytes());
        }
        Self {
            image_id: image_id.into(),
            width: ann.instance_map.width(),
            height: ann.instance_map.height(),
            instances: ann.instances.clone(),
            instance_map: base64::engine::general_purpose::STANDARD.encode(raw),
        }
    }

    pub fn to_annotation(&self) -> Result<PanopticAnnotation> {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(&self.instance_map)
            .map_err(|e| Error::InvalidInput(format!("instance_map is not base64: {e}")))?;
        if raw.len() % 4 != 0 {
            return Err(Error::InvalidInput("instance_map length is not a multiple of 4".into()));
        }
        let ids = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let map = InstanceMap::new(self.width, self.height, ids)?;
        PanopticAnnotation::new(map, self.instances.clone())
    }
}
