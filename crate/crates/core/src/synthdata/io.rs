//! Dataset cache and JSON-lines interchange.
//!
//! Dataset layout, integers little-endian:
//!
//! ```text
//! "HVDS" | u32 version | u64 n | n bytes of spec JSON | u64 scene count
//! then per scene:
//!   3·S·S × f32 image (channel-major) | u64 m | m bytes of annotation JSON {scene_id, seed, objects}
//! ```

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{DatasetSpec, Scene};
use crate::error::{Error, Result};
use crate::loss::{Box4, GroundTruthObject};
use crate::model::Detection;
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"HVDS";
pub const DATASET_VERSION: u32 = 1;

const MAX_BLOCK: u64 = 1 << 24;

/// One scene's boxes, classes and scores. Ground-truth records carry a
/// score of 1 per object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: usize,
    pub boxes: Vec<Box4>,
    pub classes: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SceneRecord {
    pub fn ground_truth(scene: &Scene) -> Self {
        Self {
            scene_id: scene.index,
            boxes: scene.objects.iter().map(|o| o.bbox).collect(),
            classes: scene.objects.iter().map(|o| o.class_id).collect(),
            scores: vec![1.0; scene.objects.len()],
        }
    }

    pub fn detections(scene_id: usize, dets: &[Detection]) -> Self {
        Self {
            scene_id,
            boxes: dets.iter().map(|d| d.bbox).collect(),
            classes: dets.iter().map(|d| d.class_id).collect(),
            scores: dets.iter().map(|d| d.score).collect(),
        }
    }

    pub fn objects(&self) -> Vec<GroundTruthObject> {
        self.boxes.iter().zip(&self.classes).map(|(&bbox, &class_id)| GroundTruthObject { class_id, bbox }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.classes.len() || self.boxes.len() != self.scores.len() {
            return Err(Error::Format(format!(
                "scene {}: {} boxes, {} classes and {} scores",
                self.scene_id,
                self.boxes.len(),
                self.classes.len(),
                self.scores.len()
            )));
        }
        Ok(())
    }
}

/// Annotation block of the dataset file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotation {
    scene_id: usize,
    seed: u64,
    objects: Vec<GroundTruthObject>,
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[SceneRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SceneRecord = serde_json::from_str(&line)?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut out: W, spec: &DatasetSpec, scenes: &[Scene]) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    let js = serde_json::to_vec(spec)?;
    out.write_all(&(js.len() as u64).to_le_bytes())?;
    out.write_all(&js)?;
    out.write_all(&(scenes.len() as u64).to_le_bytes())?;
    for s in scenes {
        let want = 3 * spec.image_size * spec.image_size;
        if s.image.len() != want {
            return Err(Error::Format(format!("scene {} has {} pixels, the spec implies {want}", s.index, s.image.len())));
        }
        let mut buf = Vec::with_capacity(want * 4);
        s.image.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes()));
        out.write_all(&buf)?;
        let ann = serde_json::to_vec(&Annotation { scene_id: s.index, seed: s.seed, objects: s.objects.clone() })?;
        out.write_all(&(ann.len() as u64).to_le_bytes())?;
        out.write_all(&ann)?;
    }
    out.flush()?;
    Ok(())
}

fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn block<R: Read>(r: &mut R, what: &str) -> Result<Vec<u8>> {
    let n = u64_of(r)?;
    if n > MAX_BLOCK {
        return Err(Error::Format(format!("{what} length {n} exceeds {MAX_BLOCK}")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<(DatasetSpec, Vec<Scene>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}")));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let spec: DatasetSpec = serde_json::from_slice(&block(&mut r, "spec")?)?;
    spec.validate()?;
    let count = u64_of(&mut r)?;
    if count > spec.scene_count() as u64 {
        return Err(Error::Format(format!("{count} scenes stored, the spec has {}", spec.scene_count())));
    }
    let s = spec.image_size;
    let mut scenes = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut bytes = vec![0u8; 3 * s * s * 4];
        r.read_exact(&mut bytes)?;
        let px = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let a: Annotation = serde_json::from_slice(&block(&mut r, "annotation")?)?;
        scenes.push(Scene { index: a.scene_id, image: Tensor::new(&[3, s, s], px)?, objects: a.objects, seed: a.seed });
    }
    Ok((spec, scenes))
}
