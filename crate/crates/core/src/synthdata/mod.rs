//! Seeded synthetic detection scenes: colored rectangles, ellipses and
//! triangles on a noisy gray background, with tight normalized boxes.
//!
//! Scene `i` depends only on `(seed, i)` through
//! [`XorShift64Star::for_stream`], so any subset can be regenerated without
//! the rest. Indices `0..train_scenes` form the training split and the next
//! `eval_scenes` indices the held-out split.

mod ap;
mod io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{Box4, GroundTruthObject};
use crate::numerics::rng::XorShift64Star;
use crate::numerics::Tensor;

pub use ap::{average_precision, evaluate_ap, evaluate_ap_per_class, ClassAp};
pub use io::{read_dataset, read_jsonl, write_dataset, write_jsonl, SceneRecord, DATASET_MAGIC, DATASET_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    /// Normalized box side range.
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_scenes: 2000,
            eval_scenes: 200,
            min_objects: 1,
            max_objects: 4,
            num_classes: 3,
            min_size: 0.1,
            max_size: 0.5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 {
            return bad("data.image_size must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("data.num_classes must be at least 1".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("data object range {}..={} must satisfy 1 <= min <= max", self.min_objects, self.max_objects));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < 1.0) {
            return bad(format!("data size range [{}, {}] must lie inside (0, 1)", self.min_size, self.max_size));
        }
        Ok(())
    }

    pub fn scene_count(&self) -> usize {
        self.train_scenes + self.eval_scenes
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.train_scenes
    }

    pub fn eval_indices(&self) -> std::ops::Range<usize> {
        self.train_scenes..self.scene_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: usize,
    /// `[3, S, S]`, values in `[0, 1]` and exactly representable as `f32`.
    pub image: Tensor,
    pub objects: Vec<GroundTruthObject>,
    /// Stream seed the scene was drawn from.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

fn shape_of(class_id: usize) -> Shape {
    match class_id % 3 {
        0 => Shape::Rectangle,
        1 => Shape::Ellipse,
        _ => Shape::Triangle,
    }
}

/// Mean color of a class: hues evenly spaced around the wheel.
pub fn class_color(class_id: usize, num_classes: usize) -> [f64; 3] {
    let hue = class_id as f64 / num_classes as f64 * 6.0;
    let (s, v) = (0.85, 0.9);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn inside(shape: Shape, b: &Box4, x: f64, y: f64) -> bool {
    let (dx, dy) = ((x - b[0]) / (b[2] / 2.0), (y - b[1]) / (b[3] / 2.0));
    match shape {
        Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        // Apex at the top center, base along the bottom edge.
        Shape::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
    }
}

fn to_f32(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

/// Scene `index` of `spec`. Panics if `index >= spec.scene_count()`.
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Scene {
    assert!(index < spec.scene_count(), "scene {index} is outside the {} scenes of the spec", spec.scene_count());
    let s = spec.image_size;
    let mut rng = XorShift64Star::for_stream(spec.seed, index as u64);
    let seed = rng.next_u64();

    let base = rng.uniform(0.25, 0.55);
    let mut px = vec![0.0; 3 * s * s];
    for v in px.iter_mut() {
        *v = base + rng.uniform(-0.1, 0.1);
    }

    let n = rng.range_inclusive(spec.min_objects, spec.max_objects);
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.range_inclusive(0, spec.num_classes - 1);
        let w = rng.uniform(spec.min_size, spec.max_size);
        let h = rng.uniform(spec.min_size, spec.max_size);
        let x0 = rng.uniform(0.0, 1.0 - w);
        let y0 = rng.uniform(0.0, 1.0 - h);
        let bbox = [x0 + w / 2.0, y0 + h / 2.0, w, h];
        let mean = class_color(class_id, spec.num_classes);
        let color = mean.map(|m| m + rng.uniform(-0.08, 0.08));
        let shape = shape_of(class_id);
        for i in 0..s {
            let y = (i as f64 + 0.5) / s as f64;
            for j in 0..s {
                let x = (j as f64 + 0.5) / s as f64;
                if inside(shape, &bbox, x, y) {
                    for (c, &v) in color.iter().enumerate() {
                        px[c * s * s + i * s + j] = v;
                    }
                }
            }
        }
        objects.push(GroundTruthObject { class_id, bbox });
    }
    px.iter_mut().for_each(|v| *v = to_f32(*v));
    Scene { index, image: Tensor::from_parts(vec![3, s, s], px), objects, seed }
}

/// Scenes for `indices`, generated in parallel on the current rayon pool.
pub fn generate_scenes(spec: &DatasetSpec, indices: std::ops::Range<usize>) -> Vec<Scene> {
    indices.into_par_iter().map(|i| generate_scene(spec, i)).collect()
}

/// Sizes the global rayon pool; `0` keeps the rayon default. Only the first
/// call in a process takes effect.
pub fn configure_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}
