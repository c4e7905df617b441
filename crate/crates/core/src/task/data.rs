use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{BBox, Shape};
use crate::error::{Error, Result};
use crate::image::{load_ppm, save_ppm};
use crate::tensor::Tensor;

pub const SCENE_SIZE: usize = 64;
pub const MIN_OBJECT: usize = 8;
pub const MAX_OBJECT: usize = 28;
pub const ANNOTATIONS_FILE: &str = "annotations.txt";

/// One synthetic detection sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `1 x 3 x 64 x 64`, values on the 8-bit grid.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub labels: Vec<Shape>,
    pub seed: u64,
}

impl Scene {
    pub fn ground_truth(&self) -> Vec<(BBox, Shape)> {
        self.boxes.iter().copied().zip(self.labels.iter().copied()).collect()
    }
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut x = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn snap(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Textured background: a flat base colour, a sinusoidal grating and fine
/// noise. Returns the image and the base colour.
fn render_background(rng: &mut ChaCha8Rng) -> (Vec<f64>, [f64; 3]) {
    let n = SCENE_SIZE;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.random_range(0.15..0.6);
    let amp: f64 = rng.random_range(0.02..0.07);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let wave = amp * ((x as f64 * ca + y as f64 * sa) * freq + phase).sin();
            for (c, b) in base.iter().enumerate() {
                let noise = rng.random_range(-0.03..0.03);
                img[c * n * n + y * n + x] = snap(b + wave + noise);
            }
        }
    }
    (img, base)
}

/// Background of the scene with this seed, without objects.
pub fn background(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (img, _) = render_background(&mut rng);
    Tensor::from_parts(vec![1, 3, SCENE_SIZE, SCENE_SIZE], img)
}

/// Pixels covered by a shape whose `size x size` footprint starts at
/// `(left, top)`; sampled at pixel centres.
fn covers(shape: Shape, left: usize, top: usize, size: usize, x: usize, y: usize) -> bool {
    let (px, py) = (x as f64 + 0.5 - left as f64, y as f64 + 0.5 - top as f64);
    let s = size as f64;
    if !(0.0..s).contains(&px) || !(0.0..s).contains(&py) {
        return false;
    }
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = s / 2.0;
            (px - r).powi(2) + (py - r).powi(2) <= r * r
        }
        Shape::Triangle => (px - s / 2.0).abs() <= py / 2.0,
    }
}

fn tight_box(mask: &[bool]) -> BBox {
    let n = SCENE_SIZE;
    let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    // Keep at least one pixel of background between objects.
    a.x0 < b.x1 + 1.0 && b.x0 < a.x1 + 1.0 && a.y0 < b.y1 + 1.0 && b.y0 < a.y1 + 1.0
}

pub fn generate_scene(seed: u64) -> Scene {
    let n = SCENE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut img, base) = render_background(&mut rng);
    let count = rng.random_range(1..=3usize);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels = Vec::new();
    let mut cells = Vec::new();
    let mut attempts = 0;
    while boxes.len() < count && attempts < 200 {
        attempts += 1;
        let shape = Shape::ALL[rng.random_range(0..3)];
        let size = rng.random_range(MIN_OBJECT..=MAX_OBJECT);
        let left = rng.random_range(0..=n - size);
        let top = rng.random_range(0..=n - size);
        let colour: [f64; 3] = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let diff: f64 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
            if diff >= 0.25 && c.iter().zip(&base).any(|(a, b)| (a - b).abs() >= 0.3) {
                break c;
            }
        };
        let mask: Vec<bool> = (0..n * n).map(|i| covers(shape, left, top, size, i % n, i / n)).collect();
        let bbox = tight_box(&mask);
        let cell = bbox.center_cell();
        if boxes.iter().any(|b| overlaps(b, &bbox)) || cells.contains(&cell) {
            continue;
        }
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            for (c, v) in colour.iter().enumerate() {
                img[c * n * n + i] = snap(*v);
            }
        }
        boxes.push(bbox);
        labels.push(shape);
        cells.push(cell);
    }
    Scene {
        image: Tensor::from_parts(vec![1, 3, n, n], img),
        boxes,
        labels,
        seed,
    }
}

/// `n` scenes, reproducible from `seed`; generated in parallel.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    Ok((0..n).into_par_iter().map(|i| generate_scene(scene_seed(seed, i))).collect())
}

fn file_name(index: usize) -> String {
    format!("scene_{index:05}.ppm")
}

/// Writes images plus `annotations.txt` (format in `book/src/formats/dataset.md`).
pub fn save_dataset(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut ann = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let name = file_name(i);
        save_ppm(dir.join(&name), &s.image)?;
        for (b, l) in s.boxes.iter().zip(&s.labels) {
            ann.push_str(&format!("{name} {} {} {} {} {}\n", b.x0, b.y0, b.x1, b.y1, l.id()));
        }
    }
    fs::write(dir.join(ANNOTATIONS_FILE), ann)?;
    Ok(())
}

/// Reads a dataset directory. Scene seeds are not stored and come back as 0.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(ANNOTATIONS_FILE))?;
    let mut objects: BTreeMap<String, (Vec<BBox>, Vec<Shape>)> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Config(format!("{ANNOTATIONS_FILE} line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, x0, y0, x1, y1, class] = fields[..] else {
            return Err(bad("expected `filename x0 y0 x1 y1 class_id`"));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad coordinate {s:?}")));
        let bbox = BBox::new(num(x0)?, num(y0)?, num(x1)?, num(y1)?);
        if !(bbox.x1 > bbox.x0 && bbox.y1 > bbox.y0) {
            return Err(bad("box is not ordered"));
        }
        let shape = class
            .parse::<u8>()
            .ok()
            .and_then(Shape::from_id)
            .ok_or_else(|| bad(&format!("bad class id {class:?}")))?;
        let entry = objects.entry(name.to_string()).or_default();
        entry.0.push(bbox);
        entry.1.push(shape);
    }
    objects
        .into_iter()
        .map(|(name, (boxes, labels))| {
            Ok(Scene {
                image: load_ppm(dir.join(&name))?,
                boxes,
                labels,
                seed: 0,
            })
        })
        .collect()
}

/// Stacks scene images into one batch.
pub fn batch_images(scenes: &[&Scene]) -> Result<Tensor> {
    let items: Vec<Tensor> = scenes.iter().map(|s| s.image.clone()).collect();
    Tensor::stack_batch(&items)
}
