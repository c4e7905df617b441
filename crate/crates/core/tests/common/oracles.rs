//! Independent reference computations shared by the module suites and the
//! acceptance run.

use machina::task::{self, iou, BBox, Detection, Scene, Shape};
use machina::tensor::Tensor;
use rand::Rng;

use super::rng;

pub fn det(b: BBox, class: Shape, confidence: f64) -> Detection {
    Detection { bbox: b, class, confidence }
}

/// Brute-force AP: for every distinct confidence threshold, re-run greedy
/// matching on the surviving detections and count precision and recall.
pub fn brute_force_map(dets: &[Vec<Detection>], gt: &[Vec<(BBox, Shape)>], thr: f64) -> f64 {
    let mut aps = Vec::new();
    for class in Shape::ALL {
        let num_gt: usize = gt.iter().map(|g| g.iter().filter(|(_, c)| *c == class).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut levels: Vec<f64> = dets.iter().flatten().filter(|d| d.class == class).map(|d| d.confidence).collect();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        let mut curve = vec![];
        for &t in &levels {
            let (mut tp, mut n) = (0, 0);
            for (ds, gs) in dets.iter().zip(gt) {
                let mut kept: Vec<&Detection> = ds.iter().filter(|d| d.class == class && d.confidence >= t).collect();
                kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                let mut free: Vec<BBox> = gs.iter().filter(|(_, c)| *c == class).map(|(b, _)| *b).collect();
                for d in kept {
                    n += 1;
                    let mut best: Option<(usize, f64)> = None;
                    for (j, g) in free.iter().enumerate() {
                        let v = iou(&d.bbox, g);
                        if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                            best = Some((j, v));
                        }
                    }
                    if let Some((j, _)) = best {
                        free.remove(j);
                        tp += 1;
                    }
                }
            }
            curve.push((tp as f64 / num_gt as f64, tp as f64 / n as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..curve.len() {
            let p = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (curve[i].0 - prev) * p;
            prev = curve[i].0;
        }
        aps.push(ap);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

pub fn mixed_fixture(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<(BBox, Shape)>>) {
    let scenes = task::generate_dataset(5, seed).unwrap();
    let gt: Vec<_> = scenes.iter().map(Scene::ground_truth).collect();
    let mut r = rng(seed);
    let dets = gt
        .iter()
        .map(|g| {
            let mut d = Vec::new();
            for &(b, c) in g {
                if r.random_bool(0.8) {
                    let j = r.random_range(-4.0..4.0);
                    let bb = BBox::new(b.x0 + j, b.y0, b.x1 + j, b.y1 + r.random_range(-3.0..3.0));
                    let class = if r.random_bool(0.85) { c } else { Shape::ALL[r.random_range(0..3)] };
                    d.push(det(bb, class, (r.random_range(0..10) as f64) / 10.0));
                }
            }
            for _ in 0..r.random_range(0..3) {
                let x = r.random_range(0.0..50.0);
                let y = r.random_range(0.0..50.0);
                d.push(det(BBox::new(x, y, x + 12.0, y + 12.0), Shape::ALL[r.random_range(0..3)], r.random_range(0.0..1.0)));
            }
            d
        })
        .collect();
    (dets, gt)
}

pub fn bytes_to_image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> i64) -> Tensor {
    let mut px = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                px.push(f(c, y, x).clamp(0, 255) as f64 / 255.0);
            }
        }
    }
    Tensor::new(&[1, 3, h, w], px).unwrap()
}

/// Deterministic 8-bit test pair: a textured pattern and a distorted copy.
pub fn pair(h: usize, w: usize, i: usize) -> (Tensor, Tensor) {
    let base = move |c: usize, y: usize, x: usize| ((x * 3 + y * 5 + c * 50 + (x * y) % 17 + i * 31) % 256) as i64;
    let a = bytes_to_image(h, w, base);
    let b = bytes_to_image(h, w, move |c, y, x| base(c, y, x) + ((x * 7 + y * 11 + c * 3 + i) % 81) as i64 - 40);
    (a, b)
}

pub fn stack(images: &[Tensor]) -> Tensor {
    let s = images[0].shape();
    let data: Vec<f64> = images.iter().flat_map(|t| t.data().to_vec()).collect();
    Tensor::new(&[images.len(), s[1], s[2], s[3]], data).unwrap()
}

/// `(height, width, batch, scales, value)` from TensorFlow's
/// `tf.image.ssim_multiscale` (max value 255) on [`pair`] images, with the
/// weights truncated and renormalised for fewer than five scales.
pub const MS_SSIM_REFERENCES: [(usize, usize, usize, usize, f64); 4] = [
    (176, 176, 1, 5, 0.8942602276802063),
    (161, 170, 1, 5, 0.8943001627922058),
    (96, 128, 1, 4, 0.8803181052207947),
    (64, 64, 2, 3, 0.8369097113609314),
];
