use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{Scene, SCENE_SIZE};
use super::{BBox, Detection, Shape};
use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::{CustomOp, Graph, Group, ParameterSet, Tensor, Var};

/// Cells per side of the prediction grid.
pub const GRID: usize = 8;
/// Cell side in pixels.
pub(crate) const CELL: f64 = (SCENE_SIZE / GRID) as f64;
/// Objectness logit, 4 box offsets, 3 class logits.
pub const HEAD_CHANNELS: usize = 8;
/// Minimum confidence of a reported detection.
pub const CONFIDENCE_THRESHOLD: f64 = 0.3;
const LEAK: f64 = 0.1;
const CELLS: usize = GRID * GRID;

/// `(name, out, in, k, stride)` of each layer.
const LAYERS: [(&str, usize, usize, usize, usize); 5] = [
    ("det.conv0", 16, 3, 3, 2),
    ("det.conv1", 32, 16, 3, 2),
    ("det.conv2", 32, 32, 3, 2),
    ("det.conv3", 32, 32, 3, 1),
    ("det.head", HEAD_CHANNELS, 32, 1, 1),
];

pub fn init_detector_params(seed: u64) -> Result<ParameterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for (name, out, inp, k, _) in LAYERS {
        let head = name == "det.head";
        let bound = if head { 0.01 } else { (6.0 / (inp * k * k) as f64).sqrt() };
        let w = Tensor::from_fn(&[out, inp, k, k], |_| rng.random_range(-bound..bound));
        p.insert(format!("{name}.w"), Group::Task, w)?;
        let mut b = Tensor::zeros(&[out]);
        if head {
            // Start objectness near the prior of one object in 32 cells.
            b.data_mut()[0] = -(31.0f64).ln();
        }
        p.insert(format!("{name}.b"), Group::Task, b)?;
    }
    Ok(p)
}

/// Grid predictions `N x 8 x 8 x 8` (channels: objectness, tx, ty, tw, th,
/// three class logits).
pub fn detector_forward(g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
    match *g.shape(x) {
        [_, 3, h, w] if h == SCENE_SIZE && w == SCENE_SIZE => {}
        ref s => {
            return Err(Error::shape(format!(
                "detector expects N x 3 x {SCENE_SIZE} x {SCENE_SIZE} images, got {s:?}"
            )))
        }
    }
    let mut t = x;
    for (name, _, _, k, stride) in LAYERS {
        let w = g.param(params, &format!("{name}.w"))?;
        let b = g.param(params, &format!("{name}.b"))?;
        t = g.conv2d(t, w, b, stride, k / 2)?;
        if name != "det.head" {
            t = g.leaky_relu(t, LEAK)?;
        }
    }
    Ok(t)
}

/// Per-cell regression targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorTargets {
    n: usize,
    /// `Some((tx, ty, tw, th), class)` on positive cells.
    cells: Vec<Option<([f64; 4], usize)>>,
}

impl DetectorTargets {
    pub fn from_scenes(scenes: &[&Scene]) -> Result<Self> {
        let mut cells = vec![None; scenes.len() * CELLS];
        for (i, s) in scenes.iter().enumerate() {
            if s.boxes.is_empty() {
                return Err(Error::Contract(format!("scene {i} has no objects")));
            }
            for (b, l) in s.boxes.iter().zip(&s.labels) {
                let (row, col) = b.center_cell();
                let (cx, cy) = b.center();
                let t = [
                    cx / CELL - col as f64,
                    cy / CELL - row as f64,
                    (b.width() / CELL).ln(),
                    (b.height() / CELL).ln(),
                ];
                cells[i * CELLS + row * GRID + col] = Some((t, usize::from(l.id())));
            }
        }
        Ok(Self { n: scenes.len(), cells })
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().flatten().count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskLoss {
    pub objectness: f64,
    pub box_regression: f64,
    pub classification: f64,
    pub total: f64,
}

impl TaskLoss {
    /// Reads the components of a [`detection_loss`] node.
    pub fn from_components(t: &Tensor) -> Result<Self> {
        match *t.data() {
            [o, b, c] => Ok(Self {
                objectness: o,
                box_regression: b,
                classification: c,
                total: o + b + c,
            }),
            _ => Err(Error::shape(format!("expected 3 loss components, got {:?}", t.shape()))),
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

fn at(i: usize, ch: usize, cell: usize) -> usize {
    (i * HEAD_CHANNELS + ch) * CELLS + cell
}

/// Loss terms and, optionally, their gradient with respect to `pred`.
fn loss_terms(pred: &Tensor, t: &DetectorTargets, mut grad: Option<(&mut [f64], [f64; 3])>) -> [f64; 3] {
    let p = pred.data();
    let inv_n = 1.0 / t.n as f64;
    let mut terms = [0.0; 3];
    for i in 0..t.n {
        for cell in 0..CELLS {
            let target = t.cells[i * CELLS + cell];
            let z = p[at(i, 0, cell)];
            let y = if target.is_some() { 1.0 } else { 0.0 };
            terms[0] += softplus(z) - y * z;
            if let Some((g, w)) = grad.as_mut() {
                g[at(i, 0, cell)] = w[0] * inv_n * (sigmoid(z) - y);
            }
            let Some((boxt, class)) = target else { continue };
            for (j, bt) in boxt.iter().enumerate() {
                let (l, d) = smooth_l1(p[at(i, 1 + j, cell)] - bt);
                terms[1] += l;
                if let Some((g, w)) = grad.as_mut() {
                    g[at(i, 1 + j, cell)] = w[1] * inv_n * d;
                }
            }
            let logits: [f64; 3] = std::array::from_fn(|k| p[at(i, 5 + k, cell)]);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            terms[2] += m + z.ln() - logits[class];
            if let Some((g, w)) = grad.as_mut() {
                for k in 0..3 {
                    let soft = (logits[k] - m).exp() / z;
                    let onehot = if k == class { 1.0 } else { 0.0 };
                    g[at(i, 5 + k, cell)] = w[2] * inv_n * (soft - onehot);
                }
            }
        }
    }
    terms.map(|v| v * inv_n)
}

#[derive(Debug)]
struct DetectionLossOp {
    targets: DetectorTargets,
}

impl CustomOp for DetectionLossOp {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let pred = inputs[0];
        let w: [f64; 3] = grad.data().try_into().expect("three components");
        let mut g = vec![0.0; pred.numel()];
        loss_terms(pred, &self.targets, Some((&mut g, w)));
        Ok(vec![Some(Tensor::from_parts(pred.shape().to_vec(), g))])
    }
}

/// Detection loss components `[objectness, box, class]`, each summed over
/// cells and averaged over the batch. Sum the node for the total.
pub fn detection_loss(g: &mut Graph, pred: Var, targets: &DetectorTargets) -> Result<Var> {
    let expected = [targets.n, HEAD_CHANNELS, GRID, GRID];
    if g.shape(pred) != expected {
        return Err(Error::shape(format!(
            "predictions {:?} do not match targets {expected:?}",
            g.shape(pred)
        )));
    }
    let terms = loss_terms(g.value(pred), targets, None);
    g.custom(
        &[pred],
        Tensor::new(&[3], terms.to_vec())?,
        Box::new(DetectionLossOp {
            targets: targets.clone(),
        }),
    )
}

/// Per-cell top-1 detections with confidence `sigmoid(obj) * max softmax`,
/// keeping those at or above `threshold`.
pub fn decode_detections(pred: &Tensor, threshold: f64) -> Result<Vec<Vec<Detection>>> {
    let (n, c, gh, gw) = pred.dims4()?;
    if c != HEAD_CHANNELS || gh != GRID || gw != GRID {
        return Err(Error::shape(format!("expected N x 8 x 8 x 8 predictions, got {:?}", pred.shape())));
    }
    let p = pred.data();
    let size = SCENE_SIZE as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut dets = Vec::new();
        for cell in 0..CELLS {
            let (row, col) = (cell / GRID, cell % GRID);
            let logits: [f64; 3] = std::array::from_fn(|k| p[at(i, 5 + k, cell)]);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let best = (0..3).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).expect("three classes");
            let confidence = sigmoid(p[at(i, 0, cell)]) * (logits[best] - m).exp() / z;
            if confidence < threshold {
                continue;
            }
            let cx = (col as f64 + p[at(i, 1, cell)]) * CELL;
            let cy = (row as f64 + p[at(i, 2, cell)]) * CELL;
            let w = CELL * p[at(i, 3, cell)].clamp(-10.0, 10.0).exp();
            let h = CELL * p[at(i, 4, cell)].clamp(-10.0, 10.0).exp();
            let bbox = BBox::new(
                (cx - w / 2.0).clamp(0.0, size),
                (cy - h / 2.0).clamp(0.0, size),
                (cx + w / 2.0).clamp(0.0, size),
                (cy + h / 2.0).clamp(0.0, size),
            );
            if bbox.x1 > bbox.x0 && bbox.y1 > bbox.y0 {
                dets.push(Detection {
                    bbox,
                    class: Shape::ALL[best],
                    confidence,
                });
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Runs the detector over `images` (`N x 3 x 64 x 64`) in chunks.
pub fn predict(params: &ParameterSet, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
    let (n, ..) = images.dims4()?;
    let mut out = Vec::with_capacity(n);
    let chunk = 32;
    let items: Vec<Tensor> = (0..n).map(|i| images.batch_item(i)).collect::<Result<_>>()?;
    for part in items.chunks(chunk) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack_batch(part)?);
        let pred = detector_forward(&mut g, params, x)?;
        out.extend(decode_detections(g.value(pred), CONFIDENCE_THRESHOLD)?);
    }
    Ok(out)
}
