//! Synthetic-shapes detection: data, a grid detector and box mAP.

pub mod data;
mod detector;
mod map;

use std::fmt;

pub use data::{generate_dataset, generate_scene, load_dataset, save_dataset, Scene};
pub use detector::{
    decode_detections, detection_loss, detector_forward, init_detector_params, predict, DetectorTargets, TaskLoss,
    CONFIDENCE_THRESHOLD, GRID, HEAD_CHANNELS,
};
pub use map::{average_precision, evaluate_map, MapReport, IOU_THRESHOLDS};

/// Object class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Shape> {
        Self::ALL.get(usize::from(id)).copied()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        })
    }
}

/// Axis-aligned box in pixels, `x1 > x0`, `y1 > y0`; `(x1, y1)` exclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// `(row, col)` of the grid cell containing the centre.
    pub fn center_cell(&self) -> (usize, usize) {
        let (cx, cy) = self.center();
        let cell = |v: f64| ((v / detector::CELL) as usize).min(GRID - 1);
        (cell(cy), cell(cx))
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: Shape,
    pub confidence: f64,
}
