use crate::error::{Error, Result};
use crate::image::to_byte;
use crate::tensor::Tensor;

/// Per-scale exponents of the five-scale index.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const PEAK: f64 = 255.0;
const C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
const C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);

fn window() -> [f64; WINDOW] {
    let half = (WINDOW - 1) as f64 / 2.0;
    let mut g: [f64; WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SIGMA * SIGMA)).exp()
    });
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// A single-channel image.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Plane {
    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            px: self.px.iter().zip(&other.px).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable Gaussian filter without padding.
    fn blur(&self, g: &[f64; WINDOW]) -> Plane {
        let (h, w) = (self.h, self.w);
        let ow = w - WINDOW + 1;
        let oh = h - WINDOW + 1;
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..WINDOW).map(|k| g[k] * self.px[y * w + x + k]).sum();
            }
        }
        let mut px = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                px[y * ow + x] = (0..WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, px }
    }

    /// 2x2 average pooling; odd sizes are first extended by mirroring the
    /// last row or column.
    fn downsample(&self) -> Plane {
        let (h2, w2) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let at = |y: usize, x: usize| self.px[y.min(self.h - 1) * self.w + x.min(self.w - 1)];
        let px = (0..h2 * w2)
            .map(|i| {
                let (y, x) = (2 * (i / w2), 2 * (i % w2));
                0.25 * (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1))
            })
            .collect();
        Plane { h: h2, w: w2, px }
    }
}

/// Mean SSIM and mean contrast-structure term of one scale.
fn ssim_cs(a: &Plane, b: &Plane, g: &[f64; WINDOW]) -> (f64, f64) {
    let (ma, mb) = (a.blur(g), b.blur(g));
    let saa = a.zip(a, |x, y| x * y).blur(g);
    let sbb = b.zip(b, |x, y| x * y).blur(g);
    let sab = a.zip(b, |x, y| x * y).blur(g);
    let n = ma.px.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (mx, my) = (ma.px[i], mb.px[i]);
        let lum = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
        let c = (2.0 * (sab.px[i] - mx * my) + C2) / ((saa.px[i] + sbb.px[i]) - (mx * mx + my * my) + C2);
        ssim += lum * c;
        cs += c;
    }
    (ssim / n as f64, cs / n as f64)
}

/// Number of scales whose image is still at least one window wide.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let (mut h, mut w) = (h, w);
    let mut k = 0;
    while k < MS_SSIM_WEIGHTS.len() && h >= WINDOW && w >= WINDOW {
        k += 1;
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    k
}

/// Exponents used for an image of `scales` scales: [`MS_SSIM_WEIGHTS`] as
/// published for all five, otherwise the leading entries rescaled to sum to
/// one.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    if scales == MS_SSIM_WEIGHTS.len() {
        return w.to_vec();
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn plane_ms_ssim(mut a: Plane, mut b: Plane, weights: &[f64]) -> f64 {
    let g = window();
    let mut value = 1.0;
    for (k, &wt) in weights.iter().enumerate() {
        if k > 0 {
            a = a.downsample();
            b = b.downsample();
        }
        let (ssim, cs) = ssim_cs(&a, &b, &g);
        let term = if k + 1 == weights.len() { ssim } else { cs };
        value *= term.max(0.0).powf(wt);
    }
    value
}

/// Multi-scale SSIM on the 8-bit versions of `a` and `b`, averaged over
/// images and channels.
///
/// Five scales need a short side of at least 161 pixels. Smaller images use as many
/// scales as fit an 11x11 window (three at 64x64) with the leading weights
/// renormalized; see [`ms_ssim_weights`].
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ms_ssim of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (n, c, h, w) = a.dims4()?;
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(Error::shape(format!("{h}x{w} is smaller than the {WINDOW}x{WINDOW} window")));
    }
    let weights = ms_ssim_weights(scales);
    let plane = |t: &Tensor, i: usize| Plane {
        h,
        w,
        px: t.data()[i * h * w..(i + 1) * h * w]
            .iter()
            .map(|&v| f64::from(to_byte(v)))
            .collect(),
    };
    let total: f64 = (0..n * c).map(|i| plane_ms_ssim(plane(a, i), plane(b, i), &weights)).sum();
    Ok(total / (n * c) as f64)
}
