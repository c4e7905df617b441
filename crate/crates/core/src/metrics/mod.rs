//! Fidelity, rate and rate-accuracy curves.

mod curves;
mod eval;
mod ssim;

pub use curves::{build_curves, nearest_deltas, parse_points, points_to_csv, write_curves, CurvePoint, Curves, CURVE_HEADER, DELTA_HEADER};
pub use eval::{evaluate_clean, evaluate_codec, CodecEval, ImageEval};
pub use ssim::{ms_ssim, ms_ssim_scales, ms_ssim_weights, MS_SSIM_WEIGHTS, WINDOW};

use crate::coder::Bitstream;
use crate::error::{Error, Result};
use crate::image::to_byte;
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB between the 8-bit versions of two
/// images. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("psnr of {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::shape("psnr of empty images"));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(to_byte(x)) - f64::from(to_byte(y))).powi(2))
        .sum();
    let mse = sse / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    })
}

/// Bits per pixel of a whole container, header included.
pub fn measure_bpp(bs: &Bitstream, width: usize, height: usize) -> Result<f64> {
    if usize::from(bs.width) != width || usize::from(bs.height) != height {
        return Err(Error::Contract(format!(
            "stream is {}x{}, expected {width}x{height}",
            bs.width, bs.height
        )));
    }
    Ok(8.0 * bs.len_bytes() as f64 / (width * height) as f64)
}
