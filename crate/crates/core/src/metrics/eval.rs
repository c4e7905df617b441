use rayon::prelude::*;

use super::{measure_bpp, ms_ssim, psnr};
use crate::codec::{encode_latents, rate_estimate};
use crate::coder::{deserialize, serialize, Bitstream};
use crate::error::{Error, Result};
use crate::image::quantize_8bit;
use crate::task::{evaluate_map, predict, MapReport, Scene};
use crate::tensor::{ParameterSet, Tensor};

/// Measurements of one coded image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    /// Container size including the header.
    pub bytes: usize,
    /// Entropy-coded payload, both streams.
    pub payload_bits: usize,
    pub bpp_file: f64,
    pub bpp_est: f64,
    pub psnr_db: f64,
    pub msssim: f64,
}

/// Means over an evaluation set.
#[derive(Clone, Debug)]
pub struct CodecEval {
    pub images: Vec<ImageEval>,
    pub bpp_file: f64,
    pub bpp_est: f64,
    pub psnr_db: f64,
    pub msssim: f64,
    pub map: MapReport,
    /// Decoded 8-bit reconstructions, in scene order.
    pub reconstructions: Vec<Tensor>,
}

fn code_one(codec: &ParameterSet, quality: u8, image: &Tensor) -> Result<(ImageEval, Tensor)> {
    let (_, _, h, w) = image.dims4()?;
    let bs = serialize(image, codec, quality)?;
    let parsed = Bitstream::from_bytes(&bs.to_bytes()?)?;
    let x_hat = quantize_8bit(&deserialize(&parsed, codec)?.x_hat);
    let est = rate_estimate(&encode_latents(codec, image)?, codec, h * w)?;
    let eval = ImageEval {
        bytes: bs.len_bytes(),
        payload_bits: bs.payload_bits(),
        bpp_file: measure_bpp(&parsed, w, h)?,
        bpp_est: est.bpp_est,
        psnr_db: psnr(image, &x_hat)?,
        msssim: ms_ssim(image, &x_hat)?,
    };
    Ok((eval, x_hat))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Codes every scene through real bitstreams, decodes them and runs the
/// detector on the 8-bit reconstructions.
pub fn evaluate_codec(codec: &ParameterSet, quality: u8, task: &ParameterSet, scenes: &[Scene]) -> Result<CodecEval> {
    if scenes.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let coded: Vec<(ImageEval, Tensor)> = scenes
        .par_iter()
        .map(|s| code_one(codec, quality, &s.image))
        .collect::<Result<_>>()?;
    let (images, reconstructions): (Vec<ImageEval>, Vec<Tensor>) = coded.into_iter().unzip();
    let dets = predict(task, &Tensor::stack_batch(&reconstructions)?)?;
    let gt: Vec<_> = scenes.iter().map(Scene::ground_truth).collect();
    Ok(CodecEval {
        bpp_file: mean(images.iter().map(|e| e.bpp_file)),
        bpp_est: mean(images.iter().map(|e| e.bpp_est)),
        psnr_db: mean(images.iter().map(|e| e.psnr_db)),
        msssim: mean(images.iter().map(|e| e.msssim)),
        map: evaluate_map(&dets, &gt)?,
        images,
        reconstructions,
    })
}

/// Detector accuracy on uncompressed scenes.
pub fn evaluate_clean(task: &ParameterSet, scenes: &[Scene]) -> Result<MapReport> {
    if scenes.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let images: Vec<Tensor> = scenes.iter().map(|s| s.image.clone()).collect();
    let dets = predict(task, &Tensor::stack_batch(&images)?)?;
    let gt: Vec<_> = scenes.iter().map(Scene::ground_truth).collect();
    evaluate_map(&dets, &gt)
}
