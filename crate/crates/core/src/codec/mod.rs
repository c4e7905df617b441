//! Scale-hyperprior auto-encoder.
//!
//! ```text
//! x ──analysis──► y ──Q──► ŷ ──synthesis──► x̂
//!                 │        ▲
//!            |y|  ▼        │ σ
//!        hyper-analysis    │
//!                 h ──Q──► ĥ ──hyper-synthesis
//! ```
//!
//! The analysis transform is three stride-2 convolutions with GDN in
//! between, so `y` is `H/8 x W/8`. The hyper pair works on `|y|` and emits a
//! per-element scale `σ ≥ 0.11` for the latent's Gaussian model. During
//! training quantization is replaced by additive uniform noise so the rate
//! term stays differentiable.

pub mod entropy;
mod quantize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use entropy::{FactorizedPrior, LIKELIHOOD_FLOOR, SCALE_BOUND};
pub use quantize::{quantize, quantize_tensor, Quantization};

use crate::error::{Error, Result};
use crate::tensor::kernels::softplus_inv;
use crate::tensor::{Graph, Group, ParameterSet, Tensor, Var};

/// MSE trade-off of the four pretrained quality levels, indexed by `q - 1`.
pub const QUALITY_LAMBDAS: [f64; 4] = [0.003, 0.01, 0.03, 0.1];

/// Lower bound added to the GDN `beta` after the softplus.
const GDN_BETA_BOUND: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub n_latent_channels: usize,
    pub n_hyper_channels: usize,
    /// Width of the hidden layers of the analysis and synthesis transforms.
    pub n_hidden_channels: usize,
    pub kernel_size: usize,
    pub quality: u8,
    pub lambda_mse: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_latent_channels: 32,
            n_hyper_channels: 16,
            n_hidden_channels: 32,
            kernel_size: 3,
            quality: 1,
            lambda_mse: QUALITY_LAMBDAS[0],
        }
    }
}

impl CodecConfig {
    pub fn for_quality(quality: u8) -> Result<Self> {
        let lambda_mse = *QUALITY_LAMBDAS
            .get(usize::from(quality).wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("quality {quality} outside 1..=4")))?;
        Ok(Self {
            quality,
            lambda_mse,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_latent_channels == 0 || self.n_hyper_channels == 0 || self.n_hidden_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if !(1..=4).contains(&self.quality) {
            return Err(Error::Config(format!("quality {} outside 1..=4", self.quality)));
        }
        Ok(())
    }

    /// Recovers channel counts and kernel size from parameter shapes.
    pub fn from_params(params: &ParameterSet, quality: u8) -> Result<Self> {
        let w0 = params.value("enc.conv0.w")?.shape().to_vec();
        let w2 = params.value("enc.conv2.w")?.shape().to_vec();
        let hw = params.value("henc.conv0.w")?.shape().to_vec();
        let cfg = Self {
            n_latent_channels: w2[0],
            n_hyper_channels: hw[0],
            n_hidden_channels: w0[0],
            kernel_size: w0[2],
            quality,
            lambda_mse: *QUALITY_LAMBDAS
                .get(usize::from(quality).wrapping_sub(1))
                .ok_or_else(|| Error::Config(format!("quality {quality} outside 1..=4")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn insert_conv(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    group: Group,
    shape: [usize; 4],
    transpose: bool,
) -> Result<()> {
    let k2 = shape[2] * shape[3];
    let (fan_in, fan_out) = (shape[1] * k2, shape[0] * k2);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    params.insert(format!("{name}.w"), group, uniform(rng, &shape, bound))?;
    let out_ch = if transpose { shape[1] } else { shape[0] };
    params.insert(format!("{name}.b"), group, Tensor::zeros(&[out_ch]))?;
    Ok(())
}

fn insert_gdn(params: &mut ParameterSet, name: &str, group: Group, channels: usize) -> Result<()> {
    let beta = softplus_inv(1.0 - GDN_BETA_BOUND);
    params.insert(format!("{name}.beta"), group, Tensor::full(&[channels], beta))?;
    let (on, off) = (softplus_inv(0.1), softplus_inv(1e-3));
    let gamma = Tensor::from_fn(&[channels, channels], |i| if i / channels == i % channels { on } else { off });
    params.insert(format!("{name}.gamma"), group, gamma)?;
    Ok(())
}

/// Freshly initialized codec parameters (all five codec groups).
pub fn init_codec_params(cfg: &CodecConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, hc, k) = (cfg.n_latent_channels, cfg.n_hidden_channels, cfg.n_hyper_channels, cfg.kernel_size);
    let mut p = ParameterSet::new();
    insert_conv(&mut p, &mut rng, "enc.conv0", Group::Encoder, [m, 3, k, k], false)?;
    insert_gdn(&mut p, "enc.gdn0", Group::Encoder, m)?;
    insert_conv(&mut p, &mut rng, "enc.conv1", Group::Encoder, [m, m, k, k], false)?;
    insert_gdn(&mut p, "enc.gdn1", Group::Encoder, m)?;
    insert_conv(&mut p, &mut rng, "enc.conv2", Group::Encoder, [n, m, k, k], false)?;

    insert_conv(&mut p, &mut rng, "dec.deconv0", Group::Decoder, [n, m, k, k], true)?;
    insert_gdn(&mut p, "dec.igdn0", Group::Decoder, m)?;
    insert_conv(&mut p, &mut rng, "dec.deconv1", Group::Decoder, [m, m, k, k], true)?;
    insert_gdn(&mut p, "dec.igdn1", Group::Decoder, m)?;
    insert_conv(&mut p, &mut rng, "dec.deconv2", Group::Decoder, [m, 3, k, k], true)?;

    insert_conv(&mut p, &mut rng, "henc.conv0", Group::HyperEncoder, [hc, n, 3, 3], false)?;
    insert_conv(&mut p, &mut rng, "henc.conv1", Group::HyperEncoder, [hc, hc, 3, 3], false)?;
    insert_conv(&mut p, &mut rng, "henc.conv2", Group::HyperEncoder, [hc, hc, 3, 3], false)?;

    insert_conv(&mut p, &mut rng, "hdec.deconv0", Group::HyperDecoder, [hc, hc, 3, 3], true)?;
    insert_conv(&mut p, &mut rng, "hdec.deconv1", Group::HyperDecoder, [hc, hc, 3, 3], true)?;
    insert_conv(&mut p, &mut rng, "hdec.conv2", Group::HyperDecoder, [n, hc, 3, 3], false)?;

    p.extend(entropy::init_factorized(hc, &mut rng)?)?;
    Ok(p)
}

fn conv(g: &mut Graph, params: &ParameterSet, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, b, stride, k / 2)
}

/// Stride-2 transposed convolution producing exactly `target` spatial size.
fn deconv(g: &mut Graph, params: &ParameterSet, name: &str, x: Var, target: (usize, usize)) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    let k = g.shape(w)[2];
    let (_, _, h, wd) = g.value(x).dims4()?;
    // Natural size with output_padding 0 is 2s - 1 for odd k and padding k/2.
    let (op_h, op_w) = (target.0 + 1).checked_sub(2 * h).zip((target.1 + 1).checked_sub(2 * wd)).ok_or_else(|| {
        Error::shape(format!("{name}: cannot upsample {h}x{wd} to {}x{}", target.0, target.1))
    })?;
    if op_h > 1 || op_w > 1 {
        return Err(Error::shape(format!("{name}: cannot upsample {h}x{wd} to {}x{}", target.0, target.1)));
    }
    g.conv2d_transpose_hw(x, w, b, 2, k / 2, (op_h, op_w))
}

fn gdn(g: &mut Graph, params: &ParameterSet, name: &str, x: Var, inverse: bool) -> Result<Var> {
    let beta_raw = g.param(params, &format!("{name}.beta"))?;
    let gamma_raw = g.param(params, &format!("{name}.gamma"))?;
    let beta = g.softplus(beta_raw)?;
    let beta = g.add_scalar(beta, GDN_BETA_BOUND)?;
    let gamma = g.softplus(gamma_raw)?;
    g.gdn(x, beta, gamma, inverse)
}

/// Checks that `x` is an RGB batch whose sides are multiples of 16.
pub fn check_image_shape(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [_, 3, h, w] if h > 0 && w > 0 && h % 16 == 0 && w % 16 == 0 => Ok((h, w)),
        [_, 3, h, w] => Err(Error::shape(format!(
            "image of {h}x{w} pixels: height and width must be positive multiples of 16; pad the image first"
        ))),
        _ => Err(Error::shape(format!("expected an N x 3 x H x W image batch, got {shape:?}"))),
    }
}

/// Analysis transform: image batch to latent `y` (`N x C_latent x H/8 x W/8`).
pub fn analysis(g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
    check_image_shape(g.shape(x))?;
    let t = conv(g, params, "enc.conv0", x, 2)?;
    let t = gdn(g, params, "enc.gdn0", t, false)?;
    let t = conv(g, params, "enc.conv1", t, 2)?;
    let t = gdn(g, params, "enc.gdn1", t, false)?;
    conv(g, params, "enc.conv2", t, 2)
}

/// Synthesis transform: quantized latent to unclamped reconstruction.
pub fn synthesis(g: &mut Graph, params: &ParameterSet, y_hat: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(y_hat).dims4()?;
    let expected = params.value("dec.deconv0.w")?.shape()[0];
    if c != expected {
        return Err(Error::shape(format!(
            "latent has {c} channels but the decoder expects {expected}"
        )));
    }
    let t = deconv(g, params, "dec.deconv0", y_hat, (2 * h, 2 * w))?;
    let t = gdn(g, params, "dec.igdn0", t, true)?;
    let t = deconv(g, params, "dec.deconv1", t, (4 * h, 4 * w))?;
    let t = gdn(g, params, "dec.igdn1", t, true)?;
    deconv(g, params, "dec.deconv2", t, (8 * h, 8 * w))
}

/// Hyper-analysis: `|y|` to hyper-latent `h` (two stride-2 stages).
pub fn hyper_analysis(g: &mut Graph, params: &ParameterSet, y: Var) -> Result<Var> {
    let t = g.abs(y)?;
    let t = conv(g, params, "henc.conv0", t, 1)?;
    let t = g.relu(t)?;
    let t = conv(g, params, "henc.conv1", t, 2)?;
    let t = g.relu(t)?;
    conv(g, params, "henc.conv2", t, 2)
}

/// Spatial size after one stride-2, padding-`k/2` convolution.
fn halve(s: usize) -> usize {
    s.div_ceil(2)
}

/// Hyper-synthesis: `ĥ` to scales `σ ≥ 0.11` at the latent resolution
/// `latent_hw`.
pub fn hyper_synthesis(g: &mut Graph, params: &ParameterSet, h_hat: Var, latent_hw: (usize, usize)) -> Result<Var> {
    let (lh, lw) = latent_hw;
    let t = deconv(g, params, "hdec.deconv0", h_hat, (halve(lh), halve(lw)))?;
    let t = g.relu(t)?;
    let t = deconv(g, params, "hdec.deconv1", t, (lh, lw))?;
    let t = g.relu(t)?;
    let t = conv(g, params, "hdec.conv2", t, 1)?;
    let t = g.softplus(t)?;
    g.add_scalar(t, SCALE_BOUND)
}

/// Hyper-latent spatial size for a latent of `latent_hw`.
pub fn hyper_size(latent_hw: (usize, usize)) -> (usize, usize) {
    (halve(halve(latent_hw.0)), halve(halve(latent_hw.1)))
}

/// Estimated code length in bits of elements with probabilities `p`.
pub fn bits(g: &mut Graph, likelihood: Var) -> Result<Var> {
    let ln = g.ln(likelihood)?;
    let s = g.sum(ln)?;
    g.scale(s, -std::f64::consts::LOG2_E)
}

/// Graph nodes of one codec pass.
#[derive(Clone, Copy, Debug)]
pub struct CodecVars {
    pub y: Var,
    pub y_hat: Var,
    pub h: Var,
    pub h_hat: Var,
    pub sigma: Var,
    pub x_hat: Var,
    pub bits_latent: Var,
    pub bits_hyper: Var,
    /// Estimated bits per pixel, averaged over the batch.
    pub bpp: Var,
}

/// Full codec pass on an image batch `x`.
///
/// In [`Quantization::Train`] mode `ŷ` and `ĥ` are noisy and every output is
/// differentiable; in [`Quantization::Eval`] mode they are rounded.
pub fn forward(g: &mut Graph, params: &ParameterSet, x: Var, mode: Quantization) -> Result<CodecVars> {
    let (n, _, height, width) = g.value(x).dims4()?;
    let y = analysis(g, params, x)?;
    let (_, _, lh, lw) = g.value(y).dims4()?;
    let h = hyper_analysis(g, params, y)?;
    let h_hat = quantize(g, h, mode.salted(1))?;
    let sigma = hyper_synthesis(g, params, h_hat, (lh, lw))?;
    let y_hat = quantize(g, y, mode.salted(2))?;
    let x_hat = synthesis(g, params, y_hat)?;
    let p_latent = entropy::gaussian_likelihood(g, y_hat, sigma)?;
    let p_hyper = entropy::factorized_likelihood(g, params, h_hat)?;
    let bits_latent = bits(g, p_latent)?;
    let bits_hyper = bits(g, p_hyper)?;
    let total = g.add(bits_latent, bits_hyper)?;
    let bpp = g.scale(total, 1.0 / (n * height * width) as f64)?;
    Ok(CodecVars {
        y,
        y_hat,
        h,
        h_hat,
        sigma,
        x_hat,
        bits_latent,
        bits_hyper,
        bpp,
    })
}

/// Latent tensors of one evaluation-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub y: Tensor,
    pub y_hat: Tensor,
    pub h: Tensor,
    pub h_hat: Tensor,
    pub sigma: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub bits_latent_est: f64,
    pub bits_hyper_est: f64,
    pub bpp_est: f64,
    pub num_pixels: usize,
}

/// Analysis transform on a concrete image batch.
pub fn encode_analysis(params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = analysis(&mut g, params, xv)?;
    Ok(g.value(y).clone())
}

/// Synthesis transform on a quantized latent; the result is clamped to
/// `[0, 1]`.
pub fn decode_synthesis(params: &ParameterSet, y_hat: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let yv = g.constant(y_hat.clone());
    let x = synthesis(&mut g, params, yv)?;
    Ok(g.value(x).map(|v| v.clamp(0.0, 1.0)))
}

/// Hyper pair on a latent, with rounding quantization. Returns
/// `(h, ĥ, σ)`.
pub fn hyper_forward(params: &ParameterSet, y: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, _, lh, lw) = y.dims4()?;
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let h = hyper_analysis(&mut g, params, yv)?;
    let h_hat = quantize(&mut g, h, Quantization::Eval)?;
    let sigma = hyper_synthesis(&mut g, params, h_hat, (lh, lw))?;
    Ok((g.value(h).clone(), g.value(h_hat).clone(), g.value(sigma).clone()))
}

/// Scales predicted from a decoded hyper-latent; the decoder-side half of
/// [`hyper_forward`].
pub fn scales_from_hyper(params: &ParameterSet, h_hat: &Tensor, latent_hw: (usize, usize)) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h_hat.clone());
    let sigma = hyper_synthesis(&mut g, params, hv, latent_hw)?;
    Ok(g.value(sigma).clone())
}

/// Evaluation-mode latents of an image batch.
pub fn encode_latents(params: &ParameterSet, x: &Tensor) -> Result<LatentPair> {
    let y = encode_analysis(params, x)?;
    let (h, h_hat, sigma) = hyper_forward(params, &y)?;
    let y_hat = quantize_tensor(&y, Quantization::Eval);
    Ok(LatentPair { y, y_hat, h, h_hat, sigma })
}

/// Per-element probabilities of `h_hat` under the factorized prior.
pub fn factorized_likelihood(h_hat: &Tensor, params: &ParameterSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h_hat.clone());
    let p = entropy::factorized_likelihood(&mut g, params, hv)?;
    Ok(g.value(p).clone())
}

/// Estimated code length of quantized latents, in bits and bits per pixel.
pub fn rate_estimate(latents: &LatentPair, params: &ParameterSet, num_pixels: usize) -> Result<RateReport> {
    if num_pixels == 0 {
        return Err(Error::Contract("rate estimate over zero pixels".into()));
    }
    let mut g = Graph::new();
    let y = g.constant(latents.y_hat.clone());
    let s = g.constant(latents.sigma.clone());
    let h = g.constant(latents.h_hat.clone());
    let p_latent = entropy::gaussian_likelihood(&mut g, y, s)?;
    let p_hyper = entropy::factorized_likelihood(&mut g, params, h)?;
    let bl = bits(&mut g, p_latent)?;
    let bh = bits(&mut g, p_hyper)?;
    let bits_latent_est = g.value(bl).item()?;
    let bits_hyper_est = g.value(bh).item()?;
    Ok(RateReport {
        bits_latent_est,
        bits_hyper_est,
        bpp_est: (bits_latent_est + bits_hyper_est) / num_pixels as f64,
        num_pixels,
    })
}
