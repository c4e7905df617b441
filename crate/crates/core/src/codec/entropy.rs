//! Probability models for the quantized latents.
//!
//! The latent `ŷ` is coded under a zero-mean Gaussian whose scale comes from
//! the hyper-synthesis transform; the probability of an integer bin is the
//! Gaussian mass of `[ŷ - 0.5, ŷ + 0.5]`. The hyper-latent `ĥ` is coded under
//! a learned factorized prior: one monotone cumulative function per channel,
//! built from three stages of positive-weight affine maps with bounded
//! nonlinearities. Both models floor probabilities at [`LIKELIHOOD_FLOOR`].

use crate::error::{Error, Result};
use crate::tensor::kernels::{sigmoid, softplus, std_normal_cdf, std_normal_pdf};
use crate::tensor::{CustomOp, Graph, Group, ParameterSet, Tensor, Var};

pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Lower bound of the Gaussian scales predicted by the hyperprior.
pub const SCALE_BOUND: f64 = 0.11;

/// Bin mass of a zero-mean Gaussian with scale `sigma` over `[y-0.5, y+0.5]`,
/// evaluated on the lower tail for accuracy.
pub fn gaussian_bin_mass(y: f64, sigma: f64) -> f64 {
    let a = y.abs();
    std_normal_cdf((0.5 - a) / sigma) - std_normal_cdf((-0.5 - a) / sigma)
}

#[derive(Debug)]
struct GaussianLikelihoodOp;

impl CustomOp for GaussianLikelihoodOp {
    fn name(&self) -> &'static str {
        "gaussian_likelihood"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (y, sigma) = (inputs[0], inputs[1]);
        let n = y.numel();
        let mut dy = vec![0.0; n];
        let mut ds = vec![0.0; n];
        for i in 0..n {
            if output.data()[i] <= LIKELIHOOD_FLOOR {
                continue;
            }
            let (yv, s, g) = (y.data()[i], sigma.data()[i], grad.data()[i]);
            let a = yv.abs();
            let u = (0.5 - a) / s;
            let l = (-0.5 - a) / s;
            let (pu, pl) = (std_normal_pdf(u), std_normal_pdf(l));
            let dpa = (pl - pu) / s;
            dy[i] = g * dpa * if yv > 0.0 { 1.0 } else if yv < 0.0 { -1.0 } else { 0.0 };
            ds[i] = g * (l * pl - u * pu) / s;
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(y.shape().to_vec(), dy)),
            needs[1].then(|| Tensor::from_parts(y.shape().to_vec(), ds)),
        ])
    }
}

/// Per-element Gaussian bin probabilities of `y_hat` under scales `sigma`.
pub fn gaussian_likelihood(g: &mut Graph, y_hat: Var, sigma: Var) -> Result<Var> {
    if g.shape(y_hat) != g.shape(sigma) {
        return Err(Error::shape(format!(
            "latent {:?} and scales {:?} differ in shape",
            g.shape(y_hat),
            g.shape(sigma)
        )));
    }
    let (y, s) = (g.value(y_hat), g.value(sigma));
    let mut out = Vec::with_capacity(y.numel());
    for (i, (&yv, &sv)) in y.data().iter().zip(s.data()).enumerate() {
        if sv <= 0.0 {
            return Err(Error::numeric(format!("latent element {i}"), format!("scale {sv} is not positive")));
        }
        let p = gaussian_bin_mass(yv, sv);
        if !p.is_finite() {
            return Err(Error::numeric(format!("latent element {i}"), format!("likelihood {p}")));
        }
        out.push(p.max(LIKELIHOOD_FLOOR));
    }
    let value = Tensor::from_parts(y.shape().to_vec(), out);
    g.custom(&[y_hat, sigma], value, Box::new(GaussianLikelihoodOp))
}

/// Names of the factorized-prior parameters, in op input order.
pub const FACTORIZED_PARAMS: [(&str, usize); 8] = [
    ("entropy.m1", 3),
    ("entropy.b1", 3),
    ("entropy.f1", 3),
    ("entropy.m2", 9),
    ("entropy.b2", 3),
    ("entropy.f2", 3),
    ("entropy.m3", 3),
    ("entropy.b3", 1),
];

/// Spread of the factorized prior at initialization: the cumulative's logit
/// starts out as roughly `x / INIT_SCALE`.
const INIT_SCALE: f64 = 3.0;

/// Initial factorized-prior parameters for `channels` channels.
pub fn init_factorized(channels: usize, rng: &mut impl rand::Rng) -> Result<ParameterSet> {
    let widths = [1usize, 3, 3, 1];
    let scale = INIT_SCALE.powf(1.0 / 3.0);
    let mut params = ParameterSet::new();
    for stage in 0..3 {
        let (fan_in, fan_out) = (widths[stage], widths[stage + 1]);
        let m = crate::tensor::kernels::softplus_inv(1.0 / scale / fan_out as f64);
        params.insert(
            format!("entropy.m{}", stage + 1),
            Group::EntropyModel,
            Tensor::full(&[channels, fan_in * fan_out], m),
        )?;
        let bias = Tensor::from_fn(&[channels, fan_out], |_| rng.random_range(-0.5..0.5));
        params.insert(format!("entropy.b{}", stage + 1), Group::EntropyModel, bias)?;
        if stage < 2 {
            params.insert(
                format!("entropy.f{}", stage + 1),
                Group::EntropyModel,
                Tensor::zeros(&[channels, fan_out]),
            )?;
        }
    }
    Ok(params)
}

/// The per-channel cumulative network with its raw (unconstrained)
/// parameters resolved into weights.
#[derive(Clone, Debug)]
struct CdfNet {
    m1: [f64; 3],
    b1: [f64; 3],
    f1: [f64; 3],
    m2: [f64; 9],
    b2: [f64; 3],
    f2: [f64; 3],
    m3: [f64; 3],
    b3: f64,
}

/// Intermediate values of one evaluation, kept for the backward pass.
struct Trace {
    x: f64,
    u1: [f64; 3],
    z1: [f64; 3],
    u2: [f64; 3],
    z2: [f64; 3],
}

/// Gradient with respect to the raw parameters of one channel, in
/// [`FACTORIZED_PARAMS`] order, flattened.
#[derive(Default)]
struct RawGrads {
    m1: [f64; 3],
    b1: [f64; 3],
    f1: [f64; 3],
    m2: [f64; 9],
    b2: [f64; 3],
    f2: [f64; 3],
    m3: [f64; 3],
    b3: f64,
}

impl CdfNet {
    fn from_raw(raw: &[&Tensor], channel: usize) -> Self {
        fn row(t: &Tensor, channel: usize, w: usize) -> &[f64] {
            &t.data()[channel * w..(channel + 1) * w]
        }
        let arr3 = |s: &[f64]| [s[0], s[1], s[2]];
        let mut m2 = [0.0; 9];
        m2.copy_from_slice(row(raw[3], channel, 9));
        Self {
            m1: arr3(row(raw[0], channel, 3)),
            b1: arr3(row(raw[1], channel, 3)),
            f1: arr3(row(raw[2], channel, 3)),
            m2,
            b2: arr3(row(raw[4], channel, 3)),
            f2: arr3(row(raw[5], channel, 3)),
            m3: arr3(row(raw[6], channel, 3)),
            b3: row(raw[7], channel, 1)[0],
        }
    }

    fn logit(&self, x: f64) -> (f64, Trace) {
        let mut u1 = [0.0; 3];
        let mut z1 = [0.0; 3];
        for k in 0..3 {
            u1[k] = softplus(self.m1[k]) * x + self.b1[k];
            z1[k] = u1[k] + self.f1[k].tanh() * u1[k].tanh();
        }
        let mut u2 = [0.0; 3];
        let mut z2 = [0.0; 3];
        for j in 0..3 {
            u2[j] = self.b2[j] + (0..3).map(|k| softplus(self.m2[j * 3 + k]) * z1[k]).sum::<f64>();
            z2[j] = u2[j] + self.f2[j].tanh() * u2[j].tanh();
        }
        let out = self.b3 + (0..3).map(|j| softplus(self.m3[j]) * z2[j]).sum::<f64>();
        (out, Trace { x, u1, z1, u2, z2 })
    }

    /// Accumulates `d * d(logit)/d(params)` into `acc`; returns `d(logit)/dx * d`.
    fn backward(&self, t: &Trace, d: f64, acc: &mut RawGrads) -> f64 {
        let mut dz2 = [0.0; 3];
        for j in 0..3 {
            dz2[j] = d * softplus(self.m3[j]);
            acc.m3[j] += d * t.z2[j] * sigmoid(self.m3[j]);
        }
        acc.b3 += d;
        let mut dz1 = [0.0; 3];
        for j in 0..3 {
            let (th, tf) = (t.u2[j].tanh(), self.f2[j].tanh());
            let du2 = dz2[j] * (1.0 + tf * (1.0 - th * th));
            acc.f2[j] += dz2[j] * th * (1.0 - tf * tf);
            acc.b2[j] += du2;
            for k in 0..3 {
                let idx = j * 3 + k;
                acc.m2[idx] += du2 * t.z1[k] * sigmoid(self.m2[idx]);
                dz1[k] += du2 * softplus(self.m2[idx]);
            }
        }
        let mut dx = 0.0;
        for k in 0..3 {
            let (th, tf) = (t.u1[k].tanh(), self.f1[k].tanh());
            let du1 = dz1[k] * (1.0 + tf * (1.0 - th * th));
            acc.f1[k] += dz1[k] * th * (1.0 - tf * tf);
            acc.b1[k] += du1;
            acc.m1[k] += du1 * t.x * sigmoid(self.m1[k]);
            dx += du1 * softplus(self.m1[k]);
        }
        dx
    }

    /// Cumulative probability at `x`.
    fn cdf(&self, x: f64) -> f64 {
        sigmoid(self.logit(x).0)
    }

    /// Probability of the integer bin centred on `v`, before flooring.
    fn bin_mass(&self, v: f64) -> Result<f64> {
        let lu = self.logit(v + 0.5).0;
        let ll = self.logit(v - 0.5).0;
        bin_mass_from_logits(lu, ll)
    }
}

fn bin_mass_from_logits(lu: f64, ll: f64) -> Result<f64> {
    if lu < ll - 1e-12 {
        return Err(Error::Model(format!(
            "factorized cumulative is not monotone: logit {lu} at upper edge < {ll} at lower edge"
        )));
    }
    // Evaluate on whichever tail keeps both sigmoids away from 1.
    let s = if lu + ll > 0.0 { -1.0 } else { 1.0 };
    Ok((sigmoid(s * lu) - sigmoid(s * ll)).abs())
}

fn raw_tensors<'a>(params: &'a ParameterSet) -> Result<Vec<&'a Tensor>> {
    FACTORIZED_PARAMS.iter().map(|(name, _)| params.value(name)).collect()
}

fn check_channels(raw: &[&Tensor], channels: usize) -> Result<()> {
    for ((name, width), t) in FACTORIZED_PARAMS.iter().zip(raw) {
        if t.shape() != [channels, *width] {
            return Err(Error::shape(format!(
                "{name} has shape {:?}, expected [{channels}, {width}]",
                t.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug)]
struct FactorizedLikelihoodOp;

impl CustomOp for FactorizedLikelihoodOp {
    fn name(&self) -> &'static str {
        "factorized_likelihood"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let h = inputs[0];
        let raw = &inputs[1..];
        let (n, c, hh, ww) = h.dims4()?;
        let plane = hh * ww;
        let mut dh = vec![0.0; h.numel()];
        let mut dparams: Vec<Vec<f64>> = raw.iter().map(|t| vec![0.0; t.numel()]).collect();
        for ch in 0..c {
            let net = CdfNet::from_raw(raw, ch);
            let mut acc = RawGrads::default();
            for i in 0..n {
                for s in 0..plane {
                    let idx = (i * c + ch) * plane + s;
                    if output.data()[idx] <= LIKELIHOOD_FLOOR {
                        continue;
                    }
                    let v = h.data()[idx];
                    let (lu, tu) = net.logit(v + 0.5);
                    let (ll, tl) = net.logit(v - 0.5);
                    let (su, sl) = (sigmoid(lu), sigmoid(ll));
                    let g = grad.data()[idx];
                    let dx_u = net.backward(&tu, g * su * (1.0 - su), &mut acc);
                    let dx_l = net.backward(&tl, -g * sl * (1.0 - sl), &mut acc);
                    dh[idx] = dx_u + dx_l;
                }
            }
            let flat: [&[f64]; 8] = [&acc.m1, &acc.b1, &acc.f1, &acc.m2, &acc.b2, &acc.f2, &acc.m3, std::slice::from_ref(&acc.b3)];
            for ((dst, src), (_, width)) in dparams.iter_mut().zip(flat).zip(FACTORIZED_PARAMS) {
                dst[ch * width..(ch + 1) * width].copy_from_slice(src);
            }
        }
        let mut out = vec![needs[0].then(|| Tensor::from_parts(h.shape().to_vec(), dh))];
        for ((d, t), need) in dparams.into_iter().zip(raw).zip(&needs[1..]) {
            out.push(need.then(|| Tensor::from_parts(t.shape().to_vec(), d)));
        }
        Ok(out)
    }
}

/// Per-element probabilities of `h_hat` under the factorized prior, with
/// gradients flowing to both `h_hat` and the prior's parameters.
pub fn factorized_likelihood(g: &mut Graph, params: &ParameterSet, h_hat: Var) -> Result<Var> {
    let mut inputs = vec![h_hat];
    for (name, _) in FACTORIZED_PARAMS {
        inputs.push(g.param(params, name)?);
    }
    let (n, c, hh, ww) = g.value(h_hat).dims4()?;
    let raw: Vec<&Tensor> = inputs[1..].iter().map(|&v| g.value(v)).collect();
    check_channels(&raw, c)?;
    let plane = hh * ww;
    let h = g.value(h_hat);
    let mut out = vec![0.0; h.numel()];
    for ch in 0..c {
        let net = CdfNet::from_raw(&raw, ch);
        for i in 0..n {
            for s in 0..plane {
                let idx = (i * c + ch) * plane + s;
                let p = net.bin_mass(h.data()[idx])?;
                if !p.is_finite() {
                    return Err(Error::numeric(format!("hyper-latent element {idx}"), format!("likelihood {p}")));
                }
                out[idx] = p.max(LIKELIHOOD_FLOOR);
            }
        }
    }
    let value = Tensor::from_parts(h.shape().to_vec(), out);
    g.custom(&inputs, value, Box::new(FactorizedLikelihoodOp))
}

/// Read-only view of the factorized prior for table construction.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    nets: Vec<CdfNet>,
}

impl FactorizedPrior {
    pub fn from_params(params: &ParameterSet) -> Result<Self> {
        let raw = raw_tensors(params)?;
        let channels = raw[0].shape().first().copied().unwrap_or(0);
        check_channels(&raw, channels)?;
        Ok(Self {
            nets: (0..channels).map(|c| CdfNet::from_raw(&raw, c)).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.nets.len()
    }

    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        self.nets[channel].cdf(x)
    }

    /// Unfloored probability of integer `v` in `channel`.
    pub fn pmf(&self, channel: usize, v: i32) -> Result<f64> {
        self.nets[channel].bin_mass(f64::from(v))
    }
}
