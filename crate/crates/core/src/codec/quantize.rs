use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// How latents are quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantization {
    /// Additive `Uniform(-0.5, 0.5)` noise drawn from a seeded stream;
    /// gradients pass through unchanged.
    Train { seed: u64 },
    /// Round half away from zero.
    Eval,
}

impl Quantization {
    /// Derives an independent noise stream for another tensor of the same
    /// pass.
    pub fn salted(self, salt: u64) -> Self {
        match self {
            Quantization::Train { seed } => Quantization::Train {
                seed: seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            },
            Quantization::Eval => Quantization::Eval,
        }
    }
}

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5))
}

pub fn quantize(g: &mut Graph, t: Var, mode: Quantization) -> Result<Var> {
    match mode {
        Quantization::Train { seed } => {
            let u = g.constant(noise(g.shape(t), seed));
            g.add(t, u)
        }
        Quantization::Eval => g.round_ste(t),
    }
}

pub fn quantize_tensor(t: &Tensor, mode: Quantization) -> Tensor {
    match mode {
        Quantization::Train { seed } => {
            let u = noise(t.shape(), seed);
            Tensor::from_fn(t.shape(), |i| t.data()[i] + u.data()[i])
        }
        Quantization::Eval => t.map(f64::round),
    }
}
