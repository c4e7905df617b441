use super::range::{CdfTable, RangeDecoder, RangeEncoder};
use crate::codec::{FactorizedPrior, SCALE_BOUND};
use crate::error::{Error, Result};
use crate::tensor::kernels::std_normal_cdf;
use crate::tensor::Tensor;

pub const NUM_SCALES: usize = 64;
pub const SCALE_MAX: f64 = 16.0;
/// Probability mass left outside each table's explicit support.
pub const TAIL_MASS: f64 = 1e-6;
/// Widest explicit support of a factorized-prior table.
const MAX_FACTORIZED_SYMBOLS: i32 = 2048;

/// A CDF table whose last symbol is an escape: values outside the explicit
/// support are coded as the escape followed by the raw value as a uniform
/// 16-bit word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EscapeTable {
    table: CdfTable,
}

impl EscapeTable {
    /// `pmf[i]` is the probability of `lo + i`; `tail` the escape mass.
    fn new(pmf: &[f64], lo: i32, tail: f64) -> Result<Self> {
        let mut with_escape = pmf.to_vec();
        with_escape.push(tail.max(0.0));
        Ok(Self {
            table: CdfTable::from_pmf(&with_escape, lo)?,
        })
    }

    pub fn table(&self) -> &CdfTable {
        &self.table
    }

    /// Inclusive range of values coded without escape.
    pub fn support(&self) -> (i32, i32) {
        let (lo, hi) = self.table.support();
        (lo, hi - 1)
    }

    fn escape_symbol(&self) -> i32 {
        self.table.support().1
    }

    /// Code length of `value` in bits under this table.
    pub fn cost_bits(&self, value: i32) -> f64 {
        let (lo, hi) = self.support();
        if (lo..=hi).contains(&value) {
            -self.table.probability((value - lo) as usize).log2()
        } else {
            -self.table.probability(self.table.len() - 1).log2() + 16.0
        }
    }

    pub fn encode(&self, enc: &mut RangeEncoder, value: i32) -> Result<()> {
        let (lo, hi) = self.support();
        if (lo..=hi).contains(&value) {
            return enc.encode(value, &self.table);
        }
        let raw = i16::try_from(value)
            .map_err(|_| Error::Coding(format!("value {value} exceeds the 16-bit escape range")))?;
        enc.encode(self.escape_symbol(), &self.table)?;
        enc.encode_uniform16(raw as u16);
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i32> {
        let s = dec.decode(&self.table)?;
        if s == self.escape_symbol() {
            Ok(i32::from(dec.decode_uniform16()? as i16))
        } else {
            Ok(s)
        }
    }
}

/// The 64 log-spaced scales shared by encoder and decoder.
pub fn scale_table() -> [f64; NUM_SCALES] {
    let (a, b) = (SCALE_BOUND.ln(), SCALE_MAX.ln());
    std::array::from_fn(|i| (a + (b - a) * i as f64 / (NUM_SCALES - 1) as f64).exp())
}

/// Index of the nearest table scale to `sigma` in the log domain; `sigma` is
/// clamped to the table's range.
pub fn scale_index(sigma: f64) -> usize {
    let (a, b) = (SCALE_BOUND.ln(), SCALE_MAX.ln());
    let s = sigma.clamp(SCALE_BOUND, SCALE_MAX).ln();
    (((s - a) / (b - a)) * (NUM_SCALES - 1) as f64).round() as usize
}

fn gaussian_mass(lo: f64, hi: f64, sigma: f64) -> f64 {
    // Evaluate on the lower tail for precision.
    if hi <= 0.0 {
        std_normal_cdf(hi / sigma) - std_normal_cdf(lo / sigma)
    } else if lo >= 0.0 {
        std_normal_cdf(-lo / sigma) - std_normal_cdf(-hi / sigma)
    } else {
        1.0 - std_normal_cdf(lo / sigma) - std_normal_cdf(-hi / sigma)
    }
}

/// Smallest radius `R` whose bins `-R..=R` leave less than `tail_mass`
/// outside.
pub fn support_radius(sigma: f64, tail_mass: f64) -> i32 {
    let mut r = 0;
    while 2.0 * std_normal_cdf(-(f64::from(r) + 0.5) / sigma) >= tail_mass {
        r += 1;
    }
    r
}

/// Tables for zero-mean Gaussians at the 64 shared scales.
#[derive(Clone, Debug)]
pub struct GaussianTables {
    tables: Vec<EscapeTable>,
}

impl GaussianTables {
    pub fn new() -> Result<Self> {
        Self::with_tail_mass(TAIL_MASS)
    }

    pub fn with_tail_mass(tail_mass: f64) -> Result<Self> {
        let tables = scale_table()
            .iter()
            .map(|&s| {
                let r = support_radius(s, tail_mass);
                let pmf: Vec<f64> = (-r..=r)
                    .map(|k| gaussian_mass(f64::from(k) - 0.5, f64::from(k) + 0.5, s))
                    .collect();
                let tail = 2.0 * std_normal_cdf(-(f64::from(r) + 0.5) / s);
                EscapeTable::new(&pmf, -r, tail)
            })
            .collect::<Result<_>>()?;
        Ok(Self { tables })
    }

    pub fn get(&self, index: usize) -> &EscapeTable {
        &self.tables[index]
    }

    pub fn for_sigma(&self, sigma: f64) -> &EscapeTable {
        &self.tables[scale_index(sigma)]
    }

    /// One table index per element of `sigma`.
    pub fn indices(&self, sigma: &Tensor) -> Vec<usize> {
        sigma.data().iter().map(|&s| scale_index(s)).collect()
    }
}

/// Alias kept for callers that think in terms of the building step.
pub fn build_gaussian_cdfs() -> Result<GaussianTables> {
    GaussianTables::new()
}

/// One table per hyper-latent channel, discretizing the factorized prior.
pub fn build_factorized_cdfs(prior: &FactorizedPrior) -> Result<Vec<EscapeTable>> {
    (0..prior.channels())
        .map(|c| {
            let half = TAIL_MASS / 2.0;
            let mut lo = 0;
            while lo > -MAX_FACTORIZED_SYMBOLS / 2 && prior.cdf(c, f64::from(lo) - 0.5) >= half {
                lo -= 1;
            }
            let mut hi = 0;
            while hi < MAX_FACTORIZED_SYMBOLS / 2 && 1.0 - prior.cdf(c, f64::from(hi) + 0.5) >= half {
                hi += 1;
            }
            let pmf = (lo..=hi).map(|v| prior.pmf(c, v)).collect::<Result<Vec<_>>>()?;
            let tail = prior.cdf(c, f64::from(lo) - 0.5) + (1.0 - prior.cdf(c, f64::from(hi) + 0.5));
            EscapeTable::new(&pmf, lo, tail)
        })
        .collect()
}
