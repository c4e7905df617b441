use crate::error::{Error, Result};

/// Bits of probability precision; every table sums to `1 << PRECISION`.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

const TOP: u32 = 1 << 24;

/// Cumulative frequency table over the symbols `offset .. offset + n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    offset: i32,
}

impl CdfTable {
    /// Validates `cdf`: starts at 0, ends at 65536, strictly increasing.
    pub fn new(cdf: Vec<u32>, offset: i32) -> Result<Self> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().expect("non-empty") != TOTAL {
            return Err(Error::Coding(format!(
                "CDF must run from 0 to {TOTAL} over at least one symbol"
            )));
        }
        if let Some(i) = cdf.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Coding(format!("CDF not strictly increasing at symbol {i}")));
        }
        Ok(Self { cdf, offset })
    }

    /// Quantizes a probability vector to 16-bit counts, each at least 1.
    pub fn from_pmf(pmf: &[f64], offset: i32) -> Result<Self> {
        let n = pmf.len();
        if n == 0 || n > TOTAL as usize {
            return Err(Error::Coding(format!("cannot build a table over {n} symbols")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Coding("probabilities must be finite and non-negative".into()));
        }
        let mass: f64 = pmf.iter().sum();
        if mass <= 0.0 {
            return Err(Error::Coding("probabilities sum to zero".into()));
        }
        let free = f64::from(TOTAL - n as u32);
        let mut counts: Vec<u32> = pmf.iter().map(|p| 1 + (p / mass * free).floor() as u32).collect();
        let mut left = TOTAL - counts.iter().sum::<u32>();
        // Hand out the remainder by largest fractional part, ties to the lower index.
        if left > 0 {
            let mut order: Vec<(usize, f64)> =
                pmf.iter().enumerate().map(|(i, p)| (i, (p / mass * free).fract())).collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (i, _) in order.into_iter().cycle() {
                if left == 0 {
                    break;
                }
                counts[i] += 1;
                left -= 1;
            }
        }
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0;
        cdf.push(0);
        for c in counts {
            acc += c;
            cdf.push(acc);
        }
        Self::new(cdf, offset)
    }

    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    /// Smallest and largest symbol value.
    pub fn support(&self) -> (i32, i32) {
        (self.offset, self.offset + self.len() as i32 - 1)
    }

    pub fn count(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Model probability of the symbol at `index`.
    pub fn probability(&self, index: usize) -> f64 {
        f64::from(self.count(index)) / f64::from(TOTAL)
    }

    fn index_of(&self, symbol: i32) -> Option<usize> {
        let i = i64::from(symbol) - i64::from(self.offset);
        (0..self.len() as i64).contains(&i).then_some(i as usize)
    }

    fn lookup(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }
}

/// Byte-oriented range encoder: 64-bit `low` with carry propagation,
/// 32-bit `range`.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the interval `[start, start + size)` out of `TOTAL`.
    pub fn encode_interval(&mut self, start: u32, size: u32) {
        debug_assert!(size > 0 && start + size <= TOTAL);
        let r = self.range >> PRECISION;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes a raw 16-bit value with the uniform distribution.
    pub fn encode_uniform16(&mut self, value: u16) {
        self.encode_interval(u32::from(value), 1);
    }

    pub fn encode(&mut self, symbol: i32, table: &CdfTable) -> Result<()> {
        let i = table
            .index_of(symbol)
            .ok_or_else(|| Error::Coding(format!("symbol {symbol} outside support {:?}", table.support())))?;
        self.encode_interval(table.cdf[i], table.count(i));
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        // The first byte out is the initial empty cache and always zero.
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            buf,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| Error::Coding(format!("range decoder ran past the end of a {}-byte stream", self.buf.len())))?;
        self.pos += 1;
        Ok(b)
    }

    fn target(&mut self) -> Result<(u32, u32)> {
        let r = self.range >> PRECISION;
        let t = self.code / r;
        if t >= TOTAL {
            return Err(Error::Coding("corrupt range-coded stream".into()));
        }
        Ok((r, t))
    }

    fn consume(&mut self, r: u32, start: u32, size: u32) -> Result<()> {
        self.code -= r * start;
        self.range = r * size;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let (r, t) = self.target()?;
        let i = table.lookup(t);
        self.consume(r, table.cdf[i], table.count(i))?;
        Ok(table.offset + i as i32)
    }

    pub fn decode_uniform16(&mut self) -> Result<u16> {
        let (r, t) = self.target()?;
        self.consume(r, t, 1)?;
        Ok(t as u16)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Errors unless every byte of the stream has been consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Coding(format!(
                "{} trailing bytes after the last symbol",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Codes `symbols[i]` with `tables[i]`.
pub fn range_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Contract(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (i, (&s, t)) in symbols.iter().zip(tables).enumerate() {
        enc.encode(s, t)
            .map_err(|e| Error::Coding(format!("symbol index {i}: {e}")))?;
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols; table `i` must match the one used to encode symbol
/// `i`. The stream must be consumed exactly.
pub fn range_decode(bytes: &[u8], tables: &[&CdfTable], n: usize) -> Result<Vec<i32>> {
    if tables.len() != n {
        return Err(Error::Contract(format!("{n} symbols requested but {} tables", tables.len())));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let out = tables.iter().map(|t| dec.decode(t)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
