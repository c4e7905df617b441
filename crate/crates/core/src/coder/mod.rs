//! Entropy coding and the `MCBS1` container.
//!
//! Symbols are coded with a byte-oriented range coder driven by 16-bit
//! cumulative frequency tables. The hyper-latent uses one table per channel
//! from the factorized prior; each latent element uses the Gaussian table
//! whose scale is nearest its predicted `σ`. Container layout is described
//! in `book/src/formats/bitstream.md`.

mod bitstream;
mod range;
mod tables;

pub use bitstream::{deserialize, serialize, Bitstream, Decoded, HEADER_LEN, MAGIC, VERSION};
pub use range::{range_decode, range_encode, CdfTable, RangeDecoder, RangeEncoder, PRECISION, TOTAL};
pub use tables::{
    build_factorized_cdfs, build_gaussian_cdfs, scale_index, scale_table, support_radius, EscapeTable,
    GaussianTables, NUM_SCALES, SCALE_MAX, TAIL_MASS,
};
