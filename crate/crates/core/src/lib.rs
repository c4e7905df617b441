pub mod codec;
pub mod coder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod regimes;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/coder.md")]
    mod coder {}
    #[doc = include_str!("../../../book/src/task.md")]
    mod task {}
    #[doc = include_str!("../../../book/src/regimes.md")]
    mod regimes {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats/bitstream.md")]
    mod bitstream {}
    #[doc = include_str!("../../../book/src/formats/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/formats/manifest.md")]
    mod manifest {}
}
