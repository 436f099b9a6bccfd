pub mod config;
pub mod data;
pub mod error;
pub mod interventions;
pub mod model;
pub mod report;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    struct Tokenizer;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/interventions.md")]
    struct Interventions;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
