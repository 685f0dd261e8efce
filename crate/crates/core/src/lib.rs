//! Double-condensing attention condenser (DC-AC) networks for binary
//! skin-lesion classification.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod layers;
pub mod backbone;
pub mod datapipe;
pub mod evaluation;
pub mod training;
pub mod checks;

// Book chapters compile as doc-tests so their snippets cannot drift.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/layers.md")]
    mod layers {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
