//! Contour-perturbed dual-branch self-supervised learning for point clouds.

pub mod cloud;
pub mod data;
pub mod disentangle;
pub mod fixtures;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod probe;
pub mod tensor;
pub mod train;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/clouds.md")]
    struct Clouds;
    #[doc = include_str!("../../../book/src/disentangle.md")]
    struct Disentangle;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/probing.md")]
    struct Probing;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
