//! Toolkit for crafting block-wise decoupled adversarial patches against
//! differentiable person detectors, with the full digital evaluation
//! protocol (AP columns, occlusion sweeps, attack success rate).
//!
//! The pipeline: a patch is stochastically decoupled into block segments
//! (alpha-erased, border-shifted), pushed through a simulated physical
//! transform stack (EoT, thin plate spline, toroidal cropping), attached to
//! labeled person boxes, and optimized to minimize the accuracy-score
//! objective against a pluggable detector. A bundled toy detector makes the
//! whole loop runnable on a desktop CPU without external weights.
//!
//! See the guide under `book/` for concept chapters; its code snippets run
//! as doctests of this crate.

pub mod autodiff;
pub mod ckpt;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod imagebuf;
pub mod masks;
pub mod objective;
pub mod opt;
pub mod patch;
pub mod plot;
pub mod rng;
pub mod scheduler;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use patch::Patch;
pub use rng::SeedStreams;

/// Crate version recorded in run manifests.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

// The guide's code fences are kept compiling by running them as doctests.
#[cfg(any())]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(patches, "../../../book/src/patches.md");
    chapter!(decoupling, "../../../book/src/decoupling.md");
    chapter!(schedule, "../../../book/src/schedule.md");
    chapter!(transforms, "../../../book/src/transforms.md");
    chapter!(objective, "../../../book/src/objective.md");
    chapter!(detector, "../../../book/src/detector.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
    chapter!(formats, "../../../book/src/formats.md");
}
