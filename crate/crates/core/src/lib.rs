//! Turbulence mitigation by test-time optimisation of a neural video representation.
//!
//! A video is modelled as a [`fields::ConvrtModel`]: a deformation field that
//! predicts per-pixel warps plus a content field that renders colour.  The model
//! is fitted to an observed clip with [`optimizer::train`] under the objectives
//! in [`losses`], optionally assisted by an external [`oracle`] for semantic and
//! perceptual terms.  [`flowlab`] and [`quality`] hold the evaluation metrics and
//! [`turbsim`] synthesises degraded clips with known ground truth.

pub mod cli;
pub mod diffcore;
pub mod eval;
pub mod fields;
pub mod flowlab;
pub mod imgproc;
pub mod io;
pub mod losses;
pub mod optimizer;
pub mod oracle;
pub mod quality;
pub mod selfcheck;
pub mod turbsim;
