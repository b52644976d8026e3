//! Binary morphological networks that train smoothly and run on bits.
//!
//! The crate implements a network family whose neurons are smooth, trainable
//! relaxations of binary dilation and erosion. After gradient training, each
//! neuron is either recognized exactly as a morphological operator or
//! projected onto the nearest one, and the whole network compiles into a
//! pipeline of bit-packed dilations, erosions, unions and intersections.
//!
//! Module map:
//!
//! - [`autodiff`]: reverse-mode tape over dense `f64` tensors.
//! - [`morphology`]: bit-packed binary morphology plus a naive set oracle.
//! - [`layers`]: the smooth neurons, reparametrizations and level sets.
//! - [`network`]: layer stacks, architecture description, forward pass.
//! - [`qp`]: dense projection QP solver with dual recovery.
//! - [`binarize`]: activation checks, projections, pipeline compilation.
//! - [`regularize`]: losses pulling weights toward binarizable sets.
//! - [`train`]: initialization, Adam, schedules, the training loop.
//! - [`dataio`]: synthetic datasets, IDX files, metrics, model files.
//! - [`cli`]: batch commands used by the `bimonn` binary.
//!
//! Start with the `examples/` directory: each file is a runnable tour of one
//! capability.

pub mod autodiff;
pub mod layers;
pub mod morphology;
