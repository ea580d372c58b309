//! Contour-driven instance segmentation for baggage X-ray scans.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`imgcore`] loads and standardizes scans and provides the raster
//!    primitives (directional derivatives, Gaussian smoothing).
//! 2. [`tenpool`] turns a scan into a multi-scale tensor map by pooling
//!    orientation structure tensors over an image pyramid.
//! 3. [`neuralseg`] is a small encoder-decoder that labels item contours
//!    per category from that map. It is trained with focal loss and ADADELTA.
//! 4. [`instancing`] closes and fills the predicted contours into instance
//!    masks and boxes, which [`evalmetrics`] scores against ground truth.
//!
//! [`datasets`] handles manifests, ground-truth contour targets and the
//! synthetic corpus used for desk-scale verification.

pub mod datasets;
pub mod error;
pub mod evalmetrics;
pub mod imgcore;
pub mod instancing;
pub(crate) mod morph;
pub mod neuralseg;
pub mod selftest;
pub mod tenpool;

pub use error::{Error, Result};
