//! Desk-scale spectral imaging pipeline: hypercube handling, segmentation,
//! chemometrics, wavelength selection, model explanation and map rendering.
//!
//! The crate is organized around a small set of domain types:
//!
//! - [`cube::Hypercube`] — an H×W×B reflectance volume with a wavelength axis
//! - [`segment::Mask`] / [`segment::Spectrum`] — foreground selection and ROI means
//! - [`chemometrics::SpectraTable`] / [`chemometrics::PlsrModel`] — sample spectra
//!   and partial least squares regression
//! - [`ga::GaConfig`] — genetic-algorithm wavelength selection
//! - [`shap::ShapReport`] — exact attributions for the linear regression model
//! - [`synth::SceneConfig`] — deterministic synthetic scene generation
//! - [`viz::AttributeMap`] — per-pixel prediction maps and chart emission
//!
//! All stochastic entry points take explicit seeds and are bit-reproducible.

pub mod bil;
pub mod chemometrics;
pub mod cube;
pub mod ga;
pub mod segment;
pub mod shap;
pub mod synth;
pub mod viz;

pub use cube::{Hypercube, RgbImage};
pub use segment::{Mask, Spectrum};
