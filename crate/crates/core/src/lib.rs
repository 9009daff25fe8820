//! Toolkit for detecting human-to-human and human-to-object interactions.
//!
//! The pieces, bottom to top:
//!
//! * [`taxonomy`] — the fixed 51-verb registry (five categories, target and
//!   instrument rules) and the per-scene annotation validator.
//! * [`datamodel`] — scenes, instances, interaction annotations, predicted
//!   triplets, dataset statistics, and the JSON file formats.
//! * [`geometry`] — box IoU and class-wise greedy NMS.
//! * [`dense`] — anchor grids, ground-truth anchor assignment, dense map
//!   bundles, and the focal / presence / pull-push loss kernels with
//!   analytic gradients and a finite-difference gradient checker.
//! * [`decoder`] — turns a dense map bundle plus detections into scored
//!   interaction triplets in a single pass; bundle (de)serialization.
//! * [`evaluator`] — AP_agent / AP_role scoring under the
//!   Original/Objectness x Role1/Role2 scenario grid.
//! * [`synthgen`] — deterministic synthetic scenes, perfect dense bundles,
//!   and noise perturbation, closing the decode -> evaluate loop without a
//!   trained model.
//!
//! Numeric code is generic over the [`Scalar`] floating-point type; the
//! aliases below fix the default `f64` instantiations used by the CLI and
//! the file-backed paths.

pub mod datamodel;
pub mod decoder;
pub mod dense;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod scalar;
pub mod synthgen;
pub mod taxonomy;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for CLI and file-backed paths.
pub type Real = f64;

pub type BBox = datamodel::BBox<Real>;
pub type Instance = datamodel::Instance<Real>;
pub type Scene = datamodel::Scene<Real>;
pub type PredictedTriplet = datamodel::PredictedTriplet<Real>;
pub type Detection = geometry::Detection<Real>;
pub type AnchorGrid = dense::AnchorGrid<Real>;
pub type DenseMapBundle = dense::DenseMapBundle<Real>;
