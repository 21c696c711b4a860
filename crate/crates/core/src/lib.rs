//! Desk-scale teacher-student semi-supervised object detection lab.
//!
//! The crate trains a tiny dense-grid detector on procedurally generated
//! scenes and compares three teacher-update regimes: the classical moving
//! average, scaling-based model refinement, and refinement combined with a
//! representation-disagreement term on the student.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod bbox;
pub mod checks;
pub mod detector;
pub mod error;
pub mod metrics;
pub mod pseudo;
pub mod rd;
pub mod refine;
pub mod scenes;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
