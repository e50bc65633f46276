//! Explanation-guided GNN benchmark core.
//!
//! Trains GNN backbones under property-controlled out-of-distribution splits,
//! optionally constrained by explanation masks (EG-GNN), and scores graph
//! explainers by the Explanation-Generalization Score (EGS): the relative
//! OOD balanced-accuracy improvement of a mask-guided model over the
//! unconstrained baseline.

pub mod autodiff;
pub mod graph;

pub use autodiff::{finite_difference_check, AutodiffError, GradOptions, ReluBackward, Tape, Value};
pub use graph::Graph;
