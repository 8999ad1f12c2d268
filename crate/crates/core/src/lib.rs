//! Checkpoint merging, corpus slicing and branch-and-merge training.
//!
//! * [`checkpoint`] reads and writes named-tensor containers.
//! * [`merge`] holds task-vector algebra and the merge kernels.
//! * [`slice`] builds weighted mixtures and partitions them into slices.
//! * [`orchestrator`] runs the branch → train → merge loop.
//! * [`toylab`] is a small trainer and synthetic task suite that plugs into
//!   the orchestrator.

pub mod checkpoint;
pub mod merge;
pub mod orchestrator;
pub mod seed;
pub mod slice;
pub mod toylab;
