//! Audio-visual segmentation model: fusion encoders, query-based decoder,
//! mask head, and the losses/metrics that drive training.

pub mod eim;
pub mod encoders;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mtm;
pub mod nn;
pub mod params;
pub mod seg_head;
#[cfg(test)]
pub(crate) mod testutil;
