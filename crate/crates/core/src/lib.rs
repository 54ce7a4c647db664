//! Training and semi-probabilistic verification of vision-based neural
//! controllers.

pub mod boundprop;
pub mod laneworld;
pub mod neural;
pub mod perception;
pub mod rng;
pub mod train;
pub mod verify;
