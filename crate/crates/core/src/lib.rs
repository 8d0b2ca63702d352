//! Flame detection in thermal imagery with RGB-derived patch labels and
//! prototype-based deep metric learning.

pub mod checkpoint;
pub mod cli;
pub mod dml;
pub mod eval;
pub mod gradcheck;
pub mod imaging;
pub mod model;
pub mod pipeline;
pub mod segmentation;
pub mod util;
