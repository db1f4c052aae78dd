//! Scene-graph guided compositional SDF fields: prompt decomposition, identity-aware
//! volume rendering, constraint losses and the guided training loop.

pub mod autodiff;
pub mod cli;
pub mod exporter;
pub mod field;
pub mod graph;
pub mod guidance;
pub mod losses;
pub mod optim;
pub mod render;
mod par;
pub mod space;
pub mod testing;
pub mod trainer;
