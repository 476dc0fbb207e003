//! Multi-session visual SLAM: merge maps of one environment recorded under
//! different illumination into a single pose graph and localize new frames
//! against all sessions at once.

pub mod bayes;
pub mod eval;
pub mod features;
pub mod geom;
pub mod graph;
pub mod io;
pub mod registration;
pub mod slam;
pub mod synthworld;
pub mod vocabulary;
