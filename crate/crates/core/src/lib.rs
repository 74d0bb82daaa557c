//! Open-world, query-based instance segmentation at desk scale.

pub mod assignment;
pub mod cli;
pub mod contrastive;
pub mod evaluation;
pub mod geometry;
pub mod gradsuite;
pub mod inference;
pub mod losses;
pub mod model;
pub mod pseudolabel;
pub mod rle;
pub mod shapeworld;
pub mod tensor;
pub mod trainer;
