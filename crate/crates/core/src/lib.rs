//! Attribute-aware open-vocabulary object detection at desk scale.
pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod model;
pub mod querygen;
pub mod tensor;
pub mod trainer;
