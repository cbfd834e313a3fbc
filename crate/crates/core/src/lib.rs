pub mod categorization;
pub mod color;
pub mod corpus;
pub mod datasets;
pub mod evaluation;
pub mod features;
pub mod image_pipeline;
pub mod modeling;
pub mod pipeline;
