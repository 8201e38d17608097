pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod rules;
pub mod synth;
pub mod vision;
