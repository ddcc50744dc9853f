pub mod data;
pub mod experiment;
pub mod meta;
pub mod nn;
pub mod pooling;
pub mod tensor;
