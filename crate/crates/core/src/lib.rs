pub mod autograd;
pub mod constraints;
pub mod corpus;
pub mod eval;
pub mod exec;
pub mod model;
pub mod training;
pub mod worldgen;
