pub mod augment;
pub mod corpus;
pub mod eval;
pub mod llm_gateway;
pub mod tinylm;
pub mod train;
