pub mod agents;
pub mod chain;
pub mod data;
pub mod digest;
pub mod federation;
pub mod identity;
pub mod model;
pub mod sim;
pub mod unlearning;
