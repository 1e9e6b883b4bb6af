pub mod error;
pub mod linalg;
pub mod random;
pub mod network;
pub mod posterior;
pub mod wide_limit;
pub mod metrics;
pub mod cli;
