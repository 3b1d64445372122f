pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod verify;
