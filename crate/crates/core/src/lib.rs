pub mod cli;
pub mod data_synth;
pub mod decode_metrics;
pub mod diffcore;
pub mod linguistics;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod verify;
