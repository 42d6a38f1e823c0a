pub mod arch;
pub mod cli;
pub mod latency;
pub mod nn;
pub mod slimming;
pub mod supernet;
pub mod tensor;
pub mod training;
