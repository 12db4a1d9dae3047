pub mod bench;
pub mod mpcc;
pub mod path;
pub mod prediction;
pub mod sim;
pub mod solver;
pub mod vehicle;
pub mod warmstart;
