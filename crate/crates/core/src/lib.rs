pub mod clock;
pub mod linsolve;
pub mod stats;
pub mod systems;
pub mod wire;
pub mod service;
pub mod drivers;
pub mod hygiene;
pub mod harness;
pub mod report;
pub mod cli;
