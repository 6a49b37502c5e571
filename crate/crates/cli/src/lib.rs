//! Library surface of the experiment runner, used by the binary and by the
//! pipeline tests.

pub mod runner;
pub mod scenario;
pub mod sweep;
