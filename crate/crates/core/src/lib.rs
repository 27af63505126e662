pub mod experiment;
pub mod model;
pub mod protocol;
pub mod seed;
pub mod task;
pub mod taskbench;
pub mod tensor;
pub mod transport;

pub use task::TaskKind;
