//! Diagonal selective state-space model: scan kernels, the differentiable
//! batched op, and the gated block built on it.

mod block;
pub(crate) mod kernel;
mod scan;

pub use block::{dt_rank, SelectiveSsm, SsmParams, CONV_WIDTH};

pub use scan::{discretize, scan_parallel, scan_sequential, Direction, ScanElement, ScanMode};
