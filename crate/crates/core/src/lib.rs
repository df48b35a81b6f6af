pub mod ccp;
pub mod cli;
pub mod factor;
pub mod gemm;
pub mod hwdesc;
pub mod matrix;
pub mod microkernel;
pub mod pack;
pub mod reference;

pub use ccp::{CcpTriple, OccupancyReport, Provenance, StaticProfile};
pub use factor::{lu_blocked, BlockSize, LuResult};
pub use gemm::{gemm, oracle_gemm, GemmContext, ParallelLoop};
pub use hwdesc::{CacheHierarchy, CacheLevel, MachineDesc, RegisterFile};
pub use matrix::{MatMut, MatRef, Matrix};
pub use microkernel::{KernelKind, MicroKernelEntry, MicroKernelShape};

/// Size in bytes of the element type used throughout (FP64).
pub const ELEM_BYTES: usize = 8;
