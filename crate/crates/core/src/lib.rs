//! Distributed blocked sparse matrix multiplication over an in-process
//! message-passing runtime.

pub mod blockcsr;
pub mod costmodel;
pub mod exec;
pub mod gridplan;
pub mod multiply_ptp;
pub mod multiply_rma;
pub mod signdriver;
pub mod synth;
pub mod transport;
