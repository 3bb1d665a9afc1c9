//! Forward and backward kernels, free of any tape bookkeeping.

pub mod conv;
pub mod deform;
pub mod dynamic;
