//! Bit-accurate emulator of a precision-flexible CORDIC processing element
//! and the systolic array built from it.

pub mod fixedpoint;
pub mod cordic;
pub mod trace;
pub mod pe;
pub mod harness;
pub mod systolic;
pub mod container;
pub mod nn;
pub mod fixtures;
