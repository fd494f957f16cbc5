mod crc;
pub mod denoise;
pub mod dsp;
pub mod data;
pub mod eval;
pub mod nn;
pub mod tensor;
pub mod train;
