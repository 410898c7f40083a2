//! Floating-point abstraction for the model and trainer.
//!
//! Training runs in `f32`; gradient-checking tests instantiate the same code
//! at `f64` so that central differences resolve against analytic gradients.
//! The trait pins down the few operations the model needs beyond ordinary
//! arithmetic: transcendentals routed through `f64` (so both instantiations
//! agree to `f32` round-off), a dtype tag for checkpoints, and little-endian
//! byte I/O for tensor payloads.

use ndarray::NdFloat;

pub trait Scalar: NdFloat + Default + 'static {
    /// Dtype tag recorded in checkpoint headers.
    const DTYPE: &'static str;
    /// Payload width in bytes of one element.
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Gauss error function, computed in double precision.
    fn erf(self) -> Self {
        Self::from_f64(libm::erf(self.to_f64()))
    }

    fn put_le(self, out: &mut Vec<u8>);
    /// Reads one element from the front of `bytes`; callers validate length.
    fn get_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("short f32 payload"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("short f64 payload"))
    }
}
