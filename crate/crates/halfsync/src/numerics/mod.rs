//! Precision-policed numerics: the binary16 codec, tensor storage, and the
//! small set of tensor ops the model needs, each rounding intermediates
//! according to an explicit [`PrecisionPolicy`].
//!
//! All tensors hold `f64` values that are invariantly representable in their
//! declared precision; ops quantize every intermediate as the policy
//! dictates, so an `fp64` policy reproduces plain double arithmetic bit for
//! bit while an `fp16` policy reproduces what dedicated half-precision
//! hardware would produce.

pub mod half;
mod tensor;

pub use half::{decode, encode, Half};
pub use tensor::{cast, elementwise, matmul, matmul_seq, CastStats, ElemOp, Tensor};

use serde::{Deserialize, Serialize};

/// Storage/arithmetic width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Fp32,
    Fp64,
}

impl Precision {
    /// Bytes per element on the wire and in checkpoints.
    pub const fn bytes(self) -> usize {
        match self {
            Precision::Fp16 => 2,
            Precision::Fp32 => 4,
            Precision::Fp64 => 8,
        }
    }

    /// Round an `f64` to this precision and widen back. Identity for `Fp64`.
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::Fp16 => half::decode(half::encode(x)),
            Precision::Fp32 => x as f32 as f64,
            Precision::Fp64 => x,
        }
    }

    /// True if `x` is exactly representable (including the non-finite
    /// values, which every width can spell).
    pub fn representable(self, x: f64) -> bool {
        x.is_nan() || self.quantize(x) == x || self.quantize(x).to_bits() == x.to_bits()
    }

    /// Wire dtype code used in message headers and checkpoints.
    pub const fn code(self) -> u8 {
        match self {
            Precision::Fp16 => 0,
            Precision::Fp32 => 1,
            Precision::Fp64 => 2,
        }
    }

    pub fn from_code(code: u8) -> crate::Result<Precision> {
        match code {
            0 => Ok(Precision::Fp16),
            1 => Ok(Precision::Fp32),
            2 => Ok(Precision::Fp64),
            _ => Err(crate::Error::Config(format!("unknown dtype code {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp16 => "fp16",
            Precision::Fp32 => "fp32",
            Precision::Fp64 => "fp64",
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Precision> {
        match s {
            "fp16" | "half" => Ok(Precision::Fp16),
            "fp32" | "single" => Ok(Precision::Fp32),
            "fp64" | "double" => Ok(Precision::Fp64),
            other => Err(crate::Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

/// Where each class of intermediate value gets rounded.
///
/// * `math` — forward/backward activations and per-term products
/// * `sync` — the wire format for gradient/parameter collectives
/// * `update` — the master copy of the weights on the root rank
/// * `accumulator` — dot-product and gradient-sum accumulators
///
/// The half-precision preset keeps `fp32` accumulators and master weights
/// (the usual mixed-precision recipe); [`PrecisionPolicy::strict_fp16`] exists
/// to demonstrate why, by rounding the accumulators too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionPolicy {
    pub math: Precision,
    pub sync: Precision,
    pub update: Precision,
    pub accumulator: Precision,
}

impl PrecisionPolicy {
    pub const fn fp64() -> Self {
        PrecisionPolicy {
            math: Precision::Fp64,
            sync: Precision::Fp64,
            update: Precision::Fp64,
            accumulator: Precision::Fp64,
        }
    }

    pub const fn fp32() -> Self {
        PrecisionPolicy {
            math: Precision::Fp32,
            sync: Precision::Fp32,
            update: Precision::Fp32,
            accumulator: Precision::Fp32,
        }
    }

    /// Mixed half precision: half math and wire traffic, single-precision
    /// accumulators and master weights.
    pub const fn fp16() -> Self {
        PrecisionPolicy {
            math: Precision::Fp16,
            sync: Precision::Fp16,
            update: Precision::Fp32,
            accumulator: Precision::Fp32,
        }
    }

    /// Everything in half precision, accumulators included. Long dot
    /// products visibly lose accuracy under this policy; it exists for
    /// side-by-side comparisons, not for training runs.
    pub const fn strict_fp16() -> Self {
        PrecisionPolicy {
            math: Precision::Fp16,
            sync: Precision::Fp16,
            update: Precision::Fp16,
            accumulator: Precision::Fp16,
        }
    }

    pub fn preset(name: &str) -> crate::Result<Self> {
        match name {
            "fp64" => Ok(Self::fp64()),
            "fp32" => Ok(Self::fp32()),
            "fp16" => Ok(Self::fp16()),
            "strict_fp16" => Ok(Self::strict_fp16()),
            other => Err(crate::Error::Config(format!(
                "unknown precision preset '{other}' (expected fp64, fp32, fp16 or strict_fp16)"
            ))),
        }
    }
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self::fp32()
    }
}
