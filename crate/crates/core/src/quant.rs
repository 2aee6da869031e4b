//! Uniform symmetric quantization kernels.
//!
//! A weight `w` is stored as an integer code `c = R(clip(w / delta, -2^(m-1), 2^(m-1) - 1))`
//! and read back as `delta * c`. `R` is either round-half-up (deterministic) or
//! stochastic rounding, which picks one of the two neighbouring integers with
//! probability proportional to proximity and is therefore unbiased.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("bit width {0} outside [{MIN_BITS}, {MAX_BITS}]")]
    InvalidBits(u8),
    #[error("step size must be positive and finite, got {0}")]
    InvalidDelta(f64),
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("stochastic rounding requires a random stream")]
    MissingRng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingMode {
    #[serde(alias = "dr")]
    Deterministic,
    #[serde(alias = "sr")]
    Stochastic,
}

impl RoundingMode {
    pub fn short_name(self) -> &'static str {
        match self {
            RoundingMode::Deterministic => "dr",
            RoundingMode::Stochastic => "sr",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            RoundingMode::Deterministic => 0,
            RoundingMode::Stochastic => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(RoundingMode::Deterministic),
            1 => Some(RoundingMode::Stochastic),
            _ => None,
        }
    }
}

/// Bit width, step size and rounding mode for one quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u8,
    delta: f64,
    mode: RoundingMode,
}

impl QuantSpec {
    pub fn new(bits: u8, delta: f64, mode: RoundingMode) -> Result<Self, QuantError> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(QuantError::InvalidBits(bits));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(QuantError::InvalidDelta(delta));
        }
        Ok(Self { bits, delta, mode })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mode(&self) -> RoundingMode {
        self.mode
    }

    pub fn with_delta(self, delta: f64) -> Result<Self, QuantError> {
        Self::new(self.bits, delta, self.mode)
    }

    pub fn with_mode(self, mode: RoundingMode) -> Self {
        Self { mode, ..self }
    }

    /// Smallest code, `-2^(m-1)`.
    pub fn code_min(&self) -> i32 {
        code_min(self.bits)
    }

    /// Largest code, `2^(m-1) - 1`.
    pub fn code_max(&self) -> i32 {
        code_max(self.bits)
    }

    /// Number of non-zero positive levels, `q = 2^(m-1) - 1`.
    pub fn levels(&self) -> u32 {
        self.code_max() as u32
    }

    /// Representable real interval `[-2^(m-1) * delta, (2^(m-1) - 1) * delta]`.
    pub fn real_range(&self) -> (f64, f64) {
        (
            dequantize(self.code_min(), self.delta),
            dequantize(self.code_max(), self.delta),
        )
    }
}

pub fn code_min(bits: u8) -> i32 {
    -(1i32 << (bits - 1))
}

pub fn code_max(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Counter-based random stream.
///
/// The stream is a ChaCha8 keystream whose key is the triple
/// `(seed, index, iteration)`, so any (parameter, step) pair can be replayed
/// without touching the rest of the run.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    index: u64,
    iteration: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, 0, 0)
    }

    pub fn keyed(seed: u64, index: u64, iteration: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&index.to_le_bytes());
        key[16..24].copy_from_slice(&iteration.to_le_bytes());
        Self {
            seed,
            index,
            iteration,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> (u64, u64, u64) {
        (self.seed, self.index, self.iteration)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

pub fn clip(v: f64, lo: f64, hi: f64) -> Result<f64, QuantError> {
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(QuantError::InvalidRange { lo, hi });
    }
    Ok(v.max(lo).min(hi))
}

/// Round to nearest with ties going up: `floor(x)` when the fractional part is
/// below one half, `floor(x) + 1` otherwise.
pub fn round_det(x: f64) -> Result<i64, QuantError> {
    if !x.is_finite() {
        return Err(QuantError::NonFinite(x));
    }
    let floor = x.floor();
    let r = if x - floor < 0.5 { floor } else { floor + 1.0 };
    Ok(r as i64)
}

/// Stochastic rounding: `floor(x) + 1` with probability `x - floor(x)`.
pub fn round_stoch(x: f64, rng: &mut RngStream) -> Result<i64, QuantError> {
    if !x.is_finite() {
        return Err(QuantError::NonFinite(x));
    }
    let floor = x.floor();
    let frac = x - floor;
    let up = rng.next_unit() < frac;
    Ok(floor as i64 + i64::from(up))
}

/// Quantize a real weight to its integer code.
///
/// `rng` is only consulted in stochastic mode.
pub fn quantize_to_int(
    w: f64,
    spec: &QuantSpec,
    rng: Option<&mut RngStream>,
) -> Result<i32, QuantError> {
    if !w.is_finite() {
        return Err(QuantError::NonFinite(w));
    }
    let scaled = clip(
        w / spec.delta,
        f64::from(spec.code_min()),
        f64::from(spec.code_max()),
    )?;
    let code = match spec.mode {
        RoundingMode::Deterministic => round_det(scaled)?,
        RoundingMode::Stochastic => round_stoch(scaled, rng.ok_or(QuantError::MissingRng)?)?,
    };
    Ok(code as i32)
}

/// Deterministic quantize-dequantize, `Q_D(w)`.
pub fn fake_quantize_det(w: f64, bits: u8, delta: f64) -> Result<f64, QuantError> {
    let spec = QuantSpec::new(bits, delta, RoundingMode::Deterministic)?;
    Ok(dequantize(quantize_to_int(w, &spec, None)?, delta))
}

#[inline]
pub fn dequantize(code: i32, delta: f64) -> f64 {
    delta * f64::from(code)
}

/// Straight-through gradient of `Q_D(w)` with respect to the step size.
///
/// Inside the clipping range this is `R_D(w/delta) - w/delta`; in the clipped
/// tails it is the bound the code is pinned to.
pub fn lsq_step_grad(w: f64, spec: &QuantSpec) -> Result<f64, QuantError> {
    if !w.is_finite() {
        return Err(QuantError::NonFinite(w));
    }
    let scaled = w / spec.delta;
    let lo = f64::from(spec.code_min());
    let hi = f64::from(spec.code_max());
    if scaled <= lo {
        Ok(lo)
    } else if scaled >= hi {
        Ok(hi)
    } else {
        Ok(round_det(scaled)? as f64 - scaled)
    }
}

/// Gradient of `clip(w, -alpha, alpha)` with respect to `alpha`.
pub fn pact_clip_grad(w: f64, alpha: f64) -> Result<f64, QuantError> {
    if !(alpha > 0.0) {
        return Err(QuantError::InvalidParameter {
            name: "alpha",
            value: alpha,
        });
    }
    if !w.is_finite() {
        return Err(QuantError::NonFinite(w));
    }
    Ok(if w >= alpha {
        1.0
    } else if w <= -alpha {
        -1.0
    } else {
        0.0
    })
}
