use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Supported integer widths.
pub const SUPPORTED_BITS: [u8; 3] = [2, 4, 8];

pub fn check_bits(bits: u8) -> Result<u8> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(bits)
    } else {
        Err(Error::Argument(format!(
            "unsupported bit-width {bits}, expected one of 2, 4, 8"
        )))
    }
}

/// Integer range `[qmin, qmax]` for signed `bits`-wide values.
pub fn int_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

/// Rounding used for `INT()`: nearest, ties away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Per-tensor affine quantization parameters.
///
/// Maps a real `x` in `[beta, alpha]` to `round(scale * x) + zero_point`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub beta: f64,
    pub alpha: f64,
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    /// Derives scale and zero-point from a zero-inclusive range.
    ///
    /// `scale = (2^b - 1) / (alpha - beta)` and
    /// `zero_point = -2^(b-1) - round(scale * beta)`. The all-zero range
    /// `beta == alpha == 0` maps to `scale = 1, zero_point = 0`.
    pub fn new(beta: f64, alpha: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(beta.is_finite() && alpha.is_finite()) {
            return Err(Error::Argument(format!("non-finite range [{beta}, {alpha}]")));
        }
        if beta > alpha {
            return Err(Error::Argument(format!(
                "range minimum {beta} exceeds maximum {alpha}"
            )));
        }
        if beta > 0.0 || alpha < 0.0 {
            return Err(Error::Argument(format!(
                "range [{beta}, {alpha}] does not contain zero"
            )));
        }
        if beta == alpha {
            return Ok(QuantParams {
                bits,
                beta,
                alpha,
                scale: 1.0,
                zero_point: 0,
            });
        }
        let levels = ((1u32 << bits) - 1) as f64;
        let scale = levels / (alpha - beta);
        let (qmin, qmax) = int_range(bits);
        let zero_point = qmin - round_half_away(scale * beta) as i32;
        debug_assert!((qmin..=qmax).contains(&zero_point));
        Ok(QuantParams {
            bits,
            beta,
            alpha,
            scale,
            zero_point,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.beta == self.alpha
    }

    /// Real width of one integer step.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale
    }

    #[inline]
    pub fn quantize(&self, x: f32) -> i8 {
        let (qmin, qmax) = int_range(self.bits);
        let q = round_half_away(self.scale * x as f64) as i64 + self.zero_point as i64;
        q.clamp(qmin as i64, qmax as i64) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        ((q as i32 - self.zero_point) as f64 / self.scale) as f32
    }

    /// Checks that stored values match a recomputation from `(beta, alpha, bits)`.
    pub fn check(&self) -> Result<()> {
        let fresh = QuantParams::new(self.beta, self.alpha, self.bits)?;
        if fresh.scale.to_bits() != self.scale.to_bits() || fresh.zero_point != self.zero_point {
            return Err(Error::Argument(format!(
                "inconsistent quantization parameters: stored S={} Z={}, derived S={} Z={}",
                self.scale, self.zero_point, fresh.scale, fresh.zero_point
            )));
        }
        Ok(())
    }
}

// Manifest form: every field as a decimal string. `f64` Display is the
// shortest representation that parses back to the same bits.
#[derive(Serialize, Deserialize)]
struct QuantParamsDoc {
    bits: String,
    beta: String,
    alpha: String,
    scale: String,
    zero_point: String,
}

impl Serialize for QuantParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        QuantParamsDoc {
            bits: self.bits.to_string(),
            beta: self.beta.to_string(),
            alpha: self.alpha.to_string(),
            scale: self.scale.to_string(),
            zero_point: self.zero_point.to_string(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuantParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = QuantParamsDoc::deserialize(d)?;
        let bad = |field: &str, v: &str| D::Error::custom(format!("bad {field} `{v}`"));
        Ok(QuantParams {
            bits: doc.bits.parse().map_err(|_| bad("bits", &doc.bits))?,
            beta: doc.beta.parse().map_err(|_| bad("beta", &doc.beta))?,
            alpha: doc.alpha.parse().map_err(|_| bad("alpha", &doc.alpha))?,
            scale: doc.scale.parse().map_err(|_| bad("scale", &doc.scale))?,
            zero_point: doc
                .zero_point
                .parse()
                .map_err(|_| bad("zero_point", &doc.zero_point))?,
        })
    }
}
