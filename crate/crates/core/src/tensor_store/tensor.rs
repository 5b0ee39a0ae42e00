use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Element type tag of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    /// Two signed 4-bit values per byte, low nibble first.
    I4x2,
    /// Four signed 2-bit values per byte, lowest crumb first.
    I2x4,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::I8 => "I8",
            DType::I4x2 => "I4x2",
            DType::I2x4 => "I2x4",
        }
    }

    /// Payload size in bytes for `numel` elements, including padding bits.
    pub fn byte_len(self, numel: usize) -> usize {
        match self {
            DType::F32 => numel * 4,
            DType::I8 => numel,
            DType::I4x2 => numel.div_ceil(2),
            DType::I2x4 => numel.div_ceil(4),
        }
    }

    /// Integer dtype used to store values quantized to `bits`.
    pub fn for_bits(bits: u8) -> Option<DType> {
        match bits {
            8 => Some(DType::I8),
            4 => Some(DType::I4x2),
            2 => Some(DType::I2x4),
            _ => None,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            DType::F32 => 32,
            DType::I8 => 8,
            DType::I4x2 => 4,
            DType::I2x4 => 2,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DType::F32)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(DType::F32),
            "I8" => Ok(DType::I8),
            "I4x2" => Ok(DType::I4x2),
            "I2x4" => Ok(DType::I2x4),
            other => Err(Error::Format(format!("unknown dtype `{other}`"))),
        }
    }
}

/// A named dense array stored as little-endian row-major bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    /// Builds a tensor from raw payload bytes, checking the byte length.
    pub fn from_bytes(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        let numel = numel(&shape);
        let expected = dtype.byte_len(numel);
        if data.len() != expected {
            return Err(Error::Corruption(format!(
                "tensor `{name}`: {dtype} {shape:?} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            name,
            dtype,
            shape,
            data,
        })
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor::from_bytes(name, DType::F32, shape, data)
    }

    /// Packs signed integers into the narrowest dtype that holds `bits`.
    pub fn from_ints(name: impl Into<String>, shape: Vec<usize>, bits: u8, values: &[i8]) -> Result<Self> {
        let dtype =
            DType::for_bits(bits).ok_or_else(|| Error::Argument(format!("unsupported bit-width {bits}")))?;
        let data = match dtype {
            DType::I8 => values.iter().map(|&v| v as u8).collect(),
            DType::I4x2 => pack_i4(values),
            DType::I2x4 => pack_i2(values),
            DType::F32 => unreachable!(),
        };
        Tensor::from_bytes(name, dtype, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Decodes an F32 tensor.
    pub fn to_f32(&self) -> Result<Vec<f32>> {
        if self.dtype != DType::F32 {
            return Err(Error::Argument(format!(
                "tensor `{}` is {}, expected F32",
                self.name, self.dtype
            )));
        }
        Ok(self
            .data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    /// Decodes an integer tensor (I8, I4x2 or I2x4) to one `i8` per element.
    pub fn to_ints(&self) -> Result<Vec<i8>> {
        let n = self.numel();
        match self.dtype {
            DType::I8 => Ok(self.data.iter().map(|&b| b as i8).collect()),
            DType::I4x2 => Ok(unpack_i4(&self.data, n)),
            DType::I2x4 => Ok(unpack_i2(&self.data, n)),
            DType::F32 => Err(Error::Argument(format!(
                "tensor `{}` is F32, expected an integer dtype",
                self.name
            ))),
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Packs 4-bit two's complement values, element `2i` in the low nibble of byte `i`.
pub fn pack_i4(values: &[i8]) -> Vec<u8> {
    values
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0f;
            let hi = pair.get(1).map_or(0, |&v| (v as u8) & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_i4(bytes: &[u8], numel: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(numel);
    for &b in bytes {
        for shift in [0u8, 4] {
            if out.len() == numel {
                return out;
            }
            // shift the nibble into the top of the byte, then sign-extend
            out.push((((b >> shift) << 4) as i8) >> 4);
        }
    }
    out
}

/// Packs 2-bit two's complement values, element `4i` in the lowest crumb of byte `i`.
pub fn pack_i2(values: &[i8]) -> Vec<u8> {
    values
        .chunks(4)
        .map(|quad| {
            quad.iter()
                .enumerate()
                .fold(0u8, |acc, (j, &v)| acc | (((v as u8) & 0x03) << (2 * j)))
        })
        .collect()
}

pub fn unpack_i2(bytes: &[u8], numel: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(numel);
    for &b in bytes {
        for j in 0..4 {
            if out.len() == numel {
                return out;
            }
            out.push((((b >> (2 * j)) << 6) as i8) >> 6);
        }
    }
    out
}
