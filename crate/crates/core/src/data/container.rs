//! Little-endian binary container for a single dense tensor.
//!
//! Layout: `"LPNT"`, version (u8), dtype code (u8), rank (u8), one u32 per
//! dimension, then the row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"LPNT";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic {0:02x?}, expected \"LPNT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("header truncated: need {needed} bytes, file has {actual}")]
    TruncatedHeader { needed: usize, actual: usize },
    #[error("payload truncated: need {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
    #[error("rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error("dims product {product} does not match {len} elements")]
    LengthMismatch { product: usize, len: usize },
    #[error("expected {expected} tensor, found {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Self::F32 => 0,
            Self::F64 => 1,
            Self::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            2 => Some(Self::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "binary32",
            Self::F64 => "binary64",
            Self::U8 => "u8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Self::F32(_) => Dtype::F32,
            Self::F64(_) => Dtype::F64,
            Self::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense tensor of any rank as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    dims: Vec<usize>,
    payload: Payload,
}

impl Container {
    pub fn new(dims: Vec<usize>, payload: Payload) -> Result<Self, ContainerError> {
        let product = dims.iter().product::<usize>();
        if product != payload.len() {
            return Err(ContainerError::LengthMismatch {
                product,
                len: payload.len(),
            });
        }
        if dims.len() > u8::MAX as usize {
            return Err(ContainerError::RankTooLarge(dims.len()));
        }
        if let Some(&d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(ContainerError::DimTooLarge(d));
        }
        Ok(Self { dims, payload })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn dtype(&self) -> Dtype {
        self.payload.dtype()
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>), ContainerError> {
        match self.payload {
            Payload::F32(v) => Ok((self.dims, v)),
            p => Err(wrong(Dtype::F32, p.dtype())),
        }
    }

    pub fn into_f64(self) -> Result<(Vec<usize>, Vec<f64>), ContainerError> {
        match self.payload {
            Payload::F64(v) => Ok((self.dims, v)),
            p => Err(wrong(Dtype::F64, p.dtype())),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>), ContainerError> {
        match self.payload {
            Payload::U8(v) => Ok((self.dims, v)),
            p => Err(wrong(Dtype::U8, p.dtype())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dtype();
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + self.payload.len() * d.size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(d.code());
        out.push(self.dims.len() as u8);
        for &dim in &self.dims {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Decodes one container from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), ContainerError> {
        let header = |needed: usize| {
            if bytes.len() < needed {
                Err(ContainerError::TruncatedHeader {
                    needed,
                    actual: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        header(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        header(7)?;
        if bytes[4] != VERSION {
            return Err(ContainerError::UnsupportedVersion(bytes[4]));
        }
        let dtype = Dtype::from_code(bytes[5]).ok_or(ContainerError::UnknownDtype(bytes[5]))?;
        let rank = bytes[6] as usize;
        let start = 7 + 4 * rank;
        header(start)?;
        let dims: Vec<usize> = bytes[7..start]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let expected = dims
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        let body = &bytes[start..];
        if body.len() < expected {
            return Err(ContainerError::TruncatedPayload {
                expected,
                actual: body.len(),
            });
        }
        let body = &body[..expected];
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(body.to_vec()),
        };
        Ok((Self { dims, payload }, start + expected))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let (c, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(ContainerError::TrailingBytes(bytes.len() - used));
        }
        Ok(c)
    }
}

fn wrong(expected: Dtype, found: Dtype) -> ContainerError {
    ContainerError::WrongDtype {
        expected: expected.name(),
        found: found.name(),
    }
}

pub fn save_container(path: &Path, c: &Container) -> Result<(), ContainerError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&c.to_bytes())?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container, ContainerError> {
    Container::from_bytes(&fs::read(path)?)
}
