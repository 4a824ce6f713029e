//! The TQVX volume container: bit-exact, little-endian, versioned.
//!
//! Layout: magic `TQVX`, `u32` version (1), `u8` dtype (0 = f64 scalar,
//! 1 = u16 label), `u32` class count K (0 for scalars), `u32` dims
//! `(d, h, w)`, then the row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::grid::{Dims, GridError, LabelMask, Volume3D};

pub const MAGIC: &[u8; 4] = b"TQVX";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 12;

#[derive(Debug, Error)]
pub enum VolumeIoError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"TQVX\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid grid: {0}")]
    Grid(#[from] GridError),
    #[error("expected a {expected} grid, file holds a {found} grid")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
}

/// Either kind of grid the container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeGrid {
    Scalar(Volume3D),
    Labels(LabelMask),
}

impl VolumeGrid {
    fn kind(&self) -> &'static str {
        match self {
            VolumeGrid::Scalar(_) => "scalar",
            VolumeGrid::Labels(_) => "label",
        }
    }

    pub fn into_scalar(self) -> Result<Volume3D, VolumeIoError> {
        match self {
            VolumeGrid::Scalar(v) => Ok(v),
            other => Err(VolumeIoError::WrongKind {
                expected: "scalar",
                found: other.kind(),
            }),
        }
    }

    pub fn into_labels(self) -> Result<LabelMask, VolumeIoError> {
        match self {
            VolumeGrid::Labels(m) => Ok(m),
            other => Err(VolumeIoError::WrongKind {
                expected: "label",
                found: other.kind(),
            }),
        }
    }
}

impl From<Volume3D> for VolumeGrid {
    fn from(v: Volume3D) -> Self {
        VolumeGrid::Scalar(v)
    }
}

impl From<LabelMask> for VolumeGrid {
    fn from(m: LabelMask) -> Self {
        VolumeGrid::Labels(m)
    }
}

pub fn encode(grid: &VolumeGrid) -> Vec<u8> {
    let (dtype, k, dims, elem) = match grid {
        VolumeGrid::Scalar(v) => (0u8, 0u32, v.dims(), 8),
        VolumeGrid::Labels(m) => (1u8, m.num_classes() as u32, m.dims(), 2),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + dims.len() * elem);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&k.to_le_bytes());
    for d in dims.as_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match grid {
        VolumeGrid::Scalar(v) => v.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeGrid::Labels(m) => m.labels().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<VolumeGrid, VolumeIoError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(VolumeIoError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(VolumeIoError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(VolumeIoError::BadMagic(magic));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(VolumeIoError::UnsupportedVersion(version));
    }
    let dtype = bytes[8];
    let elem = match dtype {
        0 => 8,
        1 => 2,
        other => return Err(VolumeIoError::UnknownDtype(other)),
    };
    let k = u32_at(9);
    let dims = Dims::new(u32_at(13) as usize, u32_at(17) as usize, u32_at(21) as usize);
    let expected = HEADER_LEN + dims.len() * elem;
    if bytes.len() < expected {
        return Err(VolumeIoError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(VolumeIoError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(match dtype {
        0 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            VolumeGrid::Scalar(Volume3D::new(dims, data)?)
        }
        _ => {
            let labels = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let k = u16::try_from(k).map_err(|_| GridError::LabelOutOfRange {
                index: 0,
                label: u16::MAX,
                num_classes: u16::MAX,
            })?;
            VolumeGrid::Labels(LabelMask::new(dims, labels, k)?)
        }
    })
}

/// Write atomically: the bytes go to a sibling temporary file that is renamed
/// into place only after a successful flush.
pub fn write_volume(path: impl AsRef<Path>, grid: &VolumeGrid) -> Result<(), VolumeIoError> {
    write_atomic(path.as_ref(), &encode(grid))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeGrid, VolumeIoError> {
    decode(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)
}
