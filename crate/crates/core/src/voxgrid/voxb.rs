//! VOXB: little-endian voxel interchange format.
//!
//! ```text
//! magic   "VOXB1\0"            6 bytes
//! flags   u8                   bit0: part labels, bit1: style labels
//! side    u32
//! occ     side³ × f32
//! part    side³ × u16          (if bit0)
//! style   side³ × u16          (if bit1)
//! ```
//! All arrays are x-fastest.

use std::fs;
use std::path::Path;

use super::{CoarseInput, LabelGrid, OccupancyGrid};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"VOXB1\0";
const HAS_PART: u8 = 0b01;
const HAS_STYLE: u8 = 0b10;

/// Contents of a VOXB file.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxbFile {
    pub occ: OccupancyGrid,
    pub part: Option<Vec<u16>>,
    pub style: Option<Vec<u16>>,
}

impl VoxbFile {
    pub fn occupancy(occ: OccupancyGrid) -> Self {
        Self {
            occ,
            part: None,
            style: None,
        }
    }

    pub fn from_coarse(c: &CoarseInput) -> Self {
        Self {
            occ: c.occ().clone(),
            part: Some(c.labels().part().to_vec()),
            style: Some(c.labels().style().to_vec()),
        }
    }

    pub fn with_labels(occ: OccupancyGrid, labels: &LabelGrid) -> Self {
        Self {
            occ,
            part: Some(labels.part().to_vec()),
            style: Some(labels.style().to_vec()),
        }
    }

    /// Label grid, with absent arrays read as all-zero.
    pub fn labels(&self) -> Result<LabelGrid> {
        let n = self.occ.len();
        LabelGrid::from_parts(
            self.occ.log2(),
            self.part.clone().unwrap_or_else(|| vec![0; n]),
            self.style.clone().unwrap_or_else(|| vec![0; n]),
        )
    }

    /// Interprets the file as a coarse input. When the file has no style
    /// array, `default_style` is assigned to every occupied voxel.
    pub fn into_coarse(self, default_style: Option<u16>) -> Result<CoarseInput> {
        let mut labels = self.labels()?;
        if self.style.is_none() {
            let Some(s) = default_style else {
                return Err(Error::Format(
                    "VOXB file carries no style labels and no default style was given".into(),
                ));
            };
            for (dst, &o) in labels.style_mut().iter_mut().zip(self.occ.values()) {
                if o > 0.0 {
                    *dst = s;
                }
            }
        }
        CoarseInput::new(self.occ, labels)
    }
}

pub fn voxb_to_bytes(file: &VoxbFile) -> Vec<u8> {
    let n = file.occ.len();
    let mut flags = 0u8;
    if file.part.is_some() {
        flags |= HAS_PART;
    }
    if file.style.is_some() {
        flags |= HAS_STYLE;
    }
    let mut out = Vec::with_capacity(11 + 4 * n + 4 * n);
    out.extend_from_slice(MAGIC);
    out.push(flags);
    out.extend_from_slice(&(file.occ.side() as u32).to_le_bytes());
    for v in file.occ.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for labels in [&file.part, &file.style].into_iter().flatten() {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn voxb_from_bytes(bytes: &[u8]) -> Result<VoxbFile> {
    let bad = |msg: &str| Error::Format(format!("VOXB: {msg}"));
    if bytes.len() < 11 || &bytes[..6] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let flags = bytes[6];
    if flags & !(HAS_PART | HAS_STYLE) != 0 {
        return Err(bad("unknown flag bits"));
    }
    let side = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    if side == 0 || !side.is_power_of_two() || side > (1 << super::MAX_LOG2) {
        return Err(bad(&format!("unsupported side length {side}")));
    }
    let n = side * side * side;
    let label_arrays = (flags & HAS_PART != 0) as usize + (flags & HAS_STYLE != 0) as usize;
    let expected = 11 + 4 * n + 2 * n * label_arrays;
    if bytes.len() != expected {
        return Err(bad(&format!("{} bytes, expected {expected}", bytes.len())));
    }
    let mut cursor = 11;
    let occ: Vec<f32> = bytes[cursor..cursor + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    cursor += 4 * n;
    let mut read_u16 = |present: bool| {
        present.then(|| {
            let v: Vec<u16> = bytes[cursor..cursor + 2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            cursor += 2 * n;
            v
        })
    };
    let part = read_u16(flags & HAS_PART != 0);
    let style = read_u16(flags & HAS_STYLE != 0);
    let log2 = side.trailing_zeros();
    Ok(VoxbFile {
        occ: OccupancyGrid::from_values(log2, occ)?,
        part,
        style,
    })
}

pub fn write_voxb(path: impl AsRef<Path>, file: &VoxbFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, voxb_to_bytes(file)).map_err(|e| Error::io(path, e))
}

pub fn read_voxb(path: impl AsRef<Path>) -> Result<VoxbFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    voxb_from_bytes(&bytes)
}
