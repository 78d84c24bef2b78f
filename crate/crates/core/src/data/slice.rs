//! In-memory slices and the MD3S file format.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;

pub const MD3S_MAGIC: &[u8; 4] = b"MD3S";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL0";
pub const MD3S_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

/// One axial slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    /// `[H, W]` intensities.
    pub pixels: Tensor,
    /// Millimetres per pixel along rows and columns.
    pub spacing: (f64, f64),
    /// Row-major class labels, one per pixel.
    pub label: Option<Vec<u8>>,
    pub split: Split,
    /// Set once intensities have been windowed to `[0, 1]`.
    pub normalized: bool,
}

impl SliceRecord {
    pub fn new(pixels: Tensor, spacing: (f64, f64), label: Option<Vec<u8>>) -> Result<Self> {
        if pixels.rank() != 2 {
            return Err(Error::shape("slice", format!("pixels must be H×W, got {:?}", pixels.shape())));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        if let Some(l) = &label {
            if l.len() != pixels.numel() {
                return Err(Error::shape(
                    "slice",
                    format!("{} labels for {:?} pixels", l.len(), pixels.shape()),
                ));
            }
        }
        Ok(Self {
            pixels,
            spacing,
            label,
            split: Split::Train,
            normalized: false,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// MD3S encoding. Values are stored as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.pixels.numel();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n + self.label.as_ref().map_or(0, |l| 4 + l.len()));
        out.extend_from_slice(MD3S_MAGIC);
        out.extend_from_slice(&MD3S_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        out.extend_from_slice(&(self.spacing.0 as f32).to_le_bytes());
        out.extend_from_slice(&(self.spacing.1 as f32).to_le_bytes());
        for &v in self.pixels.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(l) = &self.label {
            out.extend_from_slice(LABEL_MAGIC);
            out.extend_from_slice(l);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (h, w, spacing) = parse_header(bytes, path)?;
        let n = h * w;
        let body = &bytes[HEADER_LEN..];
        if body.len() < 4 * n {
            return Err(Error::format(path, format!("truncated pixel data: need {} bytes, have {}", 4 * n, body.len())));
        }
        let data = body[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let rest = &body[4 * n..];
        let label = match rest.len() {
            0 => None,
            _ if rest.len() == 4 + n && &rest[..4] == LABEL_MAGIC => Some(rest[4..].to_vec()),
            _ if rest.len() >= 4 && &rest[..4] != LABEL_MAGIC => {
                return Err(Error::format(path, "trailing data is not a LBL0 block"));
            }
            _ => return Err(Error::format(path, format!("label block has {} bytes, expected {}", rest.len(), 4 + n))),
        };
        let pixels = Tensor::new(vec![h, w], data)?;
        SliceRecord::new(pixels, spacing, label).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::from)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, (f64, f64))> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than the MD3S header"));
    }
    if &bytes[..4] != MD3S_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected MD3S", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MD3S_VERSION {
        return Err(Error::format(path, format!("unsupported MD3S version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let f32_at = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64;
    let (h, w) = (u32_at(6), u32_at(10));
    let spacing = (f32_at(14), f32_at(18));
    if h == 0 || w == 0 || !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::format(path, format!("invalid geometry {h}×{w}, spacing {spacing:?}")));
    }
    Ok((h, w, spacing))
}

/// Reads and validates only the header: `(height, width, spacing, has_label)`.
pub fn read_header(path: &Path) -> Result<(usize, usize, (f64, f64), bool)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut head = [0u8; HEADER_LEN];
    f.read_exact(&mut head).map_err(|_| Error::format(path, "file shorter than the MD3S header"))?;
    let (h, w, spacing) = parse_header(&head, path)?;
    let len = f.metadata()?.len() as usize;
    let px = HEADER_LEN + 4 * h * w;
    let has_label = match len {
        l if l == px => false,
        l if l == px + 4 + h * w => true,
        l => return Err(Error::format(path, format!("file length {l} does not match {h}×{w} slice"))),
    };
    Ok((h, w, spacing, has_label))
}
