//! `FGRD` feature-grid files: the magic `FGRD`, little-endian `u32` height,
//! width and channels, then `H*W*C` little-endian `f32` values, row-major
//! and channel-minor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

pub const MAGIC: &[u8; 4] = b"FGRD";

/// Raw file contents, kept in `f32` so round trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct FgrdPayload {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl FgrdPayload {
    pub fn from_grid(grid: &FeatureGrid) -> Result<Self> {
        let dim = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
        };
        let data: Vec<f32> = grid.data().iter().map(|&v| v as f32).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("value {i} overflows f32")));
        }
        Ok(Self {
            height: dim(grid.height(), "height")?,
            width: dim(grid.width(), "width")?,
            channels: dim(grid.channels(), "channels")?,
            data,
        })
    }

    pub fn to_grid(&self) -> Result<FeatureGrid> {
        FeatureGrid::new(
            self.height as usize,
            self.width as usize,
            self.channels as usize,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let expected = self.height as usize * self.width as usize * self.channels as usize;
        if self.data.len() != expected {
            return Err(Error::Format(format!(
                "payload holds {} values, header implies {expected}",
                self.data.len()
            )));
        }
        w.write_all(MAGIC)?;
        for v in [self.height, self.width, self.channels] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated FGRD header".into()))?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("bad magic, not an FGRD file".into()));
        }
        let word = |i: usize| u32::from_le_bytes([head[i], head[i + 1], head[i + 2], head[i + 3]]);
        let (height, width, channels) = (word(4), word(8), word(12));
        let n = (height as u64) * (width as u64) * (channels as u64);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() as u64 != n * 4 {
            return Err(Error::Format(format!(
                "{height}x{width}x{channels} grid needs {} payload bytes, found {}",
                n * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }
}

/// Values are narrowed to `f32` on write.
pub fn write_grid(path: &Path, grid: &FeatureGrid) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    FgrdPayload::from_grid(grid)?.write_to(BufWriter::new(f))
}

pub fn read_grid(path: &Path) -> Result<FeatureGrid> {
    let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    FgrdPayload::read_from(BufReader::new(f))?.to_grid()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let p = FgrdPayload {
            height: 1,
            width: 2,
            channels: 1,
            data: vec![1.0, -2.5],
        };
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FGRD");
        assert_eq!(&buf[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(FgrdPayload::read_from(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(FgrdPayload::read_from(&b"FGR"[..]).is_err());
        assert!(
            FgrdPayload::read_from(&b"XGRD\x01\0\0\0\x01\0\0\0\x01\0\0\0\0\0\0\0"[..]).is_err()
        );
        assert!(
            FgrdPayload::read_from(&b"FGRD\x01\0\0\0\x01\0\0\0\x02\0\0\0\0\0\0\0"[..]).is_err()
        );
    }
}
