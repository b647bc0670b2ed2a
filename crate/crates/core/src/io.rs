//! Little-endian binary helpers and the small raster formats shared by the
//! dataset, checkpoint and uncertainty-map files.

use std::fs;
use std::path::Path;

use crate::error::{CrispError, Result};
use crate::mask::Mask;

/// Magic prefix of raw uncertainty-map sidecar files.
pub const UNCERTAINTY_MAGIC: &[u8; 8] = b"CRSPUM01";

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice; every short read is a format error.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(CrispError::Format(format!(
                "truncated payload: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != expected {
            return Err(CrispError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            CrispError::Format("payload length overflows".into())
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CrispError::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Binary 8-bit PGM (P5).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 file with maxval 255 written by [`encode_pgm`] (or any tool
/// that does not put comments in the header).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CrispError::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(CrispError::Format(format!(
            "unsupported PGM header {} ... maxval {}",
            fields[0], fields[3]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| CrispError::Format(format!("bad PGM dimension {s:?}")))
    };
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(CrispError::Format(format!(
            "PGM payload has {} bytes, expected {}",
            pixels.len(),
            width * height
        )));
    }
    Ok((width, height, pixels.to_vec()))
}

/// Class-index image: each byte is the class label.
pub fn save_mask_pgm(mask: &Mask, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(mask.width(), mask.height(), mask.labels()))?;
    Ok(())
}

pub fn load_mask_pgm(path: &Path, num_classes: usize) -> Result<Mask> {
    let (w, h, px) = decode_pgm(&fs::read(path)?)?;
    Mask::new(h, w, num_classes, px)
}

/// Quantizes values in `[0,1]` to `round(255·u)`.
pub fn unit_to_u8(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&u| (255.0 * u.clamp(0.0, 1.0)).round() as u8)
        .collect()
}

pub fn encode_uncertainty_raw(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(UNCERTAINTY_MAGIC)
        .u32(height as u32)
        .u32(width as u32)
        .f64s(values);
    w.finish()
}

pub fn decode_uncertainty_raw(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = ByteReader::new(bytes);
    r.magic(UNCERTAINTY_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let values = r.f64s(h * w)?;
    r.finish()?;
    Ok((h, w, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let px = vec![0, 1, 2, 255, 7, 9];
        let enc = encode_pgm(3, 2, &px);
        assert!(enc.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&enc).unwrap(), (3, 2, px));
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn raw_sidecar_layout() {
        let enc = encode_uncertainty_raw(2, 3, &[0.0, 0.5, 1.0, 0.25, 0.125, 0.0]);
        assert_eq!(enc.len(), 8 + 4 + 4 + 6 * 8);
        let (h, w, v) = decode_uncertainty_raw(&enc).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(v[1], 0.5);
        assert!(decode_uncertainty_raw(&enc[..enc.len() - 1]).is_err());
    }

    #[test]
    fn quantization_rounds() {
        assert_eq!(unit_to_u8(&[0.0, 1.0, 0.5, 0.2]), vec![0, 255, 128, 51]);
    }
}
