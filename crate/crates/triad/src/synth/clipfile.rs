//! Raw clip container: 16-byte header (magic `RACV`, u32 T/H/W little-endian)
//! followed by `T*H*W*4` little-endian f32 values. Bit-exact round trips.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::error::{Error, Result};

pub const CLIP_MAGIC: [u8; 4] = *b"RACV";
pub const CHANNELS: usize = 4;

pub fn write_clip(path: &Path, frames: &Array4<f32>) -> Result<()> {
    let (t, h, w, c) = frames.dim();
    if c != CHANNELS {
        return Err(Error::Shape {
            expected: format!("(T, H, W, {CHANNELS})"),
            got: format!("{:?}", frames.shape()),
        });
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&CLIP_MAGIC)?;
    out.write_all(&(t as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    let std_order = frames.as_standard_layout();
    for &v in std_order.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<Array4<f32>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    if header[0..4] != CLIP_MAGIC {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{}: bad clip magic", path.display()),
        });
    }
    let t = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let count = t * h * w * CHANNELS;
    let mut bytes = Vec::with_capacity(count * 4);
    file.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::TruncatedBlob {
            name: path.display().to_string(),
            need: count * 4,
            have: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Array4::from_shape_vec((t, h, w, CHANNELS), values).map_err(|e| Error::Shape {
        expected: format!("({t}, {h}, {w}, {CHANNELS})"),
        got: e.to_string(),
    })
}
