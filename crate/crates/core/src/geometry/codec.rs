//! Flat binary form of a [`DiagGaussian`]: the posterior "wire format".
//!
//! Layout, all little-endian:
//!
//! | bytes        | content               |
//! |--------------|-----------------------|
//! | 4            | magic `b"BFLG"`       |
//! | 4            | version (`u32`)       |
//! | 8            | dimension `d` (`u64`) |
//! | 8·d          | mean (`f64`)          |
//! | 8·d          | variance (`f64`)      |

use std::io::{Read, Write};

use super::DiagGaussian;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: [u8; 4] = *b"BFLG";
pub const BINARY_VERSION: u32 = 1;

pub fn write_binary<W: Write>(g: &DiagGaussian, mut out: W) -> Result<()> {
    out.write_all(&BINARY_MAGIC)?;
    out.write_all(&BINARY_VERSION.to_le_bytes())?;
    out.write_all(&(g.dim() as u64).to_le_bytes())?;
    for v in g.mean().iter().chain(g.var()) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Codec(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_binary<R: Read>(mut input: R) -> Result<DiagGaussian> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if magic != BINARY_MAGIC {
        return Err(Error::Codec(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact(&mut input, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != BINARY_VERSION {
        return Err(Error::Codec(format!("unsupported version {version}")));
    }
    let mut dword = [0u8; 8];
    read_exact(&mut input, &mut dword, "dimension")?;
    let dim = usize::try_from(u64::from_le_bytes(dword))
        .map_err(|_| Error::Codec("dimension does not fit in memory".into()))?;

    let mut read_vec = |what: &str| -> Result<Vec<f64>> {
        let mut values = Vec::with_capacity(dim.min(1 << 24));
        for _ in 0..dim {
            read_exact(&mut input, &mut dword, what)?;
            values.push(f64::from_le_bytes(dword));
        }
        Ok(values)
    };
    let mean = read_vec("mean")?;
    let var = read_vec("var")?;
    DiagGaussian::new(mean, var)
}
