//! Raster file formats.
//!
//! **F32R**: the bytes `F32R\n`, one ASCII header line `rank d0 d1 ... \n`,
//! then `product(d)` little-endian `f32` values in row-major order. Used for
//! images, imported features, density maps and correlation dumps.
//!
//! **PGM**: binary 8-bit greymap (`P5`), min-max scaled, for quick looks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"F32R\n";
const MAX_HEADER: usize = 512;

/// Encodes a tensor as F32R. Values outside the `f32` range are rejected.
pub fn encode_f32r(t: &Tensor) -> Result<Vec<u8>> {
    let mut header = t.rank().to_string();
    for d in t.shape() {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push('\n');
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    for (i, &v) in t.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "F32R export: element {i} ({v}) does not fit in f32"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32r(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Load {
            offset: 0,
            msg: "missing F32R magic".into(),
        });
    }
    let start = MAGIC.len();
    let window = &bytes[start..bytes.len().min(start + MAX_HEADER)];
    let nl = window.iter().position(|&b| b == b'\n').ok_or(Error::Load {
        offset: start,
        msg: "unterminated header line".into(),
    })?;
    let line = std::str::from_utf8(&window[..nl]).map_err(|_| Error::Load {
        offset: start,
        msg: "header is not ASCII".into(),
    })?;
    let mut fields = line.split(' ');
    let bad = |msg: String| Error::Load { offset: start, msg };
    let rank: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad rank in header {line:?}")))?;
    let dims: Vec<usize> = fields
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(format!("bad extent in header {line:?}")))?;
    if dims.len() != rank {
        return Err(bad(format!(
            "header declares rank {rank} but lists {} extents",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(bad(format!("zero extent in header {line:?}")));
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows".into()))?;
    let payload_at = start + nl + 1;
    let payload = &bytes[payload_at..];
    let expected = numel.checked_mul(4).ok_or_else(|| bad("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Load {
            offset: payload_at,
            msg: format!(
                "payload holds {} bytes but shape {dims:?} needs {expected}",
                payload.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Load {
                offset: payload_at + 4 * i,
                msg: format!("non-finite value {v}"),
            });
        }
        data.push(v as f64);
    }
    Tensor::new(&dims, data)
}

pub fn write_f32r(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_f32r(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32r(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32r(&bytes)
}

/// Min-max scaled 8-bit PGM of a plane. Constant planes map to black.
pub fn encode_pgm(plane: &[f64], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(plane.len(), height * width);
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Writes a `[H,W]` or `[1,H,W]` tensor as PGM.
pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match t.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        other => {
            return Err(Error::contract(
                "write_pgm",
                format!("expected a single plane, got shape {other:?}"),
            ))
        }
    };
    fs::write(path, encode_pgm(t.data(), h, w)).map_err(|e| Error::io(path, e))
}

/// Writes one PGM per leading-dimension slice of a `[K,H,W]` tensor as
/// `{stem}_{k}.pgm` and the whole tensor as `{stem}.f32r`.
pub fn export_stack(dir: impl AsRef<Path>, stem: &str, t: &Tensor) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_f32r(dir.join(format!("{stem}.f32r")), t)?;
    if t.rank() == 3 {
        for k in 0..t.shape()[0] {
            write_pgm(dir.join(format!("{stem}_{k}.pgm")), &t.slice0(k))?;
        }
    } else if t.rank() == 2 {
        write_pgm(dir.join(format!("{stem}.pgm")), t)?;
    }
    Ok(())
}
