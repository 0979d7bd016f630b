//! Binary PGM (P5) and the raw `BLIM` float format.
//!
//! `BLIM` layout: magic `"BLIM"`, `u32` height, `u32` width (little
//! endian), then `height * width` little-endian `f32` values, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Image2D, SourceDepth};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"BLIM";

/// File name of the optional pairing manifest inside a dataset directory.
pub const MANIFEST: &str = "manifest.tsv";

fn is_pgm_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("blim"))
}

pub fn decode_raw(bytes: &[u8]) -> std::result::Result<Image2D, String> {
    if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
        return Err("missing BLIM header".into());
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let need = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or("image dims overflow")?;
    let payload = &bytes[12..];
    if payload.len() != need {
        return Err(format!("payload is {} bytes, expected {need}", payload.len()));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut img = Image2D::new(h, w, values).map_err(|e| e.to_string())?;
    img.depth = SourceDepth::F32;
    Ok(img)
}

pub fn encode_raw(img: &Image2D) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * img.len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(img.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for v in img.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses the whitespace/comment separated header tokens of a P5 file.
/// Returns the three numbers and the offset of the raster.
fn pgm_header(bytes: &[u8]) -> std::result::Result<([usize; 3], usize), String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary PGM (P5) file".into());
    }
    let mut pos = 2;
    let mut nums = [0usize; 3];
    for slot in &mut nums {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PGM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed PGM header".into());
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| "PGM header number out of range")?;
    }
    // exactly one whitespace byte separates header and raster
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => Ok((nums, pos + 1)),
        _ => Err("missing whitespace after PGM header".into()),
    }
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Image2D, String> {
    let ([w, h, maxval], off) = pgm_header(bytes)?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("PGM has zero size".into());
    }
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w * h * bps;
    let raster = &bytes[off..];
    if raster.len() < need {
        return Err(format!("truncated PGM payload: {} of {need} bytes", raster.len()));
    }
    let values: Vec<f32> = if bps == 2 {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
            .collect()
    } else {
        raster[..need].iter().map(|&b| b as f32).collect()
    };
    let mut img = Image2D::new(h, w, values).map_err(|e| e.to_string())?;
    img.depth = if bps == 2 { SourceDepth::U16 } else { SourceDepth::U8 };
    Ok(img)
}

/// 16-bit P5 with maxval 65535; values are rounded and clamped.
pub fn encode_pgm(img: &Image2D) -> Vec<u8> {
    let mut buf = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    buf.reserve(2 * img.len());
    for &v in img.values() {
        let q = v.round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    buf
}

/// Reads a PGM or `BLIM` file, detected by its leading bytes.
pub fn read_image(path: &Path) -> Result<Image2D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        Err("unrecognised image format (expected P5 PGM or BLIM)".into())
    };
    let mut img = decoded.map_err(|m| Error::format(path, m))?;
    img.pair_id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    Ok(img)
}

/// Writes PGM for `.pgm` paths and `BLIM` otherwise.
pub fn write_image(path: &Path, img: &Image2D) -> Result<()> {
    let bytes = if is_pgm_path(path) {
        encode_pgm(img)
    } else {
        encode_raw(img)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Image files (`.pgm`, `.blim`) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `manifest.tsv` (`noisy<TAB>ground_truth` per line, relative paths
/// resolved against `dir`). Returns `None` when no manifest exists.
pub fn read_manifest(dir: &Path) -> Result<Option<Vec<(PathBuf, PathBuf)>>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(&path, format!("line {} lacks a TAB separator", i + 1)))?;
        pairs.push((dir.join(a.trim()), dir.join(b.trim())));
    }
    Ok(Some(pairs))
}

/// Noisy images of a training directory: the manifest's noisy column when a
/// manifest exists, every image file otherwise.
pub fn dataset_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    match read_manifest(dir)? {
        Some(pairs) => Ok(pairs.into_iter().map(|(n, _)| n).collect()),
        None => list_images(dir),
    }
}

pub fn read_all(paths: &[PathBuf]) -> Result<Vec<Image2D>> {
    paths.iter().map(|p| read_image(p)).collect()
}
