//! 16-bit binary PGM (`P5`, maxval 65535, big-endian samples) label files.
//! Files with maxval < 256 are accepted on read with one byte per sample.

use std::fs;
use std::path::Path;

use super::{LabelGrid, PseudoError};

pub fn encode_label_pgm(grid: &LabelGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", grid.width, grid.height).into_bytes();
    out.reserve(grid.labels.len() * 2);
    for &l in &grid.labels {
        out.extend_from_slice(&l.to_be_bytes());
    }
    out
}

pub fn decode_label_pgm(bytes: &[u8]) -> Result<LabelGrid, PseudoError> {
    let bad = |m: &str| PseudoError::Format(m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("PGM maxval out of range"));
    }
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width * height;
    let data = bytes.get(pos..pos + n * bps).ok_or_else(|| bad("truncated PGM data"))?;
    let labels = if bps == 1 {
        data.iter().map(|&b| u16::from(b)).collect()
    } else {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(LabelGrid { height, width, labels })
}

pub fn write_label_pgm(path: &Path, grid: &LabelGrid) -> Result<(), PseudoError> {
    fs::write(path, encode_label_pgm(grid))?;
    Ok(())
}

pub fn read_label_pgm(path: &Path) -> Result<LabelGrid, PseudoError> {
    decode_label_pgm(&fs::read(path)?)
}
