//! Point cloud files.
//!
//! Text: one `x y z` line per point, LF-terminated.
//! Binary (`.pcb`): magic `PCB1`, u32 LE point count, then `N × 3` f32 LE.
//! Binary coordinates are stored as f32, so a cloud survives a round trip
//! bitwise only if its coordinates are f32-representable.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

pub const PCB_MAGIC: &[u8; 4] = b"PCB1";

pub fn encode_pcb(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(PCB_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pcb(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 4 || &bytes[..4] != PCB_MAGIC {
        return Err(Error::format(0, "missing PCB1 magic"));
    }
    if bytes.len() < 8 {
        return Err(Error::format(4, "truncated point count"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let need = 8 + n * 12;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated: {n} points need {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(Error::format(need as u64, "trailing bytes after point data"));
    }
    let mut points = Vec::with_capacity(n);
    for (i, chunk) in bytes[8..].chunks_exact(12).enumerate() {
        let mut p = [0.0; 3];
        for (a, c) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format((8 + i * 12 + a * 4) as u64, "non-finite coordinate"));
            }
            p[a] = v as f64;
        }
        points.push(p);
    }
    Ok(PointCloud::from_trusted(points))
}

pub fn write_text<W: Write>(cloud: &PointCloud, mut w: W) -> Result<()> {
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

/// Blank lines and `#` comments are skipped.
pub fn read_text<R: Read>(r: R) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (a, f) in fields.iter().enumerate() {
            p[a] = f.parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("`{f}`: {e}"),
            })?;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pcb"))
}

/// Loads by extension: `.pcb` is binary, anything else is text.
pub fn load(path: &Path) -> Result<PointCloud> {
    if is_binary_path(path) {
        decode_pcb(&fs::read(path)?)
    } else {
        read_text(fs::File::open(path)?)
    }
}

/// Saves by extension: `.pcb` is binary, anything else is text.
pub fn save(cloud: &PointCloud, path: &Path) -> Result<()> {
    if is_binary_path(path) {
        fs::write(path, encode_pcb(cloud))?;
    } else {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        write_text(cloud, &mut w)?;
        w.flush()?;
    }
    Ok(())
}
