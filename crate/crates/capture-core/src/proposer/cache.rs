//! Optional region-set cache: a JSON-lines index plus a float32 binary
//! sidecar in the image-store header style (magic, u32 row count, u32 row
//! width, little-endian data). Each row stores a region's d_v feature values
//! followed by its 5 spatial values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RegionSet;
use crate::corpus::BBox;
use crate::error::{CoreError, Result};
use crate::model::autograd::Mat;

pub const REGION_CACHE_MAGIC: &[u8; 8] = b"P1MRGN1\0";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    id: u64,
    boxes: Vec<BBox>,
    degenerate: Vec<bool>,
    /// First sidecar row for this sample.
    row_offset: u64,
}

pub fn write_cache(
    index_path: &Path,
    sidecar_path: &Path,
    entries: &[(u64, RegionSet)],
) -> Result<()> {
    let width = entries
        .first()
        .map(|(_, rs)| rs.features.ncols() + 5)
        .unwrap_or(0);
    let total_rows: usize = entries.iter().map(|(_, rs)| rs.len()).sum();

    let mut idx = BufWriter::new(File::create(index_path)?);
    let mut bin = BufWriter::new(File::create(sidecar_path)?);
    bin.write_all(REGION_CACHE_MAGIC)?;
    bin.write_all(&(total_rows as u32).to_le_bytes())?;
    bin.write_all(&(width as u32).to_le_bytes())?;

    let mut row_offset = 0u64;
    for (id, rs) in entries {
        let record = IndexRecord {
            id: *id,
            boxes: rs.boxes.clone(),
            degenerate: rs.degenerate.clone(),
            row_offset,
        };
        serde_json::to_writer(&mut idx, &record)?;
        idx.write_all(b"\n")?;
        for r in 0..rs.len() {
            for c in 0..rs.features.ncols() {
                bin.write_all(&(rs.features[[r, c]] as f32).to_le_bytes())?;
            }
            for c in 0..5 {
                bin.write_all(&(rs.spatial[[r, c]] as f32).to_le_bytes())?;
            }
            row_offset += 1;
        }
    }
    idx.flush()?;
    bin.flush()?;
    Ok(())
}

pub fn read_cache(index_path: &Path, sidecar_path: &Path) -> Result<Vec<(u64, RegionSet)>> {
    let mut bin = BufReader::new(File::open(sidecar_path)?);
    let mut magic = [0u8; 8];
    bin.read_exact(&mut magic)?;
    if &magic != REGION_CACHE_MAGIC {
        return Err(CoreError::Format("bad region cache magic".into()));
    }
    let mut buf4 = [0u8; 4];
    bin.read_exact(&mut buf4)?;
    let rows = u32::from_le_bytes(buf4) as usize;
    bin.read_exact(&mut buf4)?;
    let width = u32::from_le_bytes(buf4) as usize;
    if width < 5 {
        return Err(CoreError::Format("region cache width below spatial size".into()));
    }
    let mut data = vec![0u8; rows * width * 4];
    bin.read_exact(&mut data)?;
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();

    let d_v = width - 5;
    let mut out = Vec::new();
    let idx = BufReader::new(File::open(index_path)?);
    for line in idx.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IndexRecord = serde_json::from_str(&line)?;
        let n = record.boxes.len();
        let start = record.row_offset as usize;
        if (start + n) > rows {
            return Err(CoreError::Format(format!(
                "cache index for sample {} exceeds sidecar rows",
                record.id
            )));
        }
        let mut features = Mat::zeros((n, d_v));
        let mut spatial = Mat::zeros((n, 5));
        for r in 0..n {
            let base = (start + r) * width;
            for c in 0..d_v {
                features[[r, c]] = values[base + c];
            }
            for c in 0..5 {
                spatial[[r, c]] = values[base + d_v + c];
            }
        }
        out.push((
            record.id,
            RegionSet {
                boxes: record.boxes,
                features,
                spatial,
                degenerate: record.degenerate,
            },
        ));
    }
    Ok(out)
}
