//! On-disk corpus formats.
//!
//! - Manifest: JSON-lines, one record per sample, fields
//!   `{id, split, caption, category, instances, image_offset}` where
//!   `image_offset` is the record index into the image store.
//! - Image store: magic `P1MTOY1\0`, u32 count, u32 H, u32 W (little
//!   endian), then `count` contiguous H×W×3 float32 images.
//! - Vocabulary: JSON map of token id to token string.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use super::catalog::Vocab;
use super::Sample;
use crate::error::{CoreError, Result};

pub const IMAGE_STORE_MAGIC: &[u8; 8] = b"P1MTOY1\0";

pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for sample in samples {
        serde_json::to_writer(&mut w, sample)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let r = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok(samples)
}

pub fn write_images(path: &Path, images: &[Array3<f32>]) -> Result<()> {
    let (h, w) = match images.first() {
        Some(img) => (img.dim().0, img.dim().1),
        None => (0, 0),
    };
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(CoreError::Format(
                "image store requires uniform H x W x 3 images".into(),
            ));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(IMAGE_STORE_MAGIC)?;
    out.write_all(&(images.len() as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for img in images {
        for &v in img.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<Vec<Array3<f32>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != IMAGE_STORE_MAGIC {
        return Err(CoreError::Format("bad image store magic".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let h = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let w = u32::from_le_bytes(buf4) as usize;

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let expected = count * h * w * 3 * 4;
    if data.len() != expected {
        return Err(CoreError::Format(format!(
            "image store body is {} bytes, expected {expected}",
            data.len()
        )));
    }
    let mut images = Vec::with_capacity(count);
    let stride = h * w * 3 * 4;
    for i in 0..count {
        let chunk = &data[i * stride..(i + 1) * stride];
        let mut values = Vec::with_capacity(h * w * 3);
        for b in chunk.chunks_exact(4) {
            values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        images.push(
            Array3::from_shape_vec((h, w, 3), values)
                .map_err(|e| CoreError::Format(e.to_string()))?,
        );
    }
    Ok(images)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, vocab.entries())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let r = BufReader::new(File::open(path)?);
    let entries: BTreeMap<u32, String> = serde_json::from_reader(r)?;
    if entries.get(&0).map(String::as_str) != Some("[PAD]") {
        return Err(CoreError::Format("vocabulary missing reserved ids".into()));
    }
    Ok(Vocab::from_entries(entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn image_store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images.bin");
        let images: Vec<Array3<f32>> = (0..3)
            .map(|k| Array3::from_shape_fn((4, 5, 3), |(r, c, ch)| (k * 100 + r * 10 + c + ch) as f32 / 7.0))
            .collect();
        write_images(&path, &images).unwrap();
        let back = read_images(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in images.iter().zip(back.iter()) {
            assert_eq!(a, b);
        }
        // Header fields are little-endian and the magic is exact.
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], IMAGE_STORE_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 5);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            read_images(&path),
            Err(CoreError::Format(_))
        ));
    }

    #[test]
    fn manifest_schema_matches_contract() {
        use crate::corpus::{BBox, Instance, Split};
        let sample = Sample {
            id: 9,
            split: Split::Test,
            caption: vec![5, 6],
            category: None,
            instances: Some(vec![Instance {
                category: 3,
                bbox: BBox::new(0.1, 0.2, 0.5, 0.6),
            }]),
            image_offset: 4,
        };
        let json = serde_json::to_string(&sample).unwrap();
        assert_eq!(
            json,
            r#"{"id":9,"split":"test","caption":[5,6],"category":null,"instances":[{"category":3,"box":[0.1,0.2,0.5,0.6]}],"image_offset":4}"#
        );
        let back: Sample = serde_json::from_str(&json).unwrap();
        assert_eq!(back.instances.unwrap()[0].bbox, BBox::new(0.1, 0.2, 0.5, 0.6));
    }
}
