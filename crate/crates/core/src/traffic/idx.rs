//! IDX containers: big-endian magic, big-endian dimensions, raw data.
//!
//! Three layouts are used: u8 images (`0x00000803`, n·h·w), u8 labels
//! (`0x00000801`, n) and f32 matrices (`0x00000D02`, rows·cols) for features.

use std::fs;
use std::path::Path;

use super::TrafficError;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const F32_MATRIX_MAGIC: u32 = 0x0000_0D02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBlock {
    pub height: usize,
    pub width: usize,
    /// `n` images back to back, each `height * width` bytes.
    pub pixels: Vec<u8>,
}

impl ImageBlock {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.height * self.width).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.height * self.width;
        &self.pixels[i * s..(i + 1) * s]
    }
}

fn put(out: &mut Vec<u8>, v: usize) -> Result<(), TrafficError> {
    let v = u32::try_from(v)
        .map_err(|_| TrafficError::Format(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_be_bytes());
    Ok(())
}

fn header(bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>, TrafficError> {
    let need = 4 + 4 * ndims;
    if bytes.len() < need {
        return Err(TrafficError::Format(format!(
            "{} bytes is shorter than the {need}-byte header",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(TrafficError::Format(format!(
            "magic {:#010x}, expected {magic:#010x}",
            word(0)
        )));
    }
    Ok((1..=ndims).map(|i| word(i) as usize).collect())
}

fn check_body(bytes: &[u8], header_len: usize, expected: usize) -> Result<(), TrafficError> {
    if bytes.len() - header_len != expected {
        return Err(TrafficError::Format(format!(
            "header promises {expected} data bytes, file holds {}",
            bytes.len() - header_len
        )));
    }
    Ok(())
}

pub fn encode_images(block: &ImageBlock) -> Result<Vec<u8>, TrafficError> {
    let s = block.height * block.width;
    if s == 0 || block.pixels.len() % s != 0 {
        return Err(TrafficError::Dimension(format!(
            "{} pixel bytes do not divide into {}x{} images",
            block.pixels.len(),
            block.height,
            block.width
        )));
    }
    let mut out = Vec::with_capacity(16 + block.pixels.len());
    put(&mut out, IMAGES_MAGIC as usize)?;
    put(&mut out, block.len())?;
    put(&mut out, block.height)?;
    put(&mut out, block.width)?;
    out.extend_from_slice(&block.pixels);
    Ok(out)
}

pub fn decode_images(bytes: &[u8]) -> Result<ImageBlock, TrafficError> {
    let d = header(bytes, IMAGES_MAGIC, 3)?;
    let (n, height, width) = (d[0], d[1], d[2]);
    let expected = n
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| TrafficError::Format("image dimensions overflow".into()))?;
    check_body(bytes, 16, expected)?;
    if n > 0 && height * width == 0 {
        return Err(TrafficError::Format("zero-sized images".into()));
    }
    Ok(ImageBlock {
        height,
        width,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>, TrafficError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    put(&mut out, LABELS_MAGIC as usize)?;
    put(&mut out, labels.len())?;
    for &l in labels {
        out.push(
            u8::try_from(l)
                .map_err(|_| TrafficError::Format(format!("label {l} does not fit a byte")))?,
        );
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>, TrafficError> {
    let d = header(bytes, LABELS_MAGIC, 1)?;
    check_body(bytes, 8, d[0])?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

pub fn encode_f32_matrix(rows: usize, cols: usize, data: &[f32]) -> Result<Vec<u8>, TrafficError> {
    if rows * cols != data.len() {
        return Err(TrafficError::Dimension(format!(
            "{} values for a {rows}x{cols} matrix",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * data.len());
    put(&mut out, F32_MATRIX_MAGIC as usize)?;
    put(&mut out, rows)?;
    put(&mut out, cols)?;
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

/// Returns `(rows, cols, data)`.
pub fn decode_f32_matrix(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), TrafficError> {
    let d = header(bytes, F32_MATRIX_MAGIC, 2)?;
    let (rows, cols) = (d[0], d[1]);
    let expected = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| TrafficError::Format("matrix dimensions overflow".into()))?;
    check_body(bytes, 12, expected)?;
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, TrafficError> {
    fs::read(path).map_err(|e| TrafficError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrafficError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| TrafficError::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| TrafficError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_image_is_800_bytes() {
        let block = ImageBlock {
            height: 28,
            width: 28,
            pixels: vec![7; 784],
        };
        let bytes = encode_images(&block).unwrap();
        assert_eq!(bytes.len(), 16 + 784);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 1]);
        assert_eq!(decode_images(&bytes).unwrap(), block);
    }

    #[test]
    fn bad_magic_and_count() {
        let mut labels = encode_labels(&[0, 1, 1]).unwrap();
        assert_eq!(decode_labels(&labels).unwrap(), vec![0, 1, 1]);
        labels.pop();
        assert!(matches!(decode_labels(&labels), Err(TrafficError::Format(_))));
        let imgs = encode_images(&ImageBlock {
            height: 2,
            width: 2,
            pixels: vec![0; 4],
        })
        .unwrap();
        assert!(matches!(decode_labels(&imgs), Err(TrafficError::Format(_))));
        assert!(encode_labels(&[256]).is_err());
    }

    proptest! {
        #[test]
        fn image_roundtrip(n in 0usize..5, h in 1usize..6, w in 1usize..6, fill in any::<u8>()) {
            let pixels: Vec<u8> = (0..n * h * w).map(|i| (i as u8) ^ fill).collect();
            let block = ImageBlock { height: h, width: w, pixels };
            let bytes = encode_images(&block).unwrap();
            prop_assert_eq!(decode_images(&bytes).unwrap(), block);
        }

        #[test]
        fn matrix_roundtrip(rows in 0usize..6, cols in 1usize..6, scale in -1e3f32..1e3) {
            let data: Vec<f32> = (0..rows * cols).map(|i| i as f32 * scale).collect();
            let bytes = encode_f32_matrix(rows, cols, &data).unwrap();
            prop_assert_eq!(decode_f32_matrix(&bytes).unwrap(), (rows, cols, data));
        }
    }
}
