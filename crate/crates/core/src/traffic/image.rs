//! Fixed-length byte sequences rendered as grayscale images.

use serde::{Deserialize, Serialize};

use super::TrafficError;

/// Keeps the leading `len` bytes, or zero-pads at the tail.
pub fn uniform_length(bytes: &[u8], len: usize) -> Vec<u8> {
    let mut out = bytes[..bytes.len().min(len)].to_vec();
    out.resize(len, 0);
    out
}

/// Row-major, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub label: usize,
}

impl TrafficImage {
    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn flatten(&self) -> &[u8] {
        &self.pixels
    }
}

pub fn to_image(
    bytes: &[u8],
    width: usize,
    height: usize,
    label: usize,
) -> Result<TrafficImage, TrafficError> {
    if width == 0 || height == 0 || bytes.len() != width * height {
        return Err(TrafficError::Dimension(format!(
            "{} bytes cannot fill a {width}x{height} image",
            bytes.len()
        )));
    }
    Ok(TrafficImage {
        width,
        height,
        pixels: bytes.to_vec(),
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trim_pad_identity() {
        let long: Vec<u8> = (0..800).map(|i| (i % 251) as u8).collect();
        assert_eq!(uniform_length(&long, 784), long[..784]);

        let short: Vec<u8> = (0..700).map(|i| (i % 13 + 1) as u8).collect();
        let padded = uniform_length(&short, 784);
        assert_eq!(&padded[..700], &short[..]);
        assert!(padded[700..].iter().all(|&b| b == 0));
        assert_eq!(padded.len() - 700, 84);

        let exact: Vec<u8> = (0..784).map(|i| (i * 7 % 256) as u8).collect();
        assert_eq!(uniform_length(&exact, 784), exact);
    }

    #[test]
    fn row_major_indexing() {
        let bytes: Vec<u8> = (0..784).map(|i| (i % 256) as u8).collect();
        let img = to_image(&bytes, 28, 28, 0).unwrap();
        assert_eq!(img.pixel(0, 0), 0);
        assert_eq!(img.pixel(1, 0), 28);
        assert_eq!(img.pixel(27, 27), bytes[783]);
        assert!(matches!(
            to_image(&bytes[..783], 28, 28, 0),
            Err(TrafficError::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn uniform_length_idempotent(bytes in prop::collection::vec(any::<u8>(), 0..2000), len in 1usize..1000) {
            let once = uniform_length(&bytes, len);
            prop_assert_eq!(once.len(), len);
            prop_assert_eq!(uniform_length(&once, len), once);
        }

        #[test]
        fn image_flatten_roundtrip(w in 1usize..40, h in 1usize..40, seed in any::<u8>()) {
            let bytes: Vec<u8> = (0..w * h).map(|i| (i as u8).wrapping_mul(seed)).collect();
            let img = to_image(&bytes, w, h, 3).unwrap();
            prop_assert_eq!(to_image(img.flatten(), w, h, 3).unwrap(), img);
        }
    }
}
