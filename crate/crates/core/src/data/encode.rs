//! Image-to-bit encodings and resolution reduction.
//!
//! Bit-plane layout is pixel-major: pixel `p` occupies bits `8p..8p+8`,
//! most significant bit first.

use rayon::prelude::*;

use super::idx::ImageSet;
use super::{BinaryDataset, Encoding, Provenance};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: u8 = 128;

/// One bit per pixel: `pixel >= threshold`.
pub fn binarize_1bit(images: &ImageSet, threshold: u8, provenance: Provenance) -> Result<BinaryDataset> {
    let bits = images.pixels.par_iter().map(|&p| (p >= threshold) as u8).collect();
    let provenance = provenance.with("encoding", "1bit").with("threshold", threshold);
    BinaryDataset::new(images.rows * images.cols, bits, Encoding::ZeroOne, provenance)
}

/// Eight bits per pixel, most significant first.
pub fn encode_8bit_planes(images: &ImageSet, provenance: Provenance) -> Result<BinaryDataset> {
    let bits = images.pixels.par_iter().flat_map_iter(|&p| (0..8).map(move |k| (p >> (7 - k)) & 1)).collect();
    BinaryDataset::new(images.rows * images.cols * 8, bits, Encoding::ZeroOne, provenance.with("encoding", "8bit"))
}

/// Inverse of [`encode_8bit_planes`] for one row.
pub fn decode_8bit_row(bits: &[u8]) -> Result<Vec<u8>> {
    if bits.len() % 8 != 0 {
        return Err(Error::DimensionMismatch(format!("{} bits are not whole bytes", bits.len())));
    }
    Ok(bits.chunks_exact(8).map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | (b & 1))).collect())
}

fn block_average(images: &ImageSet, block: usize, out_rows: usize, out_cols: usize, pad: usize) -> ImageSet {
    let (rows, cols) = (images.rows, images.cols);
    let area = (block * block) as u32;
    let mut pixels = vec![0u8; images.n * out_rows * out_cols];
    pixels.par_chunks_mut(out_rows * out_cols).enumerate().for_each(|(i, out)| {
        let img = images.image(i);
        for r in 0..out_rows {
            for c in 0..out_cols {
                let mut sum = 0u32;
                for dr in 0..block {
                    for dc in 0..block {
                        let (y, x) = ((r * block + dr) as isize - pad as isize, (c * block + dc) as isize - pad as isize);
                        if y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols {
                            sum += img[y as usize * cols + x as usize] as u32;
                        }
                    }
                }
                // Round half up.
                out[r * out_cols + c] = ((sum + area / 2) / area) as u8;
            }
        }
    });
    ImageSet { n: images.n, rows: out_rows, cols: out_cols, pixels }
}

/// Block-average by an integer factor dividing both sides.
pub fn downscale(images: &ImageSet, factor: usize) -> Result<ImageSet> {
    if factor == 0 || images.rows % factor != 0 || images.cols % factor != 0 {
        return Err(Error::InvalidParameter(format!(
            "factor {factor} does not divide {}x{}",
            images.rows, images.cols
        )));
    }
    if factor == 1 {
        return Ok(images.clone());
    }
    Ok(block_average(images, factor, images.rows / factor, images.cols / factor, 0))
}

/// 28x28 to 8x8: zero-pad two pixels per side to 32x32, then 4x4 block means.
pub fn downscale_28_to_8(images: &ImageSet) -> Result<ImageSet> {
    if images.rows != 28 || images.cols != 28 {
        return Err(Error::InvalidParameter(format!("expected 28x28 images, got {}x{}", images.rows, images.cols)));
    }
    Ok(block_average(images, 4, 8, 8, 2))
}
