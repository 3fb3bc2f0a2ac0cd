//! Uncompressed run-length encoding of binary masks, column-major, zeros first.

use crate::error::{Error, Result};

/// Run lengths over the column-major scan of an `h×w` row-major mask.
/// The first run counts zeros and may be empty.
pub fn rle_encode(mask: &[u8], h: usize, w: usize) -> Result<Vec<usize>> {
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask has {} pixels, expected {h}×{w}", mask.len())));
    }
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for x in 0..w {
        for y in 0..h {
            let v = match mask[y * w + x] {
                0 => 0,
                1 => 1,
                other => return Err(Error::Input(format!("mask value {other} is not binary"))),
            };
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Ok(counts)
}

pub fn rle_decode(counts: &[usize], h: usize, w: usize) -> Result<Vec<u8>> {
    let total: usize = counts.iter().sum();
    if total != h * w {
        return Err(Error::Format(format!("run lengths sum to {total}, expected {}", h * w)));
    }
    let mut mask = vec![0u8; h * w];
    let mut k = 0;
    for (i, &run) in counts.iter().enumerate() {
        let v = (i % 2) as u8;
        for _ in 0..run {
            let (x, y) = (k / h, k % h);
            mask[y * w + x] = v;
            k += 1;
        }
    }
    Ok(mask)
}
