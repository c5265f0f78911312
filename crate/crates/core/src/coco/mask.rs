//! Binary masks and the two COCO segmentation encodings: column-major
//! run-length counts and polygon outlines.

use serde::{Deserialize, Serialize};

use super::CocoError;

/// Row-major boolean pixel grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BitMask {
    /// All-zero mask. Panics if either dimension is zero.
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, CocoError> {
        if height == 0 || width == 0 {
            return Err(CocoError::Format(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if bits.len() != height * width {
            return Err(CocoError::Length {
                expected: height * width,
                actual: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// In-place union. Both masks must share dimensions.
    pub fn union_with(&mut self, other: &BitMask) -> Result<(), CocoError> {
        if self.height != other.height || self.width != other.width {
            return Err(CocoError::Format(format!(
                "cannot merge {}x{} mask with {}x{} mask",
                self.height, self.width, other.height, other.width
            )));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }
}

/// Decode COCO run-length counts. Runs scan the mask column by column and
/// alternate zeros/ones, starting with zeros.
pub fn decode_rle(counts: &[u32], height: usize, width: usize) -> Result<BitMask, CocoError> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    let expected = (height * width) as u64;
    if total != expected {
        return Err(CocoError::Length {
            expected: expected as usize,
            actual: total as usize,
        });
    }
    let mut mask = BitMask::zeros(height, width);
    let mut pos = 0usize;
    for (run, &count) in counts.iter().enumerate() {
        let end = pos + count as usize;
        if run % 2 == 1 {
            for k in pos..end {
                mask.bits[(k % height) * width + k / height] = true;
            }
        }
        pos = end;
    }
    Ok(mask)
}

/// Inverse of [`decode_rle`]: the canonical column-major counts of a mask.
/// The first run is a (possibly empty) run of zeros.
pub fn encode_rle(mask: &BitMask) -> Vec<u32> {
    let (h, w) = (mask.height, mask.width);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for col in 0..w {
        for row in 0..h {
            let v = mask.bits[row * w + col];
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Decode the compressed string form of COCO counts (the LEB128-like
/// alphabet used by pycocotools `rleToString`).
pub fn decode_rle_string(s: &str) -> Result<Vec<u32>, CocoError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0u32;
        let mut more = true;
        while more {
            let byte = *bytes
                .get(p)
                .ok_or_else(|| CocoError::Format("truncated compressed RLE string".into()))?;
            if !(48..48 + 64).contains(&byte) {
                return Err(CocoError::Format(format!(
                    "invalid character {:?} in compressed RLE string",
                    byte as char
                )));
            }
            let c = (byte - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more && (c & 0x10) != 0 {
                x |= -1i64 << (5 * k);
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| {
            u32::try_from(c)
                .map_err(|_| CocoError::Format(format!("negative run length {c} in RLE string")))
        })
        .collect()
}

/// Fill polygons with pixel-center sampling. A pixel is set when its center
/// lies inside any polygon under the even-odd rule.
///
/// Each polygon is a flat `[x0, y0, x1, y1, ...]` list in image coordinates.
pub fn rasterize_polygon(
    polygons: &[Vec<f64>],
    height: usize,
    width: usize,
) -> Result<BitMask, CocoError> {
    let mut mask = BitMask::zeros(height, width);
    let mut crossings = Vec::new();
    for (pi, flat) in polygons.iter().enumerate() {
        if flat.len() % 2 != 0 {
            return Err(CocoError::Format(format!(
                "polygon {pi} has an odd number of coordinates ({})",
                flat.len()
            )));
        }
        let n = flat.len() / 2;
        if n < 3 {
            return Err(CocoError::Format(format!(
                "polygon {pi} has {n} vertices, at least 3 required"
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(CocoError::Format(format!(
                "polygon {pi} has a non-finite coordinate"
            )));
        }
        for row in 0..height {
            let yc = row as f64 + 0.5;
            crossings.clear();
            for i in 0..n {
                let j = (i + 1) % n;
                let (x0, y0) = (flat[2 * i], flat[2 * i + 1]);
                let (x1, y1) = (flat[2 * j], flat[2 * j + 1]);
                if (y0 <= yc) != (y1 <= yc) {
                    crossings.push(edge_crossing_x(x0, y0, x1, y1, yc));
                }
            }
            crossings.sort_by(f64::total_cmp);
            for span in crossings.chunks_exact(2) {
                // centers x + 0.5 in [span[0], span[1])
                let start = (span[0] - 0.5).ceil().max(0.0);
                let end = (span[1] - 0.5).ceil().min(width as f64);
                if start >= end {
                    continue;
                }
                for col in start as usize..end as usize {
                    mask.bits[row * width + col] = true;
                }
            }
        }
    }
    Ok(mask)
}

/// x coordinate where the edge (x0,y0)-(x1,y1) crosses the horizontal line y.
#[inline]
fn edge_crossing_x(x0: f64, y0: f64, x1: f64, y1: f64, y: f64) -> f64 {
    x0 + (y - y0) * (x1 - x0) / (y1 - y0)
}
