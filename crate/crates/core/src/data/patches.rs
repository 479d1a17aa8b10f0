use serde::{Deserialize, Serialize};

use super::sample::CHANNELS;
use super::{AnnotatedSample, DataError};

/// A square crop of an image with its majority label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub origin: (usize, usize),
    pub size: usize,
    /// `size x size x 3`, channel last.
    pub image: Vec<f32>,
    /// `size x size` of 0/1.
    pub label: Vec<u8>,
}

/// Start offsets along one axis; a final edge-aligned start covers any remainder.
pub fn patch_origins(extent: usize, size: usize, stride: usize) -> Result<Vec<usize>, DataError> {
    if size == 0 || stride == 0 {
        return Err(DataError::Config("patch size and stride must be positive".into()));
    }
    if size > extent {
        return Err(DataError::Config(format!("patch size {size} exceeds image extent {extent}")));
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + size <= extent).collect();
    let last = *starts.last().expect("at least one start");
    if last + size < extent {
        starts.push(extent - size);
    }
    Ok(starts)
}

/// Tiles `sample` row by row into `size x size` patches.
pub fn make_patches(sample: &AnnotatedSample, size: usize, stride: usize) -> Result<Vec<Patch>, DataError> {
    if !size.is_multiple_of(8) {
        return Err(DataError::Config(format!("patch size {size} is not a multiple of 8")));
    }
    let rows = patch_origins(sample.height, size, stride)?;
    let cols = patch_origins(sample.width, size, stride)?;
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r0 in &rows {
        for &c0 in &cols {
            let mut image = Vec::with_capacity(size * size * CHANNELS);
            let mut label = Vec::with_capacity(size * size);
            for r in r0..r0 + size {
                let base = r * sample.width + c0;
                image.extend_from_slice(&sample.image[base * CHANNELS..(base + size) * CHANNELS]);
                label.extend_from_slice(&sample.majority[base..base + size]);
            }
            out.push(Patch {
                origin: (r0, c0),
                size,
                image,
                label,
            });
        }
    }
    Ok(out)
}

/// Reassembles per-patch single-channel maps, averaging where patches overlap.
pub fn stitch(height: usize, width: usize, size: usize, tiles: &[((usize, usize), &[f32])]) -> Vec<f32> {
    let mut sum = vec![0.0f64; height * width];
    let mut hits = vec![0u32; height * width];
    for &((r0, c0), values) in tiles {
        for r in 0..size {
            for c in 0..size {
                let t = (r0 + r) * width + c0 + c;
                sum[t] += f64::from(values[r * size + c]);
                hits[t] += 1;
            }
        }
    }
    sum.iter()
        .zip(&hits)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { (s / f64::from(n)) as f32 })
        .collect()
}
