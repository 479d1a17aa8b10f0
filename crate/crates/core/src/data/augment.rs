use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sample::CHANNELS;
use super::{DataError, Patch};

/// Random geometric augmentation; each transform fires independently with `probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Largest shift as a fraction of the patch size.
    pub shift_limit: f64,
    /// Scale factor drawn from `[1 - limit, 1 + limit]`.
    pub scale_limit: f64,
    /// Largest rotation in degrees.
    pub rotation_limit: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub probability: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            shift_limit: 0.2,
            scale_limit: 0.2,
            rotation_limit: 30.0,
            horizontal_flip: true,
            vertical_flip: true,
            probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No-op configuration.
    pub fn disabled() -> Self {
        Self {
            probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let finite = [self.shift_limit, self.scale_limit, self.rotation_limit, self.probability]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.probability > 1.0 || self.scale_limit >= 1.0 {
            return Err(DataError::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }

    /// Draws one transform.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let p = self.probability;
        let fire = |rng: &mut R| rng.random_bool(p);
        let shift = if fire(rng) {
            let l = self.shift_limit;
            (rng.random_range(-l..=l), rng.random_range(-l..=l))
        } else {
            (0.0, 0.0)
        };
        let scale = if fire(rng) {
            1.0 + rng.random_range(-self.scale_limit..=self.scale_limit)
        } else {
            1.0
        };
        let rotation = if fire(rng) {
            rng.random_range(-self.rotation_limit..=self.rotation_limit)
        } else {
            0.0
        };
        let horizontal_flip = self.horizontal_flip && fire(rng);
        let vertical_flip = self.vertical_flip && fire(rng);
        AffineParams {
            shift,
            scale,
            rotation,
            horizontal_flip,
            vertical_flip,
        }
    }
}

/// One concrete transform: affine about the image centre, then flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// `(rows, cols)` shift as fractions of height and width.
    pub shift: (f64, f64),
    pub scale: f64,
    /// Degrees; +90 sends `(r, c)` to `(c, H - 1 - r)` on a square image.
    pub rotation: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            shift: (0.0, 0.0),
            scale: 1.0,
            rotation: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentOutcome {
    /// Image values clamped back into `[0, 1]`.
    pub clipped: usize,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Warps a channel-last image (bilinear) and its mask (nearest) by `params`.
/// Pixels mapped from outside the frame are 0.
pub fn apply_affine(
    height: usize,
    width: usize,
    channels: usize,
    image: &[f32],
    mask: &[u8],
    params: &AffineParams,
) -> (Vec<f32>, Vec<u8>, AugmentOutcome) {
    assert_eq!(image.len(), height * width * channels, "image buffer size");
    assert_eq!(mask.len(), height * width, "mask buffer size");
    if params.is_identity() {
        return (image.to_vec(), mask.to_vec(), AugmentOutcome::default());
    }
    let (h, w) = (height as f64, width as f64);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let (ty, tx) = (params.shift.0 * h, params.shift.1 * w);
    let (sin, cos) = params.rotation.to_radians().sin_cos();
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width;

    let mut out_img = vec![0.0f32; image.len()];
    let mut out_mask = vec![0u8; mask.len()];
    let mut clipped = 0;
    let mut acc = vec![0.0f64; channels];
    for r in 0..height {
        for c in 0..width {
            let r1 = if params.vertical_flip { h - 1.0 - r as f64 } else { r as f64 };
            let c1 = if params.horizontal_flip { w - 1.0 - c as f64 } else { c as f64 };
            let (dr, dc) = (r1 - cy - ty, c1 - cx - tx);
            let sr = snap((dr * cos - dc * sin) / params.scale + cy);
            let sc = snap((dr * sin + dc * cos) / params.scale + cx);
            let t = r * width + c;

            let (nr, nc) = (sr.round() as isize, sc.round() as isize);
            if inside(nr, nc) {
                out_mask[t] = mask[nr as usize * width + nc as usize];
            }

            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (dy, wy) in [(0isize, 1.0 - fr), (1, fr)] {
                for (dx, wx) in [(0isize, 1.0 - fc), (1, fc)] {
                    let wgt = wy * wx;
                    let (yy, xx) = (r0 as isize + dy, c0 as isize + dx);
                    if wgt == 0.0 || !inside(yy, xx) {
                        continue;
                    }
                    let base = (yy as usize * width + xx as usize) * channels;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wgt * f64::from(image[base + ch]);
                    }
                }
            }
            for (ch, &a) in acc.iter().enumerate() {
                let v = a as f32;
                let v = if (0.0..=1.0).contains(&v) {
                    v
                } else {
                    clipped += 1;
                    v.clamp(0.0, 1.0)
                };
                out_img[t * channels + ch] = v;
            }
        }
    }
    (out_img, out_mask, AugmentOutcome { clipped })
}

/// Applies one random transform to a patch and its label.
pub fn augment<R: Rng + ?Sized>(patch: &Patch, config: &AugmentationConfig, rng: &mut R) -> (Patch, AugmentOutcome) {
    let params = config.sample(rng);
    let (image, label, outcome) = apply_affine(patch.size, patch.size, CHANNELS, &patch.image, &patch.label, &params);
    (
        Patch {
            origin: patch.origin,
            size: patch.size,
            image,
            label,
        },
        outcome,
    )
}
