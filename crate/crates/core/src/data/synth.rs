use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::sample::CHANNELS;
use super::{AnnotatedSample, DataError};

/// Pixel labelling rule over the noiseless channels `(R, G, B)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Rule {
    /// `0.5 R + 0.5 B > tau`
    Linear,
    /// `R B > tau`
    Product,
    /// `R G + B^2 > tau`
    Mix,
}

impl Rule {
    pub fn score(self, r: f64, g: f64, b: f64) -> f64 {
        match self {
            Rule::Linear => 0.5 * r + 0.5 * b,
            Rule::Product => r * b,
            Rule::Mix => r * g + b * b,
        }
    }

    /// Strict threshold: a score equal to `tau` is negative.
    pub fn label(self, r: f64, g: f64, b: f64, tau: f64) -> u8 {
        u8::from(self.score(r, g, b) > tau)
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            Rule::Linear => 0.5,
            Rule::Product => 0.25,
            Rule::Mix => 0.6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::Linear => "LINEAR",
            Rule::Product => "PRODUCT",
            Rule::Mix => "MIX",
        }
    }
}

impl FromStr for Rule {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "LINEAR" => Ok(Rule::Linear),
            "PRODUCT" => Ok(Rule::Product),
            "MIX" => Ok(Rule::Mix),
            _ => Err(DataError::Config(format!("unknown rule {s:?} (expected LINEAR, PRODUCT or MIX)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub rule: Rule,
    pub threshold: f64,
    pub noise_sigma: f64,
    /// Gaussian blur radius (pixels) that sets the field's correlation length.
    pub smoothness: f64,
    /// Consecutive images sharing one patient id.
    pub images_per_patient: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(images: usize, height: usize, width: usize, rule: Rule, noise_sigma: f64, seed: u64) -> Self {
        Self {
            images,
            height,
            width,
            rule,
            threshold: rule.default_threshold(),
            noise_sigma,
            smoothness: 4.0,
            images_per_patient: 2,
            seed,
        }
    }
}

fn blur_axis(src: &[f64], dst: &mut [f64], rows: usize, cols: usize, kernel: &[f64], along_rows: bool) {
    let radius = (kernel.len() / 2) as isize;
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let off = k as isize - radius;
                let (rr, cc) = if along_rows {
                    ((r as isize + off).rem_euclid(rows as isize) as usize, c)
                } else {
                    (r, (c as isize + off).rem_euclid(cols as isize) as usize)
                };
                acc += w * src[rr * cols + cc];
            }
            dst[r * cols + c] = acc;
        }
    }
}

/// Smooth random field with approximately uniform marginals on `[0, 1]`:
/// periodic Gaussian-blurred white noise, standardized, then pushed through
/// the normal CDF.
fn smooth_field<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let mut noise: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    if sigma > 0.0 {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let mut tmp = vec![0.0; noise.len()];
        blur_axis(&noise, &mut tmp, rows, cols, &kernel, false);
        blur_axis(&tmp, &mut noise, rows, cols, &kernel, true);
    }
    let n = noise.len() as f64;
    let mean = noise.iter().sum::<f64>() / n;
    let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    noise
        .iter()
        .map(|v| 0.5 * (1.0 + erf((v - mean) / sd / std::f64::consts::SQRT_2)))
        .collect()
}

/// Generates a deterministic dataset; each image draws from its own stream of `seed`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<AnnotatedSample>, DataError> {
    if config.images == 0 || config.height == 0 || config.width == 0 {
        return Err(DataError::Config("synthetic dataset needs positive image count and size".into()));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite() && config.smoothness >= 0.0) {
        return Err(DataError::Config("noise and smoothness must be non-negative".into()));
    }
    let per_patient = config.images_per_patient.max(1);
    let digits = config.images.to_string().len().max(3);
    (0..config.images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let (h, w) = (config.height, config.width);
            let fields: Vec<Vec<f64>> = (0..CHANNELS).map(|_| smooth_field(&mut rng, h, w, config.smoothness)).collect();
            let mut image = Vec::with_capacity(h * w * CHANNELS);
            let mut label = Vec::with_capacity(h * w);
            for t in 0..h * w {
                let (r, g, b) = (fields[0][t], fields[1][t], fields[2][t]);
                label.push(config.rule.label(r, g, b, config.threshold));
                for f in &fields {
                    let noise: f64 = if config.noise_sigma > 0.0 {
                        config.noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                    } else {
                        0.0
                    };
                    image.push((f[t] + noise).clamp(0.0, 1.0) as f32);
                }
            }
            AnnotatedSample::new(
                format!("synth_{i:0digits$}"),
                h,
                w,
                image,
                vec![label],
                Some(format!("patient_{:0digits$}", i / per_patient)),
                Some("synthetic".into()),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_threshold() {
        assert_eq!(Rule::Product.label(0.5, 0.9, 0.5, 0.25), 0);
        assert_eq!(Rule::Product.label(0.5, 0.9, 0.51, 0.25), 1);
        assert_eq!(Rule::Mix.score(0.5, 0.5, 0.5), 0.5);
        assert_eq!(Rule::Linear.score(0.2, 0.9, 0.4), 0.30000000000000004);
    }

    #[test]
    fn rule_names() {
        for r in [Rule::Linear, Rule::Product, Rule::Mix] {
            assert_eq!(r.name().parse::<Rule>().unwrap(), r);
        }
        assert!("QUADRATIC".parse::<Rule>().is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig::new(3, 16, 24, Rule::Mix, 0.05, 11);
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, generate_synthetic(&cfg).unwrap());
        let other = generate_synthetic(&SynthConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, other);
        assert_eq!(a[0].patient_id, a[1].patient_id);
        assert_ne!(a[0].patient_id, a[2].patient_id);
    }

    #[test]
    fn labels_ignore_image_noise() {
        let clean = generate_synthetic(&SynthConfig::new(2, 16, 16, Rule::Product, 0.0, 5)).unwrap();
        for s in &clean {
            for t in 0..s.pixels() {
                let px = &s.image[t * 3..t * 3 + 3];
                let score = f64::from(px[0]) * f64::from(px[2]);
                if (score - 0.25).abs() > 1e-5 {
                    assert_eq!(s.majority[t], u8::from(score > 0.25));
                }
            }
        }
        let noisy = generate_synthetic(&SynthConfig::new(2, 16, 16, Rule::Product, 0.2, 5)).unwrap();
        assert_eq!(clean[0].majority, noisy[0].majority);
        assert_ne!(clean[0].image, noisy[0].image);
    }

    #[test]
    fn marginals_are_roughly_uniform() {
        let s = generate_synthetic(&SynthConfig::new(8, 64, 64, Rule::Linear, 0.0, 1)).unwrap();
        let vals: Vec<f32> = s.iter().flat_map(|s| s.image.iter().copied()).collect();
        let mean = vals.iter().map(|&v| f64::from(v)).sum::<f64>() / vals.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        let below = vals.iter().filter(|&&v| v < 0.25).count() as f64 / vals.len() as f64;
        assert!((below - 0.25).abs() < 0.01, "quartile {below}");
    }
}
