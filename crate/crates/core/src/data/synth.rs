use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{MsgcError, Result};

/// Oriented sinusoid gratings, one orientation and frequency per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    /// Per-sample noise std drawn uniformly from this range.
    pub noise_sigma: (f64, f64),
    /// Per-sample grating amplitude drawn uniformly from this range.
    pub contrast: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, n_per_class: 500, classes: 8, channels: 3, size: 32, noise_sigma: (0.2, 0.2), contrast: (0.5, 1.0) }
    }
}

impl SynthConfig {
    /// A harder split: weaker gratings under a wide spread of noise levels, so
    /// samples range from trivial to ambiguous.
    pub fn noisy(mut self) -> Self {
        self.noise_sigma = (0.2, 1.2);
        self.contrast = (0.25, 1.0);
        self
    }
}

/// Orientation in radians and frequency in cycles per image of a class.
pub fn grating_params(class: usize, classes: usize) -> (f64, f64) {
    (PI * class as f64 / classes as f64, 2.0 + 0.75 * (class % 4) as f64)
}

/// Noise-free unit-contrast pixel of `class` at channel `c`, row `y`, column `x`.
pub fn grating_value(class: usize, classes: usize, size: usize, c: usize, y: usize, x: usize, phase: f64) -> f64 {
    let (theta, freq) = grating_params(class, classes);
    let u = (x as f64 + 0.5) / size as f64;
    let v = (y as f64 + 0.5) / size as f64;
    let gain = 1.0 - 0.25 * (c % 4) as f64;
    gain * (2.0 * PI * freq * (u * theta.cos() + v * theta.sin()) + phase).sin()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministic per seed. Sample `i` has class `i % classes`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.channels == 0 || cfg.size == 0 {
        return Err(MsgcError::config(format!("invalid synthetic task {cfg:?}")));
    }
    let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo;
    if !ok(cfg.noise_sigma) || !ok(cfg.contrast) {
        return Err(MsgcError::config("noise and contrast ranges must be finite, non-negative and ordered"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_per_class * cfg.classes;
    let per = cfg.channels * cfg.size * cfg.size;
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.classes;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let contrast = uniform(&mut rng, cfg.contrast);
        let sigma = uniform(&mut rng, cfg.noise_sigma);
        let noise = Normal::new(0.0, sigma).expect("non-negative sigma");
        for c in 0..cfg.channels {
            for y in 0..cfg.size {
                for x in 0..cfg.size {
                    let v = contrast * grating_value(class, cfg.classes, cfg.size, c, y, x, phase) + noise.sample(&mut rng);
                    images.push(v as f32);
                }
            }
        }
        labels.push(class as u32);
    }
    Ok(Dataset { channels: cfg.channels, height: cfg.size, width: cfg.size, classes: cfg.classes, images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig { n_per_class: 3, size: 8, ..SynthConfig::default() };
        assert_eq!(synth_generate(&cfg).unwrap().to_bytes(), synth_generate(&cfg).unwrap().to_bytes());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_generate(&cfg).unwrap().images, synth_generate(&other).unwrap().images);
    }

    #[test]
    fn class_zero_template_is_a_vertical_grating() {
        // Class 0: orientation 0, two cycles per image, so the value depends on x only.
        let s = 16;
        for y in [0, 7, 15] {
            for x in 0..s {
                let expected = (2.0 * PI * 2.0 * (x as f64 + 0.5) / s as f64).sin();
                assert!((grating_value(0, 8, s, 0, y, x, 0.0) - expected).abs() < 1e-12);
                assert!((grating_value(0, 8, s, 2, y, x, 0.0) - 0.5 * expected).abs() < 1e-12);
            }
        }
        assert!((grating_value(0, 8, s, 0, 0, 0, 0.0) - (PI / 8.0).sin()).abs() < 1e-12);
    }

    #[test]
    fn noiseless_sample_matches_the_formula() {
        let cfg = SynthConfig { n_per_class: 1, size: 8, noise_sigma: (0.0, 0.0), contrast: (1.0, 1.0), ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        // The first draw of the stream is sample 0's phase.
        let phase = ChaCha8Rng::seed_from_u64(cfg.seed).gen_range(0.0..2.0 * PI);
        let img = ds.image(0);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let v = grating_value(0, 8, 8, c, y, x, phase) as f32;
                    assert_eq!(img[(c * 8 + y) * 8 + x], v);
                }
            }
        }
    }

    #[test]
    fn empty_request_gives_valid_empty_file() {
        let cfg = SynthConfig { n_per_class: 0, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        assert!(ds.is_empty());
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back.classes, 8);
        assert_eq!(back.height, 32);
    }

    #[test]
    fn rejects_degenerate_tasks() {
        assert!(synth_generate(&SynthConfig { classes: 1, ..SynthConfig::default() }).is_err());
    }
}
