use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset};
use crate::models::ImageGeometry;

/// Parameters of the synthetic image generator.
///
/// Class `c` is a coloured blob whose hue and position both sit at angle
/// `2πc/C` on a circle, so neighbouring classes look alike and distant ones
/// do not. Samples add position jitter, brightness variation and pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Pixel noise standard deviation, in units of the 0..=255 range.
    pub noise_std: f64,
    /// Standard deviation of the blob-centre jitter, in pixels.
    pub jitter: f64,
    /// Minimum pairwise distance between noiseless class templates, with
    /// pixels scaled to `[0, 1]`.
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { classes: 10, per_class: 100, image_size: 32, channels: 3, noise_std: 40.0, jitter: 1.5, margin: 1.0 }
    }
}

impl SynthConfig {
    fn geometry(&self) -> ImageGeometry {
        ImageGeometry { channels: self.channels, size: self.image_size }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::Parameter(format!("synthetic data needs at least 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 || self.image_size < 4 || !(self.channels == 1 || self.channels == 3) {
            return Err(DataError::Parameter(format!(
                "per_class {} / image_size {} / channels {} out of range",
                self.per_class, self.image_size, self.channels
            )));
        }
        if !(self.noise_std >= 0.0 && self.jitter >= 0.0 && self.margin >= 0.0) {
            return Err(DataError::Parameter("noise, jitter and margin must be non-negative".into()));
        }
        Ok(())
    }

    /// Noiseless class templates, pixel values in `0..=255`.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        (0..self.classes).map(|c| self.render(c, 0.0, 0.0, 1.0)).collect()
    }

    /// Smallest pairwise distance between templates, pixels scaled to `[0, 1]`.
    pub fn template_margin(&self) -> f64 {
        let t = self.templates();
        let mut best = f64::INFINITY;
        for i in 0..t.len() {
            for j in (i + 1)..t.len() {
                let d = t[i].iter().zip(&t[j]).map(|(a, b)| ((a - b) / 255.0).powi(2)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        best
    }

    fn render(&self, class: usize, dx: f64, dy: f64, gain: f64) -> Vec<f64> {
        let s = self.image_size as f64;
        let angle = 2.0 * PI * class as f64 / self.classes as f64;
        let (cx, cy) = (s / 2.0 + s / 4.0 * angle.cos() + dx, s / 2.0 + s / 4.0 * angle.sin() + dy);
        let sigma = s / 6.0;
        let colour: Vec<f64> = if self.channels == 3 {
            (0..3).map(|k| (angle - 2.0 * PI * k as f64 / 3.0).cos()).collect()
        } else {
            vec![1.0]
        };
        let plane = self.image_size * self.image_size;
        let mut out = vec![0.0; self.channels * plane];
        for (ch, &col) in colour.iter().enumerate() {
            for y in 0..self.image_size {
                for x in 0..self.image_size {
                    let r2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    let bump = (-r2 / (2.0 * sigma * sigma)).exp();
                    out[ch * plane + y * self.image_size + x] = 128.0 + 110.0 * gain * bump * (0.5 + 0.5 * col) - 40.0 * gain * bump;
                }
            }
        }
        out
    }
}

/// Deterministic (given the RNG) synthetic dataset, classes interleaved.
pub fn synth_dataset<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let margin = cfg.template_margin();
    if margin < cfg.margin {
        return Err(DataError::Parameter(format!(
            "class templates are only {margin:.3} apart, below the requested margin {}",
            cfg.margin
        )));
    }
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated");
    let jitter = Normal::new(0.0, cfg.jitter).expect("validated");
    let total = cfg.classes * cfg.per_class;
    let mut pixels = Vec::with_capacity(total * cfg.geometry().pixels());
    let mut labels = Vec::with_capacity(total);
    for _ in 0..cfg.per_class {
        for c in 0..cfg.classes {
            let gain = rng.random_range(0.8..1.2);
            let img = cfg.render(c, jitter.sample(rng), jitter.sample(rng), gain);
            pixels.extend(img.into_iter().map(|v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8));
            labels.push(c);
        }
    }
    Dataset::new(cfg.geometry(), pixels, labels, cfg.classes)
}
