//! Synthetic image corpora with a designed per-pixel variance structure.
//!
//! Each image is mean_field + noise, where the noise standard deviation is
//! sigma_low inside a designated region and sigma_high elsewhere. That makes
//! "where are the low-variance pixels" a ground truth by construction instead
//! of an empirical accident, so the encoder-behaviour claims are falsifiable.

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Geometry of the designated low-variance region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    /// Centered rectangle whose area is `low_region_fraction`.
    CenteredRect,
    /// Vertical bands: `low_width` low-variance columns out of every
    /// `period`. The realized fraction is low_width / period, rounded by the
    /// image width; `low_region_fraction` is ignored.
    VerticalStripes { low_width: usize, period: usize },
}

/// Recipe for one corpus: mean field (smooth ramp + soft ellipses) and a
/// piecewise variance field (low inside the designated mask, high outside).
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Soft ellipse count in the mean field.
    pub ellipses: usize,
    /// Pixel-value variance inside the designated low-variance region.
    pub sigma_low_sq: f64,
    /// Pixel-value variance elsewhere.
    pub sigma_high_sq: f64,
    /// Area fraction of the centered low-variance rectangle, in [0.1, 0.9].
    pub low_region_fraction: f64,
    pub mask: MaskKind,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !matches!(self.height, 8 | 16 | 32 | 64) || !matches!(self.width, 8 | 16 | 32 | 64) {
            return Err(Error::invalid(format!(
                "desk-scale dims must be in {{8,16,32,64}}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.sigma_low_sq < 0.0 || self.sigma_low_sq > self.sigma_high_sq {
            return Err(Error::invalid(format!(
                "need 0 <= sigma_low_sq <= sigma_high_sq, got {} and {}",
                self.sigma_low_sq, self.sigma_high_sq
            )));
        }
        let mask = self.low_region_mask();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        if !(0.1..=0.9).contains(&frac) {
            return Err(Error::invalid(format!(
                "low region must cover 10%..90% of pixels, realized fraction {frac}"
            )));
        }
        Ok(())
    }

    /// True where the designated low-variance region sits.
    pub fn low_region_mask(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut mask = vec![false; h * w];
        match self.mask {
            MaskKind::CenteredRect => {
                let side = self.low_region_fraction.sqrt();
                let rh = ((h as f64 * side).round() as usize).clamp(1, h);
                let rw = ((w as f64 * side).round() as usize).clamp(1, w);
                let y0 = (h - rh) / 2;
                let x0 = (w - rw) / 2;
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        mask[y * w + x] = true;
                    }
                }
            }
            MaskKind::VerticalStripes { low_width, period } => {
                for y in 0..h {
                    for x in 0..w {
                        if x % period.max(1) < low_width {
                            mask[y * w + x] = true;
                        }
                    }
                }
            }
        }
        mask
    }

    /// Realized area fraction of the low-variance region.
    pub fn realized_low_fraction(&self) -> f64 {
        let mask = self.low_region_mask();
        mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
    }

    /// Per-pixel noise variance implied by the mask.
    pub fn variance_field(&self) -> Vec<f64> {
        self.low_region_mask()
            .iter()
            .map(|&low| if low { self.sigma_low_sq } else { self.sigma_high_sq })
            .collect()
    }

    /// Smooth mean field in [0.2, 0.8]: a diagonal ramp plus `ellipses`
    /// Gaussian bumps placed from the spec seed. Shared by every image.
    pub fn mean_field(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut rng = Rng::derive(self.seed, 0x6d65616e); // mean-field stream
        let mut field = Tensor::zeros(&[c, h, w]);
        let mut bumps = Vec::new();
        for _ in 0..self.ellipses {
            let cy = rng.uniform_in(0.1, 0.9) * h as f64;
            let cx = rng.uniform_in(0.1, 0.9) * w as f64;
            let ry = rng.uniform_in(0.1, 0.35) * h as f64;
            let rx = rng.uniform_in(0.1, 0.35) * w as f64;
            let amp = rng.uniform_in(-0.25, 0.25);
            let channel_gain: Vec<f64> = (0..c).map(|_| rng.uniform_in(0.6, 1.0)).collect();
            bumps.push((cy, cx, ry, rx, amp, channel_gain));
        }
        let data = field.data_mut();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let ramp = 0.35
                        + 0.3 * (y as f64 / (h - 1).max(1) as f64 + x as f64 / (w - 1).max(1) as f64)
                            / 2.0;
                    let mut v = ramp;
                    for (cy, cx, ry, rx, amp, gain) in &bumps {
                        let dy = (y as f64 - cy) / ry;
                        let dx = (x as f64 - cx) / rx;
                        v += amp * gain[ch] * (-(dy * dy + dx * dx)).exp();
                    }
                    data[(ch * h + y) * w + x] = v.clamp(0.2, 0.8);
                }
            }
        }
        field
    }
}

/// An ordered image set with a train/held-out split and its provenance.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub images: Vec<Tensor>,
    pub train_indices: Vec<usize>,
    pub held_indices: Vec<usize>,
    pub provenance: KvFile,
    pub spec: Option<SyntheticSpec>,
}

impl Corpus {
    pub fn train_images(&self) -> Vec<&Tensor> {
        self.train_indices.iter().map(|&i| &self.images[i]).collect()
    }

    pub fn held_images(&self) -> Vec<&Tensor> {
        self.held_indices.iter().map(|&i| &self.images[i]).collect()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.images[0].image_dims().expect("corpus images are [c,h,w]")
    }
}

/// Generate `n` images: clamp01(mean_field + sigma(p) * noise). Pure in
/// (spec, n); the split puts the first three quarters in train.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, n: usize) -> Result<Corpus> {
    spec.validate()?;
    if n < 2 {
        return Err(Error::invalid(format!("corpus needs n >= 2, got {n}")));
    }
    let mean = spec.mean_field();
    let var = spec.variance_field();
    let sigma: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::derive(spec.seed, 1_000_003u64.wrapping_mul(i as u64 + 1));
        let mut img = mean.clone();
        let data = img.data_mut();
        for ch in 0..c {
            for p in 0..h * w {
                let v = data[ch * h * w + p] + sigma[p] * rng.normal();
                data[ch * h * w + p] = v.clamp(0.0, 1.0);
            }
        }
        images.push(img);
    }
    let n_train = (n * 3).div_ceil(4).max(1).min(n - 1);
    let mut provenance = KvFile::new();
    provenance.set("kind", "synthetic");
    provenance.set("height", spec.height);
    provenance.set("width", spec.width);
    provenance.set("channels", spec.channels);
    provenance.set("ellipses", spec.ellipses);
    provenance.set("sigma_low_sq", spec.sigma_low_sq);
    provenance.set("sigma_high_sq", spec.sigma_high_sq);
    provenance.set("low_region_fraction", spec.low_region_fraction);
    provenance.set(
        "mask",
        match spec.mask {
            MaskKind::CenteredRect => "centered-rect".to_string(),
            MaskKind::VerticalStripes { low_width, period } => {
                format!("stripes-{low_width}-of-{period}")
            }
        },
    );
    provenance.set("seed", spec.seed);
    provenance.set("count", n);
    provenance.set("train_count", n_train);
    Ok(Corpus {
        images,
        train_indices: (0..n_train).collect(),
        held_indices: (n_train..n).collect(),
        provenance,
        spec: Some(spec.clone()),
    })
}

/// Load a corpus from PNG files (sorted by name) with a 3/4 train split.
pub fn load_corpus_dir(dir: &std::path::Path) -> Result<Corpus> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(Error::invalid(format!(
            "corpus directory {} holds {} png files, need >= 2",
            dir.display(),
            paths.len()
        )));
    }
    let images: Vec<Tensor> = paths
        .iter()
        .map(|p| crate::imageio::load_png(p))
        .collect::<Result<_>>()?;
    let dims = images[0].shape().to_vec();
    if images.iter().any(|i| i.shape() != dims) {
        return Err(Error::invalid("corpus images disagree on dimensions"));
    }
    let n = images.len();
    let n_train = (n * 3).div_ceil(4).max(1).min(n - 1);
    let mut provenance = KvFile::new();
    provenance.set("kind", "loaded");
    provenance.set("source", dir.display().to_string());
    provenance.set("count", n);
    provenance.set("train_count", n_train);
    Ok(Corpus {
        images,
        train_indices: (0..n_train).collect(),
        held_indices: (n_train..n).collect(),
        provenance,
        spec: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            height: 16,
            width: 16,
            channels: 1,
            ellipses: 3,
            sigma_low_sq: 0.0004,
            sigma_high_sq: 0.01,
            low_region_fraction: 0.35,
            mask: MaskKind::CenteredRect,
            seed: 7,
        }
    }

    #[test]
    fn zero_noise_reproduces_mean_field() {
        let spec = SyntheticSpec {
            sigma_low_sq: 0.0,
            sigma_high_sq: 0.0,
            ..small_spec()
        };
        let corpus = generate_synthetic_corpus(&spec, 4).unwrap();
        let mean = spec.mean_field();
        for img in &corpus.images {
            assert_eq!(img.data(), mean.data());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = small_spec();
        let a = generate_synthetic_corpus(&spec, 8).unwrap();
        let b = generate_synthetic_corpus(&spec, 8).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn low_region_has_lower_empirical_variance() {
        let spec = small_spec();
        let n = 512;
        let corpus = generate_synthetic_corpus(&spec, n).unwrap();
        let (_, h, w) = corpus.dims();
        let mask = spec.low_region_mask();
        // Empirical per-pixel variance across the batch.
        let mut var = vec![0.0; h * w];
        for p in 0..h * w {
            let vals: Vec<f64> = corpus.images.iter().map(|im| im.data()[p]).collect();
            let m = vals.iter().sum::<f64>() / n as f64;
            var[p] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
        }
        // Compare random cross-boundary pairs: low-region pixel vs outside pixel.
        let inside: Vec<usize> = (0..h * w).filter(|&p| mask[p]).collect();
        let outside: Vec<usize> = (0..h * w).filter(|&p| !mask[p]).collect();
        let mut rng = Rng::new(3);
        let mut wins = 0;
        let trials = 2000;
        for _ in 0..trials {
            let i = inside[rng.below(inside.len())];
            let o = outside[rng.below(outside.len())];
            if var[i] < var[o] {
                wins += 1;
            }
        }
        let frac = wins as f64 / trials as f64;
        assert!(frac >= 0.99, "low-variance region won only {frac} of pairs");
    }

    #[test]
    fn variance_estimator_tracks_spec_in_the_interior() {
        // For pixels whose mean stays 3 sigma away from the clamp boundaries,
        // the batch variance should match the designed field within the
        // sampling tolerance 3 * sigma^2 * sqrt(2/(n-1)) for 99% of pixels.
        let spec = small_spec();
        let n = 512;
        let corpus = generate_synthetic_corpus(&spec, n).unwrap();
        let (_, h, w) = corpus.dims();
        let mean = spec.mean_field();
        let field = spec.variance_field();
        let tol_factor = 3.0 * (2.0 / (n as f64 - 1.0)).sqrt();
        let mut checked = 0;
        let mut ok = 0;
        for p in 0..h * w {
            let sd = field[p].sqrt();
            let m = mean.data()[p];
            if m - 3.0 * sd < 0.0 || m + 3.0 * sd > 1.0 {
                continue;
            }
            let vals: Vec<f64> = corpus.images.iter().map(|im| im.data()[p]).collect();
            let mu = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64;
            checked += 1;
            if (var - field[p]).abs() < tol_factor * field[p] {
                ok += 1;
            }
        }
        assert!(checked > 100, "interior too small: {checked}");
        let frac = ok as f64 / checked as f64;
        assert!(frac >= 0.99, "only {frac} of interior pixels within tolerance");
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut bad = small_spec();
        bad.low_region_fraction = 0.05;
        assert!(generate_synthetic_corpus(&bad, 4).is_err());
        let mut bad = small_spec();
        bad.sigma_low_sq = 0.5;
        bad.sigma_high_sq = 0.1;
        assert!(generate_synthetic_corpus(&bad, 4).is_err());
        assert!(generate_synthetic_corpus(&small_spec(), 1).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let corpus = generate_synthetic_corpus(&small_spec(), 10).unwrap();
        let mut all: Vec<usize> = corpus
            .train_indices
            .iter()
            .chain(&corpus.held_indices)
            .cloned()
            .collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
