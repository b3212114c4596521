//! Variance/residual maps, threshold-overlap statistics, waterfilling power
//! allocation and the quantized-similarity score.
//!
//! Binarization conventions, fixed once: the high-residual set uses a strict
//! `> threshold`, the low-variance set a strict `< threshold`, and
//! quantized similarity maps `>= threshold` to one.

use crate::codec::{sample_message, CodecModel};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-channel spatial field with its normalization record.
#[derive(Debug, Clone)]
pub struct PixelMap {
    /// Normalized values in [0,1], shape [c, h, w].
    pub values: Tensor,
    /// (min, max) of the raw field per channel; min == max marks a constant
    /// channel, normalized to all zeros.
    pub norm: Vec<(f64, f64)>,
    /// Raw, unnormalized field.
    pub raw: Tensor,
}

impl PixelMap {
    /// Min-max normalize a raw field per channel; constant channels become
    /// all zeros.
    pub fn from_raw(raw: Tensor) -> Result<PixelMap> {
        let (c, h, w) = raw.image_dims()?;
        let mut values = raw.clone();
        let mut norm = Vec::with_capacity(c);
        for ch in 0..c {
            let slice = &raw.data()[ch * h * w..(ch + 1) * h * w];
            let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            norm.push((lo, hi));
            let out = &mut values.data_mut()[ch * h * w..(ch + 1) * h * w];
            if hi > lo {
                for v in out.iter_mut() {
                    *v = (*v - lo) / (hi - lo);
                }
            } else {
                for v in out.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        Ok(PixelMap { values, norm, raw })
    }

    /// Shuffle the normalized values spatially (per channel, seeded) — the
    /// control map for similarity comparisons.
    pub fn shuffled(&self, seed: u64) -> PixelMap {
        let (c, h, w) = self.values.image_dims().expect("pixel map is [c,h,w]");
        let mut values = self.values.clone();
        let mut rng = Rng::derive(seed, 0x5f1e);
        for ch in 0..c {
            let slice = &mut values.data_mut()[ch * h * w..(ch + 1) * h * w];
            rng.shuffle(slice);
        }
        PixelMap {
            values,
            norm: self.norm.clone(),
            raw: self.raw.clone(),
        }
    }
}

/// Unbiased per-pixel sample variance across a batch, then per-channel
/// min-max normalization. A batch of identical images yields the all-zero
/// map by the constant-channel convention.
pub fn variance_map(batch: &[&Tensor]) -> Result<PixelMap> {
    if batch.len() < 2 {
        return Err(Error::invalid(format!(
            "variance map needs a batch of >= 2, got {}",
            batch.len()
        )));
    }
    let shape = batch[0].shape().to_vec();
    for img in batch {
        if img.shape() != shape {
            return Err(Error::shape("variance-map", "batch images disagree on shape"));
        }
    }
    let n = batch.len() as f64;
    let mut raw = Tensor::zeros(&shape);
    let numel = raw.numel();
    for p in 0..numel {
        let mean = batch.iter().map(|im| im.data()[p]).sum::<f64>() / n;
        let ss = batch
            .iter()
            .map(|im| {
                let d = im.data()[p] - mean;
                d * d
            })
            .sum::<f64>();
        raw.data_mut()[p] = ss / (n - 1.0);
    }
    PixelMap::from_raw(raw)
}

/// Batch-averaged |s - x| per pixel (fresh message per image from
/// `message_seed`), then per-channel min-max normalization.
pub fn residual_map(batch: &[&Tensor], codec: &CodecModel, message_seed: u64) -> Result<PixelMap> {
    if batch.is_empty() {
        return Err(Error::invalid("residual map over an empty batch"));
    }
    let (_, h, w) = batch[0].image_dims()?;
    let mut raw = Tensor::zeros(batch[0].shape());
    for (i, x) in batch.iter().enumerate() {
        let m = sample_message(h, w, codec.payload, message_seed ^ (i as u64).wrapping_mul(0x9e37))?;
        let (s, _) = codec.encode(x, &m)?;
        for (acc, (&sv, &xv)) in raw.data_mut().iter_mut().zip(s.data().iter().zip(x.data())) {
            *acc += (sv - xv).abs();
        }
    }
    let n = batch.len() as f64;
    for v in raw.data_mut() {
        *v /= n;
    }
    PixelMap::from_raw(raw)
}

/// Overlap between the high-residual and low-variance sets, pooled over
/// channels, plus the chance baseline |low| / total.
#[derive(Debug, Clone)]
pub struct OverlapStats {
    /// |high ∩ low| / |high| pooled over channels; `None` when the
    /// high-residual set is empty.
    pub fraction: Option<f64>,
    /// |low| / total positions — what an unrelated residual map would score.
    pub chance: f64,
    pub high_count: usize,
    pub low_count: usize,
    /// The same fraction per channel (None where a channel's high set is empty).
    pub per_channel: Vec<Option<f64>>,
}

pub fn overlap_fraction(
    variance: &PixelMap,
    residual: &PixelMap,
    threshold: f64,
) -> Result<OverlapStats> {
    if variance.values.shape() != residual.values.shape() {
        return Err(Error::shape(
            "overlap-fraction",
            format!(
                "{:?} vs {:?}",
                variance.values.shape(),
                residual.values.shape()
            ),
        ));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0,1), got {threshold}")));
    }
    let (c, h, w) = variance.values.image_dims()?;
    let total = variance.values.numel();
    let mut high = 0usize;
    let mut low = 0usize;
    let mut both = 0usize;
    let mut per_channel = Vec::with_capacity(c);
    for ch in 0..c {
        let mut ch_high = 0usize;
        let mut ch_both = 0usize;
        for p in ch * h * w..(ch + 1) * h * w {
            let is_high = residual.values.data()[p] > threshold;
            let is_low = variance.values.data()[p] < threshold;
            if is_high {
                high += 1;
                ch_high += 1;
            }
            if is_low {
                low += 1;
            }
            if is_high && is_low {
                both += 1;
                ch_both += 1;
            }
        }
        per_channel.push((ch_high > 0).then(|| ch_both as f64 / ch_high as f64));
    }
    Ok(OverlapStats {
        fraction: (high > 0).then(|| both as f64 / high as f64),
        chance: low as f64 / total as f64,
        high_count: high,
        low_count: low,
        per_channel,
    })
}

/// Waterfilling allocation over parallel channels with noise levels
/// `sigma_sq` and total power budget `p`.
#[derive(Debug, Clone)]
pub struct WaterfillResult {
    /// Per-channel allocated power (nu - sigma_i^2)^+.
    pub gamma_sq: Vec<f64>,
    /// Water level nu.
    pub nu: f64,
    /// Dual variable 1 / (nu ln 2).
    pub lambda: f64,
    /// Achieved total power (== p to within 1e-9 relative).
    pub total_power: f64,
    /// Capacity sum log2(1 + gamma^2 / sigma^2), in bits.
    pub capacity: f64,
}

/// Find the water level by bisection on g(nu) = sum (nu - sigma_i^2)^+ - p
/// over [min sigma^2, min sigma^2 + p], then polish with the closed form on
/// the identified active set so the power balance is exact to rounding.
pub fn waterfill(sigma_sq: &[f64], p: f64) -> Result<WaterfillResult> {
    if sigma_sq.is_empty() {
        return Err(Error::invalid("waterfill over zero channels"));
    }
    if sigma_sq.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::invalid("waterfill noise levels must be positive and finite"));
    }
    if p <= 0.0 || !p.is_finite() {
        return Err(Error::invalid(format!("power budget must be positive, got {p}")));
    }
    let min_sigma = sigma_sq.iter().cloned().fold(f64::INFINITY, f64::min);
    let excess = |nu: f64| -> f64 {
        sigma_sq.iter().map(|&s| (nu - s).max(0.0)).sum::<f64>() - p
    };
    let mut lo = min_sigma;
    let mut hi = min_sigma + p;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if excess(0.5 * (lo + hi)).abs() <= 1e-12 * p {
            break;
        }
    }
    let mut nu = 0.5 * (lo + hi);
    // Closed-form polish: nu = (p + sum of active sigma^2) / |active|.
    let active: Vec<f64> = sigma_sq.iter().cloned().filter(|&s| s < nu).collect();
    if !active.is_empty() {
        nu = (p + active.iter().sum::<f64>()) / active.len() as f64;
    }
    let gamma_sq: Vec<f64> = sigma_sq.iter().map(|&s| (nu - s).max(0.0)).collect();
    let total_power: f64 = gamma_sq.iter().sum();
    if (total_power - p).abs() > 1e-9 * p {
        return Err(Error::NonFinite(format!(
            "waterfill power balance violated: {total_power} vs {p}"
        )));
    }
    let capacity = gamma_sq
        .iter()
        .zip(sigma_sq)
        .map(|(&g, &s)| (1.0 + g / s).log2())
        .sum();
    Ok(WaterfillResult {
        gamma_sq,
        nu,
        lambda: 1.0 / (nu * std::f64::consts::LN_2),
        total_power,
        capacity,
    })
}

/// Binarize both maps at the threshold (>= goes to one) and return the
/// per-channel agreement percentage.
pub fn quantized_similarity(a: &PixelMap, b: &PixelMap, threshold: f64) -> Result<Vec<f64>> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape(
            "quantized-similarity",
            format!("{:?} vs {:?}", a.values.shape(), b.values.shape()),
        ));
    }
    let (c, h, w) = a.values.image_dims()?;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut agree = 0usize;
        for p in ch * h * w..(ch + 1) * h * w {
            let qa = a.values.data()[p] >= threshold;
            let qb = b.values.data()[p] >= threshold;
            if qa == qb {
                agree += 1;
            }
        }
        out.push(100.0 * agree as f64 / (h * w) as f64);
    }
    Ok(out)
}

/// The budget-matched noise field and power for comparing the encoder with
/// the waterfilling allocation: raw per-pixel variances as sigma^2 and the
/// measured total squared residual as the budget.
pub fn waterfill_map_for_codec(
    batch: &[&Tensor],
    codec: &CodecModel,
    message_seed: u64,
) -> Result<(PixelMap, WaterfillResult)> {
    let var = variance_map(batch)?;
    // Total encoder power: mean over the batch of sum (s - x)^2.
    let mut power = 0.0;
    let (_, h, w) = batch[0].image_dims()?;
    for (i, x) in batch.iter().enumerate() {
        let m = sample_message(h, w, codec.payload, message_seed ^ (i as u64).wrapping_mul(0x9e37))?;
        let (s, _) = codec.encode(x, &m)?;
        power += s
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    power /= batch.len() as f64;
    // Clamp zero variances away from the waterfill domain edge.
    let sigma_sq: Vec<f64> = var.raw.data().iter().map(|&v| v.max(1e-12)).collect();
    let wf = waterfill(&sigma_sq, power)?;
    let gamma: Vec<f64> = wf.gamma_sq.iter().map(|&g| g.sqrt()).collect();
    let gamma_map = PixelMap::from_raw(Tensor::from_vec(var.raw.shape(), gamma)?)?;
    Ok((gamma_map, wf))
}

pub fn waterfill_csv(sigma_sq: &[f64], wf: &WaterfillResult) -> String {
    let mut out = String::from("index,sigma_sq,gamma_sq,nu,capacity_bits\n");
    for (i, (s, g)) in sigma_sq.iter().zip(&wf.gamma_sq).enumerate() {
        out.push_str(&format!("{i},{s:.9},{g:.9},{:.9},{:.9}\n", wf.nu, wf.capacity));
    }
    out
}
