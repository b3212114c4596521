//! Error-rate, image-quality and complexity measurements.

use crate::codec::Message;
use crate::error::{Error, Result};
use crate::tensor::{pearson, Tensor};
use flate2::write::ZlibEncoder;
use flate2::Compression;
use std::io::Write;

/// Fraction of differing bits between two hard messages.
pub fn error_rate(m: &Message, decided: &Message) -> Result<f64> {
    if m.bits.shape() != decided.bits.shape() {
        return Err(Error::shape(
            "error-rate",
            format!("{:?} vs {:?}", m.bits.shape(), decided.bits.shape()),
        ));
    }
    let differing = m
        .bits
        .data()
        .iter()
        .zip(decided.bits.data())
        .filter(|(a, b)| (*a >= &0.5) != (*b >= &0.5))
        .count();
    Ok(differing as f64 / m.bits.numel() as f64)
}

/// Peak signal-to-noise ratio in dB with MAX = 1; identical images report
/// the +infinity sentinel.
pub fn psnr(x: &Tensor, s: &Tensor) -> Result<f64> {
    let mse = x.mse_value(s)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Windowed SSIM: 8x8 uniform windows, stride 1, stabilizers C1 = 0.01^2 and
/// C2 = 0.03^2 on the [0,1] range. RGB inputs are averaged to a single luma
/// channel first. Images smaller than the window are rejected.
pub fn ssim(x: &Tensor, s: &Tensor) -> Result<f64> {
    if x.shape() != s.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", x.shape(), s.shape()),
        ));
    }
    let xl = to_luma(x)?;
    let sl = to_luma(s)?;
    let (h, w) = (xl.0, xl.1);
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("ssim needs at least 8x8, got {h}x{w}")));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = 64.0;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - 8 {
        for x0 in 0..=w - 8 {
            let mut sum_x = 0.0;
            let mut sum_s = 0.0;
            let mut sum_xx = 0.0;
            let mut sum_ss = 0.0;
            let mut sum_xs = 0.0;
            for dy in 0..8 {
                for dx in 0..8 {
                    let a = xl.2[(y0 + dy) * w + x0 + dx];
                    let b = sl.2[(y0 + dy) * w + x0 + dx];
                    sum_x += a;
                    sum_s += b;
                    sum_xx += a * a;
                    sum_ss += b * b;
                    sum_xs += a * b;
                }
            }
            let mx = sum_x / n;
            let ms = sum_s / n;
            let vx = (sum_xx / n - mx * mx).max(0.0);
            let vs = (sum_ss / n - ms * ms).max(0.0);
            let cov = sum_xs / n - mx * ms;
            let score = ((2.0 * mx * ms + C1) * (2.0 * cov + C2))
                / ((mx * mx + ms * ms + C1) * (vx + vs + C2));
            total += score;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// (h, w, luma values). RGB collapses to the plain channel mean.
fn to_luma(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = img.image_dims()?;
    let mut luma = vec![0.0; h * w];
    for ch in 0..c {
        for p in 0..h * w {
            luma[p] += img.data()[ch * h * w + p] / c as f64;
        }
    }
    Ok((h, w, luma))
}

#[derive(Debug, Clone)]
pub struct ComplexityReport {
    /// Shannon entropy of the 8-bit grayscale histogram, in bits.
    pub entropy: f64,
    /// Fraction of pixels whose Sobel gradient magnitude exceeds 0.25.
    pub edge_density: f64,
    /// Raw byte count over deflate-compressed byte count of the 8-bit image.
    pub compression_ratio: f64,
    /// Shannon diversity of colors quantized to 5 bits per channel, in bits.
    pub color_diversity: f64,
}

/// Complexity metrics on the 8-bit quantized view of an image.
pub fn complexity_metrics(img: &Tensor) -> Result<ComplexityReport> {
    let (c, h, w) = img.image_dims()?;
    let luma = to_luma(img)?.2;

    // Entropy over 256 gray levels.
    let mut hist = [0usize; 256];
    for &v in &luma {
        hist[((v * 255.0).round() as usize).min(255)] += 1;
    }
    let n = luma.len() as f64;
    let entropy = -hist
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();

    // Edge density: Sobel magnitude on interior pixels over total pixels.
    let mut edges = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let at = |dy: isize, dx: isize| {
                luma[((y as isize + dy) as usize) * w + (x as isize + dx) as usize]
            };
            let gx = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1))
                - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1));
            let gy = (at(1, -1) + 2.0 * at(1, 0) + at(1, 1))
                - (at(-1, -1) + 2.0 * at(-1, 0) + at(-1, 1));
            if (gx * gx + gy * gy).sqrt() > 0.25 {
                edges += 1;
            }
        }
    }
    let edge_density = edges as f64 / (h * w) as f64;

    // Compression ratio of the raw 8-bit byte stream under deflate at a
    // fixed level, so the figure is deterministic.
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut encoder = ZlibEncoder::new(Vec::new(), Compression::new(6));
    encoder
        .write_all(&bytes)
        .and_then(|_| encoder.finish())
        .map(|compressed| {
            let ratio = bytes.len() as f64 / compressed.len().max(1) as f64;
            ratio
        })
        .map_err(|e| Error::invalid(format!("deflate failed: {e}")))
        .map(|compression_ratio| {
            // Color diversity over 5-bit-per-channel quantized colors.
            let mut counts: std::collections::BTreeMap<u32, usize> = Default::default();
            for p in 0..h * w {
                let mut key = 0u32;
                for ch in 0..c {
                    let q = (img.data()[ch * h * w + p].clamp(0.0, 1.0) * 31.0).round() as u32;
                    key = key << 5 | q;
                }
                *counts.entry(key).or_default() += 1;
            }
            let color_diversity = -counts
                .values()
                .map(|&k| {
                    let p = k as f64 / n;
                    p * p.log2()
                })
                .sum::<f64>();
            ComplexityReport {
                entropy,
                edge_density,
                compression_ratio,
                color_diversity,
            }
        })
}

/// One row per metric pair: (metric name, target name, Pearson r or None
/// when a vector is degenerate).
pub fn correlation_report(
    metrics: &[(String, Vec<f64>)],
    targets: &[(String, Vec<f64>)],
) -> Result<Vec<(String, String, Option<f64>)>> {
    for (name, v) in metrics.iter().chain(targets) {
        if v.len() < 3 {
            return Err(Error::invalid(format!(
                "correlation needs vectors of length >= 3, {name:?} has {}",
                v.len()
            )));
        }
    }
    let mut rows = Vec::new();
    for (mn, mv) in metrics {
        for (tn, tv) in targets {
            if mv.len() != tv.len() {
                return Err(Error::invalid(format!(
                    "length mismatch between {mn:?} and {tn:?}"
                )));
            }
            rows.push((mn.clone(), tn.clone(), pearson(mv, tv)));
        }
    }
    Ok(rows)
}

pub fn correlation_csv(rows: &[(String, String, Option<f64>)]) -> String {
    let mut out = String::from("metric,target,pearson_r\n");
    for (m, t, r) in rows {
        match r {
            Some(v) => out.push_str(&format!("{m},{t},{v:.6}\n")),
            None => out.push_str(&format!("{m},{t},undefined\n")),
        }
    }
    out
}
