//! 8-bit PNG load/save for images and heatmaps.
//!
//! Images are [c, h, w] tensors in [0,1] with c = 1 (grayscale) or 3 (RGB).
//! Loading maps byte v to v/255; saving rounds v*255. A save/load round trip
//! therefore moves any pixel by at most 1/510.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, format!("png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, format!("png frame: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(format_err(path, format!("unsupported color type {other:?}")));
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    // Interleaved rows -> planar [c, h, w].
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = bytes[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.image_dims()?;
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("png save supports 1 or 3 channels, got {c}")));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!(
            "image values outside [0,1] cannot be saved to {}",
            path.display()
        )));
    }
    let mut bytes = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes[(y * w + x) * c + ch] =
                    (image.data()[(ch * h + y) * w + x] * 255.0).round() as u8;
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(if c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| format_err(path, format!("png header: {e}")))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| format_err(path, format!("png write: {e}")))?;
    Ok(())
}

/// Write a normalized per-pixel field as an 8-bit PNG (grayscale for one
/// channel, RGB for three). Values must already lie in [0,1].
pub fn save_heatmap(path: &Path, map: &Tensor) -> Result<()> {
    save_png(path, map)
}

fn format_err(path: &Path, detail: String) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("stegolab-imageio-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn half_gray_quantizes_to_128() {
        let img = Tensor::full(&[1, 4, 4], 0.5);
        let p = tmp("half.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        for &v in back.data() {
            assert_eq!(v, 128.0 / 255.0);
        }
    }

    #[test]
    fn known_bytes_scale_exactly() {
        // 2x2 grayscale with bytes {0, 255, 128, 64}.
        let img = Tensor::from_vec(
            &[1, 2, 2],
            vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0],
        )
        .unwrap();
        let p = tmp("bytes.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn roundtrip_error_bounded_for_every_byte_level() {
        // Exhaustive over all 256 representable levels plus midpoints.
        let mut vals = Vec::new();
        for b in 0..=255u32 {
            vals.push(b as f64 / 255.0);
            vals.push((b as f64 + 0.49) / 255.0);
        }
        vals.truncate(256);
        let img = Tensor::from_vec(&[1, 16, 16], vals).unwrap();
        let p = tmp("levels.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1.0 / 510.0 + 1e-12, "round-trip error {worst}");
    }

    #[test]
    fn rgb_roundtrip_and_heatmap_extremes() {
        let mut img = Tensor::zeros(&[3, 2, 2]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f64) / 11.0;
        }
        let p = tmp("rgb.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back.shape(), &[3, 2, 2]);

        let black = Tensor::zeros(&[1, 3, 3]);
        let white = Tensor::ones(&[1, 3, 3]);
        let pb = tmp("black.png");
        let pw = tmp("white.png");
        save_heatmap(&pb, &black).unwrap();
        save_heatmap(&pw, &white).unwrap();
        assert!(load_png(&pb).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(load_png(&pw).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn out_of_range_heatmap_rejected() {
        let bad = Tensor::full(&[1, 2, 2], 1.5);
        assert!(save_heatmap(&tmp("bad.png"), &bad).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_png(Path::new("/nonexistent/x.png")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.png"), "{err}");
    }
}
