//! Shared fixtures (trained once per test binary) and independent oracles
//! for the acceptance suite.

use std::sync::OnceLock;
use stegolab_core::channel::ChannelSpec;
use stegolab_core::codec::{CodecModel, CodecTrainConfig, Message, TrainLog};
use stegolab_core::corpus::{generate_synthetic_corpus, Corpus, MaskKind, SyntheticSpec};
use stegolab_core::diffusion::{build_schedule, NoisePredictor, NoiseSchedule, SigmaMode};
use stegolab_core::gan::{GanTrainConfig, GeneratorModel};
use stegolab_core::select::{select_ddim_batch, SelectionConfig, SelectionResult};
use stegolab_core::tensor::Tensor;

/// One pass/fail line per criterion.
pub fn criterion(id: &str, pass: bool, detail: &str) {
    println!("[{id}] {} - {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "[{id}] FAIL - {detail}");
}

/// Designed corpus for learnability and selection: moderate variance
/// contrast so every message bit stays serviceable.
pub fn main_spec() -> SyntheticSpec {
    SyntheticSpec {
        height: 16,
        width: 16,
        channels: 1,
        ellipses: 3,
        sigma_low_sq: 1e-4,
        sigma_high_sq: 4.9e-3,
        low_region_fraction: 0.65,
        mask: MaskKind::CenteredRect,
        seed: 7,
    }
}

pub fn corpus16() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| generate_synthetic_corpus(&main_spec(), 96).expect("corpus16"))
}

/// Waterfilling stress corpus: the high-variance band sits beyond the
/// serviceable cliff, so a quality-dominated codec abandons it the way the
/// closed-form power allocation does.
pub fn corpus16_wf() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let spec = SyntheticSpec {
            sigma_high_sq: 4e-2,
            ..main_spec()
        };
        generate_synthetic_corpus(&spec, 96).expect("corpus16_wf")
    })
}

pub fn corpus32() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let spec = SyntheticSpec {
            height: 32,
            width: 32,
            ellipses: 4,
            seed: 11,
            ..main_spec()
        };
        generate_synthetic_corpus(&spec, 256).expect("corpus32")
    })
}

/// Different-distribution corpus the steganalysis surrogate trains on.
pub fn surrogate_corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let spec = SyntheticSpec {
            seed: 99,
            low_region_fraction: 0.6,
            ..main_spec()
        };
        generate_synthetic_corpus(&spec, 64).expect("surrogate corpus")
    })
}

/// Fresh covers drawn from the main distribution for selection batches.
pub fn covers64() -> &'static Vec<Tensor> {
    static C: OnceLock<Vec<Tensor>> = OnceLock::new();
    C.get_or_init(|| {
        let spec = SyntheticSpec {
            seed: 1234,
            ..main_spec()
        };
        generate_synthetic_corpus(&spec, 64).expect("covers").images
    })
}

pub fn schedule40() -> &'static NoiseSchedule {
    static S: OnceLock<NoiseSchedule> = OnceLock::new();
    S.get_or_init(|| build_schedule(40, 1e-4, 0.05).expect("schedule"))
}

pub fn codec_config(payload: usize, epochs: usize, lambda_q: f64) -> CodecTrainConfig {
    let mut cfg = CodecTrainConfig::new(payload, epochs, 42);
    cfg.hyper.lambda_q = lambda_q;
    cfg
}

/// Learnability codec: payload 1, moderate quality pressure.
pub fn codec16() -> &'static (CodecModel, TrainLog) {
    static C: OnceLock<(CodecModel, TrainLog)> = OnceLock::new();
    C.get_or_init(|| {
        stegolab_core::codec::train_codec(corpus16(), &codec_config(1, 30, 40.0), None)
            .expect("codec16 training")
    })
}

/// Quality-dominated codec on the stress corpus for the waterfilling
/// correspondence.
pub fn codec16_wf() -> &'static CodecModel {
    static C: OnceLock<CodecModel> = OnceLock::new();
    C.get_or_init(|| {
        stegolab_core::codec::train_codec(corpus16_wf(), &codec_config(1, 30, 70.0), None)
            .expect("codec16_wf training")
            .0
    })
}

/// Codec trained through the JPEG layer.
pub fn codec16_jpeg() -> &'static CodecModel {
    static C: OnceLock<CodecModel> = OnceLock::new();
    C.get_or_init(|| {
        let mut cfg = codec_config(1, 30, 40.0);
        cfg.channel = ChannelSpec::Jpeg { quality: 75 };
        stegolab_core::codec::train_codec(corpus16(), &cfg, None)
            .expect("codec16_jpeg training")
            .0
    })
}

pub fn ddpm16() -> &'static NoisePredictor {
    static M: OnceLock<NoisePredictor> = OnceLock::new();
    M.get_or_init(|| {
        stegolab_core::diffusion::train_noise_predictor(corpus16(), schedule40(), 10, 1e-3, 99)
            .expect("ddpm16 training")
            .0
    })
}

pub fn ddpm32() -> &'static NoisePredictor {
    static M: OnceLock<NoisePredictor> = OnceLock::new();
    M.get_or_init(|| {
        stegolab_core::diffusion::train_noise_predictor(corpus32(), schedule40(), 10, 1e-3, 99)
            .expect("ddpm32 training")
            .0
    })
}

pub fn gan16() -> &'static GeneratorModel {
    static M: OnceLock<GeneratorModel> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = GanTrainConfig {
            epochs: 25,
            seed: 31,
            ..Default::default()
        };
        stegolab_core::gan::train_gan(corpus16(), &cfg).expect("gan16 training").0
    })
}

/// Selection configuration used by the batch criteria: deterministic
/// backward passes so the batch statistics isolate the optimization effect.
pub fn selection_cfg() -> SelectionConfig {
    let mut cfg = SelectionConfig::ddim_defaults(500);
    cfg.epochs = 30;
    cfg.steps_per_epoch = 6;
    cfg.lr = 3e-2;
    cfg.sigma = SigmaMode::Zero;
    cfg
}

/// The 64-cover selection batch shared by the selection criteria.
pub fn selection64() -> &'static Vec<(Message, SelectionResult)> {
    static S: OnceLock<Vec<(Message, SelectionResult)>> = OnceLock::new();
    S.get_or_init(|| {
        select_ddim_batch(
            covers64(),
            &codec16().0,
            ddpm16(),
            schedule40(),
            &selection_cfg(),
            None,
            888,
        )
        .expect("selection batch")
    })
}

/// Independent JPEG reference: direct four-loop DCT/IDCT per definition,
/// no shared code with the production kernel (which runs separably off a
/// precomputed basis).
pub fn jpeg_reference_roundtrip(image: &Tensor, table: &[f64; 64]) -> Tensor {
    let (c, h, w) = image.image_dims().expect("image");
    assert!(h % 8 == 0 && w % 8 == 0);
    let mut out = image.clone();
    let pi = std::f64::consts::PI;
    let alpha = |u: usize| if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
    for ch in 0..c {
        for by in 0..h / 8 {
            for bx in 0..w / 8 {
                let mut shifted = [[0.0f64; 8]; 8];
                for (y, row) in shifted.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = (image.data()[(ch * h + by * 8 + y) * w + bx * 8 + x] - 0.5) * 255.0;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for (u, crow) in coef.iter_mut().enumerate() {
                    for (v, cv) in crow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (y, row) in shifted.iter().enumerate() {
                            for (x, &pix) in row.iter().enumerate() {
                                acc += pix
                                    * ((2.0 * y as f64 + 1.0) * u as f64 * pi / 16.0).cos()
                                    * ((2.0 * x as f64 + 1.0) * v as f64 * pi / 16.0).cos();
                            }
                        }
                        let q = table[u * 8 + v];
                        *cv = (alpha(u) * alpha(v) * acc / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for (u, crow) in coef.iter().enumerate() {
                            for (v, &cv) in crow.iter().enumerate() {
                                acc += alpha(u)
                                    * alpha(v)
                                    * cv
                                    * ((2.0 * y as f64 + 1.0) * u as f64 * pi / 16.0).cos()
                                    * ((2.0 * x as f64 + 1.0) * v as f64 * pi / 16.0).cos();
                            }
                        }
                        out.data_mut()[(ch * h + by * 8 + y) * w + bx * 8 + x] =
                            (acc / 255.0 + 0.5).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Exhaustive water-level search at fixed resolution; the brute-force
/// counterpart of the bisection solver.
pub fn waterfill_grid_oracle(sigma_sq: &[f64], p: f64, resolution: f64) -> (f64, Vec<f64>) {
    let lo = sigma_sq.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lo + p;
    let mut best_nu = lo;
    let mut best_gap = f64::INFINITY;
    let steps = ((hi - lo) / resolution).ceil() as usize;
    for i in 0..=steps {
        let nu = lo + i as f64 * resolution;
        let total: f64 = sigma_sq.iter().map(|&s| (nu - s).max(0.0)).sum();
        let gap = (total - p).abs();
        if gap < best_gap {
            best_gap = gap;
            best_nu = nu;
        }
    }
    (
        best_nu,
        sigma_sq.iter().map(|&s| (best_nu - s).max(0.0)).collect(),
    )
}
