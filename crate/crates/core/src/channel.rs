//! Channel layers and the steganalysis adversary.
//!
//! The JPEG layer compresses for real in the forward pass (blockwise DCT,
//! quantization against a quality-scaled table, inverse DCT) while its
//! backward is the identity, so gradient-based optimization can see through
//! it. The Gaussian channel adds seeded noise that differentiation treats as
//! a constant. The detector is a fixed high-pass residual front end followed
//! by a small learned conv stack with a two-logit head (cover, stego).

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::nn::{accumulate, collect_grads, scale_grads, BoundConv3x3, BoundDense, Conv3x3, Dense};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Canonical base luminance quantization table (8x8, row-major).
pub const BASE_LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled quantization table. Quality 50 reproduces the base table.
#[derive(Debug, Clone)]
pub struct JpegConfig {
    pub quality: u32,
    pub table: [f64; 64],
}

impl JpegConfig {
    /// Serialized form: the quality plus the full scaled table, so a run's
    /// exact quantization is auditable from its outputs.
    pub fn to_kv(&self) -> crate::kv::KvFile {
        let mut kv = crate::kv::KvFile::new();
        kv.set("quality", self.quality);
        kv.set(
            "table",
            self.table
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv
    }

    pub fn new(quality: u32) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(Error::invalid(format!("jpeg quality must be 1..=100, got {quality}")));
        }
        // Conventional scaling rule: q < 50 -> 5000/q, else 200 - 2q,
        // entries scaled by factor/100 and clamped to [1, 255].
        let factor = if quality < 50 {
            5000 / quality
        } else {
            200 - 2 * quality
        };
        let mut table = [0.0; 64];
        for (t, &b) in table.iter_mut().zip(&BASE_LUMA_TABLE) {
            let scaled = (b as u32 * factor + 50) / 100;
            *t = scaled.clamp(1, 255) as f64;
        }
        Ok(JpegConfig { quality, table })
    }
}

/// Orthonormal 1-D DCT-II basis: basis[u][x] = s(u) cos((2x+1) u pi / 16).
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: std::sync::OnceLock<[[f64; 8]; 8]> = std::sync::OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let s = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = s * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

/// JPEG compression round trip on [c, h, w] with h, w multiples of 8.
/// Per block: level shift to [-127.5, 127.5], 2-D DCT, quantize against the
/// scaled table, dequantize, inverse DCT, shift back, clamp to [0, 1].
/// Channels are compressed independently (no subsampling); entropy coding is
/// lossless and therefore omitted.
pub fn jpeg_round_trip(image: &Tensor, cfg: &JpegConfig) -> Result<Tensor> {
    let (c, h, w) = image.image_dims()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!(
            "jpeg needs dimensions divisible by 8, got {h}x{w}"
        )));
    }
    let basis = dct_basis();
    let mut out = image.clone();
    let data = out.data_mut();
    let mut block = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    for ch in 0..c {
        for by in 0..h / 8 {
            for bx in 0..w / 8 {
                for y in 0..8 {
                    for x in 0..8 {
                        let v = data[(ch * h + by * 8 + y) * w + bx * 8 + x];
                        block[y * 8 + x] = (v - 0.5) * 255.0;
                    }
                }
                // F = B X B^T, computed separably.
                let mut tmp = [0.0f64; 64];
                for u in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            acc += basis[u][y] * block[y * 8 + x];
                        }
                        tmp[u * 8 + x] = acc;
                    }
                }
                for u in 0..8 {
                    for v_ in 0..8 {
                        let mut acc = 0.0;
                        for x in 0..8 {
                            acc += tmp[u * 8 + x] * basis[v_][x];
                        }
                        let q = cfg.table[u * 8 + v_];
                        coef[u * 8 + v_] = (acc / q).round() * q;
                    }
                }
                // X = B^T F B.
                for y in 0..8 {
                    for v_ in 0..8 {
                        let mut acc = 0.0;
                        for u in 0..8 {
                            acc += basis[u][y] * coef[u * 8 + v_];
                        }
                        tmp[y * 8 + v_] = acc;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for v_ in 0..8 {
                            acc += tmp[y * 8 + v_] * basis[v_][x];
                        }
                        data[(ch * h + by * 8 + y) * w + bx * 8 + x] =
                            (acc / 255.0 + 0.5).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Additive Gaussian noise N(0, beta) followed by clamping to [0, 1].
pub fn gaussian_channel(s: &Tensor, beta: f64, seed: u64) -> Result<Tensor> {
    if beta < 0.0 {
        return Err(Error::invalid(format!("noise variance must be >= 0, got {beta}")));
    }
    if beta == 0.0 {
        return Ok(s.clone());
    }
    let mut rng = Rng::new(seed);
    let sd = beta.sqrt();
    let mut out = s.clone();
    for v in out.data_mut() {
        *v = (*v + sd * rng.normal()).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Distortion applied to the steganographic image before decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelSpec {
    Clean,
    Jpeg { quality: u32 },
    Gaussian { beta: f64 },
}

impl ChannelSpec {
    /// Apply to a graph node. JPEG enters as a straight-through passthrough;
    /// Gaussian noise enters as a seeded constant plus straight-through clamp.
    pub fn apply_on_graph(&self, g: &mut Graph, s: VarId, seed: u64) -> Result<VarId> {
        match *self {
            ChannelSpec::Clean => Ok(s),
            ChannelSpec::Jpeg { quality } => {
                let cfg = JpegConfig::new(quality)?;
                let compressed = jpeg_round_trip(g.value(s), &cfg)?;
                g.ste_passthrough(s, compressed)
            }
            ChannelSpec::Gaussian { beta } => {
                if beta == 0.0 {
                    return Ok(s);
                }
                let shape = g.value(s).shape().to_vec();
                let noise = g.gaussian_sample(&shape, seed);
                let scaled = g.scale(noise, beta.sqrt());
                let noisy = g.add(s, scaled)?;
                Ok(g.clamp01_ste(noisy))
            }
        }
    }

    pub fn apply_plain(&self, s: &Tensor, seed: u64) -> Result<Tensor> {
        match *self {
            ChannelSpec::Clean => Ok(s.clone()),
            ChannelSpec::Jpeg { quality } => jpeg_round_trip(s, &JpegConfig::new(quality)?),
            ChannelSpec::Gaussian { beta } => gaussian_channel(s, beta, seed),
        }
    }
}

/// Steganalysis detector: fixed 5x5 high-pass residual front end, two learned
/// conv layers with 2x pooling, dense head with exactly two logits
/// (index 0 = cover, index 1 = stego).
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub head: Dense,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub struct BoundDetector {
    conv1: BoundConv3x3,
    conv2: BoundConv3x3,
    head: BoundDense,
    height: usize,
    width: usize,
}

impl DetectorModel {
    pub fn init(channels: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::invalid(format!(
                "detector needs dims divisible by 4, got {height}x{width}"
            )));
        }
        let mut rng = Rng::derive(seed, 0xde7ec7);
        Ok(DetectorModel {
            conv1: Conv3x3::init(channels, 8, 1, 1.0, &mut rng),
            conv2: Conv3x3::init(8, 16, 1, 1.0, &mut rng),
            head: Dense::init(16 * (height / 4) * (width / 4), 2, 1.0, &mut rng),
            channels,
            height,
            width,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDetector {
        BoundDetector {
            conv1: self.conv1.bind(g, trainable),
            conv2: self.conv2.bind(g, trainable),
            head: self.head.bind(g, trainable),
            height: self.height,
            width: self.width,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("conv1.weight".into(), &self.conv1.weight),
            ("conv1.bias".into(), &self.conv1.bias),
            ("conv2.weight".into(), &self.conv2.weight),
            ("conv2.bias".into(), &self.conv2.bias),
            ("head.weight".into(), &self.head.weight),
            ("head.bias".into(), &self.head.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn save(&self, prefix: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_params(&prefix.with_extension("bin"), &self.named_params())?;
        let mut kv = crate::kv::KvFile::new();
        kv.set("channels", self.channels);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.save(&prefix.with_extension("kv"))
    }

    pub fn load(prefix: &std::path::Path) -> Result<DetectorModel> {
        let kv = crate::kv::KvFile::load(&prefix.with_extension("kv"))?;
        let r = crate::kv::KvReader::new(&kv);
        let (channels, height, width) = (r.require("channels")?, r.require("height")?, r.require("width")?);
        r.finish()?;
        let mut model = DetectorModel::init(channels, height, width, 0)?;
        let loaded = crate::checkpoint::load_params(&prefix.with_extension("bin"))?;
        let mut targets: Vec<(&str, &mut Tensor)> = vec![
            ("conv1.weight", &mut model.conv1.weight),
            ("conv1.bias", &mut model.conv1.bias),
            ("conv2.weight", &mut model.conv2.weight),
            ("conv2.bias", &mut model.conv2.bias),
            ("head.weight", &mut model.head.weight),
            ("head.bias", &mut model.head.bias),
        ];
        crate::checkpoint::assign_by_name(loaded, &mut targets)?;
        Ok(model)
    }

    /// Two logits for a plain image.
    pub fn logits(&self, image: &Tensor) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let bound = self.bind(&mut g, false);
        let out = bound.forward(&mut g, x)?;
        let d = g.value(out).data();
        Ok((d[0], d[1]))
    }
}

impl BoundDetector {
    /// Forward pass to the two-logit head, shape [2, 1].
    pub fn forward(&self, g: &mut Graph, x: VarId) -> Result<VarId> {
        let r = g.residual5x5(x)?;
        let h1 = self.conv1.apply(g, r)?;
        let a1 = g.leaky_relu(h1, 0.2);
        let p1 = g.sumpool2x(a1)?;
        let p1 = g.scale(p1, 0.25);
        let h2 = self.conv2.apply(g, p1)?;
        let a2 = g.leaky_relu(h2, 0.2);
        let p2 = g.sumpool2x(a2)?;
        let p2 = g.scale(p2, 0.25);
        let flat = g.reshape(p2, &[16 * (self.height / 4) * (self.width / 4), 1])?;
        self.head.apply(g, flat)
    }

    /// stego logit minus cover logit, as a scalar node.
    pub fn margin(&self, g: &mut Graph, x: VarId) -> Result<VarId> {
        let logits = self.forward(g, x)?;
        let stego = g.narrow(logits, 0, 1, 1)?;
        let cover = g.narrow(logits, 0, 0, 1)?;
        let diff = g.sub(stego, cover)?;
        g.reshape(diff, &[])
    }

    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = self.conv1.param_ids();
        ids.extend(self.conv2.param_ids());
        ids.extend(self.head.param_ids());
        ids
    }
}

#[derive(Debug, Clone)]
pub struct DetectorLog {
    /// Held-out accuracy after each epoch.
    pub accuracy: Vec<f64>,
}

/// Train the detector on balanced cover/stego batches with binary
/// cross-entropy on the stego-minus-cover margin. A quarter of each set is
/// held out for the reported accuracy.
pub fn train_detector(
    covers: &[Tensor],
    stegos: &[Tensor],
    epochs: usize,
    seed: u64,
) -> Result<(DetectorModel, DetectorLog)> {
    if covers.is_empty() || stegos.is_empty() {
        return Err(Error::invalid("detector training needs nonempty cover and stego sets"));
    }
    let (c, h, w) = covers[0].image_dims()?;
    for img in covers.iter().chain(stegos) {
        if img.image_dims()? != (c, h, w) {
            return Err(Error::shape("train-detector", "image dimension mismatch"));
        }
    }
    let mut model = DetectorModel::init(c, h, w, seed)?;
    let split = |set: &[Tensor]| -> (Vec<Tensor>, Vec<Tensor>) {
        let n_train = (set.len() * 3).div_ceil(4).max(1);
        (set[..n_train].to_vec(), set[n_train..].to_vec())
    };
    let (train_c, held_c) = split(covers);
    let (train_s, held_s) = split(stegos);
    let n_pairs = train_c.len().min(train_s.len());
    let batch = 8usize.min(n_pairs);
    let cfg = AdamConfig::with_lr(2e-3);
    let mut state = AdamState::new(&model.named_params().iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let mut log = DetectorLog { accuracy: Vec::new() };
    for epoch in 0..epochs {
        let mut order_c: Vec<usize> = (0..train_c.len()).collect();
        let mut order_s: Vec<usize> = (0..train_s.len()).collect();
        let mut shuffle_rng = Rng::derive(seed, 0x5150 + epoch as u64);
        shuffle_rng.shuffle(&mut order_c);
        shuffle_rng.shuffle(&mut order_s);
        for chunk in 0..n_pairs.div_ceil(batch) {
            let lo = chunk * batch;
            let hi = (lo + batch).min(n_pairs);
            let mut total: Vec<Tensor> = Vec::new();
            for k in lo..hi {
                let mut g = Graph::new();
                let bound = model.bind(&mut g, true);
                let ids = bound.param_ids();
                let xc = g.constant(train_c[order_c[k]].clone());
                let xs = g.constant(train_s[order_s[k]].clone());
                let mc = bound.margin(&mut g, xc)?;
                let ms = bound.margin(&mut g, xs)?;
                let zero = g.constant(Tensor::scalar(0.0));
                let one = g.constant(Tensor::scalar(1.0));
                let lc = g.bce_with_logits(mc, zero)?;
                let ls = g.bce_with_logits(ms, one)?;
                let sum = g.add(lc, ls)?;
                let loss = g.scale(sum, 0.5);
                if !g.value(loss).is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: "detector loss is not finite".into(),
                    });
                }
                let mut grads = g.backward(loss)?;
                let sample = collect_grads(&mut g, &mut grads, &ids);
                accumulate(&mut total, &sample);
            }
            scale_grads(&mut total, 1.0 / (hi - lo) as f64);
            adam_step(&mut model.params_mut(), &total, &mut state, &cfg)?;
        }
        // Held-out accuracy; falls back to the training set when the split is empty.
        let eval_c = if held_c.is_empty() { &train_c } else { &held_c };
        let eval_s = if held_s.is_empty() { &train_s } else { &held_s };
        let mut correct = 0usize;
        for img in eval_c {
            let (cl, sl) = model.logits(img)?;
            if sl <= cl {
                correct += 1;
            }
        }
        for img in eval_s {
            let (cl, sl) = model.logits(img)?;
            if sl > cl {
                correct += 1;
            }
        }
        log.accuracy.push(correct as f64 / (eval_c.len() + eval_s.len()) as f64);
    }
    Ok((model, log))
}

/// Percentage of the presumed-stego set the detector flags (stego logit
/// exceeding cover logit).
pub fn detection_rate(detector: &DetectorModel, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("detection_rate over an empty set"));
    }
    let mut flagged = 0usize;
    for img in images {
        let (cl, sl) = detector.logits(img)?;
        if sl > cl {
            flagged += 1;
        }
    }
    Ok(100.0 * flagged as f64 / images.len() as f64)
}

/// Hinge-style steganalysis term: the stego logit when the image is
/// classified as stego, else zero. Differentiable w.r.t. the image through
/// the frozen detector when active.
pub fn steganalysis_logit_loss_on_graph(
    g: &mut Graph,
    detector: &DetectorModel,
    s: VarId,
) -> Result<Option<VarId>> {
    let bound = detector.bind(g, false);
    let logits = bound.forward(g, s)?;
    let vals = g.value(logits).data();
    if vals[1] > vals[0] {
        let stego = g.narrow(logits, 0, 1, 1)?;
        Ok(Some(g.reshape(stego, &[])?))
    } else {
        Ok(None)
    }
}

/// Plain-value variant of [`steganalysis_logit_loss_on_graph`].
pub fn steganalysis_logit_loss(detector: &DetectorModel, s: &Tensor) -> Result<f64> {
    let (cl, sl) = detector.logits(s)?;
    Ok(if sl > cl { sl } else { 0.0 })
}
