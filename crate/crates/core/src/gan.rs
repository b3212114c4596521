//! Toy GAN: truncated-normal latents, dense-projection generator with
//! nearest-neighbour upsampling stages, conv discriminator, and alternating
//! non-saturating training.

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::nn::{accumulate, collect_grads, scale_grads, BoundConv3x3, BoundDense, Conv3x3, Dense};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Latent vector [d_z, 1]: i.i.d. standard normals rejected-and-redrawn
/// until every entry lies within [-tau, tau].
pub fn sample_latent(d_z: usize, tau: f64, seed: u64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("truncation must be > 0, got {tau}")));
    }
    let mut rng = Rng::derive(seed, 0x1a7e);
    let mut z = Tensor::zeros(&[d_z, 1]);
    for v in z.data_mut() {
        *v = rng.truncated_normal(tau);
    }
    Ok(z)
}

/// Generator: dense z -> [32, 4, 4], then tanh + (upsample, conv, tanh)
/// stages up to the target size, sigmoid output in [0, 1].
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub project: Dense,
    pub stages: Vec<Conv3x3>,
    pub to_image: Conv3x3,
    pub d_z: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub struct BoundGenerator {
    project: BoundDense,
    stages: Vec<BoundConv3x3>,
    to_image: BoundConv3x3,
    height: usize,
    width: usize,
}

const BASE: usize = 4;
const BASE_WIDTH: usize = 32;

impl GeneratorModel {
    pub fn init(d_z: usize, channels: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        if height != width || !height.is_power_of_two() || height < 8 {
            return Err(Error::invalid(format!(
                "generator target must be square power-of-two >= 8, got {height}x{width}"
            )));
        }
        let n_stages = (height / BASE).trailing_zeros() as usize;
        let mut rng = Rng::derive(seed, 0x9a4);
        let mut stages = Vec::new();
        let mut w_in = BASE_WIDTH;
        for i in 0..n_stages {
            let w_out = (BASE_WIDTH >> (i + 1)).max(8);
            stages.push(Conv3x3::init(w_in, w_out, 1, 1.0, &mut rng));
            w_in = w_out;
        }
        Ok(GeneratorModel {
            project: Dense::init(d_z, BASE_WIDTH * BASE * BASE, 1.0, &mut rng),
            stages,
            to_image: Conv3x3::init(w_in, channels, 1, 1.0, &mut rng),
            d_z,
            channels,
            height,
            width,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            project: self.project.bind(g, trainable),
            stages: self.stages.iter().map(|s| s.bind(g, trainable)).collect(),
            to_image: self.to_image.bind(g, trainable),
            height: self.height,
            width: self.width,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("project.weight".to_string(), &self.project.weight),
            ("project.bias".to_string(), &self.project.bias),
        ];
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.weight"), &s.weight));
            out.push((format!("stage{i}.bias"), &s.bias));
        }
        out.push(("to_image.weight".to_string(), &self.to_image.weight));
        out.push(("to_image.bias".to_string(), &self.to_image.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.project.weight, &mut self.project.bias];
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.to_image.weight);
        out.push(&mut self.to_image.bias);
        out
    }

    pub fn save(&self, prefix: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_params(&prefix.with_extension("bin"), &self.named_params())?;
        let mut kv = crate::kv::KvFile::new();
        kv.set("d_z", self.d_z);
        kv.set("channels", self.channels);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.save(&prefix.with_extension("kv"))
    }

    pub fn load(prefix: &std::path::Path) -> Result<GeneratorModel> {
        let kv = crate::kv::KvFile::load(&prefix.with_extension("kv"))?;
        let r = crate::kv::KvReader::new(&kv);
        let (d_z, channels) = (r.require("d_z")?, r.require("channels")?);
        let (height, width) = (r.require("height")?, r.require("width")?);
        r.finish()?;
        let mut model = GeneratorModel::init(d_z, channels, height, width, 0)?;
        let loaded = crate::checkpoint::load_params(&prefix.with_extension("bin"))?;
        let mut slots: Vec<(String, &mut Tensor)> = vec![
            ("project.weight".into(), &mut model.project.weight),
            ("project.bias".into(), &mut model.project.bias),
        ];
        for (i, s) in model.stages.iter_mut().enumerate() {
            slots.push((format!("stage{i}.weight"), &mut s.weight));
            slots.push((format!("stage{i}.bias"), &mut s.bias));
        }
        slots.push(("to_image.weight".into(), &mut model.to_image.weight));
        slots.push(("to_image.bias".into(), &mut model.to_image.bias));
        let mut targets: Vec<(&str, &mut Tensor)> =
            slots.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        crate::checkpoint::assign_by_name(loaded, &mut targets)?;
        Ok(model)
    }

    /// Plain-value generation.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let bound = self.bind(&mut g, false);
        let img = bound.generate(&mut g, zv)?;
        Ok(g.value(img).clone())
    }
}

impl BoundGenerator {
    /// Image node in [0, 1], differentiable w.r.t. the latent node.
    pub fn generate(&self, g: &mut Graph, z: VarId) -> Result<VarId> {
        let sh = g.value(z).shape();
        if sh.len() != 2 || sh[1] != 1 {
            return Err(Error::shape("generate", format!("latent must be [d_z, 1], got {sh:?}")));
        }
        let proj = self.project.apply(g, z)?;
        let mut x = g.reshape(proj, &[BASE_WIDTH, BASE, BASE])?;
        x = g.tanh(x);
        for stage in &self.stages {
            x = g.upsample2x(x)?;
            x = stage.apply(g, x)?;
            x = g.tanh(x);
        }
        let (_, h, w) = g.value(x).image_dims()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                "generate",
                format!("stage output {h}x{w}, expected {}x{}", self.height, self.width),
            ));
        }
        let img = self.to_image.apply(g, x)?;
        Ok(g.sigmoid(img))
    }

    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = self.project.param_ids();
        for s in &self.stages {
            ids.extend(s.param_ids());
        }
        ids.extend(self.to_image.param_ids());
        ids
    }
}

/// Discriminator: two conv/pool stages and a dense head giving one logit.
#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub head: Dense,
    pub height: usize,
    pub width: usize,
}

pub struct BoundDiscriminator {
    conv1: BoundConv3x3,
    conv2: BoundConv3x3,
    head: BoundDense,
    height: usize,
    width: usize,
}

impl DiscriminatorModel {
    pub fn init(channels: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::invalid(format!(
                "discriminator needs dims divisible by 4, got {height}x{width}"
            )));
        }
        let mut rng = Rng::derive(seed, 0xd15c);
        Ok(DiscriminatorModel {
            conv1: Conv3x3::init(channels, 8, 1, 1.0, &mut rng),
            conv2: Conv3x3::init(8, 16, 1, 1.0, &mut rng),
            head: Dense::init(16 * (height / 4) * (width / 4), 1, 1.0, &mut rng),
            height,
            width,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator {
            conv1: self.conv1.bind(g, trainable),
            conv2: self.conv2.bind(g, trainable),
            head: self.head.bind(g, trainable),
            height: self.height,
            width: self.width,
        }
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

    pub fn logit(&self, image: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let bound = self.bind(&mut g, false);
        let out = bound.logit(&mut g, x)?;
        Ok(g.value(out).item())
    }
}

impl BoundDiscriminator {
    pub fn logit(&self, g: &mut Graph, x: VarId) -> Result<VarId> {
        let h1 = self.conv1.apply(g, x)?;
        let a1 = g.leaky_relu(h1, 0.2);
        let p1 = g.sumpool2x(a1)?;
        let p1 = g.scale(p1, 0.25);
        let h2 = self.conv2.apply(g, p1)?;
        let a2 = g.leaky_relu(h2, 0.2);
        let p2 = g.sumpool2x(a2)?;
        let p2 = g.scale(p2, 0.25);
        let flat = g.reshape(p2, &[16 * (self.height / 4) * (self.width / 4), 1])?;
        let out = self.head.apply(g, flat)?;
        g.reshape(out, &[])
    }

    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = self.conv1.param_ids();
        ids.extend(self.conv2.param_ids());
        ids.extend(self.head.param_ids());
        ids
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GanTrainConfig {
    pub d_z: usize,
    pub truncation: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            d_z: 32,
            truncation: 0.4,
            epochs: 30,
            batch_size: 8,
            lr_g: 2e-3,
            lr_d: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GanTrainLog {
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    /// Epochs where the generator batch std dropped below 1e-3.
    pub collapse_warnings: Vec<usize>,
}

/// Alternating non-saturating GAN training. Deterministic per seed; mode
/// collapse is detected (generator output std across a batch < 1e-3) and
/// logged as a warning, never an error.
pub fn train_gan(
    corpus: &Corpus,
    config: &GanTrainConfig,
) -> Result<(GeneratorModel, DiscriminatorModel, GanTrainLog)> {
    if corpus.images.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let (c, h, w) = corpus.dims();
    let mut gen = GeneratorModel::init(config.d_z, c, h, w, config.seed)?;
    let mut disc = DiscriminatorModel::init(c, h, w, config.seed ^ 0xd)?;
    let train = corpus.train_images();
    let n = train.len();
    let batch = config.batch_size.clamp(1, n);
    let g_cfg = AdamConfig::with_lr(config.lr_g);
    let d_cfg = AdamConfig::with_lr(config.lr_d);
    let mut g_state = AdamState::new(
        &gen.named_params().iter().map(|(_, t)| *t).collect::<Vec<_>>(),
    );
    let mut d_state = AdamState::new(
        &disc.named_params().iter().map(|(_, t)| *t).collect::<Vec<_>>(),
    );
    let mut log = GanTrainLog::default();
    let mut z_counter = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(config.seed, 0x9a9 + epoch as u64).shuffle(&mut order);
        let mut d_sum = 0.0;
        let mut g_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            // Discriminator step: real vs fresh fakes.
            let mut d_total: Vec<Tensor> = Vec::new();
            for &idx in chunk {
                z_counter += 1;
                let z = sample_latent(config.d_z, config.truncation, config.seed ^ z_counter)?;
                let fake = gen.generate(&z)?;
                let mut g = Graph::new();
                let bd = disc.bind(&mut g, true);
                let ids = bd.param_ids();
                let xr = g.constant(train[idx].clone());
                let xf = g.constant(fake);
                let lr_logit = bd.logit(&mut g, xr)?;
                let lf_logit = bd.logit(&mut g, xf)?;
                let one = g.constant(Tensor::scalar(1.0));
                let zero = g.constant(Tensor::scalar(0.0));
                let l_real = g.bce_with_logits(lr_logit, one)?;
                let l_fake = g.bce_with_logits(lf_logit, zero)?;
                let sum = g.add(l_real, l_fake)?;
                let loss = g.scale(sum, 0.5);
                d_sum += g.value(loss).item();
                let mut grads = g.backward(loss)?;
                let sample = collect_grads(&mut g, &mut grads, &ids);
                accumulate(&mut d_total, &sample);
            }
            scale_grads(&mut d_total, 1.0 / chunk.len() as f64);
            adam_step(&mut disc.params_mut(), &d_total, &mut d_state, &d_cfg)?;

            // Generator step: non-saturating loss through the frozen critic.
            let mut g_total: Vec<Tensor> = Vec::new();
            let mut batch_pixels: Vec<f64> = Vec::new();
            for _ in chunk {
                z_counter += 1;
                let z = sample_latent(config.d_z, config.truncation, config.seed ^ z_counter)?;
                let mut g = Graph::new();
                let bg = gen.bind(&mut g, true);
                let ids = bg.param_ids();
                let bd = disc.bind(&mut g, false);
                let zv = g.constant(z);
                let img = bg.generate(&mut g, zv)?;
                batch_pixels.push(g.value(img).mean());
                let logit = bd.logit(&mut g, img)?;
                let one = g.constant(Tensor::scalar(1.0));
                let loss = g.bce_with_logits(logit, one)?;
                g_sum += g.value(loss).item();
                let mut grads = g.backward(loss)?;
                let sample = collect_grads(&mut g, &mut grads, &ids);
                accumulate(&mut g_total, &sample);
            }
            scale_grads(&mut g_total, 1.0 / chunk.len() as f64);
            adam_step(&mut gen.params_mut(), &g_total, &mut g_state, &g_cfg)?;
            steps += 1;

            if batch_pixels.len() > 1 {
                let mean = batch_pixels.iter().sum::<f64>() / batch_pixels.len() as f64;
                let var = batch_pixels
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / (batch_pixels.len() - 1) as f64;
                if var.sqrt() < 1e-3 && log.collapse_warnings.last() != Some(&epoch) {
                    log.collapse_warnings.push(epoch);
                }
            }
        }
        let k = (steps * batch).max(1) as f64;
        log.d_loss.push(d_sum / k);
        log.g_loss.push(g_sum / k);
        if !(d_sum / k).is_finite() || !(g_sum / k).is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: "adversarial loss is not finite".into(),
            });
        }
    }
    Ok((gen, disc, log))
}
