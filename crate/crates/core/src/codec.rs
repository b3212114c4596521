//! Learned iterative steganographic codec.
//!
//! The encoder does not write the message directly: it runs `t_enc` update
//! steps, each feeding the gradient of the current decode objective w.r.t.
//! the perturbation into a small conv network `g` that proposes the next
//! update. That inner gradient is built symbolically on the tape, so the
//! whole encode -> decode pipeline stays differentiable — both for training
//! the codec end to end and for optimizing generator latents through a
//! frozen codec. Training weights the intermediate iterations with
//! exponentially increasing weights gamma^(T-t) and can route every decode
//! through a channel layer (JPEG, Gaussian noise) or add a frozen-detector
//! logit penalty.

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::channel::{steganalysis_logit_loss_on_graph, ChannelSpec, DetectorModel};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::nn::{accumulate, collect_grads, scale_grads, BoundConv3x3, BoundDense, Conv3x3, Dense};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Binary payload of shape [bits_per_pixel, h, w], entries in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub bits: Tensor,
}

impl Message {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.bits.image_dims().expect("message is [b, h, w]")
    }

    /// Hard decisions from decoder probabilities (threshold 0.5).
    pub fn from_probabilities(probs: &Tensor) -> Message {
        Message {
            bits: probs.map(|p| if p >= 0.5 { 1.0 } else { 0.0 }),
        }
    }
}

/// Independent fair bits, deterministic per seed.
pub fn sample_message(height: usize, width: usize, payload: usize, seed: u64) -> Result<Message> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "message dims must be positive, got {payload}x{height}x{width}"
        )));
    }
    if !(1..=4).contains(&payload) {
        return Err(Error::invalid(format!(
            "payload must lie in 1..=4 bits per pixel, got {payload}"
        )));
    }
    let mut rng = Rng::derive(seed, 0x6d5);
    let mut bits = Tensor::zeros(&[payload, height, width]);
    for v in bits.data_mut() {
        *v = rng.bit();
    }
    Ok(Message { bits })
}

/// Update network, decoder and optional critic plus the codec hyperparameters.
#[derive(Debug, Clone)]
pub struct CodecModel {
    /// Update network g: concat(grad, x, delta, hidden) -> update + hidden.
    pub update1: Conv3x3,
    pub update2: Conv3x3,
    pub update3: Conv3x3,
    /// Decoder: stego image -> per-bit logits.
    pub dec1: Conv3x3,
    pub dec2: Conv3x3,
    pub dec3: Conv3x3,
    pub critic: Option<Critic>,
    /// Step size applied to g's bounded output.
    pub eta: f64,
    /// Encoder iterations per image.
    pub t_enc: usize,
    /// Decay for intermediate-iteration loss weights, in (0, 1).
    pub gamma_dec: f64,
    /// Quality (mean squared residual) weight in the per-sample objective.
    pub lambda_q: f64,
    /// Critic weight; zero disables the critic entirely.
    pub mu_c: f64,
    pub channels: usize,
    pub payload: usize,
}

/// Realism critic: image -> single logit.
#[derive(Debug, Clone)]
pub struct Critic {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub head: Dense,
    pub height: usize,
    pub width: usize,
}

impl Critic {
    pub fn init(channels: usize, height: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::invalid(format!(
                "critic needs dims divisible by 4, got {height}x{width}"
            )));
        }
        Ok(Critic {
            conv1: Conv3x3::init(channels, 8, 1, 1.0, rng),
            conv2: Conv3x3::init(8, 16, 1, 1.0, rng),
            head: Dense::init(16 * (height / 4) * (width / 4), 1, 1.0, rng),
            height,
            width,
        })
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundCritic {
        BoundCritic {
            conv1: self.conv1.bind(g, trainable),
            conv2: self.conv2.bind(g, trainable),
            head: self.head.bind(g, trainable),
            height: self.height,
            width: self.width,
        }
    }
}

pub struct BoundCritic {
    conv1: BoundConv3x3,
    conv2: BoundConv3x3,
    head: BoundDense,
    height: usize,
    width: usize,
}

impl BoundCritic {
    /// Single realism logit as a scalar node.
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

    fn param_ids(&self) -> Vec<VarId> {
        let mut ids = self.conv1.param_ids();
        ids.extend(self.conv2.param_ids());
        ids.extend(self.head.param_ids());
        ids
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CodecHyper {
    pub eta: f64,
    pub t_enc: usize,
    pub gamma_dec: f64,
    pub lambda_q: f64,
    pub mu_c: f64,
}

impl Default for CodecHyper {
    fn default() -> Self {
        CodecHyper {
            eta: 1.0,
            t_enc: 3,
            gamma_dec: 0.8,
            lambda_q: 10.0,
            mu_c: 0.0,
        }
    }
}

impl CodecModel {
    /// `critic_dims` must be supplied when `hyper.mu_c > 0`. The final update
    /// layer starts at zero so the untrained encoder is the identity.
    pub fn init(
        channels: usize,
        payload: usize,
        hyper: CodecHyper,
        critic_dims: Option<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        if hyper.eta <= 0.0 {
            return Err(Error::invalid(format!("eta must be > 0, got {}", hyper.eta)));
        }
        if hyper.t_enc < 1 {
            return Err(Error::invalid("t_enc must be >= 1"));
        }
        if !(0.0..1.0).contains(&hyper.gamma_dec) || hyper.gamma_dec == 0.0 {
            return Err(Error::invalid(format!(
                "gamma_dec must lie in (0,1), got {}",
                hyper.gamma_dec
            )));
        }
        if hyper.lambda_q < 0.0 || hyper.mu_c < 0.0 {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        if !(1..=4).contains(&payload) {
            return Err(Error::invalid(format!(
                "payload must lie in 1..=4 bits per pixel, got {payload}"
            )));
        }
        let mut rng = Rng::derive(seed, 0xc0dec);
        let g_in = 3 * channels + 1;
        let critic = if hyper.mu_c > 0.0 {
            let (h, w) = critic_dims.ok_or_else(|| {
                Error::invalid("mu_c > 0 requires critic dimensions at init")
            })?;
            Some(Critic::init(channels, h, w, &mut rng)?)
        } else {
            None
        };
        Ok(CodecModel {
            update1: Conv3x3::init(g_in, 16, 1, 1.0, &mut rng),
            update2: Conv3x3::init(16, 16, 1, 1.0, &mut rng),
            update3: Conv3x3::init(16, channels + 1, 1, 0.0, &mut rng),
            dec1: Conv3x3::init(channels, 16, 1, 1.0, &mut rng),
            dec2: Conv3x3::init(16, 16, 2, 1.0, &mut rng),
            dec3: Conv3x3::init(16, payload, 1, 1.0, &mut rng),
            critic,
            eta: hyper.eta,
            t_enc: hyper.t_enc,
            gamma_dec: hyper.gamma_dec,
            lambda_q: hyper.lambda_q,
            mu_c: hyper.mu_c,
            channels,
            payload,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundCodec {
        BoundCodec {
            update: [
                self.update1.bind(g, trainable),
                self.update2.bind(g, trainable),
                self.update3.bind(g, trainable),
            ],
            dec: [
                self.dec1.bind(g, trainable),
                self.dec2.bind(g, trainable),
                self.dec3.bind(g, trainable),
            ],
            eta: self.eta,
            t_enc: self.t_enc,
            lambda_q: self.lambda_q,
            channels: self.channels,
            payload: self.payload,
        }
    }

    /// Encoder + decoder parameters in canonical order (critic excluded; it
    /// is trained in its own alternating step).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("update1.weight".to_string(), &self.update1.weight),
            ("update1.bias".to_string(), &self.update1.bias),
            ("update2.weight".to_string(), &self.update2.weight),
            ("update2.bias".to_string(), &self.update2.bias),
            ("update3.weight".to_string(), &self.update3.weight),
            ("update3.bias".to_string(), &self.update3.bias),
            ("dec1.weight".to_string(), &self.dec1.weight),
            ("dec1.bias".to_string(), &self.dec1.bias),
            ("dec2.weight".to_string(), &self.dec2.weight),
            ("dec2.bias".to_string(), &self.dec2.bias),
            ("dec3.weight".to_string(), &self.dec3.weight),
            ("dec3.bias".to_string(), &self.dec3.bias),
        ];
        if let Some(c) = &self.critic {
            out.push(("critic.conv1.weight".to_string(), &c.conv1.weight));
            out.push(("critic.conv1.bias".to_string(), &c.conv1.bias));
            out.push(("critic.conv2.weight".to_string(), &c.conv2.weight));
            out.push(("critic.conv2.bias".to_string(), &c.conv2.bias));
            out.push(("critic.head.weight".to_string(), &c.head.weight));
            out.push(("critic.head.bias".to_string(), &c.head.bias));
        }
        out
    }

    fn enc_dec_params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.update1.weight,
            &mut self.update1.bias,
            &mut self.update2.weight,
            &mut self.update2.bias,
            &mut self.update3.weight,
            &mut self.update3.bias,
            &mut self.dec1.weight,
            &mut self.dec1.bias,
            &mut self.dec2.weight,
            &mut self.dec2.bias,
            &mut self.dec3.weight,
            &mut self.dec3.bias,
        ]
    }

    /// Persist parameters plus a hyperparameter sidecar under `prefix`
    /// (`<prefix>.bin` and `<prefix>.kv`).
    pub fn save(&self, prefix: &std::path::Path) -> Result<()> {
        let named: Vec<(String, &Tensor)> = self.named_params();
        crate::checkpoint::save_params(&prefix.with_extension("bin"), &named)?;
        let mut kv = crate::kv::KvFile::new();
        kv.set("eta", self.eta);
        kv.set("t_enc", self.t_enc);
        kv.set("gamma_dec", self.gamma_dec);
        kv.set("lambda_q", self.lambda_q);
        kv.set("mu_c", self.mu_c);
        kv.set("channels", self.channels);
        kv.set("payload", self.payload);
        if let Some(c) = &self.critic {
            kv.set("critic_height", c.height);
            kv.set("critic_width", c.width);
        }
        kv.save(&prefix.with_extension("kv"))
    }

    pub fn load(prefix: &std::path::Path) -> Result<CodecModel> {
        let kv = crate::kv::KvFile::load(&prefix.with_extension("kv"))?;
        let r = crate::kv::KvReader::new(&kv);
        let hyper = CodecHyper {
            eta: r.require("eta")?,
            t_enc: r.require("t_enc")?,
            gamma_dec: r.require("gamma_dec")?,
            lambda_q: r.require("lambda_q")?,
            mu_c: r.require("mu_c")?,
        };
        let channels = r.require("channels")?;
        let payload = r.require("payload")?;
        let critic_dims = match (r.opt::<usize>("critic_height")?, r.opt::<usize>("critic_width")?) {
            (Some(h), Some(w)) => Some((h, w)),
            _ => None,
        };
        r.finish()?;
        let mut model = CodecModel::init(channels, payload, hyper, critic_dims, 0)?;
        let loaded = crate::checkpoint::load_params(&prefix.with_extension("bin"))?;
        let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
        {
            let CodecModel {
                update1, update2, update3, dec1, dec2, dec3, critic, ..
            } = &mut model;
            for (name, layer) in [
                ("update1", update1), ("update2", update2), ("update3", update3),
                ("dec1", dec1), ("dec2", dec2), ("dec3", dec3),
            ] {
                slots.push((format!("{name}.weight"), &mut layer.weight));
                slots.push((format!("{name}.bias"), &mut layer.bias));
            }
            if let Some(c) = critic {
                slots.push(("critic.conv1.weight".into(), &mut c.conv1.weight));
                slots.push(("critic.conv1.bias".into(), &mut c.conv1.bias));
                slots.push(("critic.conv2.weight".into(), &mut c.conv2.weight));
                slots.push(("critic.conv2.bias".into(), &mut c.conv2.bias));
                slots.push(("critic.head.weight".into(), &mut c.head.weight));
                slots.push(("critic.head.bias".into(), &mut c.head.bias));
            }
        }
        let mut targets: Vec<(&str, &mut Tensor)> =
            slots.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        crate::checkpoint::assign_by_name(loaded, &mut targets)?;
        Ok(model)
    }

    /// Embed a message. Returns the final stego image and the intermediate
    /// images after each encoder iteration.
    pub fn encode(&self, x: &Tensor, m: &Message) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mv = g.constant(m.bits.clone());
        let bound = self.bind(&mut g, false);
        let enc = bound.encode(&mut g, xv, mv, &ChannelSpec::Clean, 0)?;
        let steps = enc.steps.iter().map(|&s| g.value(s).clone()).collect();
        Ok((g.value(enc.stego).clone(), steps))
    }

    /// Per-bit probabilities in (0, 1); hard decisions are made at 0.5.
    pub fn decode(&self, s: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let bound = self.bind(&mut g, false);
        let logits = bound.decoder_logits(&mut g, sv)?;
        Ok(g.value(logits).map(stable_sigmoid))
    }
}

pub struct BoundCodec {
    update: [BoundConv3x3; 3],
    dec: [BoundConv3x3; 3],
    eta: f64,
    t_enc: usize,
    lambda_q: f64,
    channels: usize,
    payload: usize,
}

impl BoundCodec {
    /// Override the quality weight in the encoder's internal objective;
    /// training warms it up so the codec can coordinate before the quality
    /// pressure reaches full strength.
    pub fn set_lambda_q(&mut self, lambda_q: f64) {
        self.lambda_q = lambda_q;
    }
}

/// Nodes produced by one encode: final stego image and all intermediates.
pub struct EncodeNodes {
    pub stego: VarId,
    pub steps: Vec<VarId>,
}

impl BoundCodec {
    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = Vec::new();
        for c in &self.update {
            ids.extend(c.param_ids());
        }
        for c in &self.dec {
            ids.extend(c.param_ids());
        }
        ids
    }

    /// Decoder forward pass: stego image -> per-bit logits [payload, h, w].
    pub fn decoder_logits(&self, g: &mut Graph, s: VarId) -> Result<VarId> {
        let (c, _, _) = g.value(s).image_dims()?;
        if c != self.channels {
            return Err(Error::shape(
                "decode",
                format!("expected {} channels, got {:?}", self.channels, g.value(s).shape()),
            ));
        }
        let h1 = self.dec[0].apply(g, s)?;
        let a1 = g.tanh(h1);
        let h2 = self.dec[1].apply(g, a1)?;
        let a2 = g.tanh(h2);
        self.dec[2].apply(g, a2)
    }

    /// Iterative encode. Starting from a zero perturbation, each iteration
    /// decodes the current image, differentiates the decode objective w.r.t.
    /// the perturbation on the tape, and feeds that gradient (with the cover,
    /// the perturbation and a persistent hidden channel) to the update
    /// network. The channel layer wraps every decode when configured.
    pub fn encode(
        &self,
        g: &mut Graph,
        x: VarId,
        m: VarId,
        channel: &ChannelSpec,
        channel_seed: u64,
    ) -> Result<EncodeNodes> {
        let (c, h, w) = g.value(x).image_dims()?;
        let (b, mh, mw) = g.value(m).image_dims()?;
        if (mh, mw) != (h, w) || b != self.payload || c != self.channels {
            return Err(Error::shape(
                "encode",
                format!(
                    "cover {:?} / message {:?} incompatible with codec ({} ch, {} bpp)",
                    g.value(x).shape(),
                    g.value(m).shape(),
                    self.channels,
                    self.payload
                ),
            ));
        }
        let mut delta = g.leaf(Tensor::zeros(&[c, h, w]), true);
        let mut hidden = g.constant(Tensor::zeros(&[1, h, w]));
        let mut steps = Vec::with_capacity(self.t_enc);
        for iter in 0..self.t_enc {
            let pre = g.add(x, delta)?;
            let s_prev = g.clamp01_ste(pre);
            let seen = channel.apply_on_graph(g, s_prev, channel_seed ^ (0xA11 + iter as u64))?;
            let logits = self.decoder_logits(g, seen)?;
            let l_acc = g.bce_with_logits(logits, m)?;
            let l_qua = g.mse(s_prev, x)?;
            let weighted = g.scale(l_qua, self.lambda_q);
            let objective = g.add(l_acc, weighted)?;
            let grad_delta = g.grad_vars(objective, &[delta])?[0];
            if !g.value(grad_delta).is_finite() {
                return Err(Error::NonFinite(format!(
                    "decoder gradient at encoder iteration {iter}"
                )));
            }
            // The objective is a mean over h*w positions, so its raw gradient
            // is O(1/n) and would vanish as an input feature; feed g the
            // sum-reduction gradient instead (same direction, unit scale).
            let grad_feat = g.scale(grad_delta, (h * w) as f64);
            let net_in = g.concat(0, &[grad_feat, x, delta, hidden])?;
            let h1 = self.update[0].apply(g, net_in)?;
            let a1 = g.tanh(h1);
            let h2 = self.update[1].apply(g, a1)?;
            let a2 = g.tanh(h2);
            let out = self.update[2].apply(g, a2)?;
            let raw_update = g.narrow(out, 0, 0, c)?;
            let update = g.tanh(raw_update);
            let raw_hidden = g.narrow(out, 0, c, 1)?;
            hidden = g.tanh(raw_hidden);
            let scaled = g.scale(update, self.eta);
            delta = g.add(delta, scaled)?;
            let post = g.add(x, delta)?;
            steps.push(g.clamp01_ste(post));
        }
        Ok(EncodeNodes {
            stego: *steps.last().expect("t_enc >= 1"),
            steps,
        })
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Accuracy, quality and critic loss components on plain values.
/// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
pub fn loss_components(
    m: &Message,
    m_hat: &Tensor,
    x: &Tensor,
    s: &Tensor,
    critic_score: Option<f64>,
) -> Result<(f64, f64, f64)> {
    if m.bits.shape() != m_hat.shape() {
        return Err(Error::shape(
            "loss-components",
            format!("{:?} vs {:?}", m.bits.shape(), m_hat.shape()),
        ));
    }
    let l_acc = m
        .bits
        .zip(m_hat, |bit, p| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(bit * p.ln() + (1.0 - bit) * (1.0 - p).ln())
        })?
        .mean();
    let l_qua = s.mse_value(x)?;
    // Non-saturating realism loss softplus(-score); zero without a critic.
    let l_crit = critic_score.map_or(0.0, |d| (-d).exp().ln_1p());
    Ok((l_acc, l_qua, l_crit))
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub l_acc: f64,
    pub l_qua: f64,
    pub l_crit: f64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_acc,l_qua,l_crit,error_rate\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                i, e.l_acc, e.l_qua, e.l_crit, e.error_rate
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    pub payload: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub hyper: CodecHyper,
    pub channel: ChannelSpec,
    /// Reuse one message per image across steps instead of fresh draws.
    pub fixed_message: bool,
}

impl CodecTrainConfig {
    pub fn new(payload: usize, epochs: usize, seed: u64) -> Self {
        CodecTrainConfig {
            payload,
            epochs,
            batch_size: 8,
            seed,
            lr: 2e-3,
            hyper: CodecHyper::default(),
            channel: ChannelSpec::Clean,
            fixed_message: false,
        }
    }
}

/// End-to-end codec training over a corpus. Every intermediate encoder
/// iteration contributes gamma^(T-t) * (L_acc + lambda L_qua + mu L_crit);
/// a fresh message is drawn per image per step unless pinned. Supplying a
/// frozen detector adds its flagged-stego logit, weighted, to each sample
/// loss. Returns the model plus per-epoch curves with held-out error rate.
pub fn train_codec(
    corpus: &Corpus,
    config: &CodecTrainConfig,
    stegan: Option<(&DetectorModel, f64)>,
) -> Result<(CodecModel, TrainLog)> {
    if corpus.images.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let (c, h, w) = corpus.dims();
    let critic_dims = (config.hyper.mu_c > 0.0).then_some((h, w));
    let mut model = CodecModel::init(c, config.payload, config.hyper, critic_dims, config.seed)?;
    let train: Vec<&Tensor> = corpus.train_images();
    let n = train.len();
    let batch = config.batch_size.clamp(1, n);
    let cfg = AdamConfig::with_lr(config.lr);
    let mut state = AdamState::new(
        &model
            .named_params()
            .iter()
            .filter(|(name, _)| !name.starts_with("critic."))
            .map(|(_, t)| *t)
            .collect::<Vec<_>>(),
    );
    let mut critic_state = model
        .critic
        .as_ref()
        .map(|cr| AdamState::new(&[&cr.conv1.weight, &cr.conv1.bias, &cr.conv2.weight, &cr.conv2.bias, &cr.head.weight, &cr.head.bias]));
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(config.seed, 0xe90c4 + epoch as u64).shuffle(&mut order);
        let mut acc_sum = 0.0;
        let mut qua_sum = 0.0;
        let mut crit_sum = 0.0;
        let mut loss_count = 0usize;
        // Quality-weight warm-up: full strength after the first third of
        // training. Starting at full lambda collapses the encoder to the
        // identity before the decoder has anything to read.
        let ramp_epochs = (config.epochs.div_ceil(3)).max(1);
        let warm_lambda = model.lambda_q * ((epoch + 1) as f64 / ramp_epochs as f64).min(1.0);
        for chunk in order.chunks(batch) {
            // Critic step first when enabled: real covers vs current stegos.
            if model.mu_c > 0.0 {
                train_critic_batch(
                    &mut model,
                    critic_state.as_mut().expect("critic state"),
                    train.as_slice(),
                    chunk,
                    config,
                    epoch,
                )?;
            }
            let mut total: Vec<Tensor> = Vec::new();
            for &idx in chunk {
                let x = train[idx];
                let msg_stream = if config.fixed_message {
                    idx as u64
                } else {
                    (epoch as u64) << 24 | idx as u64
                };
                let m = sample_message(h, w, config.payload, config.seed ^ msg_stream.wrapping_mul(0x9149))?;
                let mut g = Graph::new();
                let mut bound = model.bind(&mut g, true);
                bound.set_lambda_q(warm_lambda);
                let ids = bound.param_ids();
                let xv = g.constant(x.clone());
                let mv = g.constant(m.bits.clone());
                let chan_seed = config.seed ^ (0xC4A2 + ((epoch * n + idx) as u64));
                let enc = bound.encode(&mut g, xv, mv, &config.channel, chan_seed)?;
                let critic_bound = model.critic.as_ref().map(|cr| cr.bind(&mut g, false));
                let t_total = model.t_enc;
                let mut loss: Option<VarId> = None;
                for (i, &s_t) in enc.steps.iter().enumerate() {
                    let weight = model.gamma_dec.powi((t_total - 1 - i) as i32);
                    let seen = config.channel.apply_on_graph(&mut g, s_t, chan_seed ^ (0xDEC0 + i as u64))?;
                    let logits = bound.decoder_logits(&mut g, seen)?;
                    let l_acc = g.bce_with_logits(logits, mv)?;
                    let l_qua = g.mse(s_t, xv)?;
                    if i == t_total - 1 {
                        acc_sum += g.value(l_acc).item();
                        qua_sum += g.value(l_qua).item();
                        loss_count += 1;
                    }
                    let lq = g.scale(l_qua, warm_lambda);
                    let mut term = g.add(l_acc, lq)?;
                    if let Some(cb) = &critic_bound {
                        let d = cb.logit(&mut g, s_t)?;
                        let one = g.constant(Tensor::scalar(1.0));
                        let l_crit = g.bce_with_logits(d, one)?;
                        if i == t_total - 1 {
                            crit_sum += g.value(l_crit).item();
                        }
                        let lc = g.scale(l_crit, model.mu_c);
                        term = g.add(term, lc)?;
                    }
                    let wterm = g.scale(term, weight);
                    loss = Some(match loss {
                        None => wterm,
                        Some(prev) => g.add(prev, wterm)?,
                    });
                }
                let mut loss = loss.expect("t_enc >= 1");
                // The evasion term joins once the quality ramp has finished:
                // the codec first learns to communicate, then to hide from
                // the frozen detector.
                if let Some((detector, weight)) = stegan {
                    if epoch >= ramp_epochs {
                        if let Some(term) =
                            steganalysis_logit_loss_on_graph(&mut g, detector, enc.stego)?
                        {
                            let wt = g.scale(term, weight);
                            loss = g.add(loss, wt)?;
                        }
                    }
                }
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("training loss became {lv}"),
                    });
                }
                let mut grads = g.backward(loss)?;
                let sample = collect_grads(&mut g, &mut grads, &ids);
                accumulate(&mut total, &sample);
            }
            scale_grads(&mut total, 1.0 / chunk.len() as f64);
            adam_step(&mut model.enc_dec_params_mut(), &total, &mut state, &cfg)?;
        }
        let error_rate = held_out_error(&model, corpus, config)?;
        let k = loss_count.max(1) as f64;
        log.epochs.push(EpochStats {
            l_acc: acc_sum / k,
            l_qua: qua_sum / k,
            l_crit: crit_sum / k,
            error_rate,
        });
    }
    Ok((model, log))
}

fn train_critic_batch(
    model: &mut CodecModel,
    state: &mut AdamState,
    train: &[&Tensor],
    chunk: &[usize],
    config: &CodecTrainConfig,
    epoch: usize,
) -> Result<()> {
    let (_, h, w) = train[0].image_dims()?;
    // Generate stegos with the current encoder, detached from the critic step.
    let mut pairs = Vec::with_capacity(chunk.len());
    for &idx in chunk {
        let m = sample_message(h, w, config.payload, config.seed ^ (0xC417 + idx as u64))?;
        let (s, _) = model.encode(train[idx], &m)?;
        pairs.push((train[idx].clone(), s));
    }
    let critic = model.critic.as_ref().expect("critic enabled");
    let mut total: Vec<Tensor> = Vec::new();
    let mut ids_len = 0;
    for (x, s) in &pairs {
        let mut g = Graph::new();
        let cb = critic.bind(&mut g, true);
        let ids = cb.param_ids();
        ids_len = ids.len();
        let xv = g.constant(x.clone());
        let sv = g.constant(s.clone());
        let d_real = cb.logit(&mut g, xv)?;
        let d_fake = cb.logit(&mut g, sv)?;
        let one = g.constant(Tensor::scalar(1.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let lr_ = g.bce_with_logits(d_real, one)?;
        let lf = g.bce_with_logits(d_fake, zero)?;
        let sum = g.add(lr_, lf)?;
        let loss = g.scale(sum, 0.5);
        if !g.value(loss).item().is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: "critic loss is not finite".into(),
            });
        }
        let mut grads = g.backward(loss)?;
        let sample = collect_grads(&mut g, &mut grads, &ids);
        accumulate(&mut total, &sample);
    }
    debug_assert_eq!(ids_len, 6);
    scale_grads(&mut total, 1.0 / pairs.len() as f64);
    let critic = model.critic.as_mut().expect("critic enabled");
    adam_step(
        &mut [
            &mut critic.conv1.weight,
            &mut critic.conv1.bias,
            &mut critic.conv2.weight,
            &mut critic.conv2.bias,
            &mut critic.head.weight,
            &mut critic.head.bias,
        ],
        &total,
        state,
        &AdamConfig::with_lr(config.lr),
    )?;
    Ok(())
}

/// Mean hard-decision error over the held-out split, decoded through the
/// configured channel with evaluation-only message and noise seeds.
pub fn held_out_error(model: &CodecModel, corpus: &Corpus, config: &CodecTrainConfig) -> Result<f64> {
    let held = corpus.held_images();
    let eval: Vec<&Tensor> = if held.is_empty() {
        corpus.train_images()
    } else {
        held
    };
    let (_, h, w) = corpus.dims();
    let mut total = 0.0;
    for (i, x) in eval.iter().enumerate() {
        let m = sample_message(h, w, config.payload, config.seed ^ (0xE7A1 + i as u64))?;
        let (s, _) = model.encode(x, &m)?;
        let seen = config.channel.apply_plain(&s, config.seed ^ (0xE7B2 + i as u64))?;
        let probs = model.decode(&seen)?;
        let decided = Message::from_probabilities(&probs);
        total += crate::metrics::error_rate(&m, &decided)?;
    }
    Ok(total / eval.len() as f64)
}
