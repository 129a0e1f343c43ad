//! Memory-augmented adversarial autoencoder for novelty detection.
//!
//! The generator is an encoder → memory → decoder chain: the encoder maps a
//! beat to a latent query, the memory module retrieves a convex combination
//! of trainable prototype rows weighted by softmax-normalized cosine
//! similarity, and the decoder reconstructs from the retrieved latent.
//! Patterns the memory has never stored reconstruct poorly, so the squared
//! reconstruction error is the anomaly score. A 1-D CNN discriminator with
//! a feature-matching loss sharpens the learned manifold.
//!
//! Disabling the memory (retrieved latent := query) and the adversarial
//! terms degrades the model to a plain autoencoder, the AE ablation.

use crate::nn::{
    accumulate_grads, bind, unit_sphere_rows, Adam, Checkpoint, GradCheckReport, Graph, LayerSpec, Mode, NodeId,
    ParamNodes, ParameterSet, Stack, Tensor,
};
use crate::signal::Beat;
use crate::{derive_seed, Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Convolutional topology shared by the encoder, the mirrored decoder and
/// the discriminator trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadeGanArch {
    pub input_len: usize,
    /// Encoder channel progression; the decoder mirrors it.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub latent_dim: usize,
    pub memory_slots: usize,
    pub leaky_slope: f64,
    pub batchnorm: bool,
}

impl MadeGanArch {
    /// Desk-scale default: (16, 32, 64, 64) channels, k=4, s=2, p=1,
    /// 320 → 160 → 80 → 40 → 20, latent 64, 50 memory slots.
    pub fn desk() -> Self {
        Self {
            input_len: crate::signal::BEAT_LEN,
            conv_channels: vec![16, 32, 64, 64],
            kernel: 4,
            stride: 2,
            padding: 1,
            latent_dim: 64,
            memory_slots: 50,
            leaky_slope: 0.2,
            batchnorm: true,
        }
    }

    /// Full-scale preset: 512-channel top stage and 2000 memory slots.
    pub fn paper() -> Self {
        Self {
            input_len: crate::signal::BEAT_LEN,
            conv_channels: vec![64, 128, 256, 512],
            kernel: 4,
            stride: 2,
            padding: 1,
            latent_dim: 128,
            memory_slots: 2000,
            leaky_slope: 0.2,
            batchnorm: true,
        }
    }

    /// Tiny configuration for gradient checking: length-8 inputs, latent 4,
    /// 3 memory slots.
    pub fn micro() -> Self {
        Self {
            input_len: 8,
            conv_channels: vec![2, 4],
            kernel: 4,
            stride: 2,
            padding: 1,
            latent_dim: 4,
            memory_slots: 3,
            leaky_slope: 0.2,
            batchnorm: true,
        }
    }

    fn bottleneck(&self) -> Result<(usize, usize)> {
        let mut len = self.input_len;
        for _ in &self.conv_channels {
            let num = len as i64 + 2 * self.padding as i64 - self.kernel as i64;
            if num < 0 || self.stride == 0 {
                return Err(Error::Config(format!("conv stage collapses length {len}")));
            }
            len = (num / self.stride as i64) as usize + 1;
        }
        let ch = *self.conv_channels.last().ok_or_else(|| Error::Config("no conv stages".into()))?;
        Ok((ch, len))
    }

    fn encoder_specs(&self) -> Result<Vec<LayerSpec>> {
        let mut specs = Vec::new();
        let mut in_ch = 1;
        for &out_ch in &self.conv_channels {
            specs.push(LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
            specs.push(LayerSpec::LeakyRelu { slope: self.leaky_slope });
            if self.batchnorm {
                specs.push(LayerSpec::BatchNorm { channels: out_ch });
            }
            in_ch = out_ch;
        }
        specs.push(LayerSpec::Flatten);
        let (ch, len) = self.bottleneck()?;
        specs.push(LayerSpec::Dense {
            in_features: ch * len,
            out_features: self.latent_dim,
        });
        Ok(specs)
    }

    fn decoder_specs(&self) -> Result<Vec<LayerSpec>> {
        let (ch, len) = self.bottleneck()?;
        let mut specs = vec![
            LayerSpec::Dense {
                in_features: self.latent_dim,
                out_features: ch * len,
            },
            LayerSpec::LeakyRelu { slope: self.leaky_slope },
            LayerSpec::Reshape { channels: ch, length: len },
        ];
        let mut in_ch = ch;
        let out_channels: Vec<usize> = self
            .conv_channels
            .iter()
            .rev()
            .skip(1)
            .copied()
            .chain(std::iter::once(1))
            .collect();
        for (i, &out_ch) in out_channels.iter().enumerate() {
            let last = i == out_channels.len() - 1;
            specs.push(LayerSpec::TConv1d {
                in_ch,
                out_ch,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
            // final stage stays linear so reconstructions are unbounded
            if !last {
                specs.push(LayerSpec::LeakyRelu { slope: self.leaky_slope });
                if self.batchnorm {
                    specs.push(LayerSpec::BatchNorm { channels: out_ch });
                }
            }
            in_ch = out_ch;
        }
        Ok(specs)
    }

    /// Discriminator trunk: encoder-shaped conv stack ending at the
    /// flattened feature layer (the feature-matching target).
    fn disc_specs(&self) -> Result<Vec<LayerSpec>> {
        let mut specs = Vec::new();
        let mut in_ch = 1;
        for &out_ch in &self.conv_channels {
            specs.push(LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
            specs.push(LayerSpec::LeakyRelu { slope: self.leaky_slope });
            if self.batchnorm {
                specs.push(LayerSpec::BatchNorm { channels: out_ch });
            }
            in_ch = out_ch;
        }
        specs.push(LayerSpec::Flatten);
        Ok(specs)
    }
}

/// Loss weights and training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadeGanConfig {
    pub lambda_rec: f64,
    pub lambda_fm: f64,
    pub lambda_sp: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// τ = this percentile of held-out known-class scores.
    pub tau_percentile: f64,
    /// Retrieved latent := query when false (plain-AE ablation).
    pub use_memory: bool,
    /// Discriminator, feature matching and adversarial terms when true.
    pub adversarial: bool,
}

impl Default for MadeGanConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_fm: 1.0,
            lambda_sp: 1.0,
            lr: 1e-4,
            batch_size: 32,
            tau_percentile: 95.0,
            use_memory: true,
            adversarial: true,
        }
    }
}

/// Squared reconstruction error with the novelty decision against τ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub value: f64,
    pub is_novel: bool,
}

/// Per-epoch mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub rec: f64,
    pub fm: f64,
    pub sp: f64,
    pub adv: f64,
    pub disc: f64,
}

/// Parameter groups of the model, addressable for verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Memory,
    Decoder,
    Disc,
    DiscHead,
}

const ALL_GROUPS: [ParamGroup; 5] = [
    ParamGroup::Encoder,
    ParamGroup::Memory,
    ParamGroup::Decoder,
    ParamGroup::Disc,
    ParamGroup::DiscHead,
];

/// The model: encoder, memory matrix, decoder, discriminator, threshold τ.
#[derive(Debug, Clone)]
pub struct MadeGan {
    arch: MadeGanArch,
    cfg: MadeGanConfig,
    encoder: Stack,
    decoder: Stack,
    disc: Stack,
    disc_head: ParameterSet,
    memory: ParameterSet,
    tau: f64,
}

struct GenForward {
    weights: Option<NodeId>,
    xhat: NodeId,
    enc_nodes: ParamNodes,
    mem_nodes: ParamNodes,
    dec_nodes: ParamNodes,
}

struct GenLossNodes {
    total: NodeId,
    rec: NodeId,
    sp: Option<NodeId>,
    fm: Option<NodeId>,
    adv: Option<NodeId>,
    disc_bindings: Option<(ParamNodes, ParamNodes)>,
}

impl MadeGan {
    pub fn new(arch: MadeGanArch, cfg: MadeGanConfig, seed: u64) -> Result<Self> {
        if arch.memory_slots == 0 {
            return Err(Error::Config("memory needs at least one slot".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "madegan.init"));
        let encoder = Stack::new("enc", arch.encoder_specs()?, arch.leaky_slope, &mut rng)?;
        let decoder = Stack::new("dec", arch.decoder_specs()?, arch.leaky_slope, &mut rng)?;
        let disc = Stack::new("disc", arch.disc_specs()?, arch.leaky_slope, &mut rng)?;
        let (ch, len) = arch.bottleneck()?;
        let mut disc_head = ParameterSet::new();
        disc_head.add(
            "disc.head.weight",
            crate::nn::kaiming_uniform(&[1, ch * len], arch.leaky_slope, &mut rng),
        );
        disc_head.add("disc.head.bias", Tensor::zeros(&[1]));
        let mut memory = ParameterSet::new();
        memory.add("memory", unit_sphere_rows(arch.memory_slots, arch.latent_dim, &mut rng));
        Ok(Self {
            arch,
            cfg,
            encoder,
            decoder,
            disc,
            disc_head,
            memory,
            tau: f64::INFINITY,
        })
    }

    pub fn arch(&self) -> &MadeGanArch {
        &self.arch
    }

    pub fn config(&self) -> &MadeGanConfig {
        &self.cfg
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    pub fn memory_matrix(&self) -> &Tensor {
        self.memory.value(0)
    }

    pub fn params(&self, group: ParamGroup) -> &ParameterSet {
        match group {
            ParamGroup::Encoder => &self.encoder.params,
            ParamGroup::Memory => &self.memory,
            ParamGroup::Decoder => &self.decoder.params,
            ParamGroup::Disc => &self.disc.params,
            ParamGroup::DiscHead => &self.disc_head,
        }
    }

    pub fn params_mut(&mut self, group: ParamGroup) -> &mut ParameterSet {
        match group {
            ParamGroup::Encoder => &mut self.encoder.params,
            ParamGroup::Memory => &mut self.memory,
            ParamGroup::Decoder => &mut self.decoder.params,
            ParamGroup::Disc => &mut self.disc.params,
            ParamGroup::DiscHead => &mut self.disc_head,
        }
    }

    fn beats_tensor(&self, beats: &[&Beat]) -> Result<Tensor> {
        let l = self.arch.input_len;
        let mut data = Vec::with_capacity(beats.len() * l);
        for b in beats {
            if b.values.len() != l {
                return Err(Error::Shape(format!(
                    "beat length {} does not match model input {l}",
                    b.values.len()
                )));
            }
            data.extend_from_slice(&b.values);
        }
        Tensor::new(vec![beats.len(), 1, l], data)
    }

    fn forward_generator(&mut self, g: &mut Graph, x: NodeId, mode: Mode) -> Result<GenForward> {
        let enc_nodes = bind(g, &self.encoder.params);
        let z = self.encoder.forward(g, x, mode, &enc_nodes)?;
        let mem_nodes = bind(g, &self.memory);
        let (weights, zhat) = if self.cfg.use_memory {
            let cos = g.cosine_rows(z, mem_nodes.ids[0])?;
            let w = g.softmax_rows(cos)?;
            let zhat = g.matmul(w, mem_nodes.ids[0])?;
            (Some(w), zhat)
        } else {
            (None, z)
        };
        let dec_nodes = bind(g, &self.decoder.params);
        let xhat = self.decoder.forward(g, zhat, mode, &dec_nodes)?;
        Ok(GenForward {
            weights,
            xhat,
            enc_nodes,
            mem_nodes,
            dec_nodes,
        })
    }

    fn forward_disc(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        trunk: &ParamNodes,
        head: &ParamNodes,
    ) -> Result<(NodeId, NodeId)> {
        let features = self.disc.forward(g, x, mode, trunk)?;
        let logit = g.dense(features, head.ids[0], head.ids[1])?;
        let prob = g.sigmoid(logit)?;
        Ok((prob, features))
    }

    /// All generator loss terms on an already-forwarded batch. Shared by
    /// training, loss inspection and gradient checking.
    fn gen_loss_nodes(&mut self, g: &mut Graph, xn: NodeId, fwd: &GenForward, mode: Mode) -> Result<GenLossNodes> {
        let rec_raw = g.mean_sq_dist(xn, fwd.xhat)?;
        let rec = g.scale(rec_raw, self.cfg.lambda_rec)?;
        let mut total = rec;
        let sp = match fwd.weights {
            Some(w) => {
                let sp_raw = g.mean_l1(w)?;
                let sp = g.scale(sp_raw, self.cfg.lambda_sp)?;
                total = g.add(total, sp)?;
                Some(sp)
            }
            None => None,
        };
        let (mut fm, mut adv, mut disc_bindings) = (None, None, None);
        if self.cfg.adversarial {
            let trunk = bind(g, &self.disc.params);
            let head = bind(g, &self.disc_head);
            let (_, feat_real) = self.forward_disc(g, xn, mode, &trunk, &head)?;
            let (p_fake, feat_fake) = self.forward_disc(g, fwd.xhat, mode, &trunk, &head)?;
            let fm_raw = g.mean_sq_dist(feat_real, feat_fake)?;
            let fm_node = g.scale(fm_raw, self.cfg.lambda_fm)?;
            total = g.add(total, fm_node)?;
            // non-saturating adversarial term: minimize −mean log F(x̂)
            let ln_fake = g.ln_clamped(p_fake)?;
            let m = g.mean_all(ln_fake)?;
            let adv_node = g.scale(m, -1.0)?;
            total = g.add(total, adv_node)?;
            fm = Some(fm_node);
            adv = Some(adv_node);
            disc_bindings = Some((trunk, head));
        }
        Ok(GenLossNodes {
            total,
            rec,
            sp,
            fm,
            adv,
            disc_bindings,
        })
    }

    /// Latent query for one beat (eval mode).
    pub fn encode(&mut self, beat: &Beat) -> Result<Vec<f64>> {
        let x = self.beats_tensor(&[beat])?;
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let enc_nodes = bind(&mut g, &self.encoder.params);
        let z = self.encoder.forward(&mut g, xn, Mode::Eval, &enc_nodes)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Reconstruction of one beat (eval mode): encode → address → retrieve
    /// → decode.
    pub fn reconstruct(&mut self, beat: &Beat) -> Result<Vec<f64>> {
        let x = self.beats_tensor(&[beat])?;
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let fwd = self.forward_generator(&mut g, xn, Mode::Eval)?;
        Ok(g.value(fwd.xhat).data().to_vec())
    }

    /// Squared reconstruction errors for a batch (eval mode), order
    /// preserved.
    pub fn score_batch(&mut self, beats: &[Beat]) -> Result<Vec<f64>> {
        if beats.is_empty() {
            return Ok(Vec::new());
        }
        let mut scores = Vec::with_capacity(beats.len());
        for chunk in beats.chunks(256) {
            let refs: Vec<&Beat> = chunk.iter().collect();
            let x = self.beats_tensor(&refs)?;
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let fwd = self.forward_generator(&mut g, xn, Mode::Eval)?;
            let xhat = g.value(fwd.xhat);
            let l = self.arch.input_len;
            for bi in 0..refs.len() {
                let mut s = 0.0;
                for i in 0..l {
                    let d = x.data()[bi * l + i] - xhat.data()[bi * l + i];
                    s += d * d;
                }
                scores.push(s);
            }
        }
        Ok(scores)
    }

    /// Anomaly score and novelty decision for one beat.
    pub fn anomaly_score(&mut self, beat: &Beat) -> Result<AnomalyScore> {
        let value = self.score_batch(std::slice::from_ref(beat))?[0];
        Ok(AnomalyScore {
            value,
            is_novel: value > self.tau,
        })
    }

    /// Score a batch and label each beat novel (strictly above τ) or
    /// existing. Batch order preserved.
    pub fn classify_novelty(&mut self, beats: &[Beat]) -> Result<Vec<AnomalyScore>> {
        let tau = self.tau;
        Ok(self
            .score_batch(beats)?
            .into_iter()
            .map(|value| AnomalyScore {
                value,
                is_novel: value > tau,
            })
            .collect())
    }

    /// Set τ to the given percentile of anomaly scores over held-out
    /// known-class beats; returns the threshold.
    pub fn calibrate_threshold(&mut self, held_out: &[Beat], percentile: f64) -> Result<f64> {
        if held_out.is_empty() {
            return Err(Error::Invalid("threshold calibration needs at least one beat".into()));
        }
        if !(0.0..=100.0).contains(&percentile) {
            return Err(Error::Config(format!("percentile {percentile} outside [0, 100]")));
        }
        let mut scores = self.score_batch(held_out)?;
        scores.sort_by(f64::total_cmp);
        let rank = ((percentile / 100.0 * scores.len() as f64).ceil() as usize).max(1);
        self.tau = scores[rank - 1];
        Ok(self.tau)
    }

    /// Alternating adversarial training on known-class beats: one
    /// discriminator step then one generator step per mini-batch. Memory
    /// rows train end-to-end. Deterministic per seed; returns the per-epoch
    /// loss trace.
    pub fn train(&mut self, beats: &[Beat], epochs: usize, seed: u64) -> Result<Vec<EpochLosses>> {
        if beats.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let mut opt_enc = Adam::new(self.cfg.lr);
        let mut opt_mem = Adam::new(self.cfg.lr);
        let mut opt_dec = Adam::new(self.cfg.lr);
        let mut opt_disc = Adam::new(self.cfg.lr);
        let mut opt_head = Adam::new(self.cfg.lr);

        let mut trace = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..beats.len()).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("madegan.epoch.{epoch}")));
            order.shuffle(&mut rng);

            let mut sums = EpochLosses {
                rec: 0.0,
                fm: 0.0,
                sp: 0.0,
                adv: 0.0,
                disc: 0.0,
            };
            let mut batches = 0.0;
            for chunk in order.chunks(self.cfg.batch_size.max(2)) {
                let batch: Vec<&Beat> = chunk.iter().map(|&i| &beats[i]).collect();
                let x = self.beats_tensor(&batch)?;

                if self.cfg.adversarial {
                    sums.disc += self.discriminator_step(&x, &mut opt_disc, &mut opt_head)?;
                }
                let (rec, fm, sp, adv) = self.generator_step(&x, &mut opt_enc, &mut opt_mem, &mut opt_dec)?;
                sums.rec += rec;
                sums.fm += fm;
                sums.sp += sp;
                sums.adv += adv;
                batches += 1.0;
            }
            trace.push(EpochLosses {
                rec: sums.rec / batches,
                fm: sums.fm / batches,
                sp: sums.sp / batches,
                adv: sums.adv / batches,
                disc: sums.disc / batches,
            });
        }
        Ok(trace)
    }

    /// One discriminator update: ascend `mean[log F(x) + log(1 − F(x̂))]`.
    fn discriminator_step(&mut self, x: &Tensor, opt_disc: &mut Adam, opt_head: &mut Adam) -> Result<f64> {
        // reconstructions under current generator weights, no generator grads
        let xhat = {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let fwd = self.forward_generator(&mut g, xn, Mode::Train { update_stats: false })?;
            g.value(fwd.xhat).clone()
        };

        let mut g = Graph::new();
        let real = g.leaf(x.clone());
        let fake = g.leaf(xhat);
        let trunk = bind(&mut g, &self.disc.params);
        let head = bind(&mut g, &self.disc_head);
        let (p_real, _) = self.forward_disc(&mut g, real, Mode::Train { update_stats: true }, &trunk, &head)?;
        let (p_fake, _) = self.forward_disc(&mut g, fake, Mode::Train { update_stats: true }, &trunk, &head)?;

        let ln_real = g.ln_clamped(p_real)?;
        let one = g.leaf(Tensor::full(g.value(p_fake).shape(), 1.0));
        let om = g.sub(one, p_fake)?;
        let ln_fake = g.ln_clamped(om)?;
        let m_real = g.mean_all(ln_real)?;
        let m_fake = g.mean_all(ln_fake)?;
        let gan_value = g.add(m_real, m_fake)?;
        let loss = g.scale(gan_value, -1.0)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence("discriminator loss became non-finite".into()));
        }
        let grads = g.backward(loss)?;
        self.disc.params.zero_grads();
        accumulate_grads(&mut self.disc.params, &trunk, &grads);
        self.disc_head.zero_grads();
        accumulate_grads(&mut self.disc_head, &head, &grads);
        opt_disc.step(&mut self.disc.params);
        opt_head.step(&mut self.disc_head);
        Ok(loss_value)
    }

    /// One generator update over encoder, memory and decoder.
    fn generator_step(
        &mut self,
        x: &Tensor,
        opt_enc: &mut Adam,
        opt_mem: &mut Adam,
        opt_dec: &mut Adam,
    ) -> Result<(f64, f64, f64, f64)> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let fwd = self.forward_generator(&mut g, xn, Mode::Train { update_stats: true })?;
        let losses = self.gen_loss_nodes(&mut g, xn, &fwd, Mode::Train { update_stats: false })?;

        let total_value = g.value(losses.total).item();
        if !total_value.is_finite() {
            return Err(Error::Divergence("generator loss became non-finite".into()));
        }
        let rec = g.value(losses.rec).item();
        let fm = losses.fm.map_or(0.0, |n| g.value(n).item());
        let sp = losses.sp.map_or(0.0, |n| g.value(n).item());
        let adv = losses.adv.map_or(0.0, |n| g.value(n).item());

        let grads = g.backward(losses.total)?;
        self.encoder.params.zero_grads();
        accumulate_grads(&mut self.encoder.params, &fwd.enc_nodes, &grads);
        self.memory.zero_grads();
        accumulate_grads(&mut self.memory, &fwd.mem_nodes, &grads);
        self.decoder.params.zero_grads();
        accumulate_grads(&mut self.decoder.params, &fwd.dec_nodes, &grads);
        opt_enc.step(&mut self.encoder.params);
        if self.cfg.use_memory {
            opt_mem.step(&mut self.memory);
        }
        opt_dec.step(&mut self.decoder.params);
        Ok((rec, fm, sp, adv))
    }

    /// Generator loss components on a fixed batch without updating
    /// anything: `(rec, fm, sp, adv, total)`.
    pub fn generator_loss(&mut self, beats: &[Beat]) -> Result<(f64, f64, f64, f64, f64)> {
        let refs: Vec<&Beat> = beats.iter().collect();
        let x = self.beats_tensor(&refs)?;
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let mode = Mode::Train { update_stats: false };
        let fwd = self.forward_generator(&mut g, xn, mode)?;
        let losses = self.gen_loss_nodes(&mut g, xn, &fwd, mode)?;
        Ok((
            g.value(losses.rec).item(),
            losses.fm.map_or(0.0, |n| g.value(n).item()),
            losses.sp.map_or(0.0, |n| g.value(n).item()),
            losses.adv.map_or(0.0, |n| g.value(n).item()),
            g.value(losses.total).item(),
        ))
    }

    /// Adversarial losses on a fixed batch without updates: `(L_D, L_G_adv)`
    /// where `L_D = mean[log F(x) + log(1 − F(x̂))]` (the value the
    /// discriminator maximizes) and `L_G_adv = −mean log F(x̂)`.
    pub fn adversarial_losses(&mut self, beats: &[Beat]) -> Result<(f64, f64)> {
        if !self.cfg.adversarial {
            return Err(Error::Config("adversarial terms are disabled".into()));
        }
        let refs: Vec<&Beat> = beats.iter().collect();
        let x = self.beats_tensor(&refs)?;
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let mode = Mode::Train { update_stats: false };
        let fwd = self.forward_generator(&mut g, xn, mode)?;
        let trunk = bind(&mut g, &self.disc.params);
        let head = bind(&mut g, &self.disc_head);
        let (p_real, _) = self.forward_disc(&mut g, xn, mode, &trunk, &head)?;
        let (p_fake, _) = self.forward_disc(&mut g, fwd.xhat, mode, &trunk, &head)?;
        let ln_real = g.ln_clamped(p_real)?;
        let one = g.leaf(Tensor::full(g.value(p_fake).shape(), 1.0));
        let om = g.sub(one, p_fake)?;
        let ln_om = g.ln_clamped(om)?;
        let m_real = g.mean_all(ln_real)?;
        let m_om = g.mean_all(ln_om)?;
        let l_d = g.value(m_real).item() + g.value(m_om).item();
        let ln_pf = g.ln_clamped(p_fake)?;
        let m_pf = g.mean_all(ln_pf)?;
        Ok((l_d, -g.value(m_pf).item()))
    }

    /// Central finite-difference verification of the full generator
    /// objective across every parameter group (the discriminator included,
    /// since feature matching and the adversarial term route through it).
    pub fn gradient_check(&mut self, beats: &[Beat], max_coords: usize, seed: u64) -> Result<GradCheckReport> {
        let refs: Vec<&Beat> = beats.iter().collect();
        let x = self.beats_tensor(&refs)?;
        let mode = Mode::Train { update_stats: false };

        // analytic gradients from one backward pass
        let analytic: Vec<Vec<Vec<f64>>> = {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let fwd = self.forward_generator(&mut g, xn, mode)?;
            let losses = self.gen_loss_nodes(&mut g, xn, &fwd, mode)?;
            let grads = g.backward(losses.total)?;
            for group in ALL_GROUPS {
                self.params_mut(group).zero_grads();
            }
            accumulate_grads(&mut self.encoder.params, &fwd.enc_nodes, &grads);
            accumulate_grads(&mut self.memory, &fwd.mem_nodes, &grads);
            accumulate_grads(&mut self.decoder.params, &fwd.dec_nodes, &grads);
            if let Some((trunk, head)) = &losses.disc_bindings {
                accumulate_grads(&mut self.disc.params, trunk, &grads);
                accumulate_grads(&mut self.disc_head, head, &grads);
            }
            ALL_GROUPS
                .iter()
                .map(|&gr| {
                    let p = self.params(gr);
                    (0..p.len()).map(|i| p.grad(i).data().to_vec()).collect()
                })
                .collect()
        };

        let mut coords: Vec<(usize, usize, usize)> = Vec::new();
        for (gi, &gr) in ALL_GROUPS.iter().enumerate() {
            let p = self.params(gr);
            for pi in 0..p.len() {
                for ci in 0..p.value(pi).len() {
                    coords.push((gi, pi, ci));
                }
            }
        }
        if coords.len() > max_coords {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            coords.shuffle(&mut rng);
            coords.truncate(max_coords);
            coords.sort_unstable();
        }
        let h = 1e-5;
        let mut max_rel = 0.0_f64;
        let mut worst = None;
        for &(gi, pi, ci) in &coords {
            let gr = ALL_GROUPS[gi];
            let orig = self.params(gr).value(pi).data()[ci];
            self.params_mut(gr).value_mut(pi).data_mut()[ci] = orig + h;
            let plus = self.generator_loss(beats)?.4;
            self.params_mut(gr).value_mut(pi).data_mut()[ci] = orig - h;
            let minus = self.generator_loss(beats)?.4;
            self.params_mut(gr).value_mut(pi).data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic[gi][pi][ci];
            let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = Some((format!("{gr:?}[{pi}]"), ci));
            }
        }
        Ok(GradCheckReport {
            max_rel_err: max_rel,
            worst,
            checked: coords.len(),
        })
    }

    /// Write the full model (parameters, batch-norm buffers, τ, loss
    /// weights, architecture) as a checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.meta.insert(
            "arch".into(),
            serde_json::to_string(&self.arch).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        ck.meta.insert(
            "config".into(),
            serde_json::to_string(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        ck.put_f64("tau", self.tau);
        for group in ALL_GROUPS {
            for (name, value) in self.params(group).iter() {
                ck.put_tensor(name, value.clone());
            }
        }
        for (prefix, stack) in [("enc", &self.encoder), ("dec", &self.decoder), ("disc", &self.disc)] {
            for (i, (rm, rv)) in stack.buffers().iter().enumerate() {
                ck.put_tensor(format!("{prefix}.buf.{i}.mean"), rm.clone());
                ck.put_tensor(format!("{prefix}.buf.{i}.var"), rv.clone());
            }
        }
        ck.save(path)
    }

    /// Load a checkpoint written by [`MadeGan::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let arch: MadeGanArch =
            serde_json::from_str(ck.meta.get("arch").ok_or_else(|| Error::Checkpoint("missing arch".into()))?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let cfg: MadeGanConfig =
            serde_json::from_str(ck.meta.get("config").ok_or_else(|| Error::Checkpoint("missing config".into()))?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(arch, cfg, 0)?;
        model.tau = ck.get_f64("tau")?;
        for group in ALL_GROUPS {
            let set = model.params_mut(group);
            for idx in 0..set.len() {
                let name = set.name(idx).to_string();
                let t = ck.tensor(&name)?;
                if t.shape() != set.value(idx).shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
                }
                *set.value_mut(idx) = t.clone();
            }
        }
        for (prefix, stack) in [
            ("enc", &mut model.encoder),
            ("dec", &mut model.decoder),
            ("disc", &mut model.disc),
        ] {
            for i in 0..stack.buffers().len() {
                let rm = ck.tensor(&format!("{prefix}.buf.{i}.mean"))?.clone();
                let rv = ck.tensor(&format!("{prefix}.buf.{i}.var"))?.clone();
                stack.buffers_mut()[i] = (rm, rv);
            }
        }
        Ok(model)
    }
}

/// Softmax over cosine similarities of a latent against every memory row.
/// A zero latent contributes cosine 0 to every row, so the guard yields
/// uniform weights naturally.
pub fn address_memory(z: &[f64], memory: &Tensor) -> Vec<f64> {
    let k = memory.shape()[0];
    let d = memory.shape()[1];
    debug_assert_eq!(z.len(), d);
    let cosines: Vec<f64> = (0..k)
        .map(|i| crate::nn::cosine_similarity(z, &memory.data()[i * d..(i + 1) * d]))
        .collect();
    let max = cosines.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cosines.iter().map(|c| (c - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Convex combination of memory rows: `ẑ = Mᵀ w`.
pub fn retrieve(weights: &[f64], memory: &Tensor) -> Vec<f64> {
    let k = memory.shape()[0];
    let d = memory.shape()[1];
    debug_assert_eq!(weights.len(), k);
    let mut out = vec![0.0; d];
    for (i, &w) in weights.iter().enumerate() {
        for j in 0..d {
            out[j] += w * memory.data()[i * d + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_beats;
    use rand::Rng;

    fn small_arch() -> MadeGanArch {
        MadeGanArch {
            input_len: crate::signal::BEAT_LEN,
            conv_channels: vec![8, 16],
            kernel: 4,
            stride: 2,
            padding: 1,
            latent_dim: 16,
            memory_slots: 8,
            leaky_slope: 0.2,
            batchnorm: true,
        }
    }

    fn fast_cfg() -> MadeGanConfig {
        MadeGanConfig {
            lr: 1e-3,
            batch_size: 16,
            ..MadeGanConfig::default()
        }
    }

    #[test]
    fn address_memory_two_slot_worked_example() {
        let z = vec![1.0, 0.0];
        let memory = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let w = address_memory(&z, &memory);
        // softmax over cosines (1, −1): e/(e+e⁻¹) ≈ 0.881
        let e = std::f64::consts::E;
        let expect = e / (e + 1.0 / e);
        assert!((w[0] - expect).abs() < 1e-12, "w = {w:?}");
        assert!((w[0] - 0.881).abs() < 5e-4);
        assert!((w[1] - 0.119).abs() < 5e-4);
    }

    #[test]
    fn address_memory_guards_and_symmetry() {
        let memory = Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        // all rows identical → uniform
        let w = address_memory(&[1.0, 0.0], &memory);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // zero latent → uniform by the cosine guard
        let w = address_memory(&[0.0, 0.0], &memory);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieve_one_hot_and_uniform() {
        let memory = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(retrieve(&[0.0, 1.0], &memory), vec![4.0, 5.0, 6.0]);
        let mean = retrieve(&[0.5, 0.5], &memory);
        assert_eq!(mean, vec![2.5, 3.5, 4.5]);
    }

    #[test]
    fn retrieve_matches_explicit_summation() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        let memory = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut w = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let s: f64 = w.iter().sum();
        for v in &mut w {
            *v /= s;
        }
        let got = retrieve(&w, &memory);
        for j in 0..2 {
            let expect: f64 = (0..3).map(|i| w[i] * memory.at2(i, j)).sum();
            assert!((got[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn encode_and_reconstruct_shapes_and_determinism() {
        let beats = synthetic_beats(0, 'N', 4, 0.05, 1);
        let mut model = MadeGan::new(small_arch(), fast_cfg(), 7).unwrap();
        let z = model.encode(&beats[0]).unwrap();
        assert_eq!(z.len(), 16);
        let z2 = model.encode(&beats[0]).unwrap();
        assert_eq!(z, z2, "eval-mode encoding must be deterministic");
        let xhat = model.reconstruct(&beats[0]).unwrap();
        assert_eq!(xhat.len(), crate::signal::BEAT_LEN);
    }

    #[test]
    fn anomaly_score_zero_for_exact_reconstruction() {
        // score is computed from x and x̂ values; identical inputs give 0
        let beats = synthetic_beats(0, 'N', 1, 0.0, 1);
        let mut model = MadeGan::new(small_arch(), fast_cfg(), 7).unwrap();
        let score = model.score_batch(&beats).unwrap()[0];
        assert!(score > 0.0, "untrained model should not reconstruct perfectly");
        // unit difference example: x = e_0, x̂ = 0 → score 1; emulated via the
        // definition directly
        let x = [1.0_f64, 0.0, 0.0];
        let xhat = [0.0_f64; 3];
        let s: f64 = x.iter().zip(&xhat).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn threshold_percentile_semantics() {
        let beats = synthetic_beats(0, 'N', 100, 0.05, 3);
        let mut model = MadeGan::new(small_arch(), fast_cfg(), 3).unwrap();
        let scores = model.score_batch(&beats).unwrap();

        let tau95 = model.calibrate_threshold(&beats, 95.0).unwrap();
        let above = scores.iter().filter(|&&s| s > tau95).count();
        assert_eq!(above, 5, "95th percentile on 100 beats leaves exactly 5 above");

        let tau100 = model.calibrate_threshold(&beats, 100.0).unwrap();
        assert_eq!(scores.iter().filter(|&&s| s > tau100).count(), 0);
        assert!(tau100 >= tau95, "τ must be monotone in the percentile");

        // exact tie: a beat scoring τ exactly is existing (strict inequality)
        model.set_tau(scores[0]);
        let decision = model.classify_novelty(&beats[..1]).unwrap()[0];
        assert!(!decision.is_novel);
    }

    #[test]
    fn training_reduces_scores_and_is_deterministic() {
        let beats = synthetic_beats(0, 'N', 48, 0.05, 5);
        let run = || {
            let mut model = MadeGan::new(small_arch(), fast_cfg(), 11).unwrap();
            let before: f64 =
                model.score_batch(&beats).unwrap().iter().sum::<f64>() / beats.len() as f64;
            let trace = model.train(&beats, 4, 11).unwrap();
            assert_eq!(trace.len(), 4, "loss trace length equals epochs");
            let after: f64 =
                model.score_batch(&beats).unwrap().iter().sum::<f64>() / beats.len() as f64;
            (model, before, after)
        };
        let (a, before, after) = run();
        assert!(
            after < before,
            "mean training-set score should drop: {before} → {after}"
        );
        let (b, _, _) = run();
        for group in ALL_GROUPS {
            let (pa, pb) = (a.params(group), b.params(group));
            for i in 0..pa.len() {
                for (x, y) in pa.value(i).data().iter().zip(pb.value(i).data()) {
                    assert_eq!(x.to_bits(), y.to_bits(), "seeded training must be bit-identical");
                }
            }
        }
    }

    #[test]
    fn empty_training_set_errors() {
        let mut model = MadeGan::new(small_arch(), fast_cfg(), 1).unwrap();
        assert!(model.train(&[], 1, 1).is_err());
    }

    #[test]
    fn simplex_weights_make_sparsity_term_exact() {
        let beats = synthetic_beats(0, 'N', 8, 0.05, 9);
        let mut model = MadeGan::new(small_arch(), fast_cfg(), 9).unwrap();
        let (_, _, sp, _, _) = model.generator_loss(&beats).unwrap();
        assert!(
            (sp - model.config().lambda_sp).abs() < 1e-9,
            "softmax weights are simplex-valued so mean ‖w‖₁ = 1: {sp}"
        );
    }

    #[test]
    fn loss_components_match_straight_line_recomputation() {
        let beats = synthetic_beats(0, 'N', 6, 0.05, 13);
        let mut model = MadeGan::new(small_arch(), fast_cfg(), 13).unwrap();
        let (rec, _, _, _, _) = model.generator_loss(&beats).unwrap();

        // reconstruction term recomputed from first principles (eval-mode
        // BN differs from train-mode, so compare in train stats by using
        // per-beat reconstruct? instead recompute with the same mode via
        // score-like arithmetic on train-mode forward)
        let refs: Vec<&Beat> = beats.iter().collect();
        let x = model.beats_tensor(&refs).unwrap();
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let fwd = model
            .forward_generator(&mut g, xn, Mode::Train { update_stats: false })
            .unwrap();
        let xhat = g.value(fwd.xhat);
        let mut manual = 0.0;
        for i in 0..x.len() {
            let d = x.data()[i] - xhat.data()[i];
            manual += d * d;
        }
        manual /= beats.len() as f64;
        assert!((rec - manual).abs() < 1e-9, "{rec} vs {manual}");
    }

    #[test]
    fn constant_discriminator_gan_value() {
        // F ≡ 0.5 → L_D = 2·ln 0.5 ≈ −1.386 per sample; force it by zeroing
        // the head so the sigmoid sits at 0.5
        let beats = synthetic_beats(0, 'N', 4, 0.05, 21);
        let mut model = MadeGan::new(small_arch(), fast_cfg(), 21).unwrap();
        let head = model.params_mut(ParamGroup::DiscHead);
        for i in 0..head.len() {
            for v in head.value_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        let (l_d, l_g_adv) = model.adversarial_losses(&beats).unwrap();
        assert!((l_d - 2.0 * 0.5_f64.ln()).abs() < 1e-9, "L_D = {l_d}");
        assert!((l_g_adv - (-(0.5_f64.ln()))).abs() < 1e-9);
    }

    #[test]
    fn plain_ae_ablation_strips_all_extra_terms() {
        let beats = synthetic_beats(0, 'N', 12, 0.05, 23);
        let cfg = MadeGanConfig {
            use_memory: false,
            adversarial: false,
            ..fast_cfg()
        };
        let mut model = MadeGan::new(small_arch(), cfg, 23).unwrap();
        let (rec, fm, sp, adv, total) = model.generator_loss(&beats).unwrap();
        assert_eq!(fm, 0.0);
        assert_eq!(sp, 0.0);
        assert_eq!(adv, 0.0);
        assert!((total - rec).abs() < 1e-12, "plain AE trains on reconstruction only");
        let trace = model.train(&beats, 2, 23).unwrap();
        assert!(trace.iter().all(|e| e.disc == 0.0 && e.fm == 0.0 && e.sp == 0.0 && e.adv == 0.0));
    }

    #[test]
    fn micro_gradient_check_passes() {
        let mut model = MadeGan::new(MadeGanArch::micro(), MadeGanConfig::default(), 31).unwrap();
        // micro inputs: 4 beats of length 8
        let beats: Vec<Beat> = (0..4)
            .map(|i| {
                let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(100 + i);
                let values: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Beat {
                    values,
                    label: 'N',
                    r_peak_index: 0,
                    standardized: true,
                    degenerate: false,
                    synthetic: false,
                }
            })
            .collect();
        let report = model.gradient_check(&beats, 200, 7).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "micro model finite-difference check: {report:?}"
        );
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("madegan.ckpt");
        let beats = synthetic_beats(0, 'N', 16, 0.05, 41);
        let mut model = MadeGan::new(small_arch(), fast_cfg(), 41).unwrap();
        model.train(&beats, 1, 41).unwrap();
        model.calibrate_threshold(&beats, 95.0).unwrap();
        model.save(&path).unwrap();
        let mut loaded = MadeGan::load(&path).unwrap();
        assert_eq!(loaded.tau().to_bits(), model.tau().to_bits());
        for group in ALL_GROUPS {
            let (pa, pb) = (model.params(group), loaded.params(group));
            for i in 0..pa.len() {
                for (x, y) in pa.value(i).data().iter().zip(pb.value(i).data()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        // behavioral equality on scoring
        let s1 = model.score_batch(&beats).unwrap();
        let s2 = loaded.score_batch(&beats).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
