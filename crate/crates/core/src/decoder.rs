//! Autoregressive mel decoder with GMM attention, stop token and post-net.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softplus_inverse, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Linear, Lstm, LstmState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const POSTNET_LAYERS: usize = 5;
pub const SIGMA_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub attention_mixtures: usize,
    pub rnn_dims: Vec<usize>,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    /// Keep pre-net dropout active when free running, seeded per request.
    pub prenet_dropout_at_inference: bool,
    pub reduction_factor: usize,
    pub max_decoder_steps: usize,
    pub stop_threshold: f64,
    pub postnet_layers: usize,
    pub postnet_width: usize,
    pub postnet_channels: usize,
    /// Initial mean advance per step, in memory positions.
    pub initial_advance: f64,
    pub initial_sigma: f64,
    /// Also feed the speaker embedding to the frame and stop projections.
    pub speaker_to_projection: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            attention_mixtures: 5,
            rnn_dims: vec![256, 256],
            prenet_dims: vec![128, 64],
            prenet_dropout: 0.5,
            prenet_dropout_at_inference: true,
            reduction_factor: 1,
            max_decoder_steps: 2000,
            stop_threshold: 0.5,
            postnet_layers: POSTNET_LAYERS,
            postnet_width: 5,
            postnet_channels: 256,
            initial_advance: 0.25,
            initial_sigma: 1.0,
            speaker_to_projection: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention_mixtures == 0 {
            return Err(Error::config("decoder.attention_mixtures", "must be at least 1"));
        }
        if self.rnn_dims.len() != 2 || self.rnn_dims.contains(&0) {
            return Err(Error::config("decoder.rnn_dims", "must list two positive sizes"));
        }
        if self.prenet_dims.is_empty() || self.prenet_dims.contains(&0) {
            return Err(Error::config("decoder.prenet_dims", "must list positive sizes"));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::config("decoder.prenet_dropout", "must be in [0, 1)"));
        }
        if self.reduction_factor == 0 {
            return Err(Error::config("decoder.reduction_factor", "must be at least 1"));
        }
        if self.max_decoder_steps < self.reduction_factor {
            return Err(Error::config("decoder.max_decoder_steps", "must allow at least one step"));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(Error::config("decoder.stop_threshold", "must be in (0, 1)"));
        }
        if self.postnet_layers != POSTNET_LAYERS {
            return Err(Error::config("decoder.postnet_layers", "must be 5"));
        }
        if self.postnet_width == 0 || self.postnet_channels == 0 {
            return Err(Error::config("decoder.postnet_channels", "width and channels must be positive"));
        }
        if !(self.initial_advance > 0.0) {
            return Err(Error::config("decoder.initial_advance", "must be positive"));
        }
        if !(self.initial_sigma > SIGMA_FLOOR) {
            return Err(Error::config("decoder.initial_sigma", "must exceed the 0.1 floor"));
        }
        Ok(())
    }
}

/// Output of one attention step for a batch.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub context: Var,
    /// `B x max_len`, zero past each length.
    pub weights: Var,
    pub mu: Var,
    pub sigma: Var,
    pub mix: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub rnn1: LstmState,
    pub rnn2: LstmState,
    pub mu: Var,
    pub context: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `B x (r * mel_bins)`.
    pub frames: Var,
    /// `B x 1`.
    pub stop_logit: Var,
    pub attention: AttentionOutput,
    pub state: DecoderState,
}

/// Memory of several utterances stacked into `(B * max_len) x D` with zero
/// rows past each length.
#[derive(Clone, Debug)]
pub struct PackedMemory {
    pub memory: Var,
    pub lengths: Vec<usize>,
}

impl PackedMemory {
    pub fn new(g: &mut Graph, memories: &[Var]) -> Result<Self> {
        if memories.is_empty() {
            return Err(Error::input("no memories to pack"));
        }
        let dim = g.shape(memories[0]).1;
        let lengths: Vec<usize> = memories.iter().map(|&m| g.shape(m).0).collect();
        if lengths.contains(&0) {
            return Err(Error::input("memory must be non-empty"));
        }
        let max_len = *lengths.iter().max().expect("non-empty");
        let mut parts = Vec::with_capacity(2 * memories.len());
        for (&m, &len) in memories.iter().zip(&lengths) {
            if g.shape(m).1 != dim {
                return Err(Error::input("memories differ in width"));
            }
            parts.push(m);
            if len < max_len {
                parts.push(g.constant(Tensor::zeros(max_len - len, dim)));
            }
        }
        let memory = g.concat_rows(&parts);
        Ok(Self { memory, lengths })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Teacher-forced outputs for one utterance, still on the graph.
#[derive(Clone, Debug)]
pub struct TracedOutput {
    pub mel_before: Var,
    pub mel_after: Var,
    /// `steps x 1`.
    pub stop_logits: Var,
    /// `T x N`.
    pub alignments: Tensor,
    /// `steps x K` mixture means.
    pub means: Tensor,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub mel_before: Tensor,
    pub mel_after: Tensor,
    pub stop_logits: Vec<f64>,
    pub alignments: Tensor,
    pub means: Tensor,
    /// Free running stopped at `max_decoder_steps` without a stop decision.
    pub reached_cap: bool,
}

pub enum DecodeMode<'t> {
    TeacherForced(&'t Tensor),
    FreeRunning,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub mel_bins: usize,
    pub memory_dim: usize,
    pub speaker_dim: usize,
    pub prenet: Vec<Linear>,
    pub rnn1: Lstm,
    pub rnn2: Lstm,
    pub attention: Linear,
    pub projection: Linear,
    pub stop: Linear,
    pub postnet: Vec<Conv1d>,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &DecoderConfig,
        mel_bins: usize,
        memory_dim: usize,
        speaker_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if mel_bins == 0 || memory_dim == 0 {
            return Err(Error::config("decoder", "mel_bins and memory_dim must be positive"));
        }
        let mut prenet = Vec::new();
        let mut d = mel_bins;
        for (i, &h) in config.prenet_dims.iter().enumerate() {
            prenet.push(Linear::new(store, &format!("decoder.prenet.{i}"), d, h, rng));
            d = h;
        }
        let (h1, h2) = (config.rnn_dims[0], config.rnn_dims[1]);
        let rnn1 = Lstm::new(store, "decoder.rnn1", d + memory_dim + speaker_dim, h1, rng);
        let rnn2 = Lstm::new(store, "decoder.rnn2", h1 + memory_dim + speaker_dim, h2, rng);
        let k = config.attention_mixtures;
        let attention = Linear::new(store, "decoder.attention", h1, 3 * k, rng);
        {
            let bias = store.value_mut(attention.bias);
            let adv = softplus_inverse(config.initial_advance);
            let sig = softplus_inverse(config.initial_sigma - SIGMA_FLOOR);
            for j in 0..k {
                bias.set(0, j, adv);
                bias.set(0, k + j, sig);
            }
            // small weights so the means start moving at the initial rate
            let w = store.value_mut(attention.weight);
            w.scale_in_place(0.1);
        }
        let r = config.reduction_factor;
        let out_dim = h2 + memory_dim + if config.speaker_to_projection { speaker_dim } else { 0 };
        let projection = Linear::new(store, "decoder.projection", out_dim, r * mel_bins, rng);
        let stop = Linear::new(store, "decoder.stop", out_dim, 1, rng);
        let c = config.postnet_channels;
        let w = config.postnet_width;
        let postnet = (0..POSTNET_LAYERS)
            .map(|i| {
                let cin = if i == 0 { mel_bins } else { c };
                let cout = if i + 1 == POSTNET_LAYERS { mel_bins } else { c };
                Conv1d::new(store, &format!("decoder.postnet.{i}"), cin, cout, w, rng)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            mel_bins,
            memory_dim,
            speaker_dim,
            prenet,
            rnn1,
            rnn2,
            attention,
            projection,
            stop,
            postnet,
        })
    }

    pub fn initial_state(&self, g: &mut Graph, batch: usize) -> DecoderState {
        let rnn1 = self.rnn1.zero_state(g, batch);
        let rnn2 = self.rnn2.zero_state(g, batch);
        let mu = g.constant(Tensor::zeros(batch, self.config.attention_mixtures));
        let context = g.constant(Tensor::zeros(batch, self.memory_dim));
        DecoderState {
            rnn1,
            rnn2,
            mu,
            context,
        }
    }

    fn run_prenet(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let rate = self.config.prenet_dropout;
        let mut rng = rng;
        let mut h = x;
        for layer in &self.prenet {
            h = layer.forward(g, h);
            h = g.relu(h);
            if g.is_training() {
                h = g.dropout(h, rate);
            } else if let Some(r) = rng.as_deref_mut() {
                if rate > 0.0 {
                    let (rows, cols) = g.shape(h);
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..rows * cols)
                        .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    h = g.mul_const(h, Tensor::from_vec(rows, cols, mask));
                }
            }
        }
        h
    }

    /// GMM attention for a batch of queries (`B x rnn_dims[0]`).
    pub fn attention_step(&self, g: &mut Graph, query: Var, memory: &PackedMemory, mu_prev: Var) -> Result<AttentionOutput> {
        if !g.value(query).all_finite() {
            return Err(Error::Numeric("attention query is not finite".into()));
        }
        let k = self.config.attention_mixtures;
        let params = self.attention.forward(g, query);
        let delta = g.slice_cols(params, 0, k);
        let delta = g.softplus(delta);
        let sigma = g.slice_cols(params, k, 2 * k);
        let sigma = g.softplus(sigma);
        let sigma = g.add_scalar(sigma, SIGMA_FLOOR);
        let mix = g.slice_cols(params, 2 * k, 3 * k);
        let mix = g.softmax_rows(mix);
        let mu = g.add(mu_prev, delta);
        let weights = g.gmm_weights(mu, sigma, mix, &memory.lengths);
        let context = g.attend(weights, memory.memory);
        Ok(AttentionOutput {
            context,
            weights,
            mu,
            sigma,
            mix,
        })
    }

    /// One decoder step: pre-net on the previous frame, first recurrent layer
    /// on `[prenet | previous context | speaker]`, attention queried by its
    /// output, second layer on `[h1 | context | speaker]`, then frames and a
    /// stop logit from `[h2 | context]` (plus the speaker embedding when
    /// `speaker_to_projection` is set).
    pub fn decode_step(
        &self,
        g: &mut Graph,
        prev_frame: Var,
        memory: &PackedMemory,
        speaker: Var,
        state: DecoderState,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput> {
        let b = memory.batch();
        if g.shape(prev_frame) != (b, self.mel_bins) {
            return Err(Error::input(format!(
                "previous frame shape {:?}, expected ({b}, {})",
                g.shape(prev_frame),
                self.mel_bins
            )));
        }
        if g.shape(speaker) != (b, self.speaker_dim) {
            return Err(Error::input(format!(
                "speaker embedding shape {:?}, expected ({b}, {})",
                g.shape(speaker),
                self.speaker_dim
            )));
        }
        if g.shape(memory.memory).1 != self.memory_dim {
            return Err(Error::input(format!(
                "memory width {}, expected {}",
                g.shape(memory.memory).1,
                self.memory_dim
            )));
        }
        let x = self.run_prenet(g, prev_frame, rng);
        let in1 = g.concat_cols(&[x, state.context, speaker]);
        let rnn1 = self.rnn1.step(g, in1, state.rnn1);
        let attention = self.attention_step(g, rnn1.h, memory, state.mu)?;
        let in2 = g.concat_cols(&[rnn1.h, attention.context, speaker]);
        let rnn2 = self.rnn2.step(g, in2, state.rnn2);
        let out_in = if self.config.speaker_to_projection {
            g.concat_cols(&[rnn2.h, attention.context, speaker])
        } else {
            g.concat_cols(&[rnn2.h, attention.context])
        };
        let frames = self.projection.forward(g, out_in);
        let stop_logit = self.stop.forward(g, out_in);
        Ok(StepOutput {
            frames,
            stop_logit,
            attention,
            state: DecoderState {
                rnn1,
                rnn2,
                mu: attention.mu,
                context: attention.context,
            },
        })
    }

    /// Residual predicted by the post-net for one utterance's frames.
    pub fn postnet(&self, g: &mut Graph, mel_before: Var) -> Result<Var> {
        if g.shape(mel_before).1 != self.mel_bins {
            return Err(Error::input(format!(
                "post-net input has {} bins, expected {}",
                g.shape(mel_before).1,
                self.mel_bins
            )));
        }
        let mut h = mel_before;
        for (i, conv) in self.postnet.iter().enumerate() {
            h = conv.forward(g, h);
            if i + 1 < POSTNET_LAYERS {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// Teacher-forced decoding of a batch. `speakers` is `B x speaker_dim`;
    /// the previous frame at step `t` is target frame `t*r - 1` (zeros at
    /// `t = 0`). Each utterance gets exactly its target length.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        memory: &PackedMemory,
        speakers: Var,
        targets: &[&Tensor],
    ) -> Result<Vec<TracedOutput>> {
        let b = memory.batch();
        if targets.len() != b {
            return Err(Error::input(format!("{} targets for a batch of {b}", targets.len())));
        }
        let m = self.mel_bins;
        let r = self.config.reduction_factor;
        for t in targets {
            if t.cols() != m || t.rows() == 0 {
                return Err(Error::input(format!("target shape {:?}, expected T x {m} with T >= 1", t.shape())));
            }
        }
        let steps: Vec<usize> = targets.iter().map(|t| t.rows().div_ceil(r)).collect();
        let max_steps = *steps.iter().max().expect("non-empty");
        let mut state = self.initial_state(g, b);
        let mut outs = Vec::with_capacity(max_steps);
        let mut stops = Vec::with_capacity(max_steps);
        let mut weights = Vec::with_capacity(max_steps);
        let mut means = Vec::with_capacity(max_steps);
        for t in 0..max_steps {
            let mut prev = Tensor::zeros(b, m);
            if t > 0 {
                for (bi, target) in targets.iter().enumerate() {
                    let f = t * r - 1;
                    if f < target.rows() {
                        prev.row_mut(bi).copy_from_slice(target.row(f));
                    }
                }
            }
            let prev = g.constant(prev);
            let step = self.decode_step(g, prev, memory, speakers, state, None)?;
            outs.push(step.frames);
            stops.push(step.stop_logit);
            weights.push(g.value(step.attention.weights).clone());
            means.push(g.value(step.attention.mu).clone());
            state = step.state;
        }
        let stacked = g.concat_rows(&outs);
        let stop_stacked = g.concat_rows(&stops);
        let frames = if r == 1 {
            stacked
        } else {
            let parts: Vec<Var> = (0..r).map(|j| g.slice_cols(stacked, j * m, (j + 1) * m)).collect();
            g.concat_rows(&parts)
        };
        let rows_per_group = max_steps * b;
        let k = self.config.attention_mixtures;
        let mut result = Vec::with_capacity(b);
        for (bi, target) in targets.iter().enumerate() {
            let len = target.rows();
            let idx: Vec<usize> = (0..len).map(|f| (f % r) * rows_per_group + (f / r) * b + bi).collect();
            let mel_before = g.gather_rows(frames, &idx);
            let stop_idx: Vec<usize> = (0..steps[bi]).map(|t| t * b + bi).collect();
            let stop_logits = g.gather_rows(stop_stacked, &stop_idx);
            let residual = self.postnet(g, mel_before)?;
            let mel_after = g.add(mel_before, residual);
            let n = memory.lengths[bi];
            let mut align = Tensor::zeros(len, n);
            for f in 0..len {
                align.row_mut(f).copy_from_slice(&weights[f / r].row(bi)[..n]);
            }
            let mut mu = Tensor::zeros(steps[bi], k);
            for t in 0..steps[bi] {
                mu.row_mut(t).copy_from_slice(means[t].row(bi));
            }
            result.push(TracedOutput {
                mel_before,
                mel_after,
                stop_logits,
                alignments: align,
                means: mu,
            });
        }
        Ok(result)
    }

    /// Decode a single utterance. `memory` is `N x memory_dim`, `speaker` is
    /// `1 x speaker_dim`. In free-running mode `rng` drives pre-net dropout
    /// when `prenet_dropout_at_inference` is set.
    pub fn decode_sequence(
        &self,
        g: &mut Graph,
        memory: Var,
        speaker: Var,
        mode: DecodeMode<'_>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecoderOutput> {
        let packed = PackedMemory::new(g, &[memory])?;
        match mode {
            DecodeMode::TeacherForced(target) => {
                let out = self
                    .teacher_forced(g, &packed, speaker, &[target])?
                    .pop()
                    .expect("one output per target");
                Ok(DecoderOutput {
                    mel_before: g.value(out.mel_before).clone(),
                    mel_after: g.value(out.mel_after).clone(),
                    stop_logits: g.value(out.stop_logits).data().to_vec(),
                    alignments: out.alignments,
                    means: out.means,
                    reached_cap: false,
                })
            }
            DecodeMode::FreeRunning => self.free_running(g, &packed, speaker, rng),
        }
    }

    fn free_running(
        &self,
        g: &mut Graph,
        memory: &PackedMemory,
        speaker: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DecoderOutput> {
        let m = self.mel_bins;
        let r = self.config.reduction_factor;
        let n = memory.lengths[0];
        let cap = self.config.max_decoder_steps / r;
        let mut rng = if self.config.prenet_dropout_at_inference { rng } else { None };
        let mut state = self.initial_state(g, 1);
        let mut prev = Tensor::zeros(1, m);
        let mut frames: Vec<f64> = Vec::new();
        let mut align_rows: Vec<f64> = Vec::new();
        let mut means: Vec<f64> = Vec::new();
        let mut stop_logits = Vec::new();
        let mut stopped = false;
        for _ in 0..cap {
            let p = g.constant(prev.clone());
            let step = self.decode_step(g, p, memory, speaker, state, rng.as_deref_mut())?;
            let out = g.value(step.frames);
            if !out.all_finite() {
                return Err(Error::Numeric("decoder produced non-finite frames".into()));
            }
            frames.extend_from_slice(out.data());
            prev = Tensor::from_vec(1, m, out.data()[(r - 1) * m..].to_vec());
            let w = g.value(step.attention.weights);
            for _ in 0..r {
                align_rows.extend_from_slice(&w.row(0)[..n]);
            }
            means.extend_from_slice(g.value(step.attention.mu).data());
            let logit = g.scalar(step.stop_logit);
            stop_logits.push(logit);
            state = step.state;
            if sigmoid(logit) > self.config.stop_threshold {
                stopped = true;
                break;
            }
        }
        let steps = stop_logits.len();
        let total = steps * r;
        let mel_before = Tensor::from_vec(total, m, frames);
        let before = g.constant(mel_before.clone());
        let residual = self.postnet(g, before)?;
        let mel_after = g.value(before).zip_map(g.value(residual), |a, b| a + b);
        Ok(DecoderOutput {
            mel_before,
            mel_after,
            stop_logits,
            alignments: Tensor::from_vec(total, n, align_rows),
            means: Tensor::from_vec(steps, self.config.attention_mixtures, means),
            reached_cap: !stopped,
        })
    }
}

/// True when every mixture mean is non-decreasing from one row to the next.
pub fn means_monotone(means: &Tensor) -> bool {
    (1..means.rows()).all(|t| (0..means.cols()).all(|k| means.get(t, k) >= means.get(t - 1, k)))
        && means.data().iter().all(|&v| v >= 0.0)
}

/// Largest deviation of an alignment row sum from 1.
pub fn max_row_sum_error(alignments: &Tensor) -> f64 {
    (0..alignments.rows())
        .map(|t| (alignments.row(t).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}
