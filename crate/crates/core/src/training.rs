//! Loss, optimizer loop and checkpoints.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::corpus::{stable_hash, Corpus};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Model, ModelSpec, TrainItem};
use crate::params::{exponential_lr, Adam, Gradients};
use crate::prosody::NormStats;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub grad_clip: f64,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub stop_pos_weight: f64,
    /// Weight on the prosody term; Eq. 1 is an unweighted sum.
    pub prosody_loss_weight: f64,
    /// Prosody features removed end to end (`pitch`, `duration`, `energy`, `all`).
    pub masked_features: Vec<String>,
    /// Train on at most this many training utterances (0 = all).
    pub max_utterances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            final_learning_rate: 1e-4,
            grad_clip: 1.0,
            max_steps: 30_000,
            checkpoint_every: 1000,
            stop_pos_weight: 5.0,
            prosody_loss_weight: 1.0,
            masked_features: Vec::new(),
            max_utterances: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.final_learning_rate > 0.0) {
            return Err(Error::config("train.final_learning_rate", "must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be at least 1"));
        }
        if !(self.stop_pos_weight > 0.0) {
            return Err(Error::config("train.stop_pos_weight", "must be positive"));
        }
        if !(self.prosody_loss_weight >= 0.0) {
            return Err(Error::config("train.prosody_loss_weight", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub taco_mel_before: f64,
    pub taco_mel_after: f64,
    pub taco_stop: f64,
    pub prosody_l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [
            ("taco_mel_before", self.taco_mel_before),
            ("taco_mel_after", self.taco_mel_after),
            ("taco_stop", self.taco_stop),
            ("prosody_l1", self.prosody_l1),
        ]
    }
}

/// Targets for one utterance. Tensors may carry padding rows past
/// `frames` / `phonemes`; they are ignored.
#[derive(Clone, Copy, Debug)]
pub struct LossTarget<'a> {
    pub mel: &'a Tensor,
    pub frames: usize,
    pub prosody: &'a Tensor,
    pub phonemes: usize,
}

/// Outputs for one utterance, possibly padded like the targets.
#[derive(Clone, Copy, Debug)]
pub struct LossInput {
    pub mel_before: Var,
    pub mel_after: Var,
    pub stop_logits: Var,
    pub prosody_pred: Var,
}

impl From<&ForwardOutput> for LossInput {
    fn from(o: &ForwardOutput) -> Self {
        Self {
            mel_before: o.decoder.mel_before,
            mel_after: o.decoder.mel_after,
            stop_logits: o.decoder.stop_logits,
            prosody_pred: o.prosody_pred,
        }
    }
}

fn mse(g: &mut Graph, pred: Var, target: &Tensor, rows: usize) -> Var {
    let p = g.slice_rows(pred, 0, rows);
    let t = g.constant(target.slice_rows(0, rows));
    let d = g.sub(p, t);
    let sq = g.square(d);
    g.mean(sq)
}

/// Per-utterance Tacotron2 terms plus the prosody L1, averaged over the
/// batch. The returned `Var` is the weighted total; the breakdown reports the
/// unweighted prosody term only when the weight is 1.
pub fn compute_loss(
    g: &mut Graph,
    outputs: &[LossInput],
    targets: &[LossTarget<'_>],
    reduction_factor: usize,
    stop_pos_weight: f64,
    prosody_weight: f64,
) -> Result<(Var, LossBreakdown)> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(Error::input(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut stop = Vec::new();
    let mut pros = Vec::new();
    for (o, t) in outputs.iter().zip(targets) {
        let mel_bins = t.mel.cols();
        for (name, v) in [("mel_before", o.mel_before), ("mel_after", o.mel_after)] {
            let (r, c) = g.shape(v);
            if c != mel_bins || r < t.frames || t.mel.rows() < t.frames || t.frames == 0 {
                return Err(Error::input(format!(
                    "{name} shape ({r}, {c}) does not cover a {} x {mel_bins} target",
                    t.frames
                )));
            }
        }
        let steps = t.frames.div_ceil(reduction_factor);
        if g.shape(o.stop_logits).0 < steps || g.shape(o.stop_logits).1 != 1 {
            return Err(Error::input(format!(
                "stop logits {:?} do not cover {steps} steps",
                g.shape(o.stop_logits)
            )));
        }
        let (pr, pc) = g.shape(o.prosody_pred);
        if pc != 3 || pr < t.phonemes || t.prosody.rows() < t.phonemes || t.phonemes == 0 {
            return Err(Error::input(format!(
                "prosody prediction ({pr}, {pc}) does not cover {} phonemes",
                t.phonemes
            )));
        }
        before.push(mse(g, o.mel_before, t.mel, t.frames));
        after.push(mse(g, o.mel_after, t.mel, t.frames));

        // BCE with logits: softplus(-x) on the final step, softplus(x) elsewhere
        let logits = g.slice_rows(o.stop_logits, 0, steps);
        let mut sign = Tensor::full(steps, 1, 1.0);
        sign.set(steps - 1, 0, -1.0);
        let mut weight = Tensor::full(steps, 1, 1.0 / steps as f64);
        weight.set(steps - 1, 0, stop_pos_weight / steps as f64);
        let z = g.mul_const(logits, sign);
        let sp = g.softplus(z);
        let weighted = g.mul_const(sp, weight);
        stop.push(g.sum(weighted));

        let p = g.slice_rows(o.prosody_pred, 0, t.phonemes);
        let tp = g.constant(t.prosody.slice_rows(0, t.phonemes));
        let d = g.sub(p, tp);
        let a = g.abs(d);
        pros.push(g.mean(a));
    }
    let n = outputs.len() as f64;
    let avg = |g: &mut Graph, parts: &[Var]| {
        let cat = g.concat_rows(parts);
        let s = g.sum(cat);
        g.scale(s, 1.0 / n)
    };
    let before = avg(g, &before);
    let after = avg(g, &after);
    let stop = avg(g, &stop);
    let pros = avg(g, &pros);
    let pros_w = if prosody_weight == 1.0 { pros } else { g.scale(pros, prosody_weight) };
    let t1 = g.add(before, after);
    let t2 = g.add(t1, stop);
    let total = g.add(t2, pros_w);
    let breakdown = LossBreakdown {
        taco_mel_before: g.scalar(before),
        taco_mel_after: g.scalar(after),
        taco_stop: g.scalar(stop),
        prosody_l1: g.scalar(pros_w),
        total: g.scalar(total),
    };
    Ok((total, breakdown))
}

/// Normalized, masked training items for every training utterance.
pub fn prepare_items(corpus: &Corpus, model: &Model) -> Vec<TrainItem> {
    corpus
        .train()
        .map(|u| TrainItem {
            phonemes: u.phonemes.clone(),
            speaker_id: u.speaker_id,
            style_id: u.style_id,
            prosody: model.spec.mask.apply(&model.stats.normalize(&u.prosody)),
            mel: u.mel.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Optimizer state plus model; one `step` call is one update.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub seed: u64,
    /// Number of completed updates.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model.store);
        Ok(Self {
            model,
            optimizer,
            config: config.clone(),
            seed,
            step: 0,
        })
    }

    fn step_rng(&self, step: usize, salt: u64) -> ChaCha8Rng {
        let h = stable_hash(format!("{}:{step}:{salt}", self.seed).as_bytes());
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Indices of the batch used at update `step` (0-based).
    pub fn batch_indices(&self, step: usize, num_items: usize) -> Vec<usize> {
        let mut rng = self.step_rng(step, 1);
        let mut idx: Vec<usize> = (0..num_items).collect();
        idx.shuffle(&mut rng);
        idx.truncate(self.config.batch_size.min(num_items));
        idx
    }

    /// Loss on a batch without updating (eval-mode graph, no dropout).
    pub fn evaluate(&self, batch: &[&TrainItem]) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.model.store);
        let (_, b) = self.loss_on(&mut g, batch)?;
        Ok(b)
    }

    fn loss_on(&self, g: &mut Graph, batch: &[&TrainItem]) -> Result<(Var, LossBreakdown)> {
        let outs = self.model.forward_batch(g, batch)?;
        let inputs: Vec<LossInput> = outs.iter().map(LossInput::from).collect();
        let targets: Vec<LossTarget> = batch
            .iter()
            .map(|i| LossTarget {
                mel: &i.mel,
                frames: i.mel.rows(),
                prosody: &i.prosody,
                phonemes: i.phonemes.len(),
            })
            .collect();
        compute_loss(
            g,
            &inputs,
            &targets,
            self.model.spec.decoder.reduction_factor,
            self.config.stop_pos_weight,
            self.config.prosody_loss_weight,
        )
    }

    /// One optimizer update on the batch chosen for the current step.
    pub fn train_step(&mut self, items: &[TrainItem]) -> Result<MetricsRecord> {
        let start = Instant::now();
        if items.is_empty() {
            return Err(Error::input("no training items"));
        }
        let step = self.step;
        let batch: Vec<&TrainItem> = self.batch_indices(step, items.len()).into_iter().map(|i| &items[i]).collect();
        let (loss, grads) = {
            let mut g = Graph::training(&self.model.store, self.step_rng(step, 2));
            let (total, loss) = self.loss_on(&mut g, &batch)?;
            for (term, v) in loss.terms() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        term: term.to_string(),
                        step: step + 1,
                    });
                }
            }
            g.backward(total);
            (loss, g.param_grads())
        };
        let mut acc = Gradients::zeros_like(&self.model.store);
        acc.accumulate(&grads, 1.0);
        let grad_norm = acc.clip_global_norm(self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "gradient_norm".into(),
                step: step + 1,
            });
        }
        let lr = exponential_lr(
            self.config.learning_rate,
            self.config.final_learning_rate,
            step,
            self.config.max_steps.max(1),
        );
        self.optimizer.update(&mut self.model.store, &acc, lr);
        self.step += 1;
        Ok(MetricsRecord {
            step: self.step,
            loss,
            lr,
            grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Train until `max_steps`, calling `on_step` after each update.
    pub fn run(&mut self, items: &[TrainItem], mut on_step: impl FnMut(&Trainer, &MetricsRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.max_steps {
            let rec = self.train_step(items)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, Some(&self.optimizer))
    }

    /// Rebuild a trainer from a checkpoint, restoring optimizer state.
    pub fn resume(ckpt: &Checkpoint, config: &TrainConfig, seed: u64) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut trainer = Trainer::new(model, config, seed)?;
        trainer.step = ckpt.header.step;
        if let Some(adam_step) = ckpt.header.adam_step {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for id in trainer.model.store.ids() {
                let name = trainer.model.store.name(id);
                let get = |prefix: &str| {
                    ckpt.tensors
                        .get(&format!("{prefix}/{name}"))
                        .cloned()
                        .ok_or_else(|| Error::Compatibility(format!("missing optimizer state for `{name}`")))
                };
                m.push(get("adam.m")?);
                v.push(get("adam.v")?);
            }
            trainer.optimizer.m = m;
            trainer.optimizer.v = v;
            trainer.optimizer.step = adam_step;
        }
        Ok(trainer)
    }
}

/// Train a fresh model on the corpus train split.
pub fn train(
    corpus: &Corpus,
    spec: &ModelSpec,
    config: &TrainConfig,
    seed: u64,
    on_step: impl FnMut(&Trainer, &MetricsRecord) -> Result<()>,
) -> Result<Trainer> {
    let model = Model::new(spec, corpus.stats.clone(), seed)?;
    let mut trainer = Trainer::new(model, config, seed)?;
    let mut items = prepare_items(corpus, &trainer.model);
    if config.max_utterances > 0 {
        items.truncate(config.max_utterances);
    }
    trainer.run(&items, on_step)?;
    Ok(trainer)
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 8] = b"SSCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub fingerprint: String,
    pub step: usize,
    pub spec: ModelSpec,
    pub stats: NormStats,
    pub adam_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: usize, optimizer: Option<&Adam>) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, t) in model.store.iter() {
            tensors.insert(name.to_string(), t.clone());
        }
        if let Some(opt) = optimizer {
            for id in model.store.ids() {
                let name = model.store.name(id);
                tensors.insert(format!("adam.m/{name}"), opt.m[id.index()].clone());
                tensors.insert(format!("adam.v/{name}"), opt.v[id.index()].clone());
            }
        }
        let entries = tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                fingerprint: model.fingerprint(),
                step,
                spec: model.spec.clone(),
                stats: model.stats.clone(),
                adam_step: optimizer.map(|o| o.step),
                tensors: entries,
            },
            tensors,
        }
    }

    /// Model parameters only (optimizer state excluded).
    pub fn parameters(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adam."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.header.spec.fingerprint() != self.header.fingerprint {
            return Err(Error::Compatibility("stored fingerprint does not match stored spec".into()));
        }
        let mut model = Model::new(&self.header.spec, self.header.stats.clone(), 0)?;
        model.store.load_from(&self.parameters())?;
        Ok(model)
    }

    /// Load into a model built from `expected`, refusing other layouts.
    pub fn to_model_for(&self, expected: &ModelSpec) -> Result<Model> {
        if expected.fingerprint() != self.header.fingerprint {
            let mut diffs = Vec::new();
            let (a, b) = (&self.header.spec, expected);
            if a.corpus != b.corpus {
                diffs.push("corpus");
            }
            if a.encoder != b.encoder {
                diffs.push("encoder");
            }
            if a.predictor != b.predictor {
                diffs.push("predictor");
            }
            if a.prosody_encoder != b.prosody_encoder {
                diffs.push("prosody_encoder");
            }
            if a.decoder != b.decoder {
                diffs.push("decoder");
            }
            if a.mask != b.mask {
                diffs.push("train.masked_features");
            }
            return Err(Error::Compatibility(format!(
                "checkpoint fingerprint {} differs from configuration {} (sections: {})",
                &self.header.fingerprint[..12],
                &expected.fingerprint()[..12],
                diffs.join(", ")
            )));
        }
        self.to_model()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.header.tensors {
            for v in self.tensors[&e.name].data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Integrity {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < CKPT_MAGIC.len() + 8 + 32 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        if 16 + hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[16..16 + hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        let mut pos = 16 + hlen;
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let end = pos + 8 * n;
            if end > body.len() {
                return Err(bad("truncated tensor data"));
            }
            let data = body[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(e.rows, e.cols, data));
            pos = end;
        }
        if pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.ckpt"))
}

/// Highest-step checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(s) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(step) = s.parse::<usize>() {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, p));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::decoder::DecoderConfig;
    use crate::model::ProsodyMask;
    use crate::prosody_encoder::ProsodyEncoderConfig;
    use crate::prosody_predictor::PredictorConfig;
    use crate::text_encoder::EncoderConfig;

    pub(crate) fn tiny_spec() -> ModelSpec {
        let corpus = CorpusSpec {
            utterances_per_speaker: 6,
            mel_bins: 12,
            phonemes_per_utterance_range: (3, 5),
            ..CorpusSpec::default()
        };
        ModelSpec {
            encoder: EncoderConfig {
                phoneme_vocab_size: corpus.phoneme_inventory_size,
                embed_dim: 6,
                prenet_dims: vec![6, 4],
                cbhg_bank_size: 2,
                cbhg_channels: 3,
                cbhg_projection_channels: 4,
                highway_layers: 1,
                output_dim: 4,
                speaker_embed_dim: 3,
                style_embed_dim: 2,
                ..EncoderConfig::default()
            },
            predictor: PredictorConfig {
                channels: 4,
                kernel_width: 3,
                ..PredictorConfig::default()
            },
            prosody_encoder: ProsodyEncoderConfig {
                bank_max_width: 2,
                bank_channels_per_width: 2,
                post_conv_channels: 3,
                blstm_hidden: 2,
            },
            decoder: DecoderConfig {
                attention_mixtures: 2,
                rnn_dims: vec![5, 5],
                prenet_dims: vec![4],
                postnet_channels: 3,
                max_decoder_steps: 40,
                ..DecoderConfig::default()
            },
            mask: ProsodyMask::default(),
            corpus,
        }
    }

    fn setup() -> (Corpus, Model) {
        let spec = tiny_spec();
        let corpus = generate_corpus(&spec.corpus).unwrap();
        let model = Model::new(&spec, corpus.stats.clone(), 3).unwrap();
        (corpus, model)
    }

    fn loss_of(g: &mut Graph, outs: &[LossInput], targets: &[LossTarget]) -> LossBreakdown {
        compute_loss(g, outs, targets, 1, 5.0, 1.0).unwrap().1
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mel = Tensor::randn(4, 3, 1.0, &mut rng);
        let pros = Tensor::randn(2, 3, 1.0, &mut rng);
        let store = crate::params::ParamStore::default();
        let mut g = Graph::new(&store);
        let before = g.constant(mel.clone());
        let after = g.constant(mel.clone());
        let stops = g.constant(Tensor::from_vec(4, 1, vec![f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::INFINITY]));
        let p = g.constant(pros.clone());
        let out = [LossInput {
            mel_before: before,
            mel_after: after,
            stop_logits: stops,
            prosody_pred: p,
        }];
        let t = [LossTarget {
            mel: &mel,
            frames: 4,
            prosody: &pros,
            phonemes: 2,
        }];
        let b = loss_of(&mut g, &out, &t);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn total_is_sum_of_terms_and_padding_is_ignored() {
        let (corpus, model) = setup();
        let items = prepare_items(&corpus, &model);
        let batch = [&items[0], &items[1]];
        let mut g = Graph::new(&model.store);
        let outs = model.forward_batch(&mut g, &batch).unwrap();
        let inputs: Vec<LossInput> = outs.iter().map(LossInput::from).collect();
        let targets: Vec<LossTarget> = batch
            .iter()
            .map(|i| LossTarget {
                mel: &i.mel,
                frames: i.mel.rows(),
                prosody: &i.prosody,
                phonemes: i.phonemes.len(),
            })
            .collect();
        let b = loss_of(&mut g, &inputs, &targets);
        assert_eq!(b.total, b.taco_mel_before + b.taco_mel_after + b.taco_stop + b.prosody_l1);
        assert!(b.terms().iter().all(|(_, v)| *v >= 0.0));

        // append garbage rows to outputs and targets
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let padded_mels: Vec<Tensor> = batch
            .iter()
            .map(|i| {
                let mut rows = i.mel.to_rows();
                rows.extend(Tensor::randn(3, i.mel.cols(), 9.0, &mut rng).to_rows());
                Tensor::from_rows(&rows)
            })
            .collect();
        let padded_pros: Vec<Tensor> = batch
            .iter()
            .map(|i| {
                let mut rows = i.prosody.to_rows();
                rows.push(vec![7.0, -7.0, 7.0]);
                Tensor::from_rows(&rows)
            })
            .collect();
        let pad_inputs: Vec<LossInput> = inputs
            .iter()
            .map(|o| {
                let mut pad = |v: Var, rows: usize| {
                    let cols = g.shape(v).1;
                    let junk = g.constant(Tensor::randn(rows, cols, 9.0, &mut rng));
                    g.concat_rows(&[v, junk])
                };
                LossInput {
                    mel_before: pad(o.mel_before, 3),
                    mel_after: pad(o.mel_after, 3),
                    stop_logits: pad(o.stop_logits, 3),
                    prosody_pred: pad(o.prosody_pred, 1),
                }
            })
            .collect();
        let pad_targets: Vec<LossTarget> = batch
            .iter()
            .enumerate()
            .map(|(k, i)| LossTarget {
                mel: &padded_mels[k],
                frames: i.mel.rows(),
                prosody: &padded_pros[k],
                phonemes: i.phonemes.len(),
            })
            .collect();
        let p = loss_of(&mut g, &pad_inputs, &pad_targets);
        assert!((p.total - b.total).abs() <= 1e-12 * b.total.abs());
    }

    #[test]
    fn batch_loss_is_mean_of_single_losses() {
        let (corpus, model) = setup();
        let items = prepare_items(&corpus, &model);
        // pick two utterances of different phoneme counts
        let a = items.iter().find(|i| i.phonemes.len() == 3).unwrap();
        let b = items.iter().find(|i| i.phonemes.len() == 5).unwrap();
        let trainer = Trainer::new(model, &TrainConfig::default(), 1).unwrap();
        let both = trainer.evaluate(&[a, b]).unwrap();
        let la = trainer.evaluate(&[a]).unwrap();
        let lb = trainer.evaluate(&[b]).unwrap();
        let avg = 0.5 * (la.total + lb.total);
        assert!((both.total - avg).abs() <= 1e-6 * avg, "{} vs {avg}", both.total);
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let store = crate::params::ParamStore::default();
        let mut g = Graph::new(&store);
        let mel = Tensor::zeros(4, 3);
        let pros = Tensor::zeros(2, 3);
        let short = g.constant(Tensor::zeros(2, 3));
        let stops = g.constant(Tensor::zeros(4, 1));
        let p = g.constant(pros.clone());
        let out = [LossInput {
            mel_before: short,
            mel_after: short,
            stop_logits: stops,
            prosody_pred: p,
        }];
        let t = [LossTarget {
            mel: &mel,
            frames: 4,
            prosody: &pros,
            phonemes: 2,
        }];
        assert!(matches!(compute_loss(&mut g, &out, &t, 1, 5.0, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (corpus, _) = setup();
        let cfg = TrainConfig {
            batch_size: 3,
            max_steps: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut losses = Vec::new();
            train(&corpus, &tiny_spec(), &cfg, 11, |_, r| {
                losses.push(r.loss.total);
                Ok(())
            })
            .unwrap();
            losses
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let (corpus, _) = setup();
        let cfg = TrainConfig {
            batch_size: 3,
            max_steps: 6,
            ..TrainConfig::default()
        };
        let mut straight = Vec::new();
        train(&corpus, &tiny_spec(), &cfg, 5, |_, r| {
            straight.push(r.loss.total);
            Ok(())
        })
        .unwrap();

        let model = Model::new(&tiny_spec(), corpus.stats.clone(), 5).unwrap();
        let items = prepare_items(&corpus, &model);
        let mut t = Trainer::new(model, &cfg, 5).unwrap();
        let mut resumed_losses = Vec::new();
        for _ in 0..3 {
            resumed_losses.push(t.train_step(&items).unwrap().loss.total);
        }
        let bytes = t.checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let mut resumed = Trainer::resume(&ck, &cfg, 5).unwrap();
        assert_eq!(resumed.step, 3);
        resumed
            .run(&items, |_, r| {
                resumed_losses.push(r.loss.total);
                Ok(())
            })
            .unwrap();
        assert_eq!(resumed.step, 6);
        assert_eq!(resumed_losses, straight);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let (_, model) = setup();
        let ck = Checkpoint::from_model(&model, 7, Some(&Adam::new(&model.store)));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let m2 = back.to_model().unwrap();
        for ((n1, t1), (n2, t2)) in model.store.iter().zip(m2.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }

        let mut corrupt = bytes.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&corrupt, Path::new("x")), Err(Error::Integrity { .. })));

        let mut other = tiny_spec();
        other.corpus.mel_bins = 16;
        assert!(matches!(back.to_model_for(&other), Err(Error::Compatibility(_))));
        assert!(back.to_model_for(&tiny_spec()).is_ok());
    }

    #[test]
    fn non_finite_loss_names_term_and_step() {
        let (corpus, mut model) = setup();
        let id = model.decoder.projection.bias;
        model.store.value_mut(id).set(0, 0, f64::NAN);
        let items = prepare_items(&corpus, &model);
        let mut t = Trainer::new(model, &TrainConfig::default(), 1).unwrap();
        match t.train_step(&items) {
            Err(Error::NonFiniteLoss { term, step }) => {
                assert_eq!(term, "taco_mel_before");
                assert_eq!(step, 1);
            }
            other => panic!("expected non-finite loss error, got {other:?}"),
        }
    }
}
