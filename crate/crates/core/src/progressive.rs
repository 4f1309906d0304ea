//! Continuous sequence production with counter decoding.
//!
//! The progressive transformer maps a symbolic source sequence to a sequence
//! of 3D skeleton frames. Instead of a discrete end token, every frame
//! carries a counter in [0, 1] that encodes relative progress; decoding runs
//! until the predicted counter reaches a stop threshold (free-running) or for
//! a externally supplied counter schedule (counter-driven). Decoder inputs
//! are joint embeddings concatenated with a counter embedding; no positional
//! encoding is added on the decoder side, the counter carries position.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    positional_encoding_batch, positional_encoding_matrix, AttnMask, Decoder, Encoder, ModelConfig,
};
use crate::augment::future_prediction_targets;
use crate::symbolic::{SymbolicSequence, EOS_INDEX, UNK_INDEX};
use crate::tensor::{with_no_grad, xavier_init, Scalar, Tensor, TensorError};

/// Counters fed to the embedding must lie in [0, 1].
pub(crate) fn check_counter_range(counters: &[f32]) -> Result<(), TensorError> {
    match counters.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        Some(bad) => Err(TensorError::ContractViolation(format!(
            "counter {bad} outside [0, 1]"
        ))),
        None => Ok(()),
    }
}

/// Ground-truth counter schedule for a sequence of `frames` frames: frame
/// `u` (0-based) carries `(u+1)/frames`, so the final frame is exactly 1.
pub fn counter_schedule(frames: usize) -> Result<Vec<f32>, TensorError> {
    if frames == 0 {
        return Err(TensorError::InvalidParameter(
            "counter schedule for zero frames".into(),
        ));
    }
    Ok((0..frames)
        .map(|u| ((u + 1) as f64 / frames as f64) as f32)
        .collect())
}

/// A sequence of skeleton frames: `frames x (3 * joints)` coordinates plus a
/// per-frame counter. Ground-truth sequences carry the canonical schedule;
/// produced sequences carry the model's (clamped) counter predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    joints: usize,
    data: Vec<f32>,
    counters: Vec<f32>,
}

impl PoseSequence {
    /// Ground-truth constructor: counters follow [`counter_schedule`].
    pub fn new(joints: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        let channels = 3 * joints;
        if joints == 0 {
            return Err(TensorError::InvalidParameter(
                "pose sequence needs at least one joint".into(),
            ));
        }
        if data.is_empty() || !data.len().is_multiple_of(channels) {
            return Err(TensorError::InvalidParameter(format!(
                "pose data of {} values does not form whole {channels}-channel frames",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::InvalidParameter(format!(
                "non-finite coordinate at value index {bad}"
            )));
        }
        let counters = counter_schedule(data.len() / channels)?;
        Ok(PoseSequence {
            joints,
            data,
            counters,
        })
    }

    /// Constructor for produced sequences with explicit per-frame counters.
    pub fn with_counters(
        joints: usize,
        data: Vec<f32>,
        counters: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let base = Self::new(joints, data)?;
        if counters.len() != base.frames() {
            return Err(TensorError::InvalidParameter(format!(
                "{} counters for {} frames",
                counters.len(),
                base.frames()
            )));
        }
        Ok(PoseSequence { counters, ..base })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.channels()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn counters(&self) -> &[f32] {
        &self.counters
    }

    pub fn frame(&self, u: usize) -> &[f32] {
        let c = self.channels();
        &self.data[u * c..(u + 1) * c]
    }
}

/// Mean squared error between two equal-length pose sequences over all
/// `3*joints` coordinate channels plus the counter channel.
pub fn mse_loss(predicted: &PoseSequence, reference: &PoseSequence) -> Result<f64, TensorError> {
    if predicted.joints() != reference.joints() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: vec![predicted.joints()],
            rhs: vec![reference.joints()],
        });
    }
    if predicted.frames() != reference.frames() {
        return Err(TensorError::ContractViolation(format!(
            "mse_loss over {} vs {} frames",
            predicted.frames(),
            reference.frames()
        )));
    }
    let channels = predicted.channels();
    let frames = predicted.frames();
    let mut total = 0.0f64;
    for u in 0..frames {
        for c in 0..channels {
            let d = predicted.frame(u)[c] as f64 - reference.frame(u)[c] as f64;
            total += d * d;
        }
        let dc = predicted.counters()[u] as f64 - reference.counters()[u] as f64;
        total += dc * dc;
    }
    Ok(total / (frames * (channels + 1)) as f64)
}

/// [`mse_loss`] after aligning a produced sequence to the reference length:
/// missing tail frames repeat the last produced frame (and its counter),
/// surplus frames are ignored.
pub fn aligned_mse(produced: &PoseSequence, reference: &PoseSequence) -> Result<f64, TensorError> {
    if produced.joints() != reference.joints() {
        return Err(TensorError::ShapeMismatch {
            op: "aligned_mse",
            lhs: vec![produced.joints()],
            rhs: vec![reference.joints()],
        });
    }
    let channels = reference.channels();
    let frames = reference.frames();
    let last = produced.frames() - 1;
    let mut total = 0.0f64;
    for u in 0..frames {
        let p = produced.frame(u.min(last));
        let r = reference.frame(u);
        for c in 0..channels {
            let d = p[c] as f64 - r[c] as f64;
            total += d * d;
        }
        let dc =
            produced.counters()[u.min(last)] as f64 - reference.counters()[u] as f64;
        total += dc * dc;
    }
    Ok(total / (frames * (channels + 1)) as f64)
}

/// Hyperparameters of a [`ProgressiveTransformer`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressiveConfig {
    pub model: ModelConfig,
    pub src_vocab: usize,
    pub joints: usize,
    /// Width of the counter embedding inside `d_model`.
    pub d_counter: usize,
    /// Number of future frames each step predicts; 1 is plain next-frame
    /// regression, larger values enable future-prediction training.
    pub horizon: usize,
}

impl ProgressiveConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        self.model.validate()?;
        if self.src_vocab <= UNK_INDEX {
            return Err(TensorError::InvalidParameter(
                "vocabulary must at least hold the reserved tokens".into(),
            ));
        }
        if self.joints == 0 {
            return Err(TensorError::InvalidParameter("joints must be positive".into()));
        }
        if self.d_counter == 0 || self.d_counter >= self.model.d_model {
            return Err(TensorError::InvalidParameter(format!(
                "d_counter {} must lie strictly between 0 and d_model {}",
                self.d_counter, self.model.d_model
            )));
        }
        if self.horizon == 0 {
            return Err(TensorError::InvalidParameter("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }

    /// Per-step target width: `horizon` stacked frames, each with counter.
    pub fn out_width(&self) -> usize {
        self.horizon * (self.channels() + 1)
    }
}

/// A padded batch of (symbolic source, pose target) pairs.
///
/// Decoder inputs at position 0 are the start frame (zero pose, counter 0);
/// position `i >= 1` carries ground-truth frame `i-1` with its counter.
/// Targets stack the next `horizon` frames per position, the final frame
/// (counter 1) repeating past the end. Padded positions repeat the last real
/// row and are excluded from the loss through `frame_lens`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseBatch {
    pub size: usize,
    pub src_len: usize,
    pub frames: usize,
    pub channels: usize,
    pub out_width: usize,
    pub src: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub dec_pose: Vec<f32>,
    pub dec_counter: Vec<f32>,
    pub targets: Vec<f32>,
    pub frame_lens: Vec<usize>,
}

/// Lays out `(source, pose)` pairs into one padded batch with
/// `horizon`-stacked regression targets.
pub fn build_pose_batch(
    pairs: &[(&SymbolicSequence, &PoseSequence)],
    horizon: usize,
) -> Result<PoseBatch, TensorError> {
    if pairs.is_empty() {
        return Err(TensorError::ContractViolation(
            "cannot batch zero pose pairs".into(),
        ));
    }
    if horizon == 0 {
        return Err(TensorError::InvalidParameter("horizon must be positive".into()));
    }
    let joints = pairs[0].1.joints();
    for (src, pose) in pairs {
        if src.is_empty() {
            return Err(TensorError::ContractViolation(
                "cannot batch an empty source sequence".into(),
            ));
        }
        if pose.joints() != joints {
            return Err(TensorError::ShapeMismatch {
                op: "build_pose_batch",
                lhs: vec![joints],
                rhs: vec![pose.joints()],
            });
        }
    }
    let size = pairs.len();
    let channels = 3 * joints;
    let out_width = horizon * (channels + 1);
    let src_len = pairs.iter().map(|(s, _)| s.len() + 1).max().unwrap();
    let frames = pairs.iter().map(|(_, p)| p.frames()).max().unwrap();

    let mut src = vec![crate::symbolic::PAD_INDEX; size * src_len];
    let mut src_lens = Vec::with_capacity(size);
    let mut dec_pose = vec![0.0f32; size * frames * channels];
    let mut dec_counter = vec![0.0f32; size * frames];
    let mut targets = vec![0.0f32; size * frames * out_width];
    let mut frame_lens = Vec::with_capacity(size);

    for (b, (s, pose)) in pairs.iter().enumerate() {
        let srow = &mut src[b * src_len..(b + 1) * src_len];
        srow[..s.len()].copy_from_slice(&s.indices);
        srow[s.len()] = EOS_INDEX;
        src_lens.push(s.len() + 1);

        let u_real = pose.frames();
        frame_lens.push(u_real);
        for i in 0..frames {
            let pose_row = &mut dec_pose[(b * frames + i) * channels..][..channels];
            if i == 0 {
                // start frame: zero pose, counter 0 (already zeroed)
            } else {
                let src_frame = pose.frame((i - 1).min(u_real - 1));
                pose_row.copy_from_slice(src_frame);
                dec_counter[b * frames + i] = pose.counters()[(i - 1).min(u_real - 1)];
            }
        }

        let stacked = future_prediction_targets(pose, horizon)?;
        for i in 0..frames {
            let dst = &mut targets[(b * frames + i) * out_width..][..out_width];
            let src_row = i.min(u_real - 1);
            dst.copy_from_slice(&stacked[src_row * out_width..(src_row + 1) * out_width]);
        }
    }

    Ok(PoseBatch {
        size,
        src_len,
        frames,
        channels,
        out_width,
        src,
        src_lens,
        dec_pose,
        dec_counter,
        targets,
        frame_lens,
    })
}

/// One decoding step's result: the predicted next frame and its progress
/// counter, clamped to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveOutput {
    pub pose: Vec<f32>,
    pub counter: f32,
}

/// How [`ProgressiveTransformer::produce`] terminates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProduceMode {
    /// Feed predicted counters back in; stop once the predicted counter
    /// reaches the stop threshold (or `max_frames`).
    FreeRunning,
    /// Feed the supplied ground-truth counter schedule; produce exactly that
    /// many frames.
    CounterDriven,
}

/// Options for sequence production.
#[derive(Debug, Clone)]
pub struct ProduceOptions<'a> {
    pub mode: ProduceMode,
    pub max_frames: usize,
    pub stop_threshold: f32,
    /// Required for [`ProduceMode::CounterDriven`].
    pub gt_counters: Option<&'a [f32]>,
    /// Erase joint content from decoder inputs (counter-only decoding).
    pub just_counter: bool,
}

impl Default for ProduceOptions<'_> {
    fn default() -> Self {
        ProduceOptions {
            mode: ProduceMode::FreeRunning,
            max_frames: 512,
            stop_threshold: 0.98,
            gt_counters: None,
            just_counter: false,
        }
    }
}

/// Transformer mapping symbolic sources to continuous pose sequences via
/// counter decoding. The readout is a plain linear map; no softmax.
#[derive(Debug)]
pub struct ProgressiveTransformer<T: Scalar> {
    cfg: ProgressiveConfig,
    src_embed_w: Tensor<T>,
    src_embed_b: Tensor<T>,
    joint_w: Tensor<T>,
    joint_b: Tensor<T>,
    counter_w: Tensor<T>,
    counter_b: Tensor<T>,
    encoder: Encoder<T>,
    decoder: Decoder<T>,
    out_w: Tensor<T>,
    out_b: Tensor<T>,
}

impl<T: Scalar> ProgressiveTransformer<T> {
    /// Parameter draw order: source embedding, joint embedding, counter
    /// embedding, encoder layers, decoder layers, output projection.
    pub fn new(cfg: ProgressiveConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let d = cfg.model.d_model;
        let d_joint = d - cfg.d_counter;
        Ok(ProgressiveTransformer {
            src_embed_w: xavier_init(&[cfg.src_vocab, d], rng)?,
            src_embed_b: Tensor::parameter(vec![T::zero(); d], &[d])?,
            joint_w: xavier_init(&[cfg.channels(), d_joint], rng)?,
            joint_b: Tensor::parameter(vec![T::zero(); d_joint], &[d_joint])?,
            counter_w: xavier_init(&[1, cfg.d_counter], rng)?,
            counter_b: Tensor::parameter(vec![T::zero(); cfg.d_counter], &[cfg.d_counter])?,
            encoder: Encoder::new(&cfg.model, rng)?,
            decoder: Decoder::new(&cfg.model, rng)?,
            out_w: xavier_init(&[d, cfg.out_width()], rng)?,
            out_b: Tensor::parameter(vec![T::zero(); cfg.out_width()], &[cfg.out_width()])?,
            cfg,
        })
    }

    pub fn config(&self) -> &ProgressiveConfig {
        &self.cfg
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("src_embed.weight".to_string(), self.src_embed_w.clone()),
            ("src_embed.bias".to_string(), self.src_embed_b.clone()),
            ("joint_embed.weight".to_string(), self.joint_w.clone()),
            ("joint_embed.bias".to_string(), self.joint_b.clone()),
            ("counter_embed.weight".to_string(), self.counter_w.clone()),
            ("counter_embed.bias".to_string(), self.counter_b.clone()),
        ];
        self.encoder.collect_parameters("encoder", &mut out);
        self.decoder.collect_parameters("decoder", &mut out);
        out.push(("out.weight".to_string(), self.out_w.clone()));
        out.push(("out.bias".to_string(), self.out_b.clone()));
        out
    }

    /// Joint embedding concatenated with the counter embedding.
    ///
    /// With `just_counter` the joint block is forced to exactly zero (the
    /// projection still participates in the graph so its parameters receive
    /// zero gradients rather than none).
    fn embed_decoder_inputs(
        &self,
        pose: &Tensor<T>,
        counters: &Tensor<T>,
        just_counter: bool,
    ) -> Result<Tensor<T>, TensorError> {
        let mut joint = pose.matmul(&self.joint_w)?.add_bias(&self.joint_b)?;
        if just_counter {
            joint = joint.scale(T::zero());
        }
        let counter = counters.matmul(&self.counter_w)?.add_bias(&self.counter_b)?;
        Tensor::concat_last(&[joint, counter])
    }

    fn embed_source_batch(
        &self,
        indices: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Tensor<T>, TensorError> {
        if len > self.cfg.model.max_seq_len {
            return Err(TensorError::InvalidParameter(format!(
                "source length {len} exceeds max_seq_len {}",
                self.cfg.model.max_seq_len
            )));
        }
        let emb = Tensor::embedding(&self.src_embed_w, indices, &[batch, len])?
            .add_bias(&self.src_embed_b)?;
        emb.add(&positional_encoding_batch(batch, len, self.cfg.model.d_model)?)
    }

    /// Encodes a single source sequence (EOS appended) into decoder memory
    /// of shape `[len, d_model]`.
    pub fn encode_source(&self, source: &SymbolicSequence) -> Result<Tensor<T>, TensorError> {
        if source.is_empty() {
            return Err(TensorError::ContractViolation(
                "cannot encode an empty source sequence".into(),
            ));
        }
        let mut indices = source.indices.clone();
        indices.push(EOS_INDEX);
        let len = indices.len();
        if len > self.cfg.model.max_seq_len {
            return Err(TensorError::InvalidParameter(format!(
                "source length {len} exceeds max_seq_len {}",
                self.cfg.model.max_seq_len
            )));
        }
        let emb = Tensor::embedding(&self.src_embed_w, &indices, &[len])?
            .add_bias(&self.src_embed_b)?
            .add(&positional_encoding_matrix(len, self.cfg.model.d_model)?)?;
        self.encoder.forward(&emb, None)
    }

    /// Teacher-forced readouts `[batch, frames, out_width]`.
    pub fn forward_outputs(
        &self,
        batch: &PoseBatch,
        just_counter: bool,
    ) -> Result<Tensor<T>, TensorError> {
        if batch.channels != self.cfg.channels() || batch.out_width != self.cfg.out_width() {
            return Err(TensorError::ShapeMismatch {
                op: "forward_outputs",
                lhs: vec![self.cfg.channels(), self.cfg.out_width()],
                rhs: vec![batch.channels, batch.out_width],
            });
        }
        check_counter_range(&batch.dec_counter)?;
        let src = self.embed_source_batch(&batch.src, batch.size, batch.src_len)?;
        let src_mask =
            AttnMask::key_padding(batch.size, batch.src_len, batch.src_len, &batch.src_lens)?;
        let memory = self.encoder.forward(&src, Some(&src_mask))?;

        let pose = Tensor::constant(
            batch.dec_pose.iter().map(|&v| T::from_f64(v as f64)).collect(),
            &[batch.size, batch.frames, batch.channels],
        )?;
        let counters = Tensor::constant(
            batch.dec_counter.iter().map(|&v| T::from_f64(v as f64)).collect(),
            &[batch.size, batch.frames, 1],
        )?;
        let x = self.embed_decoder_inputs(&pose, &counters, just_counter)?;
        let self_mask = AttnMask::subsequent(batch.frames);
        let memory_mask =
            AttnMask::key_padding(batch.size, batch.frames, batch.src_len, &batch.src_lens)?;
        let decoded = self
            .decoder
            .forward(&x, &memory, &self_mask, Some(&memory_mask))?;
        decoded.matmul(&self.out_w)?.add_bias(&self.out_b)
    }

    /// Training loss: sum over the batch of each sample's frame-mean squared
    /// error against the stacked targets (counter channels included).
    pub fn loss(&self, batch: &PoseBatch, just_counter: bool) -> Result<Tensor<T>, TensorError> {
        Ok(self.loss_with_outputs(batch, just_counter)?.0)
    }

    /// [`Self::loss`] along with the teacher-forced readouts it was computed
    /// from (for callers that also inspect predictions, e.g. to gather
    /// residual statistics).
    pub fn loss_with_outputs(
        &self,
        batch: &PoseBatch,
        just_counter: bool,
    ) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        let outputs = self.forward_outputs(batch, just_counter)?;
        let targets = Tensor::constant(
            batch.targets.iter().map(|&v| T::from_f64(v as f64)).collect(),
            &[batch.size, batch.frames, batch.out_width],
        )?;
        let mut weights = Vec::with_capacity(batch.size * batch.frames);
        for b in 0..batch.size {
            let w = T::from_f64(1.0 / batch.frame_lens[b] as f64);
            for i in 0..batch.frames {
                weights.push(if i < batch.frame_lens[b] { w } else { T::zero() });
            }
        }
        let loss = outputs.weighted_mse(&targets, &weights)?;
        Ok((loss, outputs))
    }

    /// One decoding step over the produced history. The history holds
    /// `len x channels` pose values and `len` counters (position 0 being the
    /// start frame). Returns the next-frame block of the readout.
    pub fn decode_step(
        &self,
        history_pose: &[f32],
        history_counters: &[f32],
        memory: &Tensor<T>,
        just_counter: bool,
    ) -> Result<ProgressiveOutput, TensorError> {
        let channels = self.cfg.channels();
        if history_counters.is_empty() || history_pose.len() != history_counters.len() * channels {
            return Err(TensorError::ContractViolation(format!(
                "history of {} pose values does not match {} counters",
                history_pose.len(),
                history_counters.len()
            )));
        }
        check_counter_range(history_counters)?;
        let len = history_counters.len();
        let pose = Tensor::constant(
            history_pose.iter().map(|&v| T::from_f64(v as f64)).collect(),
            &[len, channels],
        )?;
        let counters = Tensor::constant(
            history_counters.iter().map(|&v| T::from_f64(v as f64)).collect(),
            &[len, 1],
        )?;
        let x = self.embed_decoder_inputs(&pose, &counters, just_counter)?;
        let mask = AttnMask::subsequent(len);
        let decoded = self.decoder.forward(&x, memory, &mask, None)?;
        let out = decoded.matmul(&self.out_w)?.add_bias(&self.out_b)?;
        let values = out.values();
        let row = &values[(len - 1) * self.cfg.out_width()..];
        let pose_out: Vec<f32> = row[..channels]
            .iter()
            .map(|&v| Scalar::to_f64(v) as f32)
            .collect();
        let raw_counter = Scalar::to_f64(row[channels]) as f32;
        Ok(ProgressiveOutput {
            pose: pose_out,
            counter: raw_counter.clamp(0.0, 1.0),
        })
    }

    /// Autoregressive production from a symbolic source.
    pub fn produce(
        &self,
        source: &SymbolicSequence,
        opts: &ProduceOptions<'_>,
    ) -> Result<PoseSequence, TensorError> {
        if opts.max_frames == 0 {
            return Err(TensorError::InvalidParameter("max_frames must be positive".into()));
        }
        let gt_counters = match opts.mode {
            ProduceMode::CounterDriven => {
                let c = opts.gt_counters.ok_or_else(|| {
                    TensorError::ContractViolation(
                        "counter-driven production needs a counter schedule".into(),
                    )
                })?;
                if c.is_empty() {
                    return Err(TensorError::ContractViolation(
                        "counter-driven production needs a non-empty schedule".into(),
                    ));
                }
                Some(c)
            }
            ProduceMode::FreeRunning => None,
        };

        with_no_grad(|| {
            let memory = self.encode_source(source)?;
            let channels = self.cfg.channels();

            let mut history_pose = vec![0.0f32; channels];
            let mut history_counters = vec![0.0f32];
            let mut produced_pose: Vec<f32> = Vec::new();
            let mut produced_counters: Vec<f32> = Vec::new();

            loop {
                let step = self.decode_step(
                    &history_pose,
                    &history_counters,
                    &memory,
                    opts.just_counter,
                )?;
                produced_pose.extend_from_slice(&step.pose);
                produced_counters.push(step.counter);
                let produced = produced_counters.len();

                let stop = match gt_counters {
                    Some(schedule) => produced == schedule.len(),
                    None => step.counter >= opts.stop_threshold || produced == opts.max_frames,
                };
                if stop {
                    break;
                }

                history_pose.extend_from_slice(&step.pose);
                history_counters.push(match gt_counters {
                    Some(schedule) => schedule[produced - 1],
                    None => step.counter,
                });
            }

            PoseSequence::with_counters(self.cfg.joints, produced_pose, produced_counters)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg(joints: usize, horizon: usize) -> ProgressiveConfig {
        ProgressiveConfig {
            model: ModelConfig {
                num_layers: 1,
                num_heads: 2,
                d_model: 16,
                d_ff: 32,
                max_seq_len: 64,
            },
            src_vocab: 8,
            joints,
            d_counter: 4,
            horizon,
        }
    }

    fn seq(indices: &[usize]) -> SymbolicSequence {
        SymbolicSequence::new(indices.to_vec())
    }

    fn ramp_pose(joints: usize, frames: usize) -> PoseSequence {
        let channels = 3 * joints;
        let data: Vec<f32> = (0..frames * channels).map(|i| i as f32 * 0.1).collect();
        PoseSequence::new(joints, data).unwrap()
    }

    #[test]
    fn counter_schedule_is_uniform_and_ends_at_one() {
        assert_eq!(counter_schedule(4).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
        let c = counter_schedule(7).unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!(*c.last().unwrap(), 1.0);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(counter_schedule(0).is_err());
    }

    #[test]
    fn pose_sequence_validates_frame_alignment() {
        assert!(PoseSequence::new(2, vec![0.0; 12]).is_ok()); // 2 frames of 6
        assert!(PoseSequence::new(2, vec![0.0; 7]).is_err());
        assert!(PoseSequence::new(0, vec![]).is_err());
        assert!(PoseSequence::new(1, vec![]).is_err());
        let p = PoseSequence::new(1, vec![0.0; 9]).unwrap();
        assert_eq!(p.frames(), 3);
        assert_eq!(p.counters(), &[1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn mse_loss_matches_a_hand_computation() {
        let a = PoseSequence::with_counters(1, vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0], vec![0.5, 1.0])
            .unwrap();
        let b = PoseSequence::with_counters(1, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.5, 0.0])
            .unwrap();
        // Squared diffs: frame 0: 1 + counter 0; frame 1: 4 + counter 1.
        // Mean over 2 frames x 4 channels = 6/8.
        assert!((mse_loss(&a, &b).unwrap() - 0.75).abs() < 1e-12);
        assert!(mse_loss(&a, &ramp_pose(1, 3)).is_err());
        assert!(mse_loss(&a, &ramp_pose(2, 2)).is_err());
    }

    #[test]
    fn aligned_mse_repeats_the_last_produced_frame() {
        let produced =
            PoseSequence::with_counters(1, vec![1.0, 1.0, 1.0], vec![1.0]).unwrap();
        let reference = PoseSequence::new(1, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        // Reference counters are [0.5, 1.0]; produced counter 1.0 repeats.
        // Frame diffs are zero; counter diffs: (1-0.5)^2 + 0 = 0.25.
        let got = aligned_mse(&produced, &reference).unwrap();
        assert!((got - 0.25 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn batch_layout_shifts_inputs_and_stacks_targets() {
        let pose = ramp_pose(1, 3); // frames f0,f1,f2 with counters 1/3,2/3,1
        let s = seq(&[4, 5]);
        let batch = build_pose_batch(&[(&s, &pose)], 1).unwrap();
        assert_eq!(batch.frames, 3);
        assert_eq!(batch.channels, 3);
        assert_eq!(batch.out_width, 4);
        // Inputs: start, f0, f1.
        assert_eq!(&batch.dec_pose[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&batch.dec_pose[3..6], pose.frame(0));
        assert_eq!(&batch.dec_pose[6..9], pose.frame(1));
        assert_eq!(batch.dec_counter, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);
        // Targets: rows are [f_next || c_next].
        assert_eq!(&batch.targets[..3], pose.frame(0));
        assert_eq!(batch.targets[3], 1.0 / 3.0);
        assert_eq!(&batch.targets[8..11], pose.frame(2));
        assert_eq!(batch.targets[11], 1.0);
    }

    #[test]
    fn padded_batch_rows_repeat_real_data() {
        let p1 = ramp_pose(1, 2);
        let p2 = ramp_pose(1, 4);
        let s = seq(&[4]);
        let batch = build_pose_batch(&[(&s, &p1), (&s, &p2)], 1).unwrap();
        assert_eq!(batch.frames, 4);
        assert_eq!(batch.frame_lens, vec![2, 4]);
        // Sample 0 input rows past its 2 real frames repeat frame 0/1 data.
        let row3 = &batch.dec_pose[3 * 3..4 * 3];
        assert_eq!(row3, p1.frame(1));
    }

    #[test]
    fn future_stacking_repeats_the_final_frame_and_counter() {
        let pose = ramp_pose(1, 2);
        let s = seq(&[4]);
        let batch = build_pose_batch(&[(&s, &pose)], 3).unwrap();
        assert_eq!(batch.out_width, 12);
        // Position 1 predicts f1 then two copies of the final frame.
        let row = &batch.targets[12..24];
        assert_eq!(&row[..3], pose.frame(1));
        assert_eq!(row[3], 1.0);
        assert_eq!(&row[4..7], pose.frame(1));
        assert_eq!(row[7], 1.0);
        assert_eq!(&row[8..11], pose.frame(1));
        assert_eq!(row[11], 1.0);
    }

    #[test]
    fn batched_loss_is_the_sum_of_per_sample_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ProgressiveTransformer::<f32>::new(small_cfg(1, 1), &mut rng).unwrap();
        let p1 = ramp_pose(1, 2);
        let p2 = ramp_pose(1, 5);
        let s1 = seq(&[4, 6]);
        let s2 = seq(&[5]);
        let joint = model
            .loss(&build_pose_batch(&[(&s1, &p1), (&s2, &p2)], 1).unwrap(), false)
            .unwrap()
            .item()
            .unwrap() as f64;
        let a = model
            .loss(&build_pose_batch(&[(&s1, &p1)], 1).unwrap(), false)
            .unwrap()
            .item()
            .unwrap() as f64;
        let b = model
            .loss(&build_pose_batch(&[(&s2, &p2)], 1).unwrap(), false)
            .unwrap()
            .item()
            .unwrap() as f64;
        let rel = ((joint - (a + b)) / (a + b)).abs();
        assert!(rel < 1e-6, "batched {joint} vs sum {}", a + b);
    }

    #[test]
    fn gradients_reach_every_parameter_even_in_counter_only_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ProgressiveTransformer::<f32>::new(small_cfg(1, 2), &mut rng).unwrap();
        let pose = ramp_pose(1, 3);
        let s = seq(&[4]);
        let batch = build_pose_batch(&[(&s, &pose)], 2).unwrap();
        for just_counter in [false, true] {
            let loss = model.loss(&batch, just_counter).unwrap();
            loss.backward().unwrap();
            for (name, p) in model.parameters() {
                assert!(p.grad().is_some(), "missing gradient for {name} (jc={just_counter})");
                p.zero_grad();
            }
        }
    }

    #[test]
    fn counter_only_decoding_ignores_pose_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = ProgressiveTransformer::<f32>::new(small_cfg(1, 1), &mut rng).unwrap();
        let s = seq(&[4, 5]);
        let a = ramp_pose(1, 3);
        let b_data: Vec<f32> = a.data().iter().map(|v| v * -3.0 + 1.0).collect();
        let b = PoseSequence::new(1, b_data).unwrap();
        let ba = build_pose_batch(&[(&s, &a)], 1).unwrap();
        let bb = build_pose_batch(&[(&s, &b)], 1).unwrap();
        let oa = model.forward_outputs(&ba, true).unwrap().values();
        let ob = model.forward_outputs(&bb, true).unwrap().values();
        assert_eq!(oa, ob, "counter-only outputs must not depend on pose inputs");
        // Sanity: with joints enabled they do differ.
        let oa2 = model.forward_outputs(&ba, false).unwrap().values();
        let ob2 = model.forward_outputs(&bb, false).unwrap().values();
        assert_ne!(oa2, ob2);
    }

    #[test]
    fn counter_driven_production_matches_the_schedule_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = ProgressiveTransformer::<f32>::new(small_cfg(1, 1), &mut rng).unwrap();
        let schedule = counter_schedule(6).unwrap();
        let out = model
            .produce(
                &seq(&[4, 5]),
                &ProduceOptions {
                    mode: ProduceMode::CounterDriven,
                    gt_counters: Some(&schedule),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(out.frames(), 6);
        assert_eq!(out.joints(), 1);
        for &c in out.counters() {
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn free_running_production_respects_max_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let model = ProgressiveTransformer::<f32>::new(small_cfg(1, 1), &mut rng).unwrap();
        let out = model
            .produce(
                &seq(&[4]),
                &ProduceOptions {
                    max_frames: 7,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(out.frames() >= 1 && out.frames() <= 7);
        // Deterministic repetition.
        let again = model
            .produce(
                &seq(&[4]),
                &ProduceOptions {
                    max_frames: 7,
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn counter_driven_without_schedule_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = ProgressiveTransformer::<f32>::new(small_cfg(1, 1), &mut rng).unwrap();
        let err = model
            .produce(
                &seq(&[4]),
                &ProduceOptions {
                    mode: ProduceMode::CounterDriven,
                    ..Default::default()
                },
            )
            .unwrap_err();
        assert!(matches!(err, TensorError::ContractViolation(_)));
    }

    #[test]
    fn out_of_range_counters_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let model = ProgressiveTransformer::<f32>::new(small_cfg(1, 1), &mut rng).unwrap();
        let memory = model.encode_source(&seq(&[4])).unwrap();
        let err = model
            .decode_step(&[0.0; 3], &[1.5], &memory, false)
            .unwrap_err();
        assert!(matches!(err, TensorError::ContractViolation(_)));
        let mut batch = build_pose_batch(&[(&seq(&[4]), &ramp_pose(1, 2))], 1).unwrap();
        batch.dec_counter[1] = -0.25;
        assert!(model.forward_outputs(&batch, false).is_err());
    }

    #[test]
    fn non_finite_coordinates_are_rejected() {
        assert!(PoseSequence::new(1, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(PoseSequence::new(1, vec![0.0, f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn empty_source_cannot_be_encoded() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = ProgressiveTransformer::<f32>::new(small_cfg(1, 1), &mut rng).unwrap();
        assert!(model.encode_source(&seq(&[])).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_counter_widths() {
        let mut cfg = small_cfg(1, 1);
        cfg.d_counter = 16;
        assert!(cfg.validate().is_err());
        cfg.d_counter = 0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = small_cfg(1, 1);
        cfg2.horizon = 0;
        assert!(cfg2.validate().is_err());
    }
}
