//! Back-translation: recovering symbolic sequences from continuous poses.
//!
//! Produced pose sequences are judged by translating them back to text and
//! scoring that text against the reference sentence. The encoder embeds
//! frames the same way the progressive decoder does (joint embedding
//! concatenated with a counter embedding) and then adds sinusoidal
//! positional encodings: the counter alone carries only relative progress,
//! which cannot tell apart repeated segments of identical motion. The
//! decoder is the usual symbolic one with positional encoding.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    positional_encoding_batch, positional_encoding_matrix, AttnMask, Decoder, Encoder, ModelConfig,
};
use crate::progressive::PoseSequence;
use crate::symbolic::{argmax, SymbolicSequence, BOS_INDEX, EOS_INDEX, PAD_INDEX, UNK_INDEX};
use crate::tensor::{with_no_grad, xavier_init, Scalar, Tensor, TensorError};

/// Hyperparameters of a [`Pose2TextTransformer`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pose2TextConfig {
    pub model: ModelConfig,
    pub joints: usize,
    /// Width of the counter embedding inside `d_model`.
    pub d_counter: usize,
    pub tgt_vocab: usize,
}

impl Pose2TextConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        self.model.validate()?;
        if self.joints == 0 {
            return Err(TensorError::InvalidParameter("joints must be positive".into()));
        }
        if self.d_counter == 0 || self.d_counter >= self.model.d_model {
            return Err(TensorError::InvalidParameter(format!(
                "d_counter {} must lie strictly between 0 and d_model {}",
                self.d_counter, self.model.d_model
            )));
        }
        if self.tgt_vocab <= UNK_INDEX {
            return Err(TensorError::InvalidParameter(
                "vocabulary must at least hold the reserved tokens".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }
}

/// A padded batch of (pose source, symbolic target) pairs. Padded encoder
/// frames are zero and masked out through `frame_lens`; target layout
/// matches the symbolic batch (`<bos>`-shifted inputs, `<eos>`-closed
/// outputs, `<pad>`-filled tails).
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2TextBatch {
    pub size: usize,
    pub frames: usize,
    pub channels: usize,
    pub enc_pose: Vec<f32>,
    pub enc_counter: Vec<f32>,
    pub frame_lens: Vec<usize>,
    pub tgt_len: usize,
    pub tgt_input: Vec<usize>,
    pub tgt_output: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

/// Lays out `(pose, target)` pairs into one padded batch.
pub fn build_pose2text_batch(
    pairs: &[(&PoseSequence, &SymbolicSequence)],
) -> Result<Pose2TextBatch, TensorError> {
    if pairs.is_empty() {
        return Err(TensorError::ContractViolation(
            "cannot batch zero pose-text pairs".into(),
        ));
    }
    let joints = pairs[0].0.joints();
    for (pose, tgt) in pairs {
        if pose.joints() != joints {
            return Err(TensorError::ShapeMismatch {
                op: "build_pose2text_batch",
                lhs: vec![joints],
                rhs: vec![pose.joints()],
            });
        }
        if tgt.is_empty() {
            return Err(TensorError::ContractViolation(
                "cannot batch an empty target sequence".into(),
            ));
        }
    }
    let size = pairs.len();
    let channels = 3 * joints;
    let frames = pairs.iter().map(|(p, _)| p.frames()).max().unwrap();
    let tgt_len = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap();

    let mut enc_pose = vec![0.0f32; size * frames * channels];
    let mut enc_counter = vec![0.0f32; size * frames];
    let mut frame_lens = Vec::with_capacity(size);
    let mut tgt_input = vec![PAD_INDEX; size * tgt_len];
    let mut tgt_output = vec![PAD_INDEX; size * tgt_len];
    let mut tgt_lens = Vec::with_capacity(size);

    for (b, (pose, tgt)) in pairs.iter().enumerate() {
        let u_real = pose.frames();
        frame_lens.push(u_real);
        for u in 0..u_real {
            enc_pose[(b * frames + u) * channels..][..channels].copy_from_slice(pose.frame(u));
            enc_counter[b * frames + u] = pose.counters()[u];
        }

        let ti = &mut tgt_input[b * tgt_len..(b + 1) * tgt_len];
        ti[0] = BOS_INDEX;
        ti[1..=tgt.len()].copy_from_slice(&tgt.indices);
        let to = &mut tgt_output[b * tgt_len..(b + 1) * tgt_len];
        to[..tgt.len()].copy_from_slice(&tgt.indices);
        to[tgt.len()] = EOS_INDEX;
        tgt_lens.push(tgt.len() + 1);
    }

    Ok(Pose2TextBatch {
        size,
        frames,
        channels,
        enc_pose,
        enc_counter,
        frame_lens,
        tgt_len,
        tgt_input,
        tgt_output,
        tgt_lens,
    })
}

/// Transformer mapping continuous pose sequences back to symbolic output.
#[derive(Debug)]
pub struct Pose2TextTransformer<T: Scalar> {
    cfg: Pose2TextConfig,
    joint_w: Tensor<T>,
    joint_b: Tensor<T>,
    counter_w: Tensor<T>,
    counter_b: Tensor<T>,
    tgt_embed_w: Tensor<T>,
    tgt_embed_b: Tensor<T>,
    encoder: Encoder<T>,
    decoder: Decoder<T>,
    out_w: Tensor<T>,
    out_b: Tensor<T>,
}

impl<T: Scalar> Pose2TextTransformer<T> {
    /// Parameter draw order: joint embedding, counter embedding, target
    /// embedding, encoder layers, decoder layers, output projection.
    pub fn new(cfg: Pose2TextConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let d = cfg.model.d_model;
        let d_joint = d - cfg.d_counter;
        Ok(Pose2TextTransformer {
            joint_w: xavier_init(&[cfg.channels(), d_joint], rng)?,
            joint_b: Tensor::parameter(vec![T::zero(); d_joint], &[d_joint])?,
            counter_w: xavier_init(&[1, cfg.d_counter], rng)?,
            counter_b: Tensor::parameter(vec![T::zero(); cfg.d_counter], &[cfg.d_counter])?,
            tgt_embed_w: xavier_init(&[cfg.tgt_vocab, d], rng)?,
            tgt_embed_b: Tensor::parameter(vec![T::zero(); d], &[d])?,
            encoder: Encoder::new(&cfg.model, rng)?,
            decoder: Decoder::new(&cfg.model, rng)?,
            out_w: xavier_init(&[d, cfg.tgt_vocab], rng)?,
            out_b: Tensor::parameter(vec![T::zero(); cfg.tgt_vocab], &[cfg.tgt_vocab])?,
            cfg,
        })
    }

    pub fn config(&self) -> &Pose2TextConfig {
        &self.cfg
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("joint_embed.weight".to_string(), self.joint_w.clone()),
            ("joint_embed.bias".to_string(), self.joint_b.clone()),
            ("counter_embed.weight".to_string(), self.counter_w.clone()),
            ("counter_embed.bias".to_string(), self.counter_b.clone()),
            ("tgt_embed.weight".to_string(), self.tgt_embed_w.clone()),
            ("tgt_embed.bias".to_string(), self.tgt_embed_b.clone()),
        ];
        self.encoder.collect_parameters("encoder", &mut out);
        self.decoder.collect_parameters("decoder", &mut out);
        out.push(("out.weight".to_string(), self.out_w.clone()));
        out.push(("out.bias".to_string(), self.out_b.clone()));
        out
    }

    fn embed_frames(&self, pose: &Tensor<T>, counters: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let joint = pose.matmul(&self.joint_w)?.add_bias(&self.joint_b)?;
        let counter = counters.matmul(&self.counter_w)?.add_bias(&self.counter_b)?;
        let embedded = Tensor::concat_last(&[joint, counter])?;
        let frames = embedded.shape()[embedded.shape().len() - 2];
        let pe = match embedded.shape().len() {
            3 => positional_encoding_batch(embedded.shape()[0], frames, self.cfg.model.d_model)?,
            _ => positional_encoding_matrix(frames, self.cfg.model.d_model)?,
        };
        embedded.add(&pe)
    }

    fn check_frames(&self, frames: usize) -> Result<(), TensorError> {
        if frames > self.cfg.model.max_seq_len {
            return Err(TensorError::InvalidParameter(format!(
                "pose length {frames} exceeds max_seq_len {}",
                self.cfg.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Teacher-forced logits `[batch, tgt_len, tgt_vocab]`.
    pub fn forward_logits(&self, batch: &Pose2TextBatch) -> Result<Tensor<T>, TensorError> {
        if batch.channels != self.cfg.channels() {
            return Err(TensorError::ShapeMismatch {
                op: "forward_logits",
                lhs: vec![self.cfg.channels()],
                rhs: vec![batch.channels],
            });
        }
        self.check_frames(batch.frames)?;
        crate::progressive::check_counter_range(&batch.enc_counter)?;
        let pose = Tensor::constant(
            batch.enc_pose.iter().map(|&v| T::from_f64(v as f64)).collect(),
            &[batch.size, batch.frames, batch.channels],
        )?;
        let counters = Tensor::constant(
            batch.enc_counter.iter().map(|&v| T::from_f64(v as f64)).collect(),
            &[batch.size, batch.frames, 1],
        )?;
        let src = self.embed_frames(&pose, &counters)?;
        let src_mask =
            AttnMask::key_padding(batch.size, batch.frames, batch.frames, &batch.frame_lens)?;
        let memory = self.encoder.forward(&src, Some(&src_mask))?;

        let tgt = Tensor::embedding(
            &self.tgt_embed_w,
            &batch.tgt_input,
            &[batch.size, batch.tgt_len],
        )?
        .add_bias(&self.tgt_embed_b)?
        .add(&positional_encoding_batch(
            batch.size,
            batch.tgt_len,
            self.cfg.model.d_model,
        )?)?;
        let self_mask = AttnMask::subsequent(batch.tgt_len);
        let memory_mask =
            AttnMask::key_padding(batch.size, batch.tgt_len, batch.frames, &batch.frame_lens)?;
        let decoded = self
            .decoder
            .forward(&tgt, &memory, &self_mask, Some(&memory_mask))?;
        decoded.matmul(&self.out_w)?.add_bias(&self.out_b)
    }

    /// Training loss: sum over the batch of each sample's token-mean
    /// cross-entropy (padding excluded).
    pub fn loss(&self, batch: &Pose2TextBatch) -> Result<Tensor<T>, TensorError> {
        let logits = self.forward_logits(batch)?;
        let mut weights = Vec::with_capacity(batch.size * batch.tgt_len);
        for b in 0..batch.size {
            let w = T::from_f64(1.0 / batch.tgt_lens[b] as f64);
            for n in 0..batch.tgt_len {
                weights.push(if n < batch.tgt_lens[b] { w } else { T::zero() });
            }
        }
        logits.cross_entropy_weighted(&batch.tgt_output, &weights)
    }

    /// Teacher-forced token accuracy over non-padding positions.
    pub fn accuracy(&self, batch: &Pose2TextBatch) -> Result<f64, TensorError> {
        with_no_grad(|| {
            let logits = self.forward_logits(batch)?;
            let values = logits.values();
            let vocab = self.cfg.tgt_vocab;
            let mut correct = 0usize;
            let mut total = 0usize;
            for b in 0..batch.size {
                for n in 0..batch.tgt_lens[b] {
                    let row = &values[((b * batch.tgt_len) + n) * vocab..][..vocab];
                    if argmax(row) == batch.tgt_output[b * batch.tgt_len + n] {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            Ok(correct as f64 / total as f64)
        })
    }

    /// Greedy decoding of a single pose sequence into symbolic indices
    /// (reserved markers stripped).
    pub fn translate_greedy(
        &self,
        pose: &PoseSequence,
        max_len: usize,
    ) -> Result<SymbolicSequence, TensorError> {
        if pose.joints() != self.cfg.joints {
            return Err(TensorError::ShapeMismatch {
                op: "translate_greedy",
                lhs: vec![self.cfg.joints],
                rhs: vec![pose.joints()],
            });
        }
        self.check_frames(pose.frames())?;
        crate::progressive::check_counter_range(pose.counters())?;
        with_no_grad(|| {
            let channels = self.cfg.channels();
            let frames = pose.frames();
            let pose_t = Tensor::constant(
                pose.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
                &[frames, channels],
            )?;
            let counters_t = Tensor::constant(
                pose.counters().iter().map(|&v| T::from_f64(v as f64)).collect(),
                &[frames, 1],
            )?;
            let src = self.embed_frames(&pose_t, &counters_t)?;
            let memory = self.encoder.forward(&src, None)?;

            let mut out = Vec::new();
            let mut ys = vec![BOS_INDEX];
            for _ in 0..max_len {
                let tgt = Tensor::embedding(&self.tgt_embed_w, &ys, &[ys.len()])?
                    .add_bias(&self.tgt_embed_b)?
                    .add(&positional_encoding_matrix(ys.len(), self.cfg.model.d_model)?)?;
                let mask = AttnMask::subsequent(ys.len());
                let dec = self.decoder.forward(&tgt, &memory, &mask, None)?;
                let logits = dec.matmul(&self.out_w)?.add_bias(&self.out_b)?;
                let values = logits.values();
                let vocab = self.cfg.tgt_vocab;
                let last = &values[(ys.len() - 1) * vocab..ys.len() * vocab];
                let next = argmax(last);
                if next == EOS_INDEX {
                    break;
                }
                out.push(next);
                ys.push(next);
            }
            Ok(SymbolicSequence::new(out))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg(joints: usize, tgt_vocab: usize) -> Pose2TextConfig {
        Pose2TextConfig {
            model: ModelConfig {
                num_layers: 1,
                num_heads: 2,
                d_model: 16,
                d_ff: 32,
                max_seq_len: 64,
            },
            joints,
            d_counter: 4,
            tgt_vocab,
        }
    }

    fn ramp_pose(joints: usize, frames: usize) -> PoseSequence {
        let channels = 3 * joints;
        let data: Vec<f32> = (0..frames * channels).map(|i| i as f32 * 0.05).collect();
        PoseSequence::new(joints, data).unwrap()
    }

    fn seq(indices: &[usize]) -> SymbolicSequence {
        SymbolicSequence::new(indices.to_vec())
    }

    #[test]
    fn batch_layout_pads_frames_and_shifts_targets() {
        let p1 = ramp_pose(1, 2);
        let p2 = ramp_pose(1, 3);
        let t1 = seq(&[4, 5]);
        let t2 = seq(&[6]);
        let b = build_pose2text_batch(&[(&p1, &t1), (&p2, &t2)]).unwrap();
        assert_eq!(b.frames, 3);
        assert_eq!(b.tgt_len, 3);
        assert_eq!(b.frame_lens, vec![2, 3]);
        assert_eq!(b.tgt_lens, vec![3, 2]);
        // Sample 0's third frame slot is zero padding.
        assert_eq!(&b.enc_pose[2 * 3..3 * 3], &[0.0, 0.0, 0.0]);
        assert_eq!(b.enc_counter[..3], [0.5, 1.0, 0.0]);
        assert_eq!(&b.tgt_input[..3], &[BOS_INDEX, 4, 5]);
        assert_eq!(&b.tgt_output[..3], &[4, 5, EOS_INDEX]);
        assert_eq!(&b.tgt_input[3..], &[BOS_INDEX, 6, PAD_INDEX]);
        assert_eq!(&b.tgt_output[3..], &[6, EOS_INDEX, PAD_INDEX]);
    }

    #[test]
    fn empty_targets_and_mixed_joint_counts_are_rejected() {
        let p = ramp_pose(1, 2);
        assert!(build_pose2text_batch(&[]).is_err());
        assert!(build_pose2text_batch(&[(&p, &seq(&[]))]).is_err());
        let p2 = ramp_pose(2, 2);
        assert!(build_pose2text_batch(&[(&p, &seq(&[4])), (&p2, &seq(&[4]))]).is_err());
    }

    #[test]
    fn batched_loss_is_the_sum_of_per_sample_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = Pose2TextTransformer::<f32>::new(small_cfg(1, 8), &mut rng).unwrap();
        let p1 = ramp_pose(1, 2);
        let p2 = ramp_pose(1, 5);
        let t1 = seq(&[4, 6, 5]);
        let t2 = seq(&[7]);
        let joint = model
            .loss(&build_pose2text_batch(&[(&p1, &t1), (&p2, &t2)]).unwrap())
            .unwrap()
            .item()
            .unwrap() as f64;
        let a = model
            .loss(&build_pose2text_batch(&[(&p1, &t1)]).unwrap())
            .unwrap()
            .item()
            .unwrap() as f64;
        let b = model
            .loss(&build_pose2text_batch(&[(&p2, &t2)]).unwrap())
            .unwrap()
            .item()
            .unwrap() as f64;
        let rel = ((joint - (a + b)) / (a + b)).abs();
        assert!(rel < 1e-6, "batched {joint} vs sum {}", a + b);
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = Pose2TextTransformer::<f32>::new(small_cfg(1, 8), &mut rng).unwrap();
        let batch =
            build_pose2text_batch(&[(&ramp_pose(1, 3), &seq(&[4, 5]))]).unwrap();
        model.loss(&batch).unwrap().backward().unwrap();
        for (name, p) in model.parameters() {
            assert!(p.grad().is_some(), "missing gradient for {name}");
        }
    }

    #[test]
    fn accuracy_is_a_fraction_of_non_padding_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = Pose2TextTransformer::<f32>::new(small_cfg(1, 8), &mut rng).unwrap();
        let batch = build_pose2text_batch(&[
            (&ramp_pose(1, 2), &seq(&[4, 5])),
            (&ramp_pose(1, 4), &seq(&[6])),
        ])
        .unwrap();
        let acc = model.accuracy(&batch).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn greedy_translation_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = Pose2TextTransformer::<f32>::new(small_cfg(1, 8), &mut rng).unwrap();
        let pose = ramp_pose(1, 4);
        let a = model.translate_greedy(&pose, 12).unwrap();
        let b = model.translate_greedy(&pose, 12).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 12);
        // The end marker terminates decoding and never appears in the output.
        assert!(a.indices.iter().all(|&i| i != EOS_INDEX));
    }

    #[test]
    fn joint_count_mismatch_is_rejected_at_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let model = Pose2TextTransformer::<f32>::new(small_cfg(1, 8), &mut rng).unwrap();
        assert!(model.translate_greedy(&ramp_pose(2, 3), 4).is_err());
    }

    #[test]
    fn config_validation_rejects_degenerate_widths() {
        let mut cfg = small_cfg(1, 8);
        cfg.d_counter = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(1, 8);
        cfg.tgt_vocab = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(1, 8);
        cfg.joints = 0;
        assert!(cfg.validate().is_err());
    }
}
