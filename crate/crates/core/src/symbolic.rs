//! Discrete sequence-to-sequence translation: vocabulary handling, padded
//! batches, and the symbolic transformer (used for text-to-gloss and as the
//! text decoder of the back-translation evaluator).

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{
    positional_encoding_batch, positional_encoding_matrix, AttnMask, Decoder, Encoder, ModelConfig,
};
use crate::tensor::{with_no_grad, xavier_init, Scalar, Tensor, TensorError};

pub const PAD_INDEX: usize = 0;
pub const BOS_INDEX: usize = 1;
pub const EOS_INDEX: usize = 2;
pub const UNK_INDEX: usize = 3;

/// Reserved tokens, always occupying indices 0..4 in this order.
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabularyError {
    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
}

/// Bijective token <-> index map with the four reserved tokens first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenised sentences. Regular tokens are
    /// assigned indices in first-seen order, which makes the result
    /// deterministic for a fixed corpus ordering. Tokens that collide with
    /// the reserved names are ignored.
    pub fn from_corpus<'a, S, I>(sentences: I) -> Self
    where
        S: AsRef<str> + 'a,
        I: IntoIterator<Item = &'a [S]>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for sentence in sentences {
            for token in sentence {
                let token = token.as_ref();
                if !index.contains_key(token) {
                    index.insert(token.to_string(), tokens.len());
                    tokens.push(token.to_string());
                }
            }
        }
        Vocabulary { tokens, index }
    }

    /// Restores a vocabulary from an explicit ordered token list (checkpoint
    /// or file form). The list must start with the reserved tokens and
    /// contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabularyError> {
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(VocabularyError::Malformed(format!(
                "token list of length {} lacks the reserved prefix",
                tokens.len()
            )));
        }
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(VocabularyError::Malformed(format!(
                    "reserved slot {i} holds \"{}\", expected \"{want}\"",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabularyError::Malformed(format!(
                    "duplicate token \"{t}\""
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Index of `token`, or the unknown index when absent.
    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn token_at(&self, index: usize) -> Result<&str, VocabularyError> {
        self.tokens
            .get(index)
            .map(|s| s.as_str())
            .ok_or(VocabularyError::IndexOutOfRange {
                index,
                size: self.tokens.len(),
            })
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> SymbolicSequence {
        SymbolicSequence::new(words.iter().map(|w| self.index_of(w.as_ref())).collect())
    }

    pub fn decode(&self, seq: &SymbolicSequence) -> Result<Vec<String>, VocabularyError> {
        seq.indices
            .iter()
            .map(|&i| self.token_at(i).map(str::to_string))
            .collect()
    }
}

/// A sequence of vocabulary indices (no implicit BOS/EOS markers).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymbolicSequence {
    pub indices: Vec<usize>,
}

impl SymbolicSequence {
    pub fn new(indices: Vec<usize>) -> Self {
        SymbolicSequence { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A padded batch of symbolic pairs.
///
/// Sources are stored with a trailing EOS and padded with PAD; `src_lens`
/// counts the real positions including that EOS. Target inputs are
/// `BOS + tokens`, target outputs `tokens + EOS`, both PAD-padded, with
/// `tgt_lens` counting real positions including the EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolicBatch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub tgt_input: Vec<usize>,
    pub tgt_output: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

/// Lays out `(source, target)` pairs into one padded batch.
pub fn build_symbolic_batch(
    pairs: &[(&SymbolicSequence, &SymbolicSequence)],
) -> Result<SymbolicBatch, TensorError> {
    if pairs.is_empty() {
        return Err(TensorError::ContractViolation(
            "cannot batch zero sequence pairs".into(),
        ));
    }
    for (src, tgt) in pairs {
        if src.is_empty() || tgt.is_empty() {
            return Err(TensorError::ContractViolation(
                "cannot batch an empty sequence".into(),
            ));
        }
    }
    let size = pairs.len();
    let src_len = pairs.iter().map(|(s, _)| s.len() + 1).max().unwrap();
    let tgt_len = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap();

    let mut src = vec![PAD_INDEX; size * src_len];
    let mut tgt_input = vec![PAD_INDEX; size * tgt_len];
    let mut tgt_output = vec![PAD_INDEX; size * tgt_len];
    let mut src_lens = Vec::with_capacity(size);
    let mut tgt_lens = Vec::with_capacity(size);

    for (b, (s, t)) in pairs.iter().enumerate() {
        let srow = &mut src[b * src_len..(b + 1) * src_len];
        srow[..s.len()].copy_from_slice(&s.indices);
        srow[s.len()] = EOS_INDEX;
        src_lens.push(s.len() + 1);

        let ti = &mut tgt_input[b * tgt_len..(b + 1) * tgt_len];
        ti[0] = BOS_INDEX;
        ti[1..=t.len()].copy_from_slice(&t.indices);
        let to = &mut tgt_output[b * tgt_len..(b + 1) * tgt_len];
        to[..t.len()].copy_from_slice(&t.indices);
        to[t.len()] = EOS_INDEX;
        tgt_lens.push(t.len() + 1);
    }

    Ok(SymbolicBatch {
        size,
        src_len,
        tgt_len,
        src,
        src_lens,
        tgt_input,
        tgt_output,
        tgt_lens,
    })
}

/// Mean cross-entropy of `logits` (`[len, vocab]`) against a target
/// sequence, averaged over non-PAD positions. A target consisting solely of
/// padding has no defined loss and is an error.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &SymbolicSequence,
) -> Result<Tensor<T>, TensorError> {
    if logits.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "cross_entropy_loss",
            expected: 2,
            shape: logits.shape().to_vec(),
        });
    }
    if logits.shape()[0] != targets.len() {
        return Err(TensorError::ContractViolation(format!(
            "{} logit rows for {} targets",
            logits.shape()[0],
            targets.len()
        )));
    }
    let real = targets.indices.iter().filter(|&&t| t != PAD_INDEX).count();
    if real == 0 {
        return Err(TensorError::ContractViolation(
            "cross-entropy over padding only".into(),
        ));
    }
    let w = T::from_f64(1.0 / real as f64);
    let weights: Vec<T> = targets
        .indices
        .iter()
        .map(|&t| if t == PAD_INDEX { T::zero() } else { w })
        .collect();
    logits.cross_entropy_weighted(&targets.indices, &weights)
}

/// Index of the row maximum; ties resolve to the lowest index.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Hyperparameters of a [`SymbolicTransformer`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolicConfig {
    pub model: ModelConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl SymbolicConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        self.model.validate()?;
        if self.src_vocab <= UNK_INDEX || self.tgt_vocab <= UNK_INDEX {
            return Err(TensorError::InvalidParameter(
                "vocabulary must at least hold the reserved tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder-decoder transformer over symbolic sequences with linear input
/// embeddings, sinusoidal positions, and a linear readout to target logits.
#[derive(Debug)]
pub struct SymbolicTransformer<T: Scalar> {
    cfg: SymbolicConfig,
    src_embed_w: Tensor<T>,
    src_embed_b: Tensor<T>,
    tgt_embed_w: Tensor<T>,
    tgt_embed_b: Tensor<T>,
    encoder: Encoder<T>,
    decoder: Decoder<T>,
    out_w: Tensor<T>,
    out_b: Tensor<T>,
}

impl<T: Scalar> SymbolicTransformer<T> {
    /// Parameter draw order: source embedding, target embedding, encoder
    /// layers, decoder layers, output projection.
    pub fn new(cfg: SymbolicConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let d = cfg.model.d_model;
        Ok(SymbolicTransformer {
            src_embed_w: xavier_init(&[cfg.src_vocab, d], rng)?,
            src_embed_b: Tensor::parameter(vec![T::zero(); d], &[d])?,
            tgt_embed_w: xavier_init(&[cfg.tgt_vocab, d], rng)?,
            tgt_embed_b: Tensor::parameter(vec![T::zero(); d], &[d])?,
            encoder: Encoder::new(&cfg.model, rng)?,
            decoder: Decoder::new(&cfg.model, rng)?,
            out_w: xavier_init(&[d, cfg.tgt_vocab], rng)?,
            out_b: Tensor::parameter(vec![T::zero(); cfg.tgt_vocab], &[cfg.tgt_vocab])?,
            cfg,
        })
    }

    pub fn config(&self) -> &SymbolicConfig {
        &self.cfg
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("src_embed.weight".to_string(), self.src_embed_w.clone()),
            ("src_embed.bias".to_string(), self.src_embed_b.clone()),
            ("tgt_embed.weight".to_string(), self.tgt_embed_w.clone()),
            ("tgt_embed.bias".to_string(), self.tgt_embed_b.clone()),
        ];
        self.encoder.collect_parameters("encoder", &mut out);
        self.decoder.collect_parameters("decoder", &mut out);
        out.push(("out.weight".to_string(), self.out_w.clone()));
        out.push(("out.bias".to_string(), self.out_b.clone()));
        out
    }

    fn check_len(&self, len: usize) -> Result<(), TensorError> {
        if len > self.cfg.model.max_seq_len {
            return Err(TensorError::InvalidParameter(format!(
                "sequence length {len} exceeds max_seq_len {}",
                self.cfg.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Token embedding plus positional encoding for a padded index block of
    /// `batch` rows by `len` positions.
    fn embed(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        indices: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Tensor<T>, TensorError> {
        self.check_len(len)?;
        let emb = Tensor::embedding(weight, indices, &[batch, len])?.add_bias(bias)?;
        emb.add(&positional_encoding_batch(batch, len, self.cfg.model.d_model)?)
    }

    /// Teacher-forced logits `[batch, tgt_len, tgt_vocab]`.
    pub fn forward_logits(&self, batch: &SymbolicBatch) -> Result<Tensor<T>, TensorError> {
        let src = self.embed(
            &self.src_embed_w,
            &self.src_embed_b,
            &batch.src,
            batch.size,
            batch.src_len,
        )?;
        let src_mask =
            AttnMask::key_padding(batch.size, batch.src_len, batch.src_len, &batch.src_lens)?;
        let memory = self.encoder.forward(&src, Some(&src_mask))?;

        let tgt = self.embed(
            &self.tgt_embed_w,
            &self.tgt_embed_b,
            &batch.tgt_input,
            batch.size,
            batch.tgt_len,
        )?;
        let self_mask = AttnMask::subsequent(batch.tgt_len);
        let memory_mask =
            AttnMask::key_padding(batch.size, batch.tgt_len, batch.src_len, &batch.src_lens)?;
        let decoded = self
            .decoder
            .forward(&tgt, &memory, &self_mask, Some(&memory_mask))?;
        decoded.matmul(&self.out_w)?.add_bias(&self.out_b)
    }

    /// Training loss: the sum over the batch of each sample's mean
    /// cross-entropy over its real target positions.
    pub fn loss(&self, batch: &SymbolicBatch) -> Result<Tensor<T>, TensorError> {
        let logits = self.forward_logits(batch)?;
        let mut weights = Vec::with_capacity(batch.size * batch.tgt_len);
        for b in 0..batch.size {
            let w = T::from_f64(1.0 / batch.tgt_lens[b] as f64);
            for pos in 0..batch.tgt_len {
                weights.push(if pos < batch.tgt_lens[b] { w } else { T::zero() });
            }
        }
        logits.cross_entropy_weighted(&batch.tgt_output, &weights)
    }

    /// Teacher-forced token accuracy over real target positions.
    pub fn accuracy(&self, batch: &SymbolicBatch) -> Result<f64, TensorError> {
        with_no_grad(|| {
            let logits = self.forward_logits(batch)?;
            let values = logits.values();
            let vocab = self.cfg.tgt_vocab;
            let mut correct = 0usize;
            let mut total = 0usize;
            for b in 0..batch.size {
                for pos in 0..batch.tgt_lens[b] {
                    let row = b * batch.tgt_len + pos;
                    let pred = argmax(&values[row * vocab..(row + 1) * vocab]);
                    total += 1;
                    if pred == batch.tgt_output[row] {
                        correct += 1;
                    }
                }
            }
            Ok(correct as f64 / total as f64)
        })
    }

    /// Greedy decoding: starting from BOS, repeatedly append the argmax
    /// token (ties to the lowest index) until EOS or `max_len` tokens. The
    /// returned sequence contains neither BOS nor EOS.
    pub fn translate(
        &self,
        source: &SymbolicSequence,
        max_len: usize,
    ) -> Result<SymbolicSequence, TensorError> {
        if source.is_empty() {
            return Err(TensorError::ContractViolation(
                "cannot translate an empty source sequence".into(),
            ));
        }
        with_no_grad(|| {
            let mut src = source.indices.clone();
            src.push(EOS_INDEX);
            let src_t = self.embed_single(&self.src_embed_w, &self.src_embed_b, &src)?;
            let memory = self.encoder.forward(&src_t, None)?;

            let mut out = Vec::new();
            let mut ys = vec![BOS_INDEX];
            for _ in 0..max_len {
                let tgt = self.embed_single(&self.tgt_embed_w, &self.tgt_embed_b, &ys)?;
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
                if ys.len() > self.cfg.model.max_seq_len {
                    break;
                }
            }
            Ok(SymbolicSequence::new(out))
        })
    }

    fn embed_single(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        indices: &[usize],
    ) -> Result<Tensor<T>, TensorError> {
        self.check_len(indices.len())?;
        let emb = Tensor::embedding(weight, indices, &[indices.len()])?.add_bias(bias)?;
        emb.add(&positional_encoding_matrix(
            indices.len(),
            self.cfg.model.d_model,
        )?)
    }
}
