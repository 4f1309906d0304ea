//! Transformer building blocks: sinusoidal positional encoding, attention
//! masks, scaled dot-product and multi-head attention, position-wise
//! feed-forward nets, and post-norm encoder/decoder stacks.
//!
//! Masking is additive: disallowed positions receive a large negative offset
//! before the softmax, so their weights underflow to exactly zero and masked
//! values never contribute to the mix.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{xavier_init, Scalar, Tensor, TensorError};

/// Pre-softmax score offset for masked positions. Large enough that
/// `exp(score - max)` underflows to exactly 0 for any realistic score.
const MASK_OFFSET: f64 = -1e9;

/// Shared hyperparameters of the transformer stacks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 8,
            d_model: 256,
            d_ff: 1024,
            max_seq_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(TensorError::InvalidParameter(
                "model dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(TensorError::InvalidParameter(format!(
                "d_model must be even for sinusoidal positions, got {}",
                self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(TensorError::InvalidParameter(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Sinusoidal position code: channel `2i` is `sin(pos / 10000^(2i/d))` and
/// channel `2i+1` is `cos` of the same angle.
pub fn positional_encoding(pos: usize, d_model: usize) -> Result<Vec<f64>, TensorError> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(TensorError::InvalidParameter(format!(
            "positional encoding needs a positive even dimension, got {d_model}"
        )));
    }
    let mut out = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Constant `[len, d_model]` tensor of position codes for positions `0..len`.
pub fn positional_encoding_matrix<T: Scalar>(
    len: usize,
    d_model: usize,
) -> Result<Tensor<T>, TensorError> {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        data.extend(positional_encoding(pos, d_model)?.into_iter().map(T::from_f64));
    }
    Tensor::constant(data, &[len, d_model])
}

/// The same position codes tiled across a batch: `[batch, len, d_model]`.
pub fn positional_encoding_batch<T: Scalar>(
    batch: usize,
    len: usize,
    d_model: usize,
) -> Result<Tensor<T>, TensorError> {
    let row_block: Vec<T> = positional_encoding_matrix::<T>(len, d_model)?.values();
    let mut data = Vec::with_capacity(batch * row_block.len());
    for _ in 0..batch {
        data.extend_from_slice(&row_block);
    }
    Tensor::constant(data, &[batch, len, d_model])
}

/// Boolean attention mask over `[rows, cols]` score positions, optionally
/// per batch element. `batch == 0` means the same mask applies to every
/// element of a batched score tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    batch: usize,
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn allow_all(rows: usize, cols: usize) -> Self {
        AttnMask {
            batch: 0,
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    /// Causal mask: query `i` may attend keys `j <= i` only.
    pub fn subsequent(len: usize) -> Self {
        let mut allow = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allow[i * len + j] = true;
            }
        }
        AttnMask {
            batch: 0,
            rows: len,
            cols: len,
            allow,
        }
    }

    /// Per-batch key-padding mask: element `b` may attend key columns
    /// `j < key_lens[b]` from every query row.
    pub fn key_padding(
        batch: usize,
        rows: usize,
        cols: usize,
        key_lens: &[usize],
    ) -> Result<Self, TensorError> {
        if key_lens.len() != batch {
            return Err(TensorError::InvalidParameter(format!(
                "key_padding: {} lengths for batch {batch}",
                key_lens.len()
            )));
        }
        let mut allow = vec![false; batch * rows * cols];
        for (b, &len) in key_lens.iter().enumerate() {
            if len > cols {
                return Err(TensorError::InvalidParameter(format!(
                    "key_padding: length {len} exceeds {cols} columns"
                )));
            }
            for i in 0..rows {
                let base = (b * rows + i) * cols;
                allow[base..base + len].fill(true);
            }
        }
        Ok(AttnMask {
            batch,
            rows,
            cols,
            allow,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, b: usize, row: usize, col: usize) -> bool {
        let b_eff = if self.batch == 0 { 0 } else { b };
        self.allow[(b_eff * self.rows + row) * self.cols + col]
    }

    /// Elementwise conjunction. Shapes must match; a shared mask (`batch` 0)
    /// combines with a per-batch mask by broadcasting.
    pub fn and(&self, other: &AttnMask) -> Result<AttnMask, TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "mask_and",
                lhs: vec![self.batch, self.rows, self.cols],
                rhs: vec![other.batch, other.rows, other.cols],
            });
        }
        if self.batch != 0 && other.batch != 0 && self.batch != other.batch {
            return Err(TensorError::ShapeMismatch {
                op: "mask_and",
                lhs: vec![self.batch, self.rows, self.cols],
                rhs: vec![other.batch, other.rows, other.cols],
            });
        }
        let batch = self.batch.max(other.batch);
        let reps = batch.max(1);
        let mut allow = Vec::with_capacity(reps * self.rows * self.cols);
        for b in 0..reps {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    allow.push(self.is_allowed(b, i, j) && other.is_allowed(b, i, j));
                }
            }
        }
        Ok(AttnMask {
            batch,
            rows: self.rows,
            cols: self.cols,
            allow,
        })
    }

    /// Every query row must keep at least one allowed key; a fully masked
    /// row would make the softmax degenerate.
    pub fn check_no_degenerate_rows(&self) -> Result<(), TensorError> {
        let reps = self.batch.max(1);
        for b in 0..reps {
            for i in 0..self.rows {
                let base = (b * self.rows + i) * self.cols;
                if !self.allow[base..base + self.cols].iter().any(|&a| a) {
                    return Err(TensorError::DegenerateMask { row: i });
                }
            }
        }
        Ok(())
    }

    /// Additive form matching a score tensor of `scores_batch` elements
    /// (`None` for unbatched `[rows, cols]` scores): 0 where allowed,
    /// `MASK_OFFSET` where masked.
    pub fn to_additive<T: Scalar>(
        &self,
        scores_batch: Option<usize>,
    ) -> Result<Tensor<T>, TensorError> {
        let offset = T::from_f64(MASK_OFFSET);
        let value = |allowed: bool| if allowed { T::zero() } else { offset };
        match scores_batch {
            None => {
                if self.batch != 0 {
                    return Err(TensorError::ContractViolation(
                        "per-batch mask applied to unbatched scores".into(),
                    ));
                }
                let data: Vec<T> = self.allow.iter().map(|&a| value(a)).collect();
                Tensor::constant(data, &[self.rows, self.cols])
            }
            Some(batch) => {
                if self.batch != 0 && self.batch != batch {
                    return Err(TensorError::ContractViolation(format!(
                        "mask batch {} does not match score batch {batch}",
                        self.batch
                    )));
                }
                let mut data = Vec::with_capacity(batch * self.rows * self.cols);
                for b in 0..batch {
                    for i in 0..self.rows {
                        for j in 0..self.cols {
                            data.push(value(self.is_allowed(b, i, j)));
                        }
                    }
                }
                Tensor::constant(data, &[batch, self.rows, self.cols])
            }
        }
    }
}

/// Inputs to scaled dot-product attention: queries `[.., len_q, d]`, keys
/// `[.., len_k, d]`, values `[.., len_k, d_v]`, an optional mask over
/// `[len_q, len_k]`, and the key dimension used for score scaling.
pub struct AttentionInputs<'a, T: Scalar> {
    pub queries: &'a Tensor<T>,
    pub keys: &'a Tensor<T>,
    pub values: &'a Tensor<T>,
    pub mask: Option<&'a AttnMask>,
    pub d_k: usize,
}

fn split_seq_shape(
    what: &'static str,
    shape: &[usize],
) -> Result<(Option<usize>, usize, usize), TensorError> {
    match shape.len() {
        2 => Ok((None, shape[0], shape[1])),
        3 => Ok((Some(shape[0]), shape[1], shape[2])),
        _ => Err(TensorError::RankMismatch {
            op: what,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

fn attention_scores<T: Scalar>(
    inp: &AttentionInputs<'_, T>,
) -> Result<(Tensor<T>, Option<usize>), TensorError> {
    let (qb, len_q, d_q) = split_seq_shape("attention queries", inp.queries.shape())?;
    let (kb, len_k, d_kdim) = split_seq_shape("attention keys", inp.keys.shape())?;
    let (vb, len_v, _) = split_seq_shape("attention values", inp.values.shape())?;
    if qb != kb || qb != vb || d_q != d_kdim || len_k != len_v {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: inp.queries.shape().to_vec(),
            rhs: inp.keys.shape().to_vec(),
        });
    }
    if inp.d_k == 0 {
        return Err(TensorError::InvalidParameter(
            "attention d_k must be positive".into(),
        ));
    }
    let mut scores = inp
        .queries
        .matmul(&inp.keys.transpose_last2()?)?
        .scale(T::from_f64(1.0 / (inp.d_k as f64).sqrt()));
    if let Some(mask) = inp.mask {
        if mask.rows() != len_q || mask.cols() != len_k {
            return Err(TensorError::ShapeMismatch {
                op: "attention mask",
                lhs: vec![len_q, len_k],
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        mask.check_no_degenerate_rows()?;
        scores = scores.add(&mask.to_additive(qb)?)?;
    }
    Ok((scores, qb))
}

/// Post-softmax attention weights `[.., len_q, len_k]`. Masked positions are
/// exactly zero; every row sums to one over the allowed positions.
pub fn attention_weights<T: Scalar>(
    inp: &AttentionInputs<'_, T>,
) -> Result<Tensor<T>, TensorError> {
    let (scores, _) = attention_scores(inp)?;
    let axis = scores.rank() - 1;
    scores.softmax(axis)
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn scaled_dot_product_attention<T: Scalar>(
    inp: &AttentionInputs<'_, T>,
) -> Result<Tensor<T>, TensorError> {
    attention_weights(inp)?.matmul(inp.values)
}

/// Multi-head attention with per-head projections (no biases) and a final
/// output projection, all `d_model`-preserving.
#[derive(Debug)]
pub struct MultiHeadAttention<T: Scalar> {
    d_k: usize,
    w_query: Vec<Tensor<T>>,
    w_key: Vec<Tensor<T>>,
    w_value: Vec<Tensor<T>>,
    w_out: Tensor<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    /// Draw order per head: query, key, value projection; then the output
    /// projection last.
    pub fn new(
        d_model: usize,
        num_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(TensorError::InvalidParameter(format!(
                "d_model {d_model} not divisible by num_heads {num_heads}"
            )));
        }
        let d_k = d_model / num_heads;
        let mut w_query = Vec::with_capacity(num_heads);
        let mut w_key = Vec::with_capacity(num_heads);
        let mut w_value = Vec::with_capacity(num_heads);
        for _ in 0..num_heads {
            w_query.push(xavier_init(&[d_model, d_k], rng)?);
            w_key.push(xavier_init(&[d_model, d_k], rng)?);
            w_value.push(xavier_init(&[d_model, d_k], rng)?);
        }
        let w_out = xavier_init(&[d_model, d_model], rng)?;
        Ok(MultiHeadAttention {
            d_k,
            w_query,
            w_key,
            w_value,
            w_out,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.w_query.len()
    }

    pub fn forward(
        &self,
        queries: &Tensor<T>,
        keys: &Tensor<T>,
        values: &Tensor<T>,
        mask: Option<&AttnMask>,
    ) -> Result<Tensor<T>, TensorError> {
        let mut heads = Vec::with_capacity(self.num_heads());
        for h in 0..self.num_heads() {
            let q = queries.matmul(&self.w_query[h])?;
            let k = keys.matmul(&self.w_key[h])?;
            let v = values.matmul(&self.w_value[h])?;
            heads.push(scaled_dot_product_attention(&AttentionInputs {
                queries: &q,
                keys: &k,
                values: &v,
                mask,
                d_k: self.d_k,
            })?);
        }
        Tensor::concat_last(&heads)?.matmul(&self.w_out)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for h in 0..self.num_heads() {
            out.push((format!("{prefix}.head{h}.w_query"), self.w_query[h].clone()));
            out.push((format!("{prefix}.head{h}.w_key"), self.w_key[h].clone()));
            out.push((format!("{prefix}.head{h}.w_value"), self.w_value[h].clone()));
        }
        out.push((format!("{prefix}.w_out"), self.w_out.clone()));
    }
}

/// Position-wise feed-forward: `relu(x W1 + b1) W2 + b2`.
#[derive(Debug)]
pub struct FeedForward<T: Scalar> {
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        Ok(FeedForward {
            w1: xavier_init(&[d_model, d_ff], rng)?,
            b1: Tensor::parameter(vec![T::zero(); d_ff], &[d_ff])?,
            w2: xavier_init(&[d_ff, d_model], rng)?,
            b2: Tensor::parameter(vec![T::zero(); d_model], &[d_model])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        x.matmul(&self.w1)?
            .add_bias(&self.b1)?
            .relu()
            .matmul(&self.w2)?
            .add_bias(&self.b2)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// Layer normalisation with learnable gain and bias.
#[derive(Debug)]
pub struct LayerNorm<T: Scalar> {
    gain: Tensor<T>,
    bias: Tensor<T>,
    eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d_model: usize) -> Result<Self, TensorError> {
        Ok(LayerNorm {
            gain: Tensor::parameter(vec![T::one(); d_model], &[d_model])?,
            bias: Tensor::parameter(vec![T::zero(); d_model], &[d_model])?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        x.layer_norm(&self.gain, &self.bias, T::from_f64(self.eps))
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// One post-norm encoder layer: self-attention then feed-forward, each
/// wrapped as `norm(x + sublayer(x))`.
#[derive(Debug)]
pub struct EncoderLayer<T: Scalar> {
    self_attn: MultiHeadAttention<T>,
    feed_forward: FeedForward<T>,
    norm1: LayerNorm<T>,
    norm2: LayerNorm<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        Ok(EncoderLayer {
            self_attn: MultiHeadAttention::new(cfg.d_model, cfg.num_heads, rng)?,
            feed_forward: FeedForward::new(cfg.d_model, cfg.d_ff, rng)?,
            norm1: LayerNorm::new(cfg.d_model)?,
            norm2: LayerNorm::new(cfg.d_model)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mask: Option<&AttnMask>) -> Result<Tensor<T>, TensorError> {
        let attended = self.self_attn.forward(x, x, x, mask)?;
        let x = self.norm1.forward(&x.add(&attended)?)?;
        let fed = self.feed_forward.forward(&x)?;
        self.norm2.forward(&x.add(&fed)?)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.self_attn
            .collect_parameters(&format!("{prefix}.self_attn"), out);
        self.feed_forward
            .collect_parameters(&format!("{prefix}.ff"), out);
        self.norm1.collect_parameters(&format!("{prefix}.norm1"), out);
        self.norm2.collect_parameters(&format!("{prefix}.norm2"), out);
    }
}

/// Encoder stack. Zero layers is the identity map.
#[derive(Debug)]
pub struct Encoder<T: Scalar> {
    layers: Vec<EncoderLayer<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer::new(cfg, rng))
            .collect::<Result<_, _>>()?;
        Ok(Encoder { layers })
    }

    pub fn forward(&self, x: &Tensor<T>, mask: Option<&AttnMask>) -> Result<Tensor<T>, TensorError> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x, mask)?;
        }
        Ok(x)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_parameters(&format!("{prefix}.layer{i}"), out);
        }
    }
}

/// One post-norm decoder layer: masked self-attention, cross-attention over
/// the encoder memory, then feed-forward.
#[derive(Debug)]
pub struct DecoderLayer<T: Scalar> {
    self_attn: MultiHeadAttention<T>,
    cross_attn: MultiHeadAttention<T>,
    feed_forward: FeedForward<T>,
    norm1: LayerNorm<T>,
    norm2: LayerNorm<T>,
    norm3: LayerNorm<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(cfg.d_model, cfg.num_heads, rng)?,
            cross_attn: MultiHeadAttention::new(cfg.d_model, cfg.num_heads, rng)?,
            feed_forward: FeedForward::new(cfg.d_model, cfg.d_ff, rng)?,
            norm1: LayerNorm::new(cfg.d_model)?,
            norm2: LayerNorm::new(cfg.d_model)?,
            norm3: LayerNorm::new(cfg.d_model)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        memory: &Tensor<T>,
        self_mask: &AttnMask,
        memory_mask: Option<&AttnMask>,
    ) -> Result<Tensor<T>, TensorError> {
        let attended = self.self_attn.forward(x, x, x, Some(self_mask))?;
        let x = self.norm1.forward(&x.add(&attended)?)?;
        let crossed = self.cross_attn.forward(&x, memory, memory, memory_mask)?;
        let x = self.norm2.forward(&x.add(&crossed)?)?;
        let fed = self.feed_forward.forward(&x)?;
        self.norm3.forward(&x.add(&fed)?)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.self_attn
            .collect_parameters(&format!("{prefix}.self_attn"), out);
        self.cross_attn
            .collect_parameters(&format!("{prefix}.cross_attn"), out);
        self.feed_forward
            .collect_parameters(&format!("{prefix}.ff"), out);
        self.norm1.collect_parameters(&format!("{prefix}.norm1"), out);
        self.norm2.collect_parameters(&format!("{prefix}.norm2"), out);
        self.norm3.collect_parameters(&format!("{prefix}.norm3"), out);
    }
}

/// Decoder stack. Zero layers is the identity map on the target stream.
#[derive(Debug)]
pub struct Decoder<T: Scalar> {
    layers: Vec<DecoderLayer<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|_| DecoderLayer::new(cfg, rng))
            .collect::<Result<_, _>>()?;
        Ok(Decoder { layers })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        memory: &Tensor<T>,
        self_mask: &AttnMask,
        memory_mask: Option<&AttnMask>,
    ) -> Result<Tensor<T>, TensorError> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x, memory, self_mask, memory_mask)?;
        }
        Ok(x)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_parameters(&format!("{prefix}.layer{i}"), out);
        }
    }
}
