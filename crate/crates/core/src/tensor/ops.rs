//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its forward value, and (when gradient
//! recording is on) registers a closure that maps the output gradient to
//! contributions on its parents. Reductions run in a fixed order so results
//! are reproducible bit-for-bit across runs and thread counts.

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{Scalar, Tensor, TensorError};

fn require_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn transpose2_data<T: Scalar>(src: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * m * n..(b + 1) * m * n];
        let d = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        require_same_shape("add", self, other)?;
        let data: Vec<T> = {
            let a = self.0.data.borrow();
            let b = other.0.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            },
        ))
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        require_same_shape("sub", self, other)?;
        let data: Vec<T> = {
            let a = self.0.data.borrow();
            let b = other.0.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g| {
                pa.accumulate_grad(g);
                if pb.requires_grad() {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    pb.accumulate_grad(&neg);
                }
            },
        ))
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        require_same_shape("mul", self, other)?;
        let data: Vec<T> = {
            let a = self.0.data.borrow();
            let b = other.0.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g| {
                if pa.requires_grad() {
                    let vb = pb.0.data.borrow();
                    let contrib: Vec<T> = g.iter().zip(vb.iter()).map(|(&gv, &y)| gv * y).collect();
                    drop(vb);
                    pa.accumulate_grad(&contrib);
                }
                if pb.requires_grad() {
                    let va = pa.0.data.borrow();
                    let contrib: Vec<T> = g.iter().zip(va.iter()).map(|(&gv, &x)| gv * x).collect();
                    drop(va);
                    pb.accumulate_grad(&contrib);
                }
            },
        ))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data: Vec<T> = self.0.data.borrow().iter().map(|&x| x * c).collect();
        let pa = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            if pa.requires_grad() {
                let contrib: Vec<T> = g.iter().map(|&v| v * c).collect();
                pa.accumulate_grad(&contrib);
            }
        })
    }

    /// Adds a rank-1 bias along the last dimension: `x[..., j] + b[j]`.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if bias.rank() != 1 {
            return Err(TensorError::RankMismatch {
                op: "add_bias",
                expected: 1,
                shape: bias.shape().to_vec(),
            });
        }
        let n = bias.shape()[0];
        if *self.shape().last().unwrap() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let data: Vec<T> = {
            let x = self.0.data.borrow();
            let b = bias.0.data.borrow();
            x.chunks(n)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(&xv, &bv)| xv + bv))
                .collect()
        };
        let (px, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            move |g| {
                px.accumulate_grad(g);
                if pb.requires_grad() {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d = *d + gv;
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Matrix product. Supported shapes: `[m,k]·[k,n]`, `[b,m,k]·[k,n]`
    /// (shared right factor) and `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let ls = self.shape().to_vec();
        let rs = rhs.shape().to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ls.clone(),
            rhs: rs.clone(),
        };

        let (batch, m, k, lhs_batched, rhs_batched, n) = match (ls.len(), rs.len()) {
            (2, 2) => (1usize, ls[0], ls[1], false, false, rs[1]),
            (3, 2) => (ls[0], ls[1], ls[2], true, false, rs[1]),
            (3, 3) => {
                if ls[0] != rs[0] {
                    return Err(mismatch());
                }
                (ls[0], ls[1], ls[2], true, true, rs[2])
            }
            _ => return Err(mismatch()),
        };
        let rk = if rhs_batched { rs[1] } else { rs[0] };
        if rk != k {
            return Err(mismatch());
        }

        let mut data = vec![T::zero(); batch * m * n];
        {
            let a = self.0.data.borrow();
            let b = rhs.0.data.borrow();
            for bi in 0..batch {
                let a_off = if lhs_batched { bi * m * k } else { 0 };
                let b_off = if rhs_batched { bi * k * n } else { 0 };
                matmul_nn(
                    &a[a_off..a_off + m * k],
                    &b[b_off..b_off + k * n],
                    m,
                    k,
                    n,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                );
            }
        }

        let out_shape = if lhs_batched {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |g| {
                if pa.requires_grad() {
                    // dA[b] = g[b] · B[b]^T
                    let b_data = pb.0.data.borrow();
                    let mut da = vec![T::zero(); batch * m * k];
                    let mut tmp = vec![T::zero(); m * k];
                    for bi in 0..batch {
                        let b_off = if rhs_batched { bi * k * n } else { 0 };
                        matmul_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b_data[b_off..b_off + k * n],
                            m,
                            n,
                            k,
                            &mut tmp,
                        );
                        // matmul_nt treats its second argument as [rows=k, cols=n],
                        // which is exactly B stored row-major.
                        for (d, &t) in da[bi * m * k..(bi + 1) * m * k].iter_mut().zip(&tmp) {
                            *d = *d + t;
                        }
                    }
                    drop(b_data);
                    if lhs_batched {
                        pa.accumulate_grad(&da);
                    } else {
                        pa.accumulate_grad(&da[..m * k]);
                    }
                }
                if pb.requires_grad() {
                    // dB[b] = A[b]^T · g[b]; shared B sums over the batch.
                    let a_data = pa.0.data.borrow();
                    let db_len = if rhs_batched { batch * k * n } else { k * n };
                    let mut db = vec![T::zero(); db_len];
                    let mut tmp = vec![T::zero(); k * n];
                    for bi in 0..batch {
                        let a_off = if lhs_batched { bi * m * k } else { 0 };
                        matmul_tn(
                            &a_data[a_off..a_off + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut tmp,
                        );
                        let d_off = if rhs_batched { bi * k * n } else { 0 };
                        for (d, &t) in db[d_off..d_off + k * n].iter_mut().zip(&tmp) {
                            *d = *d + t;
                        }
                    }
                    drop(a_data);
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Swaps the last two dimensions (rank must be at least 2).
    pub fn transpose_last2(&self) -> Result<Tensor<T>, TensorError> {
        if self.rank() < 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose_last2",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let shape = self.shape().to_vec();
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let data = transpose2_data(&self.0.data.borrow(), batch, m, n);
        let mut out_shape = shape.clone();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        let pa = self.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            move |g| {
                if pa.requires_grad() {
                    let back = transpose2_data(g, batch, n, m);
                    pa.accumulate_grad(&back);
                }
            },
        ))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let pa = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            if pa.requires_grad() {
                let x = pa.0.data.borrow();
                let contrib: Vec<T> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                drop(x);
                pa.accumulate_grad(&contrib);
            }
        })
    }

    /// Softmax along `axis` with max-shift stabilisation. Lanes are
    /// normalised independently; values below the lane maximum by more than
    /// the exponent range underflow to exactly zero.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let lane = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();

        let mut data = vec![T::zero(); self.numel()];
        {
            let x = self.0.data.borrow();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * lane + l) * inner + i;
                    let mut m = x[idx(0)];
                    for l in 1..lane {
                        if x[idx(l)] > m {
                            m = x[idx(l)];
                        }
                    }
                    let mut sum = T::zero();
                    for l in 0..lane {
                        let e = (x[idx(l)] - m).exp();
                        data[idx(l)] = e;
                        sum = sum + e;
                    }
                    for l in 0..lane {
                        data[idx(l)] = data[idx(l)] / sum;
                    }
                }
            }
        }

        let y_saved = data.clone();
        let pa = self.clone();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            move |g| {
                if !pa.requires_grad() {
                    return;
                }
                let mut contrib = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = T::zero();
                        for l in 0..lane {
                            dot = dot + g[idx(l)] * y_saved[idx(l)];
                        }
                        for l in 0..lane {
                            contrib[idx(l)] = y_saved[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                pa.accumulate_grad(&contrib);
            },
        ))
    }

    /// Layer normalisation over the last dimension with learnable gain and
    /// bias: `g * (x - mean) / sqrt(var + eps) + b`.
    pub fn layer_norm(
        &self,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>, TensorError> {
        let n = *self.shape().last().ok_or(TensorError::RankMismatch {
            op: "layer_norm",
            expected: 1,
            shape: vec![],
        })?;
        for (name, t) in [("gain", gain), ("bias", bias)] {
            if t.shape() != [n] {
                return Err(TensorError::InvalidParameter(format!(
                    "layer_norm {name} must have shape [{n}], got {:?}",
                    t.shape()
                )));
            }
        }
        let rows = self.numel() / n;
        let inv_n = T::from_f64(1.0 / n as f64);

        let mut data = vec![T::zero(); self.numel()];
        {
            let x = self.0.data.borrow();
            let gv = gain.0.data.borrow();
            let bv = bias.0.data.borrow();
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mut mean = T::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean * inv_n;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * inv_n;
                let inv_std = T::one() / (var + eps).sqrt();
                let out = &mut data[r * n..(r + 1) * n];
                for (j, &v) in row.iter().enumerate() {
                    out[j] = gv[j] * ((v - mean) * inv_std) + bv[j];
                }
            }
        }

        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let x = px.0.data.borrow();
                let gv = pg.0.data.borrow();
                let mut dx = vec![T::zero(); x.len()];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for r in 0..rows {
                    let row = &x[r * n..(r + 1) * n];
                    let gout = &g[r * n..(r + 1) * n];
                    let mut mean = T::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean * inv_n;
                    let mut var = T::zero();
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_n;
                    let inv_std = T::one() / (var + eps).sqrt();

                    // dxhat, plus gain/bias grads, then the projected input grad:
                    // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = gout[j] * gv[j];
                        dgain[j] = dgain[j] + gout[j] * xh;
                        dbias[j] = dbias[j] + gout[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh;
                    }
                    mean_dxh = mean_dxh * inv_n;
                    mean_dxh_xh = mean_dxh_xh * inv_n;
                    let drow = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = gout[j] * gv[j];
                        drow[j] = inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                drop(x);
                drop(gv);
                px.accumulate_grad(&dx);
                if pg.requires_grad() {
                    pg.accumulate_grad(&dgain);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(&dbias);
                }
            },
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut total = T::zero();
        for &v in self.0.data.borrow().iter() {
            total = total + v;
        }
        let numel = self.numel();
        let pa = self.clone();
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(&vec![g[0]; numel]);
            }
        })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self) -> Tensor<T> {
        let numel = self.numel();
        self.sum_all().scale(T::from_f64(1.0 / numel as f64))
    }

    /// Concatenates tensors along the last dimension. All leading dimensions
    /// must match.
    pub fn concat_last(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidParameter("concat_last of no tensors".into()))?;
        let lead = &first.shape()[..first.rank() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(*p.shape().last().unwrap());
        }
        let total_w: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();

        let mut data = Vec::with_capacity(rows * total_w);
        {
            let borrows: Vec<_> = parts.iter().map(|p| p.0.data.borrow()).collect();
            for r in 0..rows {
                for (p, w) in borrows.iter().zip(&widths) {
                    data.extend_from_slice(&p[r * w..(r + 1) * w]);
                }
            }
        }

        let mut out_shape = lead.to_vec();
        out_shape.push(total_w);
        let handles: Vec<Tensor<T>> = parts.to_vec();
        let widths_cl = widths.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            parts.to_vec(),
            move |g| {
                let mut offset = 0;
                for (p, &w) in handles.iter().zip(&widths_cl) {
                    if p.requires_grad() {
                        let mut contrib = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            let base = r * total_w + offset;
                            contrib.extend_from_slice(&g[base..base + w]);
                        }
                        p.accumulate_grad(&contrib);
                    }
                    offset += w;
                }
            },
        ))
    }

    /// Row lookup into an embedding table `[vocab, dim]`. The output shape is
    /// `leading ++ [dim]` with `indices.len() == prod(leading)`. Gradients
    /// scatter-add into the looked-up rows.
    pub fn embedding(
        table: &Tensor<T>,
        indices: &[usize],
        leading: &[usize],
    ) -> Result<Tensor<T>, TensorError> {
        if table.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "embedding",
                expected: 2,
                shape: table.shape().to_vec(),
            });
        }
        let (vocab, dim) = (table.shape()[0], table.shape()[1]);
        let rows: usize = leading.iter().product();
        if rows != indices.len() {
            return Err(TensorError::InvalidParameter(format!(
                "embedding: {} indices cannot fill leading shape {:?}",
                indices.len(),
                leading
            )));
        }
        for &idx in indices {
            if idx >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: idx,
                    size: vocab,
                });
            }
        }
        let mut data = Vec::with_capacity(rows * dim);
        {
            let w = table.0.data.borrow();
            for &idx in indices {
                data.extend_from_slice(&w[idx * dim..(idx + 1) * dim]);
            }
        }
        let mut out_shape = leading.to_vec();
        out_shape.push(dim);
        let pt = table.clone();
        let idx_cl = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![table.clone()],
            move |g| {
                if !pt.requires_grad() {
                    return;
                }
                let mut dw = vec![T::zero(); vocab * dim];
                for (r, &idx) in idx_cl.iter().enumerate() {
                    let grow = &g[r * dim..(r + 1) * dim];
                    let drow = &mut dw[idx * dim..(idx + 1) * dim];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d = *d + gv;
                    }
                }
                pt.accumulate_grad(&dw);
            },
        ))
    }

    /// Weighted token cross-entropy from raw logits.
    ///
    /// `self` is `[..., vocab]` flattened to `rows` rows; `targets[r]` is the
    /// class index for row `r` and `weights[r]` scales that row's
    /// `-log softmax(logits)[target]` term. The result is the weighted sum
    /// (a `[1]` tensor); callers encode "mean over real positions" in the
    /// weights.
    pub fn cross_entropy_weighted(
        &self,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Tensor<T>, TensorError> {
        let vocab = *self.shape().last().ok_or(TensorError::RankMismatch {
            op: "cross_entropy_weighted",
            expected: 2,
            shape: vec![],
        })?;
        let rows = self.numel() / vocab;
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::InvalidParameter(format!(
                "cross_entropy_weighted: logits give {rows} rows but {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        for &t in targets {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: t,
                    size: vocab,
                });
            }
        }

        let mut loss = T::zero();
        {
            let z = self.0.data.borrow();
            for r in 0..rows {
                if weights[r] == T::zero() {
                    continue;
                }
                let row = &z[r * vocab..(r + 1) * vocab];
                let mut m = row[0];
                for &v in &row[1..] {
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = T::zero();
                for &v in row {
                    sum = sum + (v - m).exp();
                }
                let lse = m + sum.ln();
                loss = loss + weights[r] * (lse - row[targets[r]]);
            }
        }

        let pl = self.clone();
        let targets_cl = targets.to_vec();
        let weights_cl = weights.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            move |g| {
                if !pl.requires_grad() {
                    return;
                }
                let z = pl.0.data.borrow();
                let mut dz = vec![T::zero(); z.len()];
                for r in 0..rows {
                    let w = weights_cl[r];
                    if w == T::zero() {
                        continue;
                    }
                    let row = &z[r * vocab..(r + 1) * vocab];
                    let mut m = row[0];
                    for &v in &row[1..] {
                        if v > m {
                            m = v;
                        }
                    }
                    let mut sum = T::zero();
                    for &v in row {
                        sum = sum + (v - m).exp();
                    }
                    let drow = &mut dz[r * vocab..(r + 1) * vocab];
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - m).exp() / sum;
                        let delta = if j == targets_cl[r] { T::one() } else { T::zero() };
                        drow[j] = g[0] * w * (p - delta);
                    }
                }
                drop(z);
                pl.accumulate_grad(&dz);
            },
        ))
    }

    /// Weighted mean-squared error against a same-shaped target.
    ///
    /// Rows are the flattened leading dimensions (one per frame); each row's
    /// channel-mean squared error is scaled by `frame_weights[row]` and the
    /// weighted terms are summed into a `[1]` tensor.
    pub fn weighted_mse(
        &self,
        target: &Tensor<T>,
        frame_weights: &[T],
    ) -> Result<Tensor<T>, TensorError> {
        require_same_shape("weighted_mse", self, target)?;
        let width = *self.shape().last().ok_or(TensorError::RankMismatch {
            op: "weighted_mse",
            expected: 1,
            shape: vec![],
        })?;
        let frames = self.numel() / width;
        if frame_weights.len() != frames {
            return Err(TensorError::InvalidParameter(format!(
                "weighted_mse: {frames} frames but {} weights",
                frame_weights.len()
            )));
        }
        let inv_w = T::from_f64(1.0 / width as f64);

        let mut loss = T::zero();
        {
            let p = self.0.data.borrow();
            let t = target.0.data.borrow();
            for f in 0..frames {
                let w = frame_weights[f];
                if w == T::zero() {
                    continue;
                }
                let mut acc = T::zero();
                for c in 0..width {
                    let d = p[f * width + c] - t[f * width + c];
                    acc = acc + d * d;
                }
                loss = loss + w * acc * inv_w;
            }
        }

        let (pp, pt) = (self.clone(), target.clone());
        let weights_cl = frame_weights.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone(), target.clone()],
            move |g| {
                let p = pp.0.data.borrow();
                let t = pt.0.data.borrow();
                let two = T::from_f64(2.0);
                let mut dp = vec![T::zero(); p.len()];
                for f in 0..frames {
                    let w = weights_cl[f];
                    if w == T::zero() {
                        continue;
                    }
                    for c in 0..width {
                        let d = p[f * width + c] - t[f * width + c];
                        dp[f * width + c] = g[0] * w * two * inv_w * d;
                    }
                }
                drop(p);
                drop(t);
                if pp.requires_grad() {
                    pp.accumulate_grad(&dp);
                }
                if pt.requires_grad() {
                    let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
                    pt.accumulate_grad(&dt);
                }
            },
        ))
    }
}
