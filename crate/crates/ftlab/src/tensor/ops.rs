//! Operation records and their forward/backward kernels.
//!
//! Each op stores shared handles to its parents; a node is recorded only
//! when at least one input requires grad, so eval-mode forwards build no
//! graph. Backward kernels skip work for parents that take no gradient
//! (frozen weights cost nothing beyond the forward product).

use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Tensor,
        b: Tensor,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Tensor,
        m: usize,
        n: usize,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    AddBias {
        x: Tensor,
        bias: Tensor,
        rows: usize,
        cols: usize,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        x: Tensor,
        c: f64,
    },
    Gelu {
        x: Tensor,
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        eps: f64,
        rows: usize,
        cols: usize,
    },
    LogSoftmax {
        x: Tensor,
        rows: usize,
        cols: usize,
    },
    NllMean {
        logp: Tensor,
        labels: Vec<usize>,
        cols: usize,
    },
    KlDivMean {
        student_logp: Tensor,
        teacher: Vec<f64>,
        rows: usize,
    },
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
        dim: usize,
    },
    GatherRows {
        x: Tensor,
        idx: Vec<usize>,
        cols: usize,
    },
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        heads: usize,
        seq_len: usize,
        head_dim: usize,
        batch: usize,
        mask: Vec<bool>,
        /// Softmax rows saved at forward time, laid out [batch, head, T, T].
        probs: Vec<f64>,
        scale: f64,
    },
    Dropout {
        x: Tensor,
        scaled_mask: Vec<f64>,
    },
    Sum {
        x: Tensor,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![a.clone(), b.clone()]
            }
            Op::Transpose { x, .. }
            | Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Sum { x }
            | Op::Dropout { x, .. }
            | Op::GatherRows { x, .. }
            | Op::LogSoftmax { x, .. } => vec![x.clone()],
            Op::AddBias { x, bias, .. } => vec![x.clone(), bias.clone()],
            Op::LayerNorm { x, gain, bias, .. } => vec![x.clone(), gain.clone(), bias.clone()],
            Op::NllMean { logp, .. } => vec![logp.clone()],
            Op::KlDivMean { student_logp, .. } => vec![student_logp.clone()],
            Op::Embedding { table, .. } => vec![table.clone()],
            Op::Attention { q, k, v, .. } => vec![q.clone(), k.clone(), v.clone()],
        }
    }

    /// Push each parent's gradient contribution into `sink`.
    pub(crate) fn backward(&self, gout: &[f64], mut sink: impl FnMut(&Tensor, &[f64])) {
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if a.requires_grad() {
                    let bd = b.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gr = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gr[j] * br[j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    drop(bd);
                    sink(a, &da);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gr = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dr = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dr[j] += av * gr[j];
                            }
                        }
                    }
                    drop(ad);
                    sink(b, &db);
                }
            }
            Op::Transpose { x, m, n } => {
                // gout is [n, m]; transpose back to [m, n].
                let (m, n) = (*m, *n);
                let mut dx = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = gout[i * m + j];
                    }
                }
                sink(x, &dx);
            }
            Op::Add { a, b } => {
                sink(a, gout);
                sink(b, gout);
            }
            Op::AddBias { x, bias, rows, cols } => {
                sink(x, gout);
                if bias.requires_grad() {
                    let mut db = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += gout[r * cols + c];
                        }
                    }
                    sink(bias, &db);
                }
            }
            Op::Mul { a, b } => {
                if a.requires_grad() {
                    let bd = b.data();
                    let da: Vec<f64> = gout.iter().zip(bd.iter()).map(|(g, v)| g * v).collect();
                    drop(bd);
                    sink(a, &da);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let db: Vec<f64> = gout.iter().zip(ad.iter()).map(|(g, v)| g * v).collect();
                    drop(ad);
                    sink(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = gout.iter().map(|g| g * c).collect();
                sink(x, &dx);
            }
            Op::Gelu { x } => {
                let xd = x.data();
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(gout)
                    .map(|(&v, g)| {
                        let u = GELU_K * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                drop(xd);
                sink(x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let xd = x.data();
                let gd = gain.data();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * inv_std;
                        let gg = gr[c] * gd[c];
                        m1 += gg;
                        m2 += gg * xhat;
                        dgain[c] += gr[c] * xhat;
                        dbias[c] += gr[c];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * inv_std;
                        dx[r * cols + c] = (gr[c] * gd[c] - m1 - xhat * m2) * inv_std;
                    }
                }
                drop(xd);
                drop(gd);
                if x.requires_grad() {
                    sink(x, &dx);
                }
                if gain.requires_grad() {
                    sink(gain, &dgain);
                }
                if bias.requires_grad() {
                    sink(bias, &dbias);
                }
            }
            Op::LogSoftmax { x, rows, cols } => {
                // d logp_j / d x_c = delta_jc - p_c, so dx = g - p * sum(g).
                let (rows, cols) = (*rows, *cols);
                let xd = x.data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let probs = softmax_row(xr);
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - probs[c] * gsum;
                    }
                }
                drop(xd);
                sink(x, &dx);
            }
            Op::NllMean { logp, labels, cols } => {
                let g = gout[0];
                let mut dl = vec![0.0; labels.len() * cols];
                let scale = -g / labels.len() as f64;
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * cols + y] = scale;
                }
                sink(logp, &dl);
            }
            Op::KlDivMean {
                student_logp,
                teacher,
                rows,
            } => {
                let g = gout[0];
                let scale = -g / *rows as f64;
                let ds: Vec<f64> = teacher.iter().map(|t| t * scale).collect();
                sink(student_logp, &ds);
            }
            Op::Embedding { table, ids, dim } => {
                if table.requires_grad() {
                    let mut dt = vec![0.0; table.numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..*dim {
                            dt[id * dim + c] += gout[row * dim + c];
                        }
                    }
                    sink(table, &dt);
                }
            }
            Op::GatherRows { x, idx, cols } => {
                let mut dx = vec![0.0; x.numel()];
                for (row, &src) in idx.iter().enumerate() {
                    for c in 0..*cols {
                        dx[src * cols + c] += gout[row * cols + c];
                    }
                }
                sink(x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                head_dim,
                batch,
                mask,
                probs,
                scale,
            } => {
                let t = *seq_len;
                let hd = *head_dim;
                let d = heads * hd;
                let qd = q.data();
                let kd = k.data();
                let vd = v.data();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; t];
                for s in 0..*batch {
                    for h in 0..*heads {
                        let col = h * hd;
                        for i in 0..t {
                            let qi = (s * t + i) * d + col;
                            let prow = &probs[((s * *heads + h) * t + i) * t..][..t];
                            let grow = &gout[qi..qi + hd];
                            // dp_j = dOut_i . V_j ; then softmax backward.
                            let mut sum_pd = 0.0;
                            for j in 0..=i {
                                if !mask[s * t + j] {
                                    continue;
                                }
                                let vj = (s * t + j) * d + col;
                                let mut acc = 0.0;
                                for c in 0..hd {
                                    acc += grow[c] * vd[vj + c];
                                }
                                dp[j] = acc;
                                sum_pd += prow[j] * acc;
                            }
                            for j in 0..=i {
                                if !mask[s * t + j] {
                                    continue;
                                }
                                let p = prow[j];
                                if p == 0.0 && dp[j] == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[j] - sum_pd) * scale;
                                let kj = (s * t + j) * d + col;
                                for c in 0..hd {
                                    dq[qi + c] += ds * kd[kj + c];
                                    dk[kj + c] += ds * qd[qi + c];
                                    dv[kj + c] += p * grow[c];
                                }
                            }
                        }
                    }
                }
                drop(qd);
                drop(kd);
                drop(vd);
                if q.requires_grad() {
                    sink(q, &dq);
                }
                if k.requires_grad() {
                    sink(k, &dk);
                }
                if v.requires_grad() {
                    sink(v, &dv);
                }
            }
            Op::Dropout { x, scaled_mask } => {
                let dx: Vec<f64> = gout
                    .iter()
                    .zip(scaled_mask)
                    .map(|(g, m)| g * m)
                    .collect();
                sink(x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![gout[0]; x.numel()];
                sink(x, &dx);
            }
        }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Plain (graph-free) row-major matrix product, shared by forward kernels
/// and by graph-free callers such as adapter merging.
pub fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Tensor {
    fn node(shape: Vec<usize>, data: Vec<f64>, grad_flows: bool, op: Op, name: &str) -> Result<Tensor> {
        ensure_finite(&data, name)?;
        if grad_flows {
            Ok(Tensor::new(shape, data, true, op))
        } else {
            Ok(Tensor::new(shape, data, false, Op::Leaf))
        }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} expects a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let data = raw_matmul(&self.data(), &other.data(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::node(
            vec![m, n],
            data,
            rg,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                m,
                k,
                n,
            },
            "matmul",
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let xd = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        drop(xd);
        let rg = self.requires_grad();
        Tensor::node(
            vec![n, m],
            data,
            rg,
            Op::Transpose {
                x: self.clone(),
                m,
                n,
            },
            "transpose",
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::node(
            self.shape(),
            data,
            rg,
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
            "add",
        )
    }

    /// Row-broadcast bias add: `[m,n] + [n] -> [m,n]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2("add_bias input")?;
        if bias.numel() != cols {
            return Err(Error::Shape(format!(
                "bias length {} does not match {cols} columns",
                bias.numel()
            )));
        }
        let bd = bias.data();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % cols])
            .collect();
        drop(bd);
        let rg = self.requires_grad() || bias.requires_grad();
        Tensor::node(
            vec![rows, cols],
            data,
            rg,
            Op::AddBias {
                x: self.clone(),
                bias: bias.clone(),
                rows,
                cols,
            },
            "add_bias",
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::node(
            self.shape(),
            data,
            rg,
            Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
            "mul",
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let rg = self.requires_grad();
        Tensor::node(
            self.shape(),
            data,
            rg,
            Op::Scale { x: self.clone(), c },
            "scale",
        )
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let rg = self.requires_grad();
        Tensor::node(self.shape(), data, rg, Op::Gelu { x: self.clone() }, "gelu")
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.dims2("layer_norm input")?;
        if gain.numel() != cols || bias.numel() != cols {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias length must be {cols}"
            )));
        }
        let xd = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &xd[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (xr[c] - mean) * inv_std * gd[c] + bd[c];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Tensor::node(
            vec![rows, cols],
            data,
            rg,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
                rows,
                cols,
            },
            "layer_norm",
        )
    }

    /// Row-wise log-softmax with max subtraction; each row's exp sums to 1.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2("log_softmax input")?;
        if cols < 2 {
            return Err(Error::Shape(format!(
                "log_softmax needs >= 2 classes, got {cols}"
            )));
        }
        let xd = self.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &xd[r * cols..(r + 1) * cols];
            let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..cols {
                data[r * cols + c] = xr[c] - lse;
            }
        }
        drop(xd);
        let rg = self.requires_grad();
        Tensor::node(
            vec![rows, cols],
            data,
            rg,
            Op::LogSoftmax {
                x: self.clone(),
                rows,
                cols,
            },
            "log_softmax",
        )
    }

    /// Mean over the batch of `-log_softmax(logits)[i, labels[i]]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2("cross_entropy logits")?;
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy got {rows} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let logp = self.log_softmax()?;
        let lp = logp.data();
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| lp[i * cols + y])
            .sum::<f64>()
            / rows as f64;
        drop(lp);
        let rg = logp.requires_grad();
        Tensor::node(
            vec![1],
            vec![loss],
            rg,
            Op::NllMean {
                logp,
                labels: labels.to_vec(),
                cols,
            },
            "cross_entropy",
        )
    }

    /// Batch-mean KL(teacher || student): `mean_i sum_j t_ij (ln t_ij - s_ij)`
    /// with `0 ln 0 = 0`. `self` holds student log-probabilities; the teacher
    /// is a constant and receives no gradient.
    pub fn kl_div_mean(&self, teacher_probs: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2("kl_div student")?;
        if teacher_probs.shape() != vec![rows, cols] {
            return Err(Error::Shape(format!(
                "teacher shape {:?} does not match student {:?}",
                teacher_probs.shape(),
                self.shape()
            )));
        }
        if teacher_probs.requires_grad() {
            return Err(Error::Contract(
                "teacher probabilities must not require grad".into(),
            ));
        }
        let td = teacher_probs.data_clone();
        let sd = self.data();
        for r in 0..rows {
            let trow = &td[r * cols..(r + 1) * cols];
            if trow.iter().any(|&t| t < -1e-12) {
                return Err(Error::Contract(format!(
                    "teacher row {r} has a negative probability"
                )));
            }
            if (trow.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "teacher row {r} does not sum to 1"
                )));
            }
            let srow = &sd[r * cols..(r + 1) * cols];
            if (srow.iter().map(|s| s.exp()).sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "student row {r} is not a log-distribution"
                )));
            }
        }
        let mut loss = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let t = td[r * cols + c].max(0.0);
                if t > 0.0 {
                    loss += t * (t.ln() - sd[r * cols + c]);
                }
            }
        }
        loss /= rows as f64;
        drop(sd);
        let rg = self.requires_grad();
        Tensor::node(
            vec![1],
            vec![loss],
            rg,
            Op::KlDivMean {
                student_logp: self.clone(),
                teacher: td,
                rows,
            },
            "kl_div_mean",
        )
    }

    /// Row gather from an embedding table: ids index rows of `self` `[V, d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = self.dims2("embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index(format!(
                "token id {bad} out of range for vocab {vocab}"
            )));
        }
        let td = self.data();
        let mut data = vec![0.0; ids.len() * dim];
        for (row, &id) in ids.iter().enumerate() {
            data[row * dim..(row + 1) * dim].copy_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        drop(td);
        let rg = self.requires_grad();
        Tensor::node(
            vec![ids.len(), dim],
            data,
            rg,
            Op::Embedding {
                table: self.clone(),
                ids: ids.to_vec(),
                dim,
            },
            "embedding",
        )
    }

    /// Select rows of `self` by index, e.g. the last non-pad position of
    /// each sequence.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2("gather_rows input")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let xd = self.data();
        let mut data = vec![0.0; idx.len() * cols];
        for (row, &src) in idx.iter().enumerate() {
            data[row * cols..(row + 1) * cols].copy_from_slice(&xd[src * cols..(src + 1) * cols]);
        }
        drop(xd);
        let rg = self.requires_grad();
        Tensor::node(
            vec![idx.len(), cols],
            data,
            rg,
            Op::GatherRows {
                x: self.clone(),
                idx: idx.to_vec(),
                cols,
            },
            "gather_rows",
        )
    }

    /// Multi-head causal self-attention over a flattened batch.
    ///
    /// `q`, `k`, `v` are `[batch*seq_len, d]`; `mask[r]` marks real (non-pad)
    /// positions. Query `i` of a sequence attends to keys `j <= i` that are
    /// unmasked; rows with no valid key produce zeros.
    pub fn causal_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        heads: usize,
        seq_len: usize,
        mask: &[bool],
    ) -> Result<Tensor> {
        let (rows, d) = q.dims2("attention q")?;
        if k.shape() != vec![rows, d] || v.shape() != vec![rows, d] {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "attention rows {rows} not divisible by seq_len {seq_len}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        if mask.len() != rows {
            return Err(Error::Shape(format!(
                "attention mask length {} != {rows}",
                mask.len()
            )));
        }
        let batch = rows / seq_len;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let t = seq_len;

        let qd = q.data();
        let kd = k.data();
        let vd = v.data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut scores = vec![0.0; t];
        for s in 0..batch {
            for h in 0..heads {
                let col = h * hd;
                for i in 0..t {
                    let qi = (s * t + i) * d + col;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if !mask[s * t + j] {
                            continue;
                        }
                        let kj = (s * t + j) * d + col;
                        let mut acc = 0.0;
                        for c in 0..hd {
                            acc += qd[qi + c] * kd[kj + c];
                        }
                        let sc = acc * scale;
                        scores[j] = sc;
                        if sc > max {
                            max = sc;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue; // no valid key; output row stays zero
                    }
                    let mut denom = 0.0;
                    for j in 0..=i {
                        if mask[s * t + j] {
                            denom += (scores[j] - max).exp();
                        }
                    }
                    let prow = &mut probs[((s * heads + h) * t + i) * t..][..t];
                    for j in 0..=i {
                        if !mask[s * t + j] {
                            continue;
                        }
                        let p = (scores[j] - max).exp() / denom;
                        prow[j] = p;
                        let vj = (s * t + j) * d + col;
                        for c in 0..hd {
                            out[qi + c] += p * vd[vj + c];
                        }
                    }
                }
            }
        }
        drop(qd);
        drop(kd);
        drop(vd);
        let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
        Tensor::node(
            vec![rows, d],
            out,
            rg,
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                heads,
                seq_len,
                head_dim: hd,
                batch,
                mask: mask.to_vec(),
                probs,
                scale,
            },
            "causal_attention",
        )
    }

    /// Inverted dropout: keep with probability `1-p` and rescale by
    /// `1/(1-p)` so the expectation is unchanged. Identity when `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0,1), got {p}")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let scaled_mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() >= p { keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(&scaled_mask)
            .map(|(v, m)| v * m)
            .collect();
        let rg = self.requires_grad();
        Tensor::node(
            self.shape(),
            data,
            rg,
            Op::Dropout {
                x: self.clone(),
                scaled_mask,
            },
            "dropout",
        )
    }

    /// Full reduction to a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let rg = self.requires_grad();
        Tensor::node(vec![1], vec![total], rg, Op::Sum { x: self.clone() }, "sum")
    }
}

/// Graph-free row-wise softmax, used for teacher signals and accuracy.
pub fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let probs = softmax_row(&data[r * cols..(r + 1) * cols]);
        out[r * cols..(r + 1) * cols].copy_from_slice(&probs);
    }
    out
}
