use serde::{Deserialize, Serialize};

use super::kernels::{axpy, dot};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: Mode,
    },
    Relu {
        input: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Sum {
        input: usize,
    },
    Dot {
        input: usize,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Arena-backed computation graph. Nodes are appended in evaluation order,
/// so walking the arena backwards is a valid reverse topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    track_decisions: bool,
    decisions: u64,
    margin: f64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_decisions: false,
            decisions: FNV_OFFSET,
            margin: f64::INFINITY,
        }
    }

    /// A graph that fingerprints every ReLU mask and max-pool argmax.
    /// Gradient checking uses the fingerprint to detect a finite-difference
    /// step that crossed a kink.
    pub fn tracking_decisions() -> Self {
        Self {
            track_decisions: true,
            ..Self::new()
        }
    }

    pub fn decision_signature(&self) -> u64 {
        self.decisions
    }

    /// Smallest distance of any ReLU input from zero, or of any max-pool
    /// winner from its runner-up (exact ties excluded), seen while tracking.
    pub fn decision_margin(&self) -> f64 {
        self.margin
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Removes a leaf's tensor (with its accumulated gradient) from the graph.
    pub fn take_tensor(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn mix(&mut self, word: u64) {
        self.decisions = (self.decisions ^ word).wrapping_mul(FNV_PRIME);
    }

    /// Valid cross-correlation: `[B,Cin,L] * [Cout,Cin,K] + [Cout]` with the
    /// given stride, producing `[B,Cout,(L-K)/stride+1]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 3
            || ws.len() != 3
            || bs.len() != 1
            || xs[1] != ws[1]
            || bs[0] != ws[0]
            || stride == 0
            || xs[2] < ws[2]
        {
            return Err(Error::shape(
                "conv1d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}, stride {stride}"),
            ));
        }
        let (b, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let lout = (l - k) / stride + 1;
        let x = self.value(input);
        let w = self.value(weight);
        let bias_v = self.value(bias);
        let mut out = vec![T::zero(); b * cout * lout];
        for bi in 0..b {
            for co in 0..cout {
                let row = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                row.iter_mut().for_each(|v| *v = bias_v[co]);
                for ci in 0..cin {
                    let xrow = &x[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    let wrow = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    if stride == 1 {
                        for (kk, &wv) in wrow.iter().enumerate() {
                            axpy(wv, &xrow[kk..kk + lout], row);
                        }
                    } else {
                        for (t, o) in row.iter_mut().enumerate() {
                            *o = *o + dot(wrow, &xrow[t * stride..t * stride + k]);
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[input, weight, bias]);
        let value = Tensor::new(vec![b, cout, lout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
            },
            needs,
        ))
    }

    /// Per-channel normalisation over `(B, L)`. In train mode batch
    /// statistics are used and `stats` is updated with momentum 0.1 (the
    /// running variance uses the unbiased estimate); in eval mode `stats`
    /// is used as-is. Epsilon is 1e-5.
    pub fn batch_norm1d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (xs, gs, bs) = (self.shape(input), self.shape(gamma), self.shape(beta));
        if xs.len() != 3 || gs != [xs[1]] || bs != [xs[1]] || stats.mean.len() != xs[1] || stats.var.len() != xs[1] {
            return Err(Error::shape(
                "batch_norm1d",
                format!("input {xs:?}, gamma {gs:?}, beta {bs:?}, stats {}", stats.mean.len()),
            ));
        }
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        let n = b * l;
        if mode == Mode::Train && n < 2 {
            return Err(Error::shape(
                "batch_norm1d",
                format!("train mode needs at least 2 values per channel, input {xs:?}"),
            ));
        }
        let x = self.value(input);
        let g = self.value(gamma);
        let be = self.value(beta);
        let eps = T::of(BN_EPS);
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s = s + super::kernels::sum(&x[(bi * c + ch) * l..(bi * c + ch + 1) * l]);
                    }
                    let mean = s / nf;
                    let mut ss = T::zero();
                    for bi in 0..b {
                        for &v in &x[(bi * c + ch) * l..(bi * c + ch + 1) * l] {
                            ss = ss + (v - mean) * (v - mean);
                        }
                    }
                    let var = ss / nf;
                    let m = T::of(BN_MOMENTUM);
                    let unbiased = ss / T::of((n - 1) as f64);
                    stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean;
                    stats.var[ch] = (T::one() - m) * stats.var[ch] + m * unbiased;
                    (mean, var)
                }
                Mode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for bi in 0..b {
                let off = (bi * c + ch) * l;
                for i in off..off + l {
                    let h = (x[i] - mean) * is;
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let needs = self.needs(&[input, gamma, beta]);
        let value = Tensor::new(vec![b, c, l], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                mode,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<T> = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        if self.track_decisions {
            let words: Vec<u64> = x
                .chunks(64)
                .map(|c| c.iter().fold(0u64, |w, &v| (w << 1) | (v > T::zero()) as u64))
                .collect();
            let m = x.iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
            words.into_iter().for_each(|w| self.mix(w));
            self.margin = self.margin.min(m);
        }
        let shape = self.shape(input).to_vec();
        let needs = self.needs(&[input]);
        let value = Tensor::new(shape, out).expect("relu preserves shape");
        self.push(value, Op::Relu { input: input.0 }, needs)
    }

    /// Non-overlapping max pooling over the last axis (stride = window),
    /// dropping any remainder. Ties resolve to the first index.
    pub fn max_pool1d(&mut self, input: Var, window: usize) -> Result<Var> {
        let xs = self.shape(input);
        if xs.len() != 3 || window == 0 || xs[2] < window {
            return Err(Error::shape("max_pool1d", format!("input {xs:?}, window {window}")));
        }
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        let lout = l / window;
        let x = self.value(input);
        let mut out = Vec::with_capacity(b * c * lout);
        let mut argmax = Vec::with_capacity(b * c * lout);
        for row in 0..b * c {
            for t in 0..lout {
                let start = row * l + t * window;
                let mut best = start;
                for i in start + 1..start + window {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        if self.track_decisions {
            let mut m = f64::INFINITY;
            for (t, &a) in argmax.iter().enumerate() {
                let start = (t / lout) * l + (t % lout) * window;
                for i in start..start + window {
                    let gap = (x[a] - x[i]).as_f64();
                    if i != a && gap > 0.0 {
                        m = m.min(gap);
                    }
                }
            }
            for &a in &argmax {
                self.mix(a as u64);
            }
            self.margin = self.margin.min(m);
        }
        let needs = self.needs(&[input]);
        let value = Tensor::new(vec![b, c, lout], out)?;
        Ok(self.push(value, Op::MaxPool { input: input.0, argmax }, needs))
    }

    /// Mean over the time axis: `[B,C,L] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        if xs.len() != 3 || xs[2] == 0 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
        }
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        let lf = T::of(l as f64);
        let out: Vec<T> = self
            .value(input)
            .chunks_exact(l)
            .map(|row| super::kernels::sum(row) / lf)
            .collect();
        let needs = self.needs(&[input]);
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input: input.0 }, needs))
    }

    /// `[B,F] x [O,F]^T + [O] -> [B,O]`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (b, f, o) = (xs[0], xs[1], ws[0]);
        let x = self.value(input);
        let w = self.value(weight);
        let bias_v = self.value(bias);
        let mut out = Vec::with_capacity(b * o);
        for bi in 0..b {
            let xrow = &x[bi * f..(bi + 1) * f];
            for oi in 0..o {
                out.push(bias_v[oi] + dot(xrow, &w[oi * f..(oi + 1) * f]));
            }
        }
        let needs = self.needs(&[input, weight, bias]);
        let value = Tensor::new(vec![b, o], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy over the batch, computed with a
    /// max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits);
        if xs.len() != 2 || xs[0] != labels.len() || xs[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {xs:?}, {} labels", labels.len()),
            ));
        }
        let (b, c) = (xs[0], xs[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let z = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for bi in 0..b {
            let row = &z[bi * c..(bi + 1) * c];
            let max = row[1..].iter().fold(row[0], |m, &v| if v > m { v } else { m });
            let mut s = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[bi * c + j] = e;
                s = s + e;
            }
            for p in &mut probs[bi * c..(bi + 1) * c] {
                *p = *p / s;
            }
            let log_sum_exp = max + s.ln();
            total = total + (log_sum_exp - row[labels[bi]]);
        }
        let loss = total / T::of(b as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = super::kernels::sum(self.value(input));
        let needs = self.needs(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input: input.0 }, needs)
    }

    /// Scalar projection `sum(input * weights)` with constant weights.
    pub fn dot_const(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(input).len() {
            return Err(Error::shape(
                "dot_const",
                format!("input {:?}, {} weights", self.shape(input), weights.len()),
            ));
        }
        let s = dot(self.value(input), &weights);
        let needs = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                input: input.0,
                weights,
            },
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar. Gradients are added into every
    /// leaf that requires them, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if node.value.requires_grad() {
                        leaf_grads.push((idx, g));
                    }
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    stride,
                } => {
                    let (input, weight, bias, stride) = (*input, *weight, *bias, *stride);
                    let xs = self.nodes[input].value.shape();
                    let (b, cin, l) = (xs[0], xs[1], xs[2]);
                    let ws = self.nodes[weight].value.shape();
                    let (cout, k) = (ws[0], ws[2]);
                    let lout = node.value.shape()[2];
                    let x = self.nodes[input].value.data();
                    let w = self.nodes[weight].value.data();

                    if self.nodes[bias].needs_grad {
                        let db = slot(&mut grads, bias, cout);
                        for bi in 0..b {
                            for co in 0..cout {
                                let row = &g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                                db[co] = db[co] + super::kernels::sum(row);
                            }
                        }
                    }
                    if self.nodes[weight].needs_grad {
                        let dw = slot(&mut grads, weight, cout * cin * k);
                        for bi in 0..b {
                            for co in 0..cout {
                                let grow = &g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                                for ci in 0..cin {
                                    let xrow = &x[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                                    let dwrow = &mut dw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                    if stride == 1 {
                                        for (kk, d) in dwrow.iter_mut().enumerate() {
                                            *d = *d + dot(grow, &xrow[kk..kk + lout]);
                                        }
                                    } else {
                                        for (t, &gv) in grow.iter().enumerate() {
                                            axpy(gv, &xrow[t * stride..t * stride + k], dwrow);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if self.nodes[input].needs_grad {
                        let dx = slot(&mut grads, input, b * cin * l);
                        for bi in 0..b {
                            for co in 0..cout {
                                let grow = &g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                                for ci in 0..cin {
                                    let wrow = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                    let dxrow = &mut dx[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                                    if stride == 1 {
                                        for (kk, &wv) in wrow.iter().enumerate() {
                                            axpy(wv, grow, &mut dxrow[kk..kk + lout]);
                                        }
                                    } else {
                                        for (t, &gv) in grow.iter().enumerate() {
                                            axpy(gv, wrow, &mut dxrow[t * stride..t * stride + k]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let xs = node.value.shape();
                    let (b, c, l) = (xs[0], xs[1], xs[2]);
                    let gam = self.nodes[gamma].value.data();
                    let nf = T::of((b * l) as f64);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ch in 0..c {
                        for bi in 0..b {
                            let off = (bi * c + ch) * l;
                            dbeta[ch] = dbeta[ch] + super::kernels::sum(&g[off..off + l]);
                            dgamma[ch] = dgamma[ch] + dot(&g[off..off + l], &xhat[off..off + l]);
                        }
                    }
                    if self.nodes[input].needs_grad {
                        let dx = slot(&mut grads, input, b * c * l);
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for bi in 0..b {
                                let off = (bi * c + ch) * l;
                                for i in off..off + l {
                                    let term = match mode {
                                        // dx = gamma*inv_std/N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
                                        Mode::Train => g[i] - (dbeta[ch] + xhat[i] * dgamma[ch]) / nf,
                                        Mode::Eval => g[i],
                                    };
                                    dx[i] = dx[i] + scale * term;
                                }
                            }
                        }
                    }
                    if self.nodes[gamma].needs_grad {
                        super::kernels::add_assign(slot(&mut grads, gamma, c), &dgamma);
                    }
                    if self.nodes[beta].needs_grad {
                        super::kernels::add_assign(slot(&mut grads, beta, c), &dbeta);
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    let x = self.nodes[input].value.data();
                    let dx = slot(&mut grads, input, x.len());
                    for i in 0..x.len() {
                        if x[i] > T::zero() {
                            dx[i] = dx[i] + g[i];
                        }
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let input = *input;
                    let n = self.nodes[input].value.numel();
                    let dx = slot(&mut grads, input, n);
                    for (&a, &gv) in argmax.iter().zip(&g) {
                        dx[a] = dx[a] + gv;
                    }
                }
                Op::GlobalAvgPool { input } => {
                    let input = *input;
                    let xs = self.nodes[input].value.shape();
                    let l = xs[2];
                    let n = self.nodes[input].value.numel();
                    let lf = T::of(l as f64);
                    let dx = slot(&mut grads, input, n);
                    for (row, &gv) in dx.chunks_exact_mut(l).zip(&g) {
                        let share = gv / lf;
                        row.iter_mut().for_each(|d| *d = *d + share);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let xs = self.nodes[input].value.shape();
                    let (b, f) = (xs[0], xs[1]);
                    let o = self.nodes[weight].value.shape()[0];
                    let x = self.nodes[input].value.data();
                    let w = self.nodes[weight].value.data();
                    if self.nodes[bias].needs_grad {
                        let db = slot(&mut grads, bias, o);
                        for bi in 0..b {
                            super::kernels::add_assign(db, &g[bi * o..(bi + 1) * o]);
                        }
                    }
                    if self.nodes[weight].needs_grad {
                        let dw = slot(&mut grads, weight, o * f);
                        for bi in 0..b {
                            for oi in 0..o {
                                axpy(g[bi * o + oi], &x[bi * f..(bi + 1) * f], &mut dw[oi * f..(oi + 1) * f]);
                            }
                        }
                    }
                    if self.nodes[input].needs_grad {
                        let dx = slot(&mut grads, input, b * f);
                        for bi in 0..b {
                            for oi in 0..o {
                                axpy(g[bi * o + oi], &w[oi * f..(oi + 1) * f], &mut dx[bi * f..(bi + 1) * f]);
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    let logits = *logits;
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / T::of(b as f64);
                    let dz = slot(&mut grads, logits, b * c);
                    for bi in 0..b {
                        for j in 0..c {
                            let onehot = if labels[bi] == j { T::one() } else { T::zero() };
                            dz[bi * c + j] = dz[bi * c + j] + scale * (probs[bi * c + j] - onehot);
                        }
                    }
                }
                Op::Sum { input } => {
                    let input = *input;
                    let n = self.nodes[input].value.numel();
                    let dx = slot(&mut grads, input, n);
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
                Op::Dot { input, weights } => {
                    let input = *input;
                    let dx = slot(&mut grads, input, weights.len());
                    axpy(g[0], weights, dx);
                }
            }
        }

        for (idx, g) in leaf_grads {
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
