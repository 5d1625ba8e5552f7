//! The M5 raw-waveform CNN adapted to five heart-sound classes.
//!
//! Four blocks of conv -> batch norm -> ReLU -> max pool, then global average
//! pooling over time and a linear classifier. The first convolution has a
//! long strided kernel (80 taps, stride 16) acting as a learned front end.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Graph, Mode, Real, RunningStats, Tensor, Var};

pub const NUM_CLASSES: usize = 5;
pub const INPUT_RATE: u32 = 2000;
pub const INPUT_LEN: usize = 8000;

/// Layer geometry. Serialized with checkpoints so they are self-describing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub pools: Vec<usize>,
    pub num_classes: usize,
    pub input_len: usize,
}

impl ArchDescriptor {
    /// Channels (32, 32, 64, 64); kernel 80 / stride 16 then kernel 3;
    /// pool 4 after every block; 8000-sample input.
    pub fn m5(num_classes: usize) -> Self {
        Self {
            in_channels: 1,
            channels: vec![32, 32, 64, 64],
            kernels: vec![80, 3, 3, 3],
            strides: vec![16, 1, 1, 1],
            pools: vec![4, 4, 4, 4],
            num_classes,
            input_len: INPUT_LEN,
        }
    }

    /// Small variant for end-to-end gradient checks: channels (2, 2, 4, 4),
    /// 400-sample input. Pool window 2 and a 16/4 front end keep every
    /// intermediate length positive at that input size.
    pub fn shrunk() -> Self {
        Self {
            in_channels: 1,
            channels: vec![2, 2, 4, 4],
            kernels: vec![16, 3, 3, 3],
            strides: vec![4, 1, 1, 1],
            pools: vec![2, 2, 2, 2],
            num_classes: NUM_CLASSES,
            input_len: 400,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n || self.pools.len() != n {
            return Err(Error::InvalidArgument(format!("inconsistent architecture {self:?}")));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::InvalidArgument(
                "need >= 2 classes and >= 1 input channel".into(),
            ));
        }
        self.shape_trace().map(|_| ())
    }

    /// Time-axis length after each conv and each pool, in order.
    pub fn shape_trace(&self) -> Result<Vec<usize>> {
        let mut len = self.input_len;
        let mut trace = Vec::with_capacity(2 * self.channels.len());
        for i in 0..self.channels.len() {
            if len < self.kernels[i] || self.strides[i] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "block {i}: length {len} too short for kernel {}",
                    self.kernels[i]
                )));
            }
            len = (len - self.kernels[i]) / self.strides[i] + 1;
            trace.push(len);
            if len < self.pools[i] || self.pools[i] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "block {i}: length {len} too short for pool {}",
                    self.pools[i]
                )));
            }
            len /= self.pools[i];
            trace.push(len);
        }
        Ok(trace)
    }

    /// Trainable parameter count from the per-layer formulas.
    pub fn parameter_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for (&c, &k) in self.channels.iter().zip(&self.kernels) {
            total += c * cin * k + c; // conv
            total += 2 * c; // bn gamma, beta
            cin = c;
        }
        total + self.num_classes * cin + self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub running: RunningStats<T>,
}

/// Trainable and running state of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchDescriptor,
    pub blocks: Vec<BlockParams<T>>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

/// Default-architecture M5 with `num_classes` outputs.
pub fn build_m5<T: Real>(num_classes: usize, seed: u64) -> Result<ModelParams<T>> {
    ModelParams::new(ArchDescriptor::m5(num_classes), seed)
}

fn uniform<T: Real>(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches").requiring_grad()
}

impl<T: Real> ModelParams<T> {
    /// Conv and linear weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    /// batch norm gamma 1, beta 0, running mean 0, running variance 1.
    pub fn new(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = arch.in_channels;
        let mut blocks = Vec::with_capacity(arch.channels.len());
        for (&c, &k) in arch.channels.iter().zip(&arch.kernels) {
            let bound = 1.0 / ((cin * k) as f64).sqrt();
            blocks.push(BlockParams {
                conv_weight: uniform(vec![c, cin, k], bound, &mut rng),
                conv_bias: uniform(vec![c], bound, &mut rng),
                bn_gamma: Tensor::filled(vec![c], T::one()).requiring_grad(),
                bn_beta: Tensor::zeros(vec![c]).requiring_grad(),
                running: RunningStats::new(c),
            });
            cin = c;
        }
        let bound = 1.0 / (cin as f64).sqrt();
        let fc_weight = uniform(vec![arch.num_classes, cin], bound, &mut rng);
        let fc_bias = uniform(vec![arch.num_classes], bound, &mut rng);
        Ok(Self {
            arch,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    /// Parameters in canonical order with their names.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.conv.weight"), &b.conv_weight));
            out.push((format!("blocks.{i}.conv.bias"), &b.conv_bias));
            out.push((format!("blocks.{i}.bn.weight"), &b.bn_gamma));
            out.push((format!("blocks.{i}.bn.bias"), &b.bn_beta));
        }
        out.push(("fc.weight".into(), &self.fc_weight));
        out.push(("fc.bias".into(), &self.fc_bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv_weight);
            out.push(&mut b.conv_bias);
            out.push(&mut b.bn_gamma);
            out.push(&mut b.bn_beta);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Inserts copies of every parameter into `graph` as leaves.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.named_parameters()
            .into_iter()
            .map(|(_, t)| graph.leaf(t.clone()))
            .collect()
    }

    /// Adds the gradients accumulated on bound leaves into the parameters.
    pub fn collect_grads(&mut self, graph: &Graph<T>, vars: &[Var]) {
        for (p, &v) in self.parameters_mut().into_iter().zip(vars) {
            if let Some(g) = graph.grad(v) {
                p.accumulate_grad(g);
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        if shape.len() != 3 || shape[1] != a.in_channels || shape[2] != a.input_len || shape[0] == 0 {
            let trace = a.shape_trace().unwrap_or_default();
            return Err(Error::shape(
                "m5 forward",
                format!(
                    "expected input [B, {}, {}] (time-axis trace {:?}), got {shape:?}",
                    a.in_channels, a.input_len, trace
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass over already-bound parameters. Returns the logits and
    /// the observed time-axis length after each conv and pool.
    pub fn forward_bound(
        &mut self,
        graph: &mut Graph<T>,
        input: Var,
        vars: &[Var],
        mode: Mode,
    ) -> Result<(Var, Vec<usize>)> {
        self.check_input(graph.shape(input))?;
        let mut trace = Vec::with_capacity(2 * self.blocks.len());
        let mut h = input;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = &vars[4 * i..4 * i + 4];
            h = graph.conv1d(h, p[0], p[1], self.arch.strides[i])?;
            trace.push(graph.shape(h)[2]);
            h = graph.batch_norm1d(h, p[2], p[3], &mut block.running, mode)?;
            h = graph.relu(h);
            h = graph.max_pool1d(h, self.arch.pools[i])?;
            trace.push(graph.shape(h)[2]);
        }
        let pooled = graph.global_avg_pool(h)?;
        let n = vars.len();
        let logits = graph.linear(pooled, vars[n - 2], vars[n - 1])?;
        Ok((logits, trace))
    }

    /// Binds the parameters and runs the forward pass.
    pub fn forward(&mut self, graph: &mut Graph<T>, input: Var, mode: Mode) -> Result<(Var, Vec<Var>)> {
        let vars = self.bind(graph);
        let (logits, _) = self.forward_bound(graph, input, &vars, mode)?;
        Ok((logits, vars))
    }

    /// Eval-mode logits `[B, num_classes]`; running statistics are untouched.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut graph = Graph::new();
        let x = graph.leaf(batch.clone());
        let (logits, _) = scratch.forward(&mut graph, x, Mode::Eval)?;
        Ok(graph.take_tensor(logits))
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.data().chunks(self.arch.num_classes).map(argmax).collect())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    conv_weight: b.conv_weight.cast(),
                    conv_bias: b.conv_bias.cast(),
                    bn_gamma: b.bn_gamma.cast(),
                    bn_beta: b.bn_beta.cast(),
                    running: RunningStats {
                        mean: b.running.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                        var: b.running.var.iter().map(|v| U::of(v.as_f64())).collect(),
                    },
                })
                .collect(),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub block: usize,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Textual (JSON) checkpoint: architecture, parameters, batch-norm running
/// statistics and optimizer state, all as 32-bit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: ArchDescriptor,
    pub parameters: Vec<NamedTensor>,
    pub batch_norm: Vec<BnStats>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn capture(params: &ModelParams<f32>, optimizer: Option<&AdamState<f32>>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            arch: params.arch.clone(),
            parameters: params
                .named_parameters()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
            batch_norm: params
                .blocks
                .iter()
                .enumerate()
                .map(|(block, b)| BnStats {
                    block,
                    running_mean: b.running.mean.clone(),
                    running_var: b.running.var.clone(),
                })
                .collect(),
            optimizer: optimizer.map(|s| OptimizerSnapshot {
                config: s.config,
                step: s.step,
                m: s.m.clone(),
                v: s.v.clone(),
            }),
        }
    }

    /// Rebuilds model parameters, checking every name and shape against the
    /// stored architecture.
    pub fn restore(&self) -> Result<ModelParams<f32>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let mut params = ModelParams::<f32>::new(self.arch.clone(), 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != self.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.parameters.len()
            )));
        }
        for ((slot, (name, shape)), stored) in params.parameters_mut().into_iter().zip(&expected).zip(&self.parameters)
        {
            if &stored.name != name || &stored.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match architecture ({name} {shape:?})",
                    stored.name, stored.shape
                )));
            }
            *slot = Tensor::new(shape.clone(), stored.values.clone())?.requiring_grad();
        }
        if self.batch_norm.len() != params.blocks.len() {
            return Err(Error::Checkpoint(
                "batch norm statistics do not match block count".into(),
            ));
        }
        for (block, stats) in params.blocks.iter_mut().zip(&self.batch_norm) {
            let c = block.running.mean.len();
            if stats.running_mean.len() != c || stats.running_var.len() != c {
                return Err(Error::Checkpoint(format!(
                    "block {} statistics length mismatch",
                    stats.block
                )));
            }
            block.running.mean = stats.running_mean.clone();
            block.running.var = stats.running_var.clone();
        }
        Ok(params)
    }

    pub fn optimizer_state(&self) -> Option<AdamState<f32>> {
        self.optimizer.as_ref().map(|o| AdamState {
            config: o.config,
            step: o.step,
            m: o.m.clone(),
            v: o.v.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn default_parameter_count() {
        let arch = ArchDescriptor::m5(5);
        // conv: 2592 + 3104 + 6208 + 12352, bn: 64 + 64 + 128 + 128, fc: 325
        assert_eq!(arch.parameter_count(), 24_965);
        let params = build_m5::<f32>(5, 0).unwrap();
        assert_eq!(params.parameter_count(), 24_965);
    }

    #[test]
    fn shape_trace_of_default_input() {
        assert_eq!(
            ArchDescriptor::m5(5).shape_trace().unwrap(),
            vec![496, 124, 122, 30, 28, 7, 5, 1]
        );
        assert!(ArchDescriptor::shrunk().shape_trace().is_ok());
    }

    #[test]
    fn forward_shapes_and_trace() {
        let mut params = build_m5::<f32>(5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..5 * 8000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![5, 1, 8000], data).unwrap());
        let vars = params.bind(&mut g);
        let (logits, trace) = params.forward_bound(&mut g, x, &vars, Mode::Train).unwrap();
        assert_eq!(g.shape(logits), &[5, 5]);
        assert_eq!(trace, vec![496, 124, 122, 30, 28, 7, 5, 1]);
    }

    #[test]
    fn wrong_input_length_is_rejected_with_trace() {
        let params = build_m5::<f32>(5, 1).unwrap();
        let err = params
            .predict(&Tensor::zeros(vec![1, 1, 7999]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("8000") && err.contains("496"), "{err}");
    }

    #[test]
    fn class_count_and_determinism() {
        let two = build_m5::<f32>(2, 3).unwrap();
        assert_eq!(two.fc_weight.shape(), &[2, 64]);
        assert_eq!(build_m5::<f32>(5, 3).unwrap(), build_m5::<f32>(5, 3).unwrap());
        assert_ne!(build_m5::<f32>(5, 3).unwrap(), build_m5::<f32>(5, 4).unwrap());
        assert!(build_m5::<f32>(1, 3).is_err());
    }

    #[test]
    fn zero_input_gives_identical_rows() {
        let params = build_m5::<f32>(5, 11).unwrap();
        let logits = params.logits(&Tensor::zeros(vec![3, 1, 8000])).unwrap();
        let rows: Vec<&[f32]> = logits.data().chunks(5).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn eval_is_pure() {
        let params = build_m5::<f32>(5, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![2, 1, 8000], (0..16000).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = params.logits(&x).unwrap();
        let b = params.logits(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 0.0, 1.0]), 4);
        assert_eq!(argmax(&[0.5; 5]), 0);
        let row = [0.3, -1.0, 2.0, 2.0, 0.1];
        let shifted: Vec<f64> = row.iter().map(|v| v + 7.5).collect();
        assert_eq!(argmax(&row), argmax(&shifted));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut params = build_m5::<f32>(5, 5).unwrap();
        params.blocks[0].running.mean[3] = 0.25;
        let ck = Checkpoint::capture(&params, None);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().restore().unwrap();
        assert_eq!(back, params);

        let mut bad = ck.clone();
        bad.parameters[0].shape = vec![32, 1, 79];
        assert!(matches!(bad.restore(), Err(Error::Checkpoint(_))));
    }
}
