//! Sequential conv/ReLU networks with a global-average-pool head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::catalog::{desk3_catalog, ArchCatalog};
use super::dataset::{gather, Dataset, NUM_CLASSES};
use crate::error::{NernError, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::smoothness::{smoothness_loss, smoothness_loss_node};
use crate::tensor::{read_tensor_file, write_tensor_file, Graph, NodeId, Tensor};

const EVAL_CHUNK: usize = 256;

/// A pre-trained (or trainable) network whose conv kernels NeRN represents.
#[derive(Clone, Debug, PartialEq)]
pub struct OriginalNetwork {
    pub catalog: ArchCatalog,
    /// One `[F, C, k, k]` tensor per catalog layer.
    pub conv_weights: Vec<Tensor<f32>>,
    pub conv_biases: Vec<Tensor<f32>>,
    /// `[classes, F_last]`
    pub head_weight: Tensor<f32>,
    pub head_bias: Tensor<f32>,
}

/// Graph handles for one network instance.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub conv_weights: Vec<NodeId>,
    pub conv_biases: Vec<NodeId>,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
}

#[derive(Clone, Debug)]
pub struct Trace {
    /// Post-ReLU output of every predictable conv layer.
    pub features: Vec<NodeId>,
    pub logits: NodeId,
}

pub fn build_desk_cnn(seed: u64) -> OriginalNetwork {
    OriginalNetwork::random(desk3_catalog(), NUM_CLASSES, seed).expect("desk3 is sequential")
}

impl OriginalNetwork {
    /// He-normal conv weights, zero biases, for a sequential catalog.
    pub fn random(catalog: ArchCatalog, classes: usize, seed: u64) -> Result<Self> {
        for pair in catalog.layers.windows(2) {
            if pair[1].channels != pair[0].filters {
                return Err(NernError::InvalidArgument(format!(
                    "catalog `{}` is not a sequential chain at layer `{}`",
                    catalog.name, pair[1].name
                )));
            }
        }
        let mut rng = rng::stream(seed, 0x1417);
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        for layer in &catalog.layers {
            let fan_in = (layer.channels * layer.kernel * layer.kernel) as f32;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            conv_weights.push(Tensor::from_fn(&layer.weight_shape(), |_| dist.sample(&mut rng)));
            conv_biases.push(Tensor::zeros(&[layer.filters]));
        }
        let last = catalog.layers.last().expect("non-empty").filters;
        let dist = Normal::new(0.0, (1.0 / last as f32).sqrt()).expect("positive std");
        let head_weight = Tensor::from_fn(&[classes, last], |_| dist.sample(&mut rng));
        Ok(Self {
            catalog,
            conv_weights,
            conv_biases,
            head_weight,
            head_bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn classes(&self) -> usize {
        self.head_bias.len()
    }

    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> BoundNetwork {
        let mut leaf = |t: &Tensor<f32>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        BoundNetwork {
            conv_weights: self.conv_weights.iter().map(&mut leaf).collect(),
            conv_biases: self.conv_biases.iter().map(&mut leaf).collect(),
            head_weight: leaf(&self.head_weight),
            head_bias: leaf(&self.head_bias),
        }
    }

    pub fn predictable_weights(&self) -> Vec<&Tensor<f32>> {
        self.catalog
            .predictable_indices()
            .into_iter()
            .map(|i| &self.conv_weights[i])
            .collect()
    }

    /// Copy of this network with its predictable conv weights replaced.
    pub fn with_predictable_weights(&self, weights: Vec<Tensor<f32>>) -> Result<Self> {
        let idx = self.catalog.predictable_indices();
        if weights.len() != idx.len() {
            return Err(NernError::Shape(format!(
                "expected {} predictable layers, got {}",
                idx.len(),
                weights.len()
            )));
        }
        let mut out = self.clone();
        for (i, w) in idx.into_iter().zip(weights) {
            if w.shape() != out.conv_weights[i].shape() {
                return Err(NernError::Shape(format!(
                    "layer {i}: expected {:?}, got {:?}",
                    out.conv_weights[i].shape(),
                    w.shape()
                )));
            }
            out.conv_weights[i] = w;
        }
        Ok(out)
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = x.shape()[0];
        let mut data = Vec::with_capacity(n * self.classes());
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let input = g.constant(gather(x, &idx));
            let trace = forward(&mut g, &self.catalog, &bound, input)?;
            data.extend_from_slice(g.value(trace.logits).data());
        }
        Tensor::new(vec![n, self.classes()], data)
    }

    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(accuracy_from_logits(&logits, labels))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, (w, b)) in self.conv_weights.iter().zip(&self.conv_biases).enumerate() {
            write_tensor_file(w, dir.join(format!("conv{i}.weight.nrt")))?;
            write_tensor_file(b, dir.join(format!("conv{i}.bias.nrt")))?;
        }
        write_tensor_file(&self.head_weight, dir.join("head.weight.nrt"))?;
        write_tensor_file(&self.head_bias, dir.join("head.bias.nrt"))?;
        Ok(())
    }

    pub fn load(dir: &Path, catalog: ArchCatalog) -> Result<Self> {
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        for (i, layer) in catalog.layers.iter().enumerate() {
            let w: Tensor<f32> = read_tensor_file(dir.join(format!("conv{i}.weight.nrt")))?;
            if w.shape() != layer.weight_shape() {
                return Err(NernError::Shape(format!(
                    "conv{i}: catalog says {:?}, file holds {:?}",
                    layer.weight_shape(),
                    w.shape()
                )));
            }
            conv_weights.push(w);
            conv_biases.push(read_tensor_file(dir.join(format!("conv{i}.bias.nrt")))?);
        }
        Ok(Self {
            catalog,
            conv_weights,
            conv_biases,
            head_weight: read_tensor_file(dir.join("head.weight.nrt"))?,
            head_bias: read_tensor_file(dir.join("head.bias.nrt"))?,
        })
    }
}

pub fn accuracy_from_logits(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// conv -> ReLU for every layer, then global average pool and the dense head.
pub fn forward(g: &mut Graph<f32>, catalog: &ArchCatalog, net: &BoundNetwork, input: NodeId) -> Result<Trace> {
    let mut h = input;
    let mut features = Vec::new();
    for (i, layer) in catalog.layers.iter().enumerate() {
        h = g.conv2d(h, net.conv_weights[i], Some(net.conv_biases[i]), layer.stride, layer.padding)?;
        h = g.relu(h);
        if layer.predictable {
            features.push(h);
        }
    }
    let pooled = g.global_avg_pool(h)?;
    let logits = g.dense(pooled, net.head_weight, net.head_bias)?;
    Ok(Trace { features, logits })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginalTrainConfig {
    /// Weight of the kernel smoothness penalty.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for OriginalTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            epochs: 30,
            batch_size: 64,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub smoothness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginalTrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub test_accuracy: f64,
    /// Smoothness loss of the final weights.
    pub smoothness: f64,
}

/// Cross-entropy training with an optional `lambda * L_smooth` penalty.
pub fn train_original(
    mut net: OriginalNetwork,
    data: &Dataset,
    cfg: &OriginalTrainConfig,
) -> Result<(OriginalNetwork, OriginalTrainReport)> {
    if data.train_len() == 0 {
        return Err(NernError::InvalidArgument("training set is empty".into()));
    }
    if cfg.lambda < 0.0 {
        return Err(NernError::InvalidArgument("smoothness factor must be >= 0".into()));
    }
    let mut rng = rng::stream(cfg.seed, 0x0e1c);
    let classes = net.classes();
    let mut opt = {
        let params = param_refs(&net);
        Optimizer::new(OptimizerKind::Adam, &params)
    };
    let predictable = net.catalog.predictable_indices();
    let mut order: Vec<usize> = (0..data.train_len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut task_total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.constant(data.train_batch(chunk));
            let trace = forward(&mut g, &net.catalog, &bound, x)?;
            let q = g.softmax(trace.logits)?;
            let mut onehot = Tensor::zeros(&[chunk.len(), classes]);
            for (row, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[row * classes + data.train_y[i]] = 1.0;
            }
            let p = g.constant(onehot);
            // KL against a one-hot target is exactly the cross-entropy.
            let task = g.kl_div(p, q)?;
            let mut loss = task;
            if cfg.lambda > 0.0 {
                let mut smooth_terms = Vec::new();
                for &i in &predictable {
                    smooth_terms.push(smoothness_loss_node(&mut g, bound.conv_weights[i])?);
                }
                let mut smooth = smooth_terms[0];
                for &t in &smooth_terms[1..] {
                    smooth = g.add(smooth, t)?;
                }
                let penalty = g.scale(smooth, cfg.lambda as f32);
                loss = g.add(task, penalty)?;
            }
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(NernError::OriginalDiverged(epoch));
            }
            task_total += g.value(task).item() as f64;
            steps += 1;
            let mut grads = g.backward(loss)?;
            let grad_list = bound_ids(&bound).into_iter().map(|id| grads.take(id)).collect::<Vec<_>>();
            let mut params = param_refs_mut(&mut net);
            opt.step(&mut params, &grad_list, cfg.lr);
        }
        let owned: Vec<Tensor<f32>> = net.predictable_weights().into_iter().cloned().collect();
        epochs.push(EpochMetrics {
            epoch,
            task_loss: task_total / steps as f64,
            smoothness: smoothness_loss(&owned),
        });
    }
    let test_accuracy = net.accuracy(&data.test_x, &data.test_y)?;
    let owned: Vec<Tensor<f32>> = net.predictable_weights().into_iter().cloned().collect();
    let report = OriginalTrainReport {
        epochs,
        test_accuracy,
        smoothness: smoothness_loss(&owned),
    };
    Ok((net, report))
}

fn bound_ids(b: &BoundNetwork) -> Vec<NodeId> {
    let mut ids = Vec::new();
    ids.extend(&b.conv_weights);
    ids.extend(&b.conv_biases);
    ids.push(b.head_weight);
    ids.push(b.head_bias);
    ids
}

fn param_refs(net: &OriginalNetwork) -> Vec<&Tensor<f32>> {
    let mut v: Vec<&Tensor<f32>> = Vec::new();
    v.extend(&net.conv_weights);
    v.extend(&net.conv_biases);
    v.push(&net.head_weight);
    v.push(&net.head_bias);
    v
}

fn param_refs_mut(net: &mut OriginalNetwork) -> Vec<&mut Tensor<f32>> {
    let mut v: Vec<&mut Tensor<f32>> = Vec::new();
    v.extend(net.conv_weights.iter_mut());
    v.extend(net.conv_biases.iter_mut());
    v.push(&mut net.head_weight);
    v.push(&mut net.head_bias);
    v
}
