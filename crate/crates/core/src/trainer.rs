//! Predictor training: reconstruction, feature-map and logit distillation.

use std::io::Write;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NernError, Result};
use crate::optim::{CosineSchedule, Optimizer, OptimizerKind};
use crate::predictor::{KernelLayout, NernPredictor};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::zoo::{forward, gather, BoundNetwork, Dataset, OriginalNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    All,
    RandomLayer,
    UniformBatch,
    MagnitudeMixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    pub batch_size: usize,
    /// Probability that a draw is uniform rather than magnitude-weighted.
    pub p_uni: f64,
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        Self {
            kind: SamplingKind::MagnitudeMixed,
            batch_size: 256,
            p_uni: 0.8,
        }
    }
}

/// Which predicted kernels receive gradients from the distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillGrad {
    Full,
    SampledOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    /// `||W - W_hat||_2 / count`
    Norm,
    /// `mean((W - W_hat)^2)`
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub recon_weight: f64,
    pub lr: f32,
    pub iterations: usize,
    pub cosine: bool,
    pub task_batch: usize,
    pub sampling: SamplingStrategy,
    pub noise_inputs: bool,
    pub seed: u64,
    pub distill_grad: DistillGrad,
    pub recon_kind: ReconKind,
    pub optimizer: OptimizerKind,
    /// Evaluate reconstructed accuracy every this many iterations (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            recon_weight: 1.0,
            lr: 5e-3,
            iterations: 5000,
            cosine: true,
            task_batch: 64,
            sampling: SamplingStrategy::default(),
            noise_inputs: false,
            seed: 0,
            distill_grad: DistillGrad::Full,
            recon_kind: ReconKind::Norm,
            optimizer: OptimizerKind::Adam,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [self.alpha, self.beta, self.recon_weight];
        if coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(NernError::Config("loss coefficients must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.sampling.p_uni) {
            return Err(NernError::Config("p_uni must lie in [0, 1]".into()));
        }
        if self.task_batch == 0 || !(self.lr >= 0.0) {
            return Err(NernError::Config("task batch must be >= 1 and lr >= 0".into()));
        }
        Ok(())
    }
}

/// `||w - w_hat||_2 / len`.
pub fn recon_loss(w: &[f32], w_hat: &[f32]) -> Result<f64> {
    if w.is_empty() {
        return Err(NernError::EmptySample);
    }
    if w.len() != w_hat.len() {
        return Err(NernError::Shape(format!("{} vs {} weights", w.len(), w_hat.len())));
    }
    let sq: f64 = w.iter().zip(w_hat).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
    Ok(sq.sqrt() / w.len() as f64)
}

/// Reconstruction term on the gathered prediction elements `indices`.
pub fn recon_loss_node(
    g: &mut Graph<f32>,
    predictions: NodeId,
    indices: Vec<usize>,
    target: Vec<f32>,
    kind: ReconKind,
) -> Result<NodeId> {
    if indices.is_empty() {
        return Err(NernError::EmptySample);
    }
    let n = indices.len();
    let picked = g.take(predictions, indices, &[n])?;
    let target = g.constant(Tensor::new(vec![n], target)?);
    let diff = g.sub(picked, target)?;
    Ok(match kind {
        ReconKind::Norm => {
            let norm = g.l2_norm(diff);
            g.scale(norm, 1.0 / n as f32)
        }
        ReconKind::Mse => {
            let sq = g.mul(diff, diff)?;
            g.mean(sq)
        }
    })
}

/// Batch mean of the per-layer distances between unit-normalized feature maps.
pub fn fmd_loss_node(g: &mut Graph<f32>, original: &[NodeId], reconstructed: &[NodeId]) -> Result<NodeId> {
    if original.len() != reconstructed.len() || original.is_empty() {
        return Err(NernError::Shape("feature map lists differ".into()));
    }
    let batch = g.shape(original[0])[0];
    let mut total: Option<NodeId> = None;
    for (&a, &b) in original.iter().zip(reconstructed) {
        let d = g.value(a).len() / batch;
        let a = g.reshape(a, &[batch, d])?;
        let b = g.reshape(b, &[batch, d])?;
        let na = g.row_normalize(a)?;
        let nb = g.row_normalize(b)?;
        let diff = g.sub(na, nb)?;
        let per_sample = g.row_l2_norm(diff)?;
        let layer = g.sum(per_sample);
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / batch as f32))
}

/// `KL(softmax(original) || softmax(reconstructed))`, batch mean.
pub fn kd_loss_node(g: &mut Graph<f32>, original_logits: NodeId, reconstructed_logits: NodeId) -> Result<NodeId> {
    let p = g.softmax(original_logits)?;
    let q = g.softmax(reconstructed_logits)?;
    g.kl_div(p, q)
}

/// Kernel rows to train on this step, without duplicates.
pub fn sample_coordinates(
    strategy: &SamplingStrategy,
    rng: &mut Rng,
    layout: &KernelLayout,
    magnitudes: &[f64],
) -> Result<Vec<usize>> {
    let n = layout.rows();
    match strategy.kind {
        SamplingKind::All => Ok((0..n).collect()),
        SamplingKind::RandomLayer => {
            let l = &layout.layers[rng.gen_range(0..layout.layers.len())];
            let start = l.row_offset;
            Ok((start..start + l.filters * l.channels).collect())
        }
        SamplingKind::UniformBatch => {
            check_batch(strategy.batch_size, n)?;
            Ok(index::sample(rng, n, strategy.batch_size).into_vec())
        }
        SamplingKind::MagnitudeMixed => {
            check_batch(strategy.batch_size, n)?;
            magnitude_mixed(rng, magnitudes, strategy.batch_size, strategy.p_uni)
        }
    }
}

fn check_batch(requested: usize, population: usize) -> Result<()> {
    if requested == 0 {
        return Err(NernError::EmptySample);
    }
    if requested > population {
        return Err(NernError::SampleTooLarge { requested, population });
    }
    Ok(())
}

/// Draws without replacement: uniform with probability `p_uni`, otherwise
/// proportional to `magnitudes` among the remaining items.
pub fn magnitude_mixed(rng: &mut Rng, magnitudes: &[f64], count: usize, p_uni: f64) -> Result<Vec<usize>> {
    check_batch(count, magnitudes.len())?;
    if magnitudes.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(NernError::InvalidArgument("magnitudes must be finite and >= 0".into()));
    }
    let mut remaining: Vec<usize> = (0..magnitudes.len()).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let uniform = rng.gen::<f64>() < p_uni;
        let total: f64 = if uniform { 0.0 } else { remaining.iter().map(|&i| magnitudes[i]).sum() };
        let pos = if uniform || total <= 0.0 {
            rng.gen_range(0..remaining.len())
        } else {
            let mut u = rng.gen::<f64>() * total;
            let mut pos = remaining.len() - 1;
            for (p, &i) in remaining.iter().enumerate() {
                if u < magnitudes[i] {
                    pos = p;
                    break;
                }
                u -= magnitudes[i];
            }
            pos
        };
        out.push(remaining.remove(pos));
    }
    Ok(out)
}

/// A task minibatch: standard-normal noise or unlabeled training images.
pub fn make_inputs(noise: bool, data: &Dataset, batch: usize, rng: &mut Rng) -> Tensor<f32> {
    let [c, h, w] = data.input_shape();
    if noise {
        Tensor::from_fn(&[batch, c, h, w], |_| StandardNormal.sample(rng))
    } else {
        let n = data.train_len();
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        gather(&data.train_x, &idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub recon_loss: f64,
    pub kd_loss: f64,
    pub fmd_loss: f64,
    pub lr: f64,
    pub eval_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,recon_loss,kd_loss,fmd_loss,lr,eval_acc";

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        let acc = r.eval_acc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{}", r.iter, r.recon_loss, r.kd_loss, r.fmd_loss, r.lr, acc)?;
    }
    Ok(())
}

/// Loss values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub recon: f64,
    pub kd: f64,
    pub fmd: f64,
    pub total: f64,
}

struct Objective {
    terms: LossTerms,
    graph: Graph<f32>,
    total: NodeId,
    params: Vec<NodeId>,
    #[cfg_attr(not(test), allow(dead_code))]
    predictions: NodeId,
}

/// Training state for one predictor against one original network.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    original: &'a OriginalNetwork,
    data: &'a Dataset,
    layout: KernelLayout,
    embeddings: Tensor<f32>,
    targets: Tensor<f32>,
    magnitudes: Vec<f64>,
    predictor: NernPredictor,
    optimizer: Optimizer,
    schedule: CosineSchedule,
    sample_rng: Rng,
    input_rng: Rng,
    iteration: usize,
    oracle: bool,
    metrics: Vec<MetricsRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        original: &'a OriginalNetwork,
        data: &'a Dataset,
        layout: KernelLayout,
        predictor: NernPredictor,
    ) -> Result<Self> {
        cfg.validate()?;
        let weights = original.predictable_weights();
        let targets = layout.oracle_rows(&weights);
        let magnitudes = layout.row_magnitudes(&weights);
        let embeddings = layout.embeddings(&predictor.config.embedding);
        let optimizer = Optimizer::new(cfg.optimizer, &predictor.params());
        Ok(Self {
            schedule: CosineSchedule {
                lr_max: cfg.lr,
                total_steps: cfg.iterations,
                enabled: cfg.cosine,
            },
            sample_rng: rng::stream(cfg.seed, 0x5a3),
            input_rng: rng::stream(cfg.seed, 0x1a9),
            cfg,
            original,
            data,
            layout,
            embeddings,
            targets,
            magnitudes,
            predictor,
            optimizer,
            iteration: 0,
            oracle: false,
            metrics: Vec::new(),
        })
    }

    /// Replaces predictor outputs with the original kernels. Steps then
    /// evaluate the losses without updating anything.
    pub fn set_oracle(&mut self, on: bool) {
        self.oracle = on;
    }

    pub fn predictor(&self) -> &NernPredictor {
        &self.predictor
    }

    pub fn into_predictor(self) -> NernPredictor {
        self.predictor
    }

    pub fn layout(&self) -> &KernelLayout {
        &self.layout
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Builds the objective on a fresh graph.
    fn objective(&self, rows: &[usize], x: Tensor<f32>) -> Result<Objective> {
        let mut g = Graph::new();
        let (predictions, params) = if self.oracle {
            (g.constant(self.targets.clone()), Vec::new())
        } else {
            let bound = self.predictor.bind(&mut g, true);
            let e = g.constant(self.embeddings.clone());
            let out = self.predictor.forward(&mut g, &bound, e)?;
            (out, bound.weights.into_iter().chain(bound.biases).collect())
        };

        let mut indices = Vec::new();
        for &r in rows {
            indices.extend(self.layout.row_elements(r));
        }
        let target: Vec<f32> = indices.iter().map(|&i| self.targets.data()[i]).collect();
        let recon = recon_loss_node(&mut g, predictions, indices, target, self.cfg.recon_kind)?;

        let distill_source = match self.cfg.distill_grad {
            DistillGrad::Full => predictions,
            DistillGrad::SampledOnly => {
                // detached + mask * (live - detached): same values, gradient only on sampled rows
                let k2 = self.layout.output_kernel.pow(2);
                let frozen = g.value(predictions).clone();
                let detached = g.constant(frozen);
                let mut mask = Tensor::zeros(g.shape(predictions));
                for &r in rows {
                    mask.data_mut()[r * k2..(r + 1) * k2].fill(1.0);
                }
                let mask = g.constant(mask);
                let delta = g.sub(predictions, detached)?;
                let masked = g.mul(mask, delta)?;
                g.add(detached, masked)?
            }
        };
        let predicted_layers = self.layout.reconstruct_nodes(&mut g, distill_source)?;

        let net = self.original;
        let teacher = net.bind(&mut g, false);
        let mut student = BoundNetwork {
            conv_weights: teacher.conv_weights.clone(),
            conv_biases: teacher.conv_biases.clone(),
            head_weight: teacher.head_weight,
            head_bias: teacher.head_bias,
        };
        for (l, node) in self.layout.layers.iter().zip(predicted_layers) {
            student.conv_weights[l.catalog_index] = node;
        }
        let input = g.constant(x);
        let t_trace = forward(&mut g, &net.catalog, &teacher, input)?;
        let s_trace = forward(&mut g, &net.catalog, &student, input)?;
        let kd = kd_loss_node(&mut g, t_trace.logits, s_trace.logits)?;
        let fmd = fmd_loss_node(&mut g, &t_trace.features, &s_trace.features)?;

        let r_term = g.scale(recon, self.cfg.recon_weight as f32);
        let kd_term = g.scale(kd, self.cfg.alpha as f32);
        let fmd_term = g.scale(fmd, self.cfg.beta as f32);
        let partial = g.add(r_term, kd_term)?;
        let total = g.add(partial, fmd_term)?;
        let terms = LossTerms {
            recon: g.value(recon).item() as f64,
            kd: g.value(kd).item() as f64,
            fmd: g.value(fmd).item() as f64,
            total: g.value(total).item() as f64,
        };
        Ok(Objective {
            terms,
            graph: g,
            total,
            params,
            predictions,
        })
    }

    /// One optimization step; appends and returns its metrics row.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let rows = sample_coordinates(&self.cfg.sampling, &mut self.sample_rng, &self.layout, &self.magnitudes)?;
        let x = make_inputs(self.cfg.noise_inputs, self.data, self.cfg.task_batch, &mut self.input_rng);
        let lr = self.schedule.lr(self.iteration);
        let Objective {
            terms,
            graph: mut g,
            total,
            params,
            ..
        } = self.objective(&rows, x)?;
        if !terms.total.is_finite() {
            return Err(NernError::Diverged {
                iteration: self.iteration,
                last_good: Box::new(self.predictor.clone()),
            });
        }
        if !self.oracle {
            let mut grads = g.backward(total)?;
            let grads: Vec<Tensor<f32>> = params.iter().map(|&p| grads.take(p)).collect();
            let before = self.predictor.clone();
            self.optimizer.step(&mut self.predictor.params_mut(), &grads, lr);
            if self.predictor.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(NernError::Diverged {
                    iteration: self.iteration,
                    last_good: Box::new(before),
                });
            }
        }
        self.iteration += 1;
        let eval_due = self.iteration == self.cfg.iterations
            || (self.cfg.eval_every > 0 && self.iteration % self.cfg.eval_every == 0);
        let eval_acc = if eval_due { Some(self.evaluate()?) } else { None };
        let row = MetricsRow {
            iter: self.iteration - 1,
            recon_loss: terms.recon,
            kd_loss: terms.kd,
            fmd_loss: terms.fmd,
            lr: lr as f64,
            eval_acc,
        };
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Loss terms on the full kernel set for a given input batch, without updating.
    pub fn evaluate_losses(&self, x: Tensor<f32>) -> Result<LossTerms> {
        let rows: Vec<usize> = (0..self.layout.rows()).collect();
        Ok(self.objective(&rows, x)?.terms)
    }

    /// Reconstructed network in its current state.
    pub fn reconstruction(&self) -> Result<OriginalNetwork> {
        let predictions = if self.oracle {
            self.targets.clone()
        } else {
            self.predictor.predict_rows(&self.embeddings)?
        };
        self.original
            .with_predictable_weights(self.layout.reconstruct_values(&predictions))
    }

    /// Test accuracy of the reconstructed network.
    pub fn evaluate(&self) -> Result<f64> {
        self.reconstruction()?.accuracy(&self.data.test_x, &self.data.test_y)
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            self.train_step()?;
        }
        Ok(())
    }
}
