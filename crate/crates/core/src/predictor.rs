//! The NeRN predictor: a 5-layer MLP from kernel-coordinate embeddings to
//! kernel weights, plus the bookkeeping that routes predictions into a
//! network.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, embed_all, EmbeddingConfig, KernelCoordinate};
use crate::error::{NernError, Result};
use crate::rng;
use crate::smoothness::PermutationMap;
use crate::tensor::{read_tensor_file, write_tensor_file, Graph, NodeId, Tensor};
use crate::zoo::{params_to_mb, ArchCatalog, OriginalNetwork};

/// Number of weight layers in the MLP.
pub const DEPTH: usize = 5;
/// Allowed relative error of the calibrated output statistics.
pub const CALIBRATION_TOLERANCE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub embedding: EmbeddingConfig,
    pub hidden: usize,
    /// Side of the predicted kernel (the largest predictable kernel).
    pub output_kernel: usize,
}

impl PredictorConfig {
    pub fn new(embedding: EmbeddingConfig, hidden: usize, output_kernel: usize) -> Self {
        Self {
            embedding,
            hidden,
            output_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.hidden == 0 || self.output_kernel == 0 {
            return Err(NernError::InvalidArgument("hidden size and output kernel must be >= 1".into()));
        }
        Ok(())
    }

    /// `(in, out)` widths of each dense layer.
    pub fn layer_dims(&self) -> [(usize, usize); DEPTH] {
        let (e, h, o) = (self.embedding.dim(), self.hidden, self.output_kernel * self.output_kernel);
        [(e, h), (h, h), (h, h), (h, h), (h, o)]
    }
}

/// Mean and standard deviation of a set of weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub std: f64,
}

impl WeightStats {
    pub fn of<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let values: Vec<f64> = tensors
            .into_iter()
            .flat_map(|t| t.data().iter().map(|&v| v as f64))
            .collect();
        Self::of_values(&values)
    }

    pub fn of_values(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Placement of one predictable layer within the prediction sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    pub catalog_index: usize,
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    /// First prediction row of this layer.
    pub row_offset: usize,
    /// For each element of the `[F, C, k, k]` weight, its flat index in the
    /// `[rows, k_pred^2]` prediction matrix.
    pub gather: Vec<usize>,
}

/// Prediction-order coordinates of a catalog under a permutation map.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayout {
    pub output_kernel: usize,
    pub layers: Vec<LayerLayout>,
    /// One coordinate per prediction row: `(predictable layer, f', c')`.
    pub coords: Vec<KernelCoordinate>,
    /// Original `(predictable layer, f, c)` kernel behind each row.
    pub sources: Vec<KernelCoordinate>,
}

/// Offset of a centered `k x k` crop inside a `k_pred x k_pred` output.
pub fn crop_offset(k_pred: usize, k: usize) -> usize {
    (k_pred - k) / 2
}

impl KernelLayout {
    pub fn new(catalog: &ArchCatalog, map: &PermutationMap) -> Result<Self> {
        let kp = catalog.prediction_kernel();
        let shapes: Vec<(usize, usize)> = catalog.predictable_layers().map(|l| (l.filters, l.channels)).collect();
        map.check_shapes(&shapes)?;
        let mut layers = Vec::new();
        let mut coords = Vec::new();
        let mut sources = Vec::new();
        for (li, ci) in catalog.predictable_indices().into_iter().enumerate() {
            let spec = &catalog.layers[ci];
            let (f_n, c_n, k) = (spec.filters, spec.channels, spec.kernel);
            let row_offset = coords.len();
            let off = crop_offset(kp, k);
            let mut gather = vec![0; spec.param_count()];
            for fs in 0..f_n {
                for cs in 0..c_n {
                    let row = row_offset + fs * c_n + cs;
                    let (f, c) = map.source_of(li, fs, cs);
                    coords.push(KernelCoordinate::new(li, fs, cs));
                    sources.push(KernelCoordinate::new(li, f, c));
                    for i in 0..k {
                        for j in 0..k {
                            gather[((f * c_n + c) * k + i) * k + j] = row * kp * kp + (i + off) * kp + j + off;
                        }
                    }
                }
            }
            layers.push(LayerLayout {
                catalog_index: ci,
                filters: f_n,
                channels: c_n,
                kernel: k,
                row_offset,
                gather,
            });
        }
        Ok(Self {
            output_kernel: kp,
            layers,
            coords,
            sources,
        })
    }

    pub fn rows(&self) -> usize {
        self.coords.len()
    }

    pub fn layer_of_row(&self, row: usize) -> usize {
        self.layers.partition_point(|l| l.row_offset <= row) - 1
    }

    /// Predictable-layer weight shapes in catalog order.
    pub fn shapes(&self) -> Vec<[usize; 4]> {
        self.layers.iter().map(|l| [l.filters, l.channels, l.kernel, l.kernel]).collect()
    }

    /// Flat prediction-matrix indices holding the (cropped) kernel of `row`.
    pub fn row_elements(&self, row: usize) -> impl Iterator<Item = usize> + '_ {
        let kp = self.output_kernel;
        let k = self.layers[self.layer_of_row(row)].kernel;
        let off = crop_offset(kp, k);
        (0..k).flat_map(move |i| (0..k).map(move |j| row * kp * kp + (i + off) * kp + j + off))
    }

    /// The original kernel each row should predict, flattened.
    pub fn target_kernel<'a>(&self, weights: &'a [&Tensor<f32>], row: usize) -> &'a [f32] {
        let s = self.sources[row];
        let l = &self.layers[s.layer];
        let kk = l.kernel * l.kernel;
        let start = (s.filter * l.channels + s.channel) * kk;
        &weights[s.layer].data()[start..start + kk]
    }

    /// Prediction matrix whose rows are exactly the original kernels
    /// (zero outside the crop window).
    pub fn oracle_rows(&self, weights: &[&Tensor<f32>]) -> Tensor<f32> {
        let kp = self.output_kernel;
        let mut out = Tensor::zeros(&[self.rows(), kp * kp]);
        for row in 0..self.rows() {
            let target = self.target_kernel(weights, row);
            let idx: Vec<usize> = self.row_elements(row).collect();
            for (&i, &v) in idx.iter().zip(target) {
                out.data_mut()[i] = v;
            }
        }
        out
    }

    /// Mean absolute value of each row's target kernel.
    pub fn row_magnitudes(&self, weights: &[&Tensor<f32>]) -> Vec<f64> {
        (0..self.rows())
            .map(|r| {
                let k = self.target_kernel(weights, r);
                k.iter().map(|v| v.abs() as f64).sum::<f64>() / k.len() as f64
            })
            .collect()
    }

    pub fn embeddings(&self, cfg: &EmbeddingConfig) -> Tensor<f32> {
        Tensor::new(vec![self.rows(), cfg.dim()], embed_all(&self.coords, cfg)).expect("rows x dim")
    }

    /// Routes a `[rows, k_pred^2]` prediction node into per-layer weights.
    pub fn reconstruct_nodes(&self, g: &mut Graph<f32>, predictions: NodeId) -> Result<Vec<NodeId>> {
        self.layers
            .iter()
            .map(|l| g.take(predictions, l.gather.clone(), &[l.filters, l.channels, l.kernel, l.kernel]))
            .collect()
    }

    /// Same routing on plain values.
    pub fn reconstruct_values(&self, predictions: &Tensor<f32>) -> Vec<Tensor<f32>> {
        let src = predictions.data();
        self.layers
            .iter()
            .map(|l| {
                let data = l.gather.iter().map(|&i| src[i]).collect();
                Tensor::new(vec![l.filters, l.channels, l.kernel, l.kernel], data).expect("layer shape")
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NernPredictor {
    pub config: PredictorConfig,
    /// `[out, in]` per layer.
    pub weights: Vec<Tensor<f32>>,
    pub biases: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct BoundPredictor {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

/// Fan-in initialized MLP whose final layer is rescaled so that predictions
/// over every layout row match `stats`.
pub fn init_nern(config: PredictorConfig, layout: &KernelLayout, stats: WeightStats, seed: u64) -> Result<NernPredictor> {
    config.validate()?;
    if !(stats.std > 0.0 && stats.std.is_finite() && stats.mean.is_finite()) {
        return Err(NernError::InvalidArgument(format!(
            "target weight std must be positive, got {}",
            stats.std
        )));
    }
    if layout.output_kernel != config.output_kernel {
        return Err(NernError::Shape(format!(
            "layout predicts {0}x{0} kernels, config {1}x{1}",
            layout.output_kernel, config.output_kernel
        )));
    }
    let mut rng = rng::stream(seed, 0x9e7);
    let mut weights = Vec::with_capacity(DEPTH);
    let mut biases = Vec::with_capacity(DEPTH);
    for (i, (din, dout)) in config.layer_dims().into_iter().enumerate() {
        let gain = if i + 1 < DEPTH { 2.0 } else { 1.0 };
        let dist = Normal::new(0.0, (gain / din as f32).sqrt()).expect("positive std");
        weights.push(Tensor::from_fn(&[dout, din], |_| dist.sample(&mut rng)));
        biases.push(Tensor::zeros(&[dout]));
    }
    let mut p = NernPredictor {
        config,
        weights,
        biases,
    };
    let before = p.output_stats(layout)?;
    if !(before.std > 1e-12 && before.std.is_finite()) {
        return Err(NernError::Calibration(format!("initial predictions have std {}", before.std)));
    }
    let scale = stats.std / before.std;
    let shift = stats.mean - before.mean * scale;
    let last = DEPTH - 1;
    p.weights[last] = p.weights[last].map(|w| (w as f64 * scale) as f32);
    p.biases[last] = p.biases[last].map(|b| (b as f64 * scale + shift) as f32);
    let after = p.output_stats(layout)?;
    let mean_ok = (after.mean - stats.mean).abs() <= CALIBRATION_TOLERANCE * stats.mean.abs().max(stats.std);
    let std_ok = (after.std - stats.std).abs() <= CALIBRATION_TOLERANCE * stats.std;
    if !(mean_ok && std_ok) {
        return Err(NernError::Calibration(format!(
            "got mean {:.4e} std {:.4e}, wanted {:.4e} / {:.4e}",
            after.mean, after.std, stats.mean, stats.std
        )));
    }
    Ok(p)
}

impl NernPredictor {
    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Parameters excluding the final (output) layer.
    pub fn param_count_without_output(&self) -> usize {
        self.param_count() - self.weights[DEPTH - 1].len() - self.biases[DEPTH - 1].len()
    }

    pub fn size_mb(&self) -> f64 {
        params_to_mb(self.param_count() as f64)
    }

    pub fn size_mb_without_output(&self) -> f64 {
        params_to_mb(self.param_count_without_output() as f64)
    }

    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> BoundPredictor {
        let mut leaf = |t: &Tensor<f32>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        BoundPredictor {
            weights: self.weights.iter().map(&mut leaf).collect(),
            biases: self.biases.iter().map(&mut leaf).collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph<f32>, bound: &BoundPredictor, embeddings: NodeId) -> Result<NodeId> {
        let mut h = embeddings;
        for i in 0..DEPTH {
            h = g.dense(h, bound.weights[i], bound.biases[i])?;
            if i + 1 < DEPTH {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `[rows, k_pred^2]` predictions for a batch of embeddings.
    pub fn predict_rows(&self, embeddings: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(embeddings.clone());
        let out = self.forward(&mut g, &bound, x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict_kernel(&self, coord: KernelCoordinate) -> Result<Tensor<f32>> {
        let e: Vec<f32> = embed(coord, &self.config.embedding).into_iter().map(|v| v as f32).collect();
        let k = self.config.output_kernel;
        self.predict_rows(&Tensor::new(vec![1, e.len()], e)?)?.reshape(&[k, k])
    }

    pub fn predict_all(&self, layout: &KernelLayout) -> Result<Tensor<f32>> {
        self.predict_rows(&layout.embeddings(&self.config.embedding))
    }

    /// Statistics of the cropped predictions over all layout rows.
    pub fn output_stats(&self, layout: &KernelLayout) -> Result<WeightStats> {
        let out = self.predict_all(layout)?;
        let values: Vec<f64> = (0..layout.rows())
            .flat_map(|r| layout.row_elements(r).map(|i| out.data()[i] as f64).collect::<Vec<_>>())
            .collect();
        Ok(WeightStats::of_values(&values))
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        self.weights.iter().chain(&self.biases).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            write_tensor_file(w, dir.join(format!("fc{i}.weight.nrt")))?;
            write_tensor_file(b, dir.join(format!("fc{i}.bias.nrt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, config: PredictorConfig) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, (din, dout)) in config.layer_dims().into_iter().enumerate() {
            let w: Tensor<f32> = read_tensor_file(dir.join(format!("fc{i}.weight.nrt")))?;
            let b: Tensor<f32> = read_tensor_file(dir.join(format!("fc{i}.bias.nrt")))?;
            if w.shape() != [dout, din] || b.shape() != [dout] {
                return Err(NernError::Shape(format!("fc{i} does not match the predictor config")));
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(Self { config, weights, biases })
    }
}

/// Predicted weights for every predictable layer, in original slot order.
pub fn reconstruct_weights(predictor: &NernPredictor, layout: &KernelLayout) -> Result<Vec<Tensor<f32>>> {
    Ok(layout.reconstruct_values(&predictor.predict_all(layout)?))
}

/// The original network with its predictable kernels replaced by predictions.
pub fn reconstruct_network(
    predictor: &NernPredictor,
    original: &OriginalNetwork,
    map: &PermutationMap,
) -> Result<OriginalNetwork> {
    let layout = KernelLayout::new(&original.catalog, map)?;
    original.with_predictable_weights(reconstruct_weights(predictor, &layout)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothness::{compute_permutations, PermutationVariant};
    use crate::zoo::{build_desk_cnn, desk3_catalog, LayerSpec};

    fn small_config(hidden: usize) -> PredictorConfig {
        PredictorConfig::new(EmbeddingConfig::for_regime(crate::embedding::Regime::Smooth, 8), hidden, 3)
    }

    #[test]
    fn calibrates_to_target_stats() {
        let layout = KernelLayout::new(&desk3_catalog(), &PermutationMap::none()).unwrap();
        let p = init_nern(small_config(32), &layout, WeightStats { mean: 0.0, std: 0.05 }, 1).unwrap();
        let s = p.output_stats(&layout).unwrap();
        assert!((0.04..=0.06).contains(&s.std), "{}", s.std);
        assert_eq!(p, init_nern(small_config(32), &layout, WeightStats { mean: 0.0, std: 0.05 }, 1).unwrap());
        assert!(init_nern(small_config(32), &layout, WeightStats { mean: 0.0, std: 0.0 }, 1).is_err());
    }

    #[test]
    fn param_count_formula() {
        let layout = KernelLayout::new(&desk3_catalog(), &PermutationMap::none()).unwrap();
        let cfg = PredictorConfig::new(EmbeddingConfig::default(), 64, 3);
        let p = init_nern(cfg, &layout, WeightStats { mean: 0.0, std: 0.1 }, 0).unwrap();
        let (n, h, k) = (40, 64, 3);
        assert_eq!(p.param_count(), 6 * n * h + 3 * h * h + h * k * k + 4 * h + k * k);
        assert_eq!(p.param_count_without_output(), 6 * n * h + 3 * h * h + 4 * h);
    }

    #[test]
    fn predict_kernel_is_deterministic_and_matches_batch() {
        let layout = KernelLayout::new(&desk3_catalog(), &PermutationMap::none()).unwrap();
        let p = init_nern(small_config(16), &layout, WeightStats { mean: 0.0, std: 0.1 }, 3).unwrap();
        let c = KernelCoordinate::new(1, 4, 2);
        let a = p.predict_kernel(c).unwrap();
        assert_eq!(a, p.predict_kernel(c).unwrap());
        let all = p.predict_all(&layout).unwrap();
        let row = layout.coords.iter().position(|&x| x == c).unwrap();
        assert_eq!(a.data(), all.outer(row));
    }

    #[test]
    fn every_slot_written_once() {
        let net = build_desk_cnn(0);
        let map = compute_permutations(&net, PermutationVariant::CrossFilter).unwrap();
        let layout = KernelLayout::new(&net.catalog, &map).unwrap();
        let kp = layout.output_kernel;
        let mut hits = vec![0; layout.rows() * kp * kp];
        for l in &layout.layers {
            for &i in &l.gather {
                hits[i] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn identity_map_routes_row_i_to_slot_i() {
        let layout = KernelLayout::new(&desk3_catalog(), &PermutationMap::none()).unwrap();
        let rows = Tensor::from_fn(&[layout.rows(), 9], |i| i as f32);
        let w = layout.reconstruct_values(&rows);
        let flat: Vec<f32> = w.iter().flat_map(|t| t.data().to_vec()).collect();
        assert_eq!(flat, rows.data());
    }

    #[test]
    fn smaller_kernels_take_the_center() {
        assert_eq!(crop_offset(3, 1), 1);
        assert_eq!(crop_offset(5, 2), 1);
        let cat = ArchCatalog::new("mix", vec![LayerSpec::conv("a", 2, 1, 3, 1), LayerSpec::conv("b", 2, 2, 1, 1)], 0).unwrap();
        let layout = KernelLayout::new(&cat, &PermutationMap::none()).unwrap();
        // Layer b row 0 is prediction row 2; its 1x1 crop is element [1, 1].
        assert_eq!(layout.layers[1].gather[0], 2 * 9 + 4);
    }

    #[test]
    fn oracle_rows_rebuild_the_original() {
        let net = build_desk_cnn(4);
        let map = compute_permutations(&net, PermutationVariant::InFilter).unwrap();
        let layout = KernelLayout::new(&net.catalog, &map).unwrap();
        let originals = net.predictable_weights();
        let rows = layout.oracle_rows(&originals);
        let rebuilt = layout.reconstruct_values(&rows);
        for (a, b) in rebuilt.iter().zip(originals) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let layout = KernelLayout::new(&desk3_catalog(), &PermutationMap::none()).unwrap();
        let p = init_nern(small_config(8), &layout, WeightStats { mean: 0.0, std: 0.1 }, 5).unwrap();
        let e: Vec<f64> = embed(KernelCoordinate::new(2, 3, 1), &p.config.embedding);
        let cast = |t: &Tensor<f32>| t.cast::<f64>();
        let loss = |ws: &[Tensor<f64>], bs: &[Tensor<f64>]| -> (f64, Graph<f64>, Vec<NodeId>, NodeId) {
            let mut g = Graph::<f64>::new();
            let wid: Vec<NodeId> = ws.iter().map(|w| g.param(w.clone())).collect();
            let bid: Vec<NodeId> = bs.iter().map(|b| g.param(b.clone())).collect();
            let mut h = g.constant(Tensor::new(vec![1, e.len()], e.clone()).unwrap());
            for i in 0..DEPTH {
                h = g.dense(h, wid[i], bid[i]).unwrap();
                if i + 1 < DEPTH {
                    h = g.relu(h);
                }
            }
            let sq = g.mul(h, h).unwrap();
            let l = g.sum(sq);
            (g.value(l).item(), g, wid, l)
        };
        let ws: Vec<Tensor<f64>> = p.weights.iter().map(cast).collect();
        let bs: Vec<Tensor<f64>> = p.biases.iter().map(cast).collect();
        let (_, mut g, wid, l) = loss(&ws, &bs);
        let grads = g.backward(l).unwrap();
        let h = 1e-6;
        for layer in [0, 2, 4] {
            let analytic = grads.wrt(wid[layer]);
            for idx in [0, 5, analytic.len() - 1] {
                let mut plus = ws.clone();
                plus[layer].data_mut()[idx] += h;
                let mut minus = ws.clone();
                minus[layer].data_mut()[idx] -= h;
                let fd = (loss(&plus, &bs).0 - loss(&minus, &bs).0) / (2.0 * h);
                let a = analytic.data()[idx];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-5 || (fd - a).abs() < 1e-9, "layer {layer} idx {idx}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = KernelLayout::new(&desk3_catalog(), &PermutationMap::none()).unwrap();
        let p = init_nern(small_config(8), &layout, WeightStats { mean: 0.0, std: 0.1 }, 6).unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(NernPredictor::load(dir.path(), p.config).unwrap(), p);
        assert!(NernPredictor::load(dir.path(), small_config(9)).is_err());
    }

    #[test]
    fn frozen_predictor_is_permutation_invariant() {
        let net = build_desk_cnn(2);
        let layout = KernelLayout::new(&net.catalog, &PermutationMap::none()).unwrap();
        let p = init_nern(small_config(16), &layout, WeightStats { mean: 0.0, std: 0.2 }, 7).unwrap();
        let x = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 37 % 11) as f32 - 5.0) / 5.0);
        let plain = reconstruct_network(&p, &net, &PermutationMap::none()).unwrap();
        for variant in [PermutationVariant::CrossFilter, PermutationVariant::InFilter] {
            let map = compute_permutations(&net, variant).unwrap();
            let permuted_layout = KernelLayout::new(&net.catalog, &map).unwrap();
            // Predict in the permuted order, then move every kernel back to its original slot.
            let predicted = p.predict_all(&permuted_layout).unwrap();
            let in_pred_order = identity_routed(&permuted_layout, &predicted);
            let back = map.invert(&in_pred_order).unwrap();
            assert_eq!(back, permuted_layout.reconstruct_values(&predicted));
            let routed = net.with_predictable_weights(back).unwrap();
            assert_eq!(routed.logits(&x).unwrap(), reconstruct_network(&p, &net, &map).unwrap().logits(&x).unwrap());
        }
        assert!(plain.logits(&x).is_ok());
    }

    /// Row `i` of a prediction matrix placed into slot `i` (no map).
    fn identity_routed(layout: &KernelLayout, predicted: &Tensor<f32>) -> Vec<Tensor<f32>> {
        let kp = layout.output_kernel;
        layout
            .layers
            .iter()
            .map(|l| {
                let off = crop_offset(kp, l.kernel);
                Tensor::from_fn(&[l.filters, l.channels, l.kernel, l.kernel], |i| {
                    let row = l.row_offset + i / (l.kernel * l.kernel);
                    let (a, b) = ((i % (l.kernel * l.kernel)) / l.kernel, i % l.kernel);
                    predicted.data()[row * kp * kp + (a + off) * kp + b + off]
                })
            })
            .collect()
    }
}
