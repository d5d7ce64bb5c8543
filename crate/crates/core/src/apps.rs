//! Weight importance, predictor pruning and image exports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{NernError, Result};
use crate::predictor::{reconstruct_network, NernPredictor};
use crate::smoothness::PermutationMap;
use crate::tensor::{Graph, Tensor};
use crate::zoo::{accuracy_from_logits, OriginalNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterImportance {
    pub layer: usize,
    pub filter: usize,
    /// `||W_f - W_hat_f|| / ||W_f||`; infinite for zero-norm filters.
    pub relative_error: f64,
    /// 1 is the best-reconstructed filter.
    pub rank: usize,
}

/// Filters of one layer sorted by relative reconstruction error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub records: Vec<FilterImportance>,
}

impl ImportanceReport {
    /// Best-reconstructed filters.
    pub fn top(&self, n: usize) -> &[FilterImportance] {
        &self.records[..n.min(self.records.len())]
    }

    /// Worst-reconstructed filters.
    pub fn bottom(&self, n: usize) -> &[FilterImportance] {
        &self.records[self.records.len().saturating_sub(n)..]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "rank,layer,filter,relative_error")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.rank, r.layer, r.filter, r.relative_error)?;
        }
        Ok(())
    }
}

pub fn weight_importance(w: &Tensor<f32>, w_hat: &Tensor<f32>, layer: usize) -> Result<ImportanceReport> {
    if w.shape() != w_hat.shape() || w.rank() < 2 {
        return Err(NernError::Shape(format!("{:?} vs {:?}", w.shape(), w_hat.shape())));
    }
    let mut records: Vec<FilterImportance> = (0..w.shape()[0])
        .map(|f| {
            let (a, b) = (w.outer(f), w_hat.outer(f));
            let norm = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let err = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
            FilterImportance {
                layer,
                filter: f,
                relative_error: if norm > 0.0 { err / norm } else { f64::INFINITY },
                rank: 0,
            }
        })
        .collect();
    records.sort_by(|a, b| a.relative_error.total_cmp(&b.relative_error).then(a.filter.cmp(&b.filter)));
    for (i, r) in records.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(ImportanceReport { records })
}

/// An 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (P5).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_pgm(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Min-max scaling to `0..=255`; constant input maps to 128.
pub fn normalize_to_u8(values: &[f32]) -> Vec<u8> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8)
        .collect()
}

/// Mean post-ReLU activation map of selected filters of conv layer `layer`
/// over a probe batch.
pub fn avg_activation_export(
    net: &OriginalNetwork,
    layer: usize,
    filters: &[usize],
    probe: &Tensor<f32>,
) -> Result<Vec<GrayImage>> {
    let spec = net
        .catalog
        .layers
        .get(layer)
        .ok_or_else(|| NernError::InvalidArgument(format!("no conv layer {layer}")))?;
    if let Some(&f) = filters.iter().find(|&&f| f >= spec.filters) {
        return Err(NernError::InvalidArgument(format!("filter {f} outside layer {layer}")));
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let mut h = g.constant(probe.clone());
    for (i, l) in net.catalog.layers.iter().enumerate().take(layer + 1) {
        h = g.conv2d(h, bound.conv_weights[i], Some(bound.conv_biases[i]), l.stride, l.padding)?;
        h = g.relu(h);
    }
    let act = g.value(h);
    let (b, c, hh, ww) = (act.shape()[0], act.shape()[1], act.shape()[2], act.shape()[3]);
    Ok(filters
        .iter()
        .map(|&f| {
            let mut mean = vec![0.0f32; hh * ww];
            for s in 0..b {
                let start = (s * c + f) * hh * ww;
                for (m, &v) in mean.iter_mut().zip(&act.data()[start..start + hh * ww]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f32);
            GrayImage {
                width: ww,
                height: hh,
                pixels: normalize_to_u8(&mean),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    PerLayer,
}

/// Zeroes the `floor(factor * n)` smallest-magnitude weights (biases exempt);
/// ties go to the earlier parameter.
pub fn prune_predictor(predictor: &NernPredictor, factor: f64, scope: PruneScope) -> Result<NernPredictor> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(NernError::InvalidArgument(format!("pruning factor {factor} outside [0, 1]")));
    }
    let mut out = predictor.clone();
    let groups: Vec<Vec<usize>> = match scope {
        PruneScope::Global => vec![(0..out.weights.len()).collect()],
        PruneScope::PerLayer => (0..out.weights.len()).map(|i| vec![i]).collect(),
    };
    for group in groups {
        let mut entries: Vec<(f32, usize, usize)> = group
            .iter()
            .flat_map(|&l| out.weights[l].data().iter().enumerate().map(move |(i, v)| (v.abs(), l, i)))
            .collect();
        let count = (factor * entries.len() as f64).floor() as usize;
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        for &(_, l, i) in &entries[..count] {
            out.weights[l].data_mut()[i] = 0.0;
        }
    }
    Ok(out)
}

/// Reconstructed accuracy after each pruning factor.
pub fn pruning_sweep(
    predictor: &NernPredictor,
    original: &OriginalNetwork,
    map: &PermutationMap,
    factors: &[f64],
    x: &Tensor<f32>,
    labels: &[usize],
) -> Result<Vec<(f64, f64)>> {
    factors
        .iter()
        .map(|&f| {
            let pruned = prune_predictor(predictor, f, PruneScope::Global)?;
            let net = reconstruct_network(&pruned, original, map)?;
            Ok((f, accuracy_from_logits(&net.logits(x)?, labels)))
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[(f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "factor,accuracy")?;
    for (f, a) in rows {
        writeln!(out, "{f},{a}")?;
    }
    Ok(())
}

/// Separator pixel value between tiles.
pub const GRID_SEPARATOR: u8 = 255;

/// Tiles `w[f, channel]` for the first `rows * cols` filters with 1-pixel
/// gaps, min-max normalized over the whole grid.
pub fn export_kernel_grid(w: &Tensor<f32>, channel: usize, rows: usize, cols: usize) -> Result<GrayImage> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(NernError::Shape(format!("expected a [F, C, k, k] weight, got {s:?}")));
    }
    let (filters, channels, k) = (s[0], s[1], s[2]);
    if channel >= channels {
        return Err(NernError::InvalidArgument(format!("channel {channel} outside {channels}")));
    }
    let needed = rows * cols;
    if needed == 0 || needed > filters {
        return Err(NernError::GridOverflow {
            rows,
            cols,
            needed,
            available: filters,
        });
    }
    let kk = k * k;
    let values: Vec<f32> = (0..needed)
        .flat_map(|f| {
            let start = (f * channels + channel) * kk;
            w.data()[start..start + kk].to_vec()
        })
        .collect();
    let levels = normalize_to_u8(&values);
    let (width, height) = (cols * k + cols - 1, rows * k + rows - 1);
    let mut pixels = vec![GRID_SEPARATOR; width * height];
    for f in 0..needed {
        let (r, c) = (f / cols, f % cols);
        for i in 0..k {
            for j in 0..k {
                pixels[(r * (k + 1) + i) * width + c * (k + 1) + j] = levels[f * kk + i * k + j];
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}
