use serde::{Deserialize, Serialize};

use super::graph::{greedy_hamiltonian, kernel_graph, KernelDistanceGraph};
use super::loss::kernel_distance;
use crate::error::{NernError, Result};
use crate::tensor::Tensor;
use crate::zoo::OriginalNetwork;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationVariant {
    None,
    InFilter,
    CrossFilter,
}

impl PermutationVariant {
    pub fn code(self) -> u8 {
        match self {
            Self::None => 0,
            Self::InFilter => 1,
            Self::CrossFilter => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::None),
            1 => Some(Self::InFilter),
            2 => Some(Self::CrossFilter),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::InFilter => "in_filter",
            Self::CrossFilter => "cross_filter",
        }
    }
}

impl std::str::FromStr for PermutationVariant {
    type Err = NernError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "in_filter" => Ok(Self::InFilter),
            "cross_filter" => Ok(Self::CrossFilter),
            other => Err(NernError::InvalidArgument(format!("unknown permutation variant `{other}`"))),
        }
    }
}

/// Reordering of one layer's kernels. Prediction slot `(f', c')` receives
/// the original kernel returned by [`LayerPermutation::source_of`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerPermutation {
    Cross {
        filters: usize,
        channels: usize,
        /// Flat `(f, c)` source index for each flat prediction slot.
        order: Vec<usize>,
    },
    In {
        /// Original filter index for each prediction filter slot.
        filter_order: Vec<usize>,
        /// Per original filter: original channel for each channel slot.
        channel_orders: Vec<Vec<usize>>,
    },
}

fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &i in p {
        if i >= p.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

impl LayerPermutation {
    pub fn filters(&self) -> usize {
        match self {
            Self::Cross { filters, .. } => *filters,
            Self::In { filter_order, .. } => filter_order.len(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Self::Cross { channels, .. } => *channels,
            Self::In { channel_orders, .. } => channel_orders.first().map_or(0, Vec::len),
        }
    }

    pub fn identity(variant: PermutationVariant, filters: usize, channels: usize) -> Result<Self> {
        match variant {
            PermutationVariant::CrossFilter => Ok(Self::Cross {
                filters,
                channels,
                order: (0..filters * channels).collect(),
            }),
            PermutationVariant::InFilter => Ok(Self::In {
                filter_order: (0..filters).collect(),
                channel_orders: vec![(0..channels).collect(); filters],
            }),
            PermutationVariant::None => Err(NernError::InvalidArgument("no layer data for variant none".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Cross { filters, channels, order } => order.len() == filters * channels && is_bijection(order),
            Self::In {
                filter_order,
                channel_orders,
            } => {
                let c = self.channels();
                is_bijection(filter_order)
                    && channel_orders.len() == filter_order.len()
                    && channel_orders.iter().all(|o| o.len() == c && is_bijection(o))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(NernError::InvalidArgument("layer permutation is not a bijection".into()))
        }
    }

    pub fn source_of(&self, slot_filter: usize, slot_channel: usize) -> (usize, usize) {
        match self {
            Self::Cross { channels, order, .. } => {
                let src = order[slot_filter * channels + slot_channel];
                (src / channels, src % channels)
            }
            Self::In {
                filter_order,
                channel_orders,
            } => {
                let f = filter_order[slot_filter];
                (f, channel_orders[f][slot_channel])
            }
        }
    }

    fn check(&self, w: &Tensor<f32>) -> Result<usize> {
        let s = w.shape();
        if s.len() != 4 || s[0] != self.filters() || s[1] != self.channels() {
            return Err(NernError::Shape(format!(
                "permutation is for {}x{} kernels, weight is {s:?}",
                self.filters(),
                self.channels()
            )));
        }
        Ok(s[2] * s[3])
    }

    /// Rearranges original kernels into prediction order.
    pub fn permute(&self, w: &Tensor<f32>) -> Result<Tensor<f32>> {
        let kk = self.check(w)?;
        let c = self.channels();
        let mut out = Tensor::zeros(w.shape());
        for fs in 0..self.filters() {
            for cs in 0..c {
                let (f, ch) = self.source_of(fs, cs);
                let (dst, src) = ((fs * c + cs) * kk, (f * c + ch) * kk);
                out.data_mut()[dst..dst + kk].copy_from_slice(&w.data()[src..src + kk]);
            }
        }
        Ok(out)
    }

    /// Puts prediction-order kernels back in their original slots.
    pub fn invert(&self, w: &Tensor<f32>) -> Result<Tensor<f32>> {
        let kk = self.check(w)?;
        let c = self.channels();
        let mut out = Tensor::zeros(w.shape());
        for fs in 0..self.filters() {
            for cs in 0..c {
                let (f, ch) = self.source_of(fs, cs);
                let (src, dst) = ((fs * c + cs) * kk, (f * c + ch) * kk);
                out.data_mut()[dst..dst + kk].copy_from_slice(&w.data()[src..src + kk]);
            }
        }
        Ok(out)
    }
}

/// Per-predictable-layer reorderings. Variant `None` carries no layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationMap {
    pub variant: PermutationVariant,
    pub layers: Vec<LayerPermutation>,
}

impl PermutationMap {
    pub fn none() -> Self {
        Self {
            variant: PermutationVariant::None,
            layers: Vec::new(),
        }
    }

    pub fn new(variant: PermutationVariant, layers: Vec<LayerPermutation>) -> Result<Self> {
        let map = Self { variant, layers };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
            let matches = matches!(
                (self.variant, l),
                (PermutationVariant::CrossFilter, LayerPermutation::Cross { .. })
                    | (PermutationVariant::InFilter, LayerPermutation::In { .. })
            );
            if !matches {
                return Err(NernError::InvalidArgument(format!(
                    "{} map holds a mismatched layer",
                    self.variant.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn is_identity_variant(&self) -> bool {
        self.variant == PermutationVariant::None
    }

    /// Original `(f, c)` for a prediction slot of predictable layer `layer`.
    pub fn source_of(&self, layer: usize, f: usize, c: usize) -> (usize, usize) {
        match self.layers.get(layer) {
            Some(p) if !self.is_identity_variant() => p.source_of(f, c),
            _ => (f, c),
        }
    }

    /// Checks that the map fits the given `[F, C]` layer shapes.
    pub fn check_shapes(&self, shapes: &[(usize, usize)]) -> Result<()> {
        if self.is_identity_variant() {
            return Ok(());
        }
        if self.layers.len() != shapes.len() {
            return Err(NernError::Shape(format!(
                "map has {} layers, network has {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, (l, &(f, c))) in self.layers.iter().zip(shapes).enumerate() {
            if l.filters() != f || l.channels() != c {
                return Err(NernError::Shape(format!(
                    "layer {i}: map is {}x{}, network is {f}x{c}",
                    l.filters(),
                    l.channels()
                )));
            }
        }
        Ok(())
    }

    pub fn permute(&self, weights: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        self.apply(weights, LayerPermutation::permute)
    }

    pub fn invert(&self, weights: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        self.apply(weights, LayerPermutation::invert)
    }

    fn apply(
        &self,
        weights: &[Tensor<f32>],
        op: fn(&LayerPermutation, &Tensor<f32>) -> Result<Tensor<f32>>,
    ) -> Result<Vec<Tensor<f32>>> {
        if self.is_identity_variant() {
            return Ok(weights.to_vec());
        }
        if weights.len() != self.layers.len() {
            return Err(NernError::Shape(format!(
                "map has {} layers, got {} weights",
                self.layers.len(),
                weights.len()
            )));
        }
        self.layers.iter().zip(weights).map(|(l, w)| op(l, w)).collect()
    }
}

fn layer_permutation(w: &Tensor<f32>, variant: PermutationVariant) -> Result<LayerPermutation> {
    let s = w.shape();
    let (filters, channels, k) = (s[0], s[1], s[2]);
    match variant {
        PermutationVariant::CrossFilter => Ok(LayerPermutation::Cross {
            filters,
            channels,
            order: greedy_hamiltonian(&kernel_graph(w)?),
        }),
        PermutationVariant::InFilter => {
            let kk = k * k;
            let kernel = |f: usize, c: usize| &w.data()[(f * channels + c) * kk..(f * channels + c + 1) * kk];
            let channel_orders: Vec<Vec<usize>> = (0..filters)
                .map(|f| {
                    let g = KernelDistanceGraph::from_fn(channels, |i, j| kernel_distance(kernel(f, i), kernel(f, j), k));
                    greedy_hamiltonian(&g)
                })
                .collect();
            let filter_graph = KernelDistanceGraph::from_fn(filters, |a, b| {
                (0..channels)
                    .map(|c| kernel_distance(kernel(a, channel_orders[a][c]), kernel(b, channel_orders[b][c]), k))
                    .sum()
            });
            Ok(LayerPermutation::In {
                filter_order: greedy_hamiltonian(&filter_graph),
                channel_orders,
            })
        }
        PermutationVariant::None => unreachable!("rejected by caller"),
    }
}

/// Greedy reordering of every predictable layer of `net`.
pub fn compute_permutations(net: &OriginalNetwork, variant: PermutationVariant) -> Result<PermutationMap> {
    let weights: Vec<Tensor<f32>> = net.predictable_weights().into_iter().cloned().collect();
    compute_for_weights(&weights, variant)
}

pub fn compute_for_weights(weights: &[Tensor<f32>], variant: PermutationVariant) -> Result<PermutationMap> {
    if variant == PermutationVariant::None {
        return Err(NernError::InvalidArgument(
            "permutations cannot be computed for variant none".into(),
        ));
    }
    let layers = weights
        .iter()
        .map(|w| layer_permutation(w, variant))
        .collect::<Result<Vec<_>>>()?;
    PermutationMap::new(variant, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::smoothness::layer_smoothness;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_weights(seed: u64, f: usize, c: usize) -> Tensor<f32> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(&[f, c, 3, 3], |_| r.gen_range(-1.0..1.0))
    }

    /// Kernels `w_i = i * u` with a per-slot rotation, shuffled.
    fn graded_fixture(seed: u64, f: usize, c: usize) -> Tensor<f32> {
        let mut r = rng::seeded(seed);
        let u: Vec<f32> = (0..9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let v: Vec<f32> = (0..9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut idx: Vec<usize> = (0..f * c).collect();
        idx.shuffle(&mut r);
        let n = (f * c) as f32;
        let mut out = Tensor::zeros(&[f, c, 3, 3]);
        for (slot, &i) in idx.iter().enumerate() {
            let t = i as f32 / n;
            for j in 0..9 {
                out.data_mut()[slot * 9 + j] = (1.0 + i as f32) * (u[j] * (1.0 - t) + v[j] * t);
            }
        }
        out
    }

    #[test]
    fn none_is_rejected() {
        assert!(compute_for_weights(&[random_weights(0, 2, 2)], PermutationVariant::None).is_err());
    }

    #[test]
    fn round_trips_are_exact() {
        let w = vec![random_weights(1, 6, 5), random_weights(2, 4, 6)];
        for variant in [PermutationVariant::CrossFilter, PermutationVariant::InFilter] {
            let map = compute_for_weights(&w, variant).unwrap();
            let p = map.permute(&w).unwrap();
            assert_eq!(map.invert(&p).unwrap(), w);
        }
        assert_eq!(PermutationMap::none().permute(&w).unwrap(), w);
    }

    #[test]
    fn identity_layers_leave_weights_unchanged() {
        let w = random_weights(3, 3, 4);
        for variant in [PermutationVariant::CrossFilter, PermutationVariant::InFilter] {
            let id = LayerPermutation::identity(variant, 3, 4).unwrap();
            assert_eq!(id.permute(&w).unwrap(), w);
        }
    }

    #[test]
    fn in_filter_keeps_kernels_in_their_filter() {
        let w = random_weights(4, 5, 6);
        let map = compute_for_weights(&[w.clone()], PermutationVariant::InFilter).unwrap();
        let p = &map.permute(&[w.clone()]).unwrap()[0];
        let LayerPermutation::In { filter_order, .. } = &map.layers[0] else {
            panic!("in-filter layer expected")
        };
        for (slot, &f) in filter_order.iter().enumerate() {
            let mut a: Vec<u32> = w.outer(f).chunks(9).map(|k| k[0].to_bits()).collect();
            let mut b: Vec<u32> = p.outer(slot).chunks(9).map(|k| k[0].to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_filter_variants_agree() {
        let w = random_weights(5, 1, 9);
        let cross = compute_for_weights(&[w.clone()], PermutationVariant::CrossFilter).unwrap();
        let inf = compute_for_weights(&[w.clone()], PermutationVariant::InFilter).unwrap();
        for c in 0..9 {
            assert_eq!(cross.source_of(0, 0, c), inf.source_of(0, 0, c));
        }
    }

    #[test]
    fn greedy_order_smooths_graded_fixtures() {
        for seed in 0..5 {
            let w = graded_fixture(seed, 4, 6);
            let before = layer_smoothness(&w).unwrap();
            for variant in [PermutationVariant::CrossFilter, PermutationVariant::InFilter] {
                let map = compute_for_weights(&[w.clone()], variant).unwrap();
                let after = layer_smoothness(&map.permute(&[w.clone()]).unwrap()[0]).unwrap();
                assert!(after <= before, "{variant:?}: {after} > {before}");
            }
        }
    }

    #[test]
    fn sorted_fixture_is_left_nearly_in_place() {
        // Already ordered kernels: the greedy path walks them in order.
        let u: Vec<f32> = vec![1.0, -0.5, 0.2, 0.3, 0.9, -0.1, 0.4, 0.0, -0.7];
        let v: Vec<f32> = vec![-0.3, 0.8, 0.5, -0.6, 0.1, 0.7, -0.2, 0.6, 0.3];
        let n = 8;
        let w = Tensor::from_fn(&[1, n, 3, 3], |i| {
            let (k, j) = (i / 9, i % 9);
            let t = k as f32 / n as f32;
            u[j] * (1.0 - t) + v[j] * t
        });
        let map = compute_for_weights(&[w], PermutationVariant::CrossFilter).unwrap();
        let LayerPermutation::Cross { order, .. } = &map.layers[0] else {
            panic!("cross layer expected")
        };
        assert_eq!(order, &(0..n).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let map = compute_for_weights(&[random_weights(6, 3, 3)], PermutationVariant::CrossFilter).unwrap();
        assert!(map.permute(&[random_weights(6, 3, 4)]).is_err());
        assert!(map.permute(&[]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [PermutationVariant::None, PermutationVariant::InFilter, PermutationVariant::CrossFilter] {
            assert_eq!(v.as_str().parse::<PermutationVariant>().unwrap(), v);
            assert_eq!(PermutationVariant::from_code(v.code()), Some(v));
        }
    }
}
