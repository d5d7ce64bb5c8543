use crate::error::{NernError, Result};
use crate::tensor::{row_distance_value, DistanceKind, Graph, NodeId, Tensor};

/// Cosine distance for spatial kernels, squared L2 for 1x1 kernels.
pub fn distance_kind(kernel: usize) -> DistanceKind {
    if kernel == 1 {
        DistanceKind::SquaredL2
    } else {
        DistanceKind::Cosine
    }
}

pub fn kernel_distance(a: &[f32], b: &[f32], kernel: usize) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    row_distance_value(&a, &b, distance_kind(kernel))
}

fn layer_dims(w: &[usize]) -> Result<(usize, usize, usize)> {
    match *w {
        [f, c, k, k2] if k == k2 => Ok((f, c, k)),
        _ => Err(NernError::Shape(format!("expected a [F, C, k, k] weight, got {w:?}"))),
    }
}

/// Index pairs of neighbouring kernels: along filters for every channel,
/// then along channels for every filter.
fn adjacent_pairs(filters: usize, channels: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for f in 0..filters.saturating_sub(1) {
        for c in 0..channels {
            pairs.push((f * channels + c, (f + 1) * channels + c));
        }
    }
    for f in 0..filters {
        for c in 0..channels.saturating_sub(1) {
            pairs.push((f * channels + c, f * channels + c + 1));
        }
    }
    pairs
}

pub fn layer_smoothness(w: &Tensor<f32>) -> Result<f64> {
    let (f, c, k) = layer_dims(w.shape())?;
    let kk = k * k;
    let data = w.data();
    Ok(adjacent_pairs(f, c)
        .into_iter()
        .map(|(i, j)| kernel_distance(&data[i * kk..(i + 1) * kk], &data[j * kk..(j + 1) * kk], k))
        .sum())
}

/// Sum of [`layer_smoothness`] over layers. Panics on malformed shapes.
pub fn smoothness_loss(layers: &[Tensor<f32>]) -> f64 {
    layers
        .iter()
        .map(|w| layer_smoothness(w).expect("conv weight shape"))
        .sum()
}

/// Differentiable smoothness of one `[F, C, k, k]` weight node.
pub fn smoothness_loss_node(g: &mut Graph<f32>, weight: NodeId) -> Result<NodeId> {
    let (f, c, k) = layer_dims(g.shape(weight))?;
    let kk = k * k;
    let pairs = adjacent_pairs(f, c);
    if pairs.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    let expand = |pick: fn(&(usize, usize)) -> usize| -> Vec<usize> {
        pairs
            .iter()
            .flat_map(|p| {
                let base = pick(p) * kk;
                base..base + kk
            })
            .collect()
    };
    let shape = [pairs.len(), kk];
    let a = g.take(weight, expand(|p| p.0), &shape)?;
    let b = g.take(weight, expand(|p| p.1), &shape)?;
    let d = g.row_distance(a, b, distance_kind(k))?;
    Ok(g.sum(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_layer(seed: u64, f: usize, c: usize, k: usize) -> Tensor<f32> {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(&[f, c, k, k], |_| r.gen_range(-1.0..1.0))
    }

    /// Direct double loop over the penalty's two sums.
    fn oracle(w: &Tensor<f32>) -> f64 {
        let s = w.shape();
        let (f, c, k) = (s[0], s[1], s[2]);
        let kernel = |fi: usize, ci: usize| -> Vec<f64> {
            let start = (fi * c + ci) * k * k;
            w.data()[start..start + k * k].iter().map(|&v| v as f64).collect()
        };
        let dist = |a: Vec<f64>, b: Vec<f64>| -> f64 {
            if k == 1 {
                return (a[0] - b[0]).powi(2);
            }
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        };
        let mut total = 0.0;
        for fi in 0..f {
            for ci in 0..c {
                if fi + 1 < f {
                    total += dist(kernel(fi, ci), kernel(fi + 1, ci));
                }
                if ci + 1 < c {
                    total += dist(kernel(fi, ci), kernel(fi, ci + 1));
                }
            }
        }
        total
    }

    #[test]
    fn identical_kernels_are_perfectly_smooth() {
        let w = Tensor::from_fn(&[3, 4, 3, 3], |i| (i % 9) as f32 + 1.0);
        assert!(layer_smoothness(&w).unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthogonal_filter_pair() {
        let mut w = Tensor::zeros(&[2, 1, 3, 3]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[10] = 1.0;
        assert_eq!(layer_smoothness(&w).unwrap(), 1.0);
    }

    #[test]
    fn matches_double_loop() {
        for (seed, (f, c, k)) in [(4, 5, 3), (1, 6, 3), (5, 1, 3), (3, 3, 1), (2, 7, 5)].into_iter().enumerate() {
            let w = random_layer(seed as u64, f, c, k);
            let got = layer_smoothness(&w).unwrap();
            assert!((got - oracle(&w)).abs() < 1e-9, "{f}x{c}x{k}");
        }
    }

    #[test]
    fn zero_kernels() {
        let mut w = Tensor::zeros(&[1, 3, 3, 3]);
        w.data_mut()[9] = 2.0;
        // zero-nonzero twice
        assert_eq!(layer_smoothness(&w).unwrap(), 2.0);
        assert_eq!(layer_smoothness(&Tensor::zeros(&[2, 2, 3, 3])).unwrap(), 0.0);
    }

    #[test]
    fn graph_node_matches_value_and_gradient() {
        let w = random_layer(9, 4, 3, 3);
        let mut g = Graph::new();
        let id = g.param(w.clone());
        let loss = smoothness_loss_node(&mut g, id).unwrap();
        let value = g.value(loss).item() as f64;
        assert!((value - layer_smoothness(&w).unwrap()).abs() < 1e-4);
        let grad = g.backward(loss).unwrap().wrt(id);
        let h = 1e-2f32;
        for i in [0, 17, 50, 107] {
            let mut plus = w.clone();
            plus.data_mut()[i] += h;
            let mut minus = w.clone();
            minus.data_mut()[i] -= h;
            let fd = (layer_smoothness(&plus).unwrap() - layer_smoothness(&minus).unwrap()) / (2.0 * h as f64);
            assert!((fd - grad.data()[i] as f64).abs() < 1e-2, "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn single_kernel_layer_node_is_zero() {
        let mut g = Graph::new();
        let id = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let loss = smoothness_loss_node(&mut g, id).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }
}
