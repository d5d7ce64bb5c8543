//! Sinusoidal positional embeddings of kernel coordinates.
//!
//! Each coordinate value `v` maps to
//! `[sin(b^0 pi v), cos(b^0 pi v), ..., sin(b^(N-1) pi v), cos(b^(N-1) pi v)]`
//! and a kernel coordinate `(l, f, c)` is the concatenation of the three.
//! Because every sin/cos pair has unit norm, `|gamma(v)|^2 = N` and the cosine
//! similarity between two values depends only on their difference:
//! `sim(d) = (1/N) * sum_n cos(b^n pi d)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{NernError, Result};

/// Base frequency whose embeddings change slowly between neighbouring indices.
pub const SMOOTH_BASE: f64 = 0.76;
/// Base frequency with fast, aliasing oscillations.
pub const NON_SMOOTH_BASE: f64 = 1.25;
/// 40 frequencies x 3 coordinates x (sin, cos) = 240-dimensional embeddings.
pub const DEFAULT_FREQUENCIES: usize = 40;

/// Address of one `k x k` kernel: layer, filter and input channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KernelCoordinate {
    pub layer: usize,
    pub filter: usize,
    pub channel: usize,
}

impl KernelCoordinate {
    pub fn new(layer: usize, filter: usize, channel: usize) -> Self {
        Self {
            layer,
            filter,
            channel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Smooth,
    NonSmooth,
}

impl Regime {
    pub fn default_base(self) -> f64 {
        match self {
            Regime::Smooth => SMOOTH_BASE,
            Regime::NonSmooth => NON_SMOOTH_BASE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub base: f64,
    pub num_frequencies: usize,
    pub regime: Regime,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self::for_regime(Regime::Smooth, DEFAULT_FREQUENCIES)
    }
}

impl EmbeddingConfig {
    pub fn for_regime(regime: Regime, num_frequencies: usize) -> Self {
        Self {
            base: regime.default_base(),
            num_frequencies,
            regime,
        }
    }

    /// Arbitrary base; bases below 1 are labelled smooth.
    pub fn with_base(base: f64, num_frequencies: usize) -> Result<Self> {
        let cfg = Self {
            base,
            num_frequencies,
            regime: if base < 1.0 { Regime::Smooth } else { Regime::NonSmooth },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 {
            return Err(NernError::InvalidArgument("num_frequencies must be >= 1".into()));
        }
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(NernError::InvalidArgument(format!(
                "embedding base must be positive, got {}",
                self.base
            )));
        }
        Ok(())
    }

    /// Length of a full `(l, f, c)` embedding.
    pub fn dim(&self) -> usize {
        6 * self.num_frequencies
    }

    fn frequencies(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.num_frequencies).map(move |n| self.base.powi(n as i32) * std::f64::consts::PI)
    }
}

/// Embedding of a single coordinate value, length `2N`.
pub fn gamma(v: usize, cfg: &EmbeddingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * cfg.num_frequencies);
    gamma_into(v, cfg, &mut out);
    out
}

fn gamma_into(v: usize, cfg: &EmbeddingConfig, out: &mut Vec<f64>) {
    let v = v as f64;
    for w in cfg.frequencies() {
        let (s, c) = (w * v).sin_cos();
        out.push(s);
        out.push(c);
    }
}

/// `concat(gamma(l), gamma(f), gamma(c))`, length `6N`.
pub fn embed(coord: KernelCoordinate, cfg: &EmbeddingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim());
    gamma_into(coord.layer, cfg, &mut out);
    gamma_into(coord.filter, cfg, &mut out);
    gamma_into(coord.channel, cfg, &mut out);
    out
}

/// Row-major `[coords.len(), 6N]` matrix of embeddings in `f32`.
pub fn embed_all(coords: &[KernelCoordinate], cfg: &EmbeddingConfig) -> Vec<f32> {
    let mut out = Vec::with_capacity(coords.len() * cfg.dim());
    for &c in coords {
        out.extend(embed(c, cfg).into_iter().map(|v| v as f32));
    }
    out
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Raw cosine similarity between `gamma(anchor)` and `gamma(v)` for `v in 0..range`.
pub fn raw_similarity_profile(anchor: usize, range: usize, cfg: &EmbeddingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if anchor >= range {
        return Err(NernError::InvalidArgument(format!(
            "anchor {anchor} outside [0, {range})"
        )));
    }
    let reference = gamma(anchor, cfg);
    Ok((0..range)
        .map(|v| cosine_similarity(&reference, &gamma(v, cfg)))
        .collect())
}

/// Min-max normalized similarity profile; the anchor maps to 1.
pub fn similarity_profile(anchor: usize, range: usize, cfg: &EmbeddingConfig) -> Result<Vec<f64>> {
    let raw = raw_similarity_profile(anchor, range, cfg)?;
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON {
        return Err(NernError::DegenerateProfile);
    }
    Ok(raw.into_iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Whether `profile` is non-increasing in `|v - anchor|` for every offset up to `window`.
pub fn is_locally_monotone(profile: &[f64], anchor: usize, window: usize) -> bool {
    let at = |d: isize| -> Option<f64> {
        let i = anchor as isize + d;
        (i >= 0 && (i as usize) < profile.len()).then(|| profile[i as usize])
    };
    for sign in [-1isize, 1] {
        for d in 1..=window as isize {
            if let (Some(prev), Some(cur)) = (at(sign * (d - 1)), at(sign * d)) {
                if cur > prev + 1e-12 {
                    return false;
                }
            }
        }
    }
    true
}

pub fn write_profile_csv<W: Write>(profile: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "index,similarity")?;
    for (i, v) in profile.iter().enumerate() {
        writeln!(out, "{i},{v:.9}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn closed_form(delta: f64, cfg: &EmbeddingConfig) -> f64 {
        (0..cfg.num_frequencies)
            .map(|n| (cfg.base.powi(n as i32) * std::f64::consts::PI * delta).cos())
            .sum::<f64>()
            / cfg.num_frequencies as f64
    }

    #[test]
    fn gamma_at_zero() {
        let cfg = EmbeddingConfig::with_base(1.7, 3).unwrap();
        assert_eq!(gamma(0, &cfg), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn closed_form_similarities() {
        let one = EmbeddingConfig::with_base(1.0, 1).unwrap();
        assert_abs_diff_eq!(cosine_similarity(&gamma(0, &one), &gamma(1, &one)), -1.0, epsilon = 1e-12);
        let two = EmbeddingConfig::with_base(2.0, 2).unwrap();
        assert_abs_diff_eq!(cosine_similarity(&gamma(0, &two), &gamma(1, &two)), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn squared_norm_is_frequency_count() {
        for cfg in [EmbeddingConfig::default(), EmbeddingConfig::for_regime(Regime::NonSmooth, 40)] {
            for v in [0, 1, 7, 63, 511] {
                let n2: f64 = gamma(v, &cfg).iter().map(|x| x * x).sum();
                assert!((n2 - 40.0).abs() < 1e-6 * 40.0);
            }
        }
    }

    #[test]
    fn similarity_is_shift_invariant() {
        for cfg in [EmbeddingConfig::default(), EmbeddingConfig::for_regime(Regime::NonSmooth, 40)] {
            for a in 0..16 {
                for b in 0..16 {
                    let s = cosine_similarity(&gamma(a, &cfg), &gamma(b, &cfg));
                    let expected = closed_form(a as f64 - b as f64, &cfg);
                    assert_abs_diff_eq!(s, expected, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn embed_concatenates_in_lfc_order() {
        let cfg = EmbeddingConfig::with_base(0.9, 2).unwrap();
        let e = embed(KernelCoordinate::new(1, 2, 3), &cfg);
        assert_eq!(e.len(), 12);
        assert_eq!(&e[0..4], gamma(1, &cfg).as_slice());
        assert_eq!(&e[4..8], gamma(2, &cfg).as_slice());
        assert_eq!(&e[8..12], gamma(3, &cfg).as_slice());
        let zero = embed(KernelCoordinate::new(0, 0, 0), &cfg);
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn default_embedding_is_240_wide() {
        assert_eq!(EmbeddingConfig::default().dim(), 240);
    }

    #[test]
    fn non_smooth_embeddings_are_pairwise_distinct() {
        let cfg = EmbeddingConfig::for_regime(Regime::NonSmooth, 40);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for l in 0..3 {
            for f in 0..6 {
                for c in 0..6 {
                    let e = embed(KernelCoordinate::new(l, f, c), &cfg);
                    for other in &seen {
                        let dist: f64 = other.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum();
                        assert!(dist > 1e-9);
                    }
                    seen.push(e);
                }
            }
        }
    }

    #[test]
    fn profile_normalization() {
        let cfg = EmbeddingConfig::default();
        let p = similarity_profile(31, 64, &cfg).unwrap();
        assert_eq!(p[31], 1.0);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for d in 0..=31 {
            assert_abs_diff_eq!(p[31 - d], p[31 + d], epsilon = 1e-9);
        }
        assert_abs_diff_eq!(p[30], 0.665, epsilon = 0.02);
        assert_abs_diff_eq!(p[32], 0.665, epsilon = 0.02);
    }

    #[test]
    fn profile_errors() {
        let cfg = EmbeddingConfig::default();
        assert!(matches!(similarity_profile(0, 1, &cfg), Err(NernError::DegenerateProfile)));
        assert!(similarity_profile(64, 64, &cfg).is_err());
        assert!(EmbeddingConfig::with_base(0.0, 4).is_err());
        assert!(EmbeddingConfig::with_base(1.0, 0).is_err());
    }

    #[test]
    fn monotonicity_regimes() {
        let smooth = raw_similarity_profile(31, 64, &EmbeddingConfig::default()).unwrap();
        let rough = raw_similarity_profile(31, 64, &EmbeddingConfig::for_regime(Regime::NonSmooth, 40)).unwrap();
        assert!(is_locally_monotone(&smooth, 31, 5));
        assert!(!is_locally_monotone(&rough, 31, 5));
        // The smooth curve has a secondary bump at |d| = 6.
        assert!(!is_locally_monotone(&smooth, 31, 8));
    }

    #[test]
    fn csv_export() {
        let mut buf = Vec::new();
        write_profile_csv(&[1.0, 0.5], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "index,similarity\n0,1.000000000\n1,0.500000000\n");
    }
}
