use std::fmt;

use serde::Serialize;

use super::codec::payload_len;
use super::perm::PermutationVariant;
use crate::zoo::{params_to_mb, round_to, ArchCatalog, BYTES_PER_MB};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermCostReport {
    pub variant: PermutationVariant,
    /// Real-valued `log2` bit count per predictable layer.
    pub bits_per_layer: Vec<f64>,
    pub total_bits: f64,
    /// `total_bits / 8 / 2^20`, rounded to 3 decimals.
    pub total_mb: f64,
    pub total_mb_exact: f64,
    /// Rounded MB over the rounded network size, in percent (2 decimals).
    pub overhead_percent: f64,
    pub overhead_percent_exact: f64,
    /// Payload bytes actually written by the codec (whole-bit fields).
    pub codec_bytes: usize,
}

impl fmt::Display for PermCostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} MB {:.2}%", self.total_mb, self.overhead_percent)
    }
}

fn layer_bits(variant: PermutationVariant, filters: usize, channels: usize) -> f64 {
    let (f, c) = (filters as f64, channels as f64);
    match variant {
        PermutationVariant::None => 0.0,
        PermutationVariant::CrossFilter => f * c * (f.log2() + c.log2()),
        PermutationVariant::InFilter => f * c * c.log2() + f * f.log2(),
    }
}

/// Storage cost of a permutation map over the catalog's predictable layers.
pub fn permutation_bit_cost(catalog: &ArchCatalog, variant: PermutationVariant) -> PermCostReport {
    let bits_per_layer: Vec<f64> = catalog
        .predictable_layers()
        .map(|l| layer_bits(variant, l.filters, l.channels))
        .collect();
    let codec_bytes = catalog
        .predictable_layers()
        .map(|l| payload_len(variant, l.filters, l.channels))
        .sum();
    let total_bits: f64 = bits_per_layer.iter().sum();
    let mb = total_bits / 8.0 / BYTES_PER_MB;
    let net_mb = params_to_mb(catalog.total_param_count() as f64);
    let total_mb = round_to(mb, 3);
    PermCostReport {
        variant,
        bits_per_layer,
        total_bits,
        total_mb,
        total_mb_exact: mb,
        overhead_percent: round_to(total_mb / round_to(net_mb, 2) * 100.0, 2),
        overhead_percent_exact: mb / net_mb * 100.0,
        codec_bytes,
    }
}
