//! Browser bindings. Each export has a plain Rust twin so it can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use nern::apps::{export_kernel_grid, GrayImage};
use nern::embedding::{is_locally_monotone, similarity_profile, EmbeddingConfig};
use nern::smoothness::{compute_for_weights, permutation_bit_cost, smoothness_loss, PermutationVariant};
use nern::zoo::{build_desk_cnn, catalog_by_name, size_report};

/// Neighbourhood checked for monotone decay around the anchor.
pub const MONOTONE_WINDOW: usize = 5;

#[derive(Debug, Serialize)]
pub struct Profile {
    pub values: Vec<f64>,
    pub locally_monotone: bool,
}

pub fn profile(base: f64, frequencies: usize, anchor: usize, range: usize) -> Result<Profile, String> {
    let cfg = EmbeddingConfig::with_base(base, frequencies).map_err(|e| e.to_string())?;
    let values = similarity_profile(anchor, range, &cfg).map_err(|e| e.to_string())?;
    let locally_monotone = is_locally_monotone(&values, anchor, MONOTONE_WINDOW);
    Ok(Profile {
        values,
        locally_monotone,
    })
}

#[derive(Debug, Serialize)]
pub struct Tile {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl From<GrayImage> for Tile {
    fn from(g: GrayImage) -> Self {
        Self {
            width: g.width,
            height: g.height,
            pixels: g.pixels,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PermutationDemo {
    pub variant: String,
    pub smoothness_before: f64,
    pub smoothness_after: f64,
    pub before: Tile,
    pub after: Tile,
}

/// Greedily reorders the last conv layer of a randomly initialised desk
/// network and tiles channel `channel` before and after.
pub fn permutation(seed: u64, variant: &str, channel: usize) -> Result<PermutationDemo, String> {
    let variant: PermutationVariant = variant.parse().map_err(|e| format!("{e}"))?;
    let net = build_desk_cnn(seed);
    let weights: Vec<_> = net.predictable_weights().into_iter().cloned().collect();
    let map = compute_for_weights(&weights, variant).map_err(|e| e.to_string())?;
    let permuted = map.permute(&weights).map_err(|e| e.to_string())?;
    let last = weights.len() - 1;
    let side = (weights[last].shape()[0] as f64).sqrt() as usize;
    let tile = |w| export_kernel_grid(w, channel, side, side).map(Tile::from).map_err(|e| e.to_string());
    Ok(PermutationDemo {
        variant: variant.as_str().to_string(),
        smoothness_before: smoothness_loss(&weights[last..]),
        smoothness_after: smoothness_loss(&permuted[last..]),
        before: tile(&weights[last])?,
        after: tile(&permuted[last])?,
    })
}

#[derive(Debug, Serialize)]
pub struct Storage {
    pub size: String,
    pub in_filter: String,
    pub cross_filter: String,
}

pub fn storage(arch: &str) -> Result<Storage, String> {
    let catalog = catalog_by_name(arch).map_err(|e| e.to_string())?;
    Ok(Storage {
        size: size_report(&catalog).to_string(),
        in_filter: permutation_bit_cost(&catalog, PermutationVariant::InFilter).to_string(),
        cross_filter: permutation_bit_cost(&catalog, PermutationVariant::CrossFilter).to_string(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

/// JSON `{values, locally_monotone}`.
#[wasm_bindgen(js_name = embeddingProfile)]
pub fn embedding_profile_js(base: f64, frequencies: usize, anchor: usize, range: usize) -> Result<String, JsValue> {
    to_js(profile(base, frequencies, anchor, range))
}

/// JSON `{variant, smoothness_before, smoothness_after, before, after}`.
#[wasm_bindgen(js_name = permutationDemo)]
pub fn permutation_demo_js(seed: u32, variant: &str, channel: usize) -> Result<String, JsValue> {
    to_js(permutation(seed as u64, variant, channel))
}

/// JSON `{size, in_filter, cross_filter}`.
#[wasm_bindgen(js_name = storageReport)]
pub fn storage_report_js(arch: &str) -> Result<String, JsValue> {
    to_js(storage(arch))
}
