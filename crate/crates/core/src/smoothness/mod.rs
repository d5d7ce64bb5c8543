//! Kernel smoothness: the adjacent-kernel penalty, greedy reordering of the
//! prediction sequence, and the cost of storing that ordering.

mod codec;
mod cost;
mod graph;
mod loss;
mod perm;

pub use codec::{deserialize, hex as codec_hex, index_bits, map_hash, payload_len, serialize, PERM_MAGIC};
pub use cost::{permutation_bit_cost, PermCostReport};
pub use graph::{greedy_hamiltonian, kernel_graph, path_weight, KernelDistanceGraph};
pub use loss::{distance_kind, kernel_distance, layer_smoothness, smoothness_loss, smoothness_loss_node};
pub use perm::{compute_for_weights, compute_permutations, LayerPermutation, PermutationMap, PermutationVariant};
