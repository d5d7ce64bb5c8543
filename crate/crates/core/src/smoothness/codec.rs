//! Bit-packed permutation files.

use sha2::{Digest, Sha256};

use super::perm::{LayerPermutation, PermutationMap, PermutationVariant};
use crate::error::{NernError, Result};

pub const PERM_MAGIC: &[u8; 4] = b"NRP1";

/// Bits needed to store an index in `0..range`.
pub fn index_bits(range: usize) -> u32 {
    if range <= 1 {
        0
    } else {
        usize::BITS - (range - 1).leading_zeros()
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), bit: 0 }
    }

    fn push(&mut self, value: usize, width: u32) {
        for i in 0..width {
            if self.bit % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl BitReader<'_> {
    fn pull(&mut self, width: u32, range: usize) -> Result<usize> {
        let mut v = 0usize;
        for i in 0..width {
            let byte = self
                .bytes
                .get(self.bit / 8)
                .ok_or_else(|| NernError::Codec("truncated permutation payload".into()))?;
            if (byte >> (self.bit % 8)) & 1 == 1 {
                v |= 1 << i;
            }
            self.bit += 1;
        }
        if v >= range {
            return Err(NernError::Codec(format!("index {v} outside range {range}")));
        }
        Ok(v)
    }
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| NernError::Codec(format!("{what} {v} does not fit in u32")))
}

fn layer_payload(layer: &LayerPermutation) -> Vec<u8> {
    let (f, c) = (layer.filters(), layer.channels());
    let mut w = BitWriter::new();
    match layer {
        LayerPermutation::Cross { order, .. } => {
            // Each slot stores its source as a (filter, channel) pair.
            for &src in order {
                w.push(src / c, index_bits(f));
                w.push(src % c, index_bits(c));
            }
        }
        LayerPermutation::In {
            filter_order,
            channel_orders,
        } => {
            for order in channel_orders {
                for &ch in order {
                    w.push(ch, index_bits(c));
                }
            }
            for &src in filter_order {
                w.push(src, index_bits(f));
            }
        }
    }
    w.bytes
}

/// Payload bytes for one layer of the given variant.
pub fn payload_len(variant: PermutationVariant, filters: usize, channels: usize) -> usize {
    let (bf, bc) = (index_bits(filters) as usize, index_bits(channels) as usize);
    let bits = match variant {
        PermutationVariant::None => 0,
        PermutationVariant::CrossFilter => filters * channels * (bf + bc),
        PermutationVariant::InFilter => filters * channels * bc + filters * bf,
    };
    bits.div_ceil(8)
}

pub fn serialize(map: &PermutationMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut out = PERM_MAGIC.to_vec();
    out.push(map.variant.code());
    let layers = if map.is_identity_variant() { &[][..] } else { &map.layers[..] };
    out.extend(u32_field(layers.len(), "layer count")?);
    for layer in layers {
        out.extend(u32_field(layer.filters(), "filter count")?);
        out.extend(u32_field(layer.channels(), "channel count")?);
        out.extend(layer_payload(layer));
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let raw = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| NernError::Codec("truncated permutation header".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(raw.try_into().unwrap()) as usize)
}

pub fn deserialize(bytes: &[u8]) -> Result<PermutationMap> {
    if bytes.len() < 9 || &bytes[..4] != PERM_MAGIC {
        return Err(NernError::Codec("not a permutation file".into()));
    }
    let variant = PermutationVariant::from_code(bytes[4])
        .ok_or_else(|| NernError::Codec(format!("unknown variant code {}", bytes[4])))?;
    let mut pos = 5;
    let count = read_u32(bytes, &mut pos)?;
    if variant == PermutationVariant::None && count != 0 {
        return Err(NernError::Codec("variant none carries layers".into()));
    }
    let mut layers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let f = read_u32(bytes, &mut pos)?;
        let c = read_u32(bytes, &mut pos)?;
        if f == 0 || c == 0 {
            return Err(NernError::Codec("zero layer extent".into()));
        }
        let len = payload_len(variant, f, c);
        let payload = bytes
            .get(pos..pos + len)
            .ok_or_else(|| NernError::Codec("truncated permutation payload".into()))?;
        pos += len;
        let mut r = BitReader { bytes: payload, bit: 0 };
        let layer = match variant {
            PermutationVariant::CrossFilter => {
                let mut order = Vec::with_capacity(f * c);
                for _ in 0..f * c {
                    let sf = r.pull(index_bits(f), f)?;
                    let sc = r.pull(index_bits(c), c)?;
                    order.push(sf * c + sc);
                }
                LayerPermutation::Cross {
                    filters: f,
                    channels: c,
                    order,
                }
            }
            PermutationVariant::InFilter => {
                let mut channel_orders = Vec::with_capacity(f);
                for _ in 0..f {
                    channel_orders.push((0..c).map(|_| r.pull(index_bits(c), c)).collect::<Result<Vec<_>>>()?);
                }
                let filter_order = (0..f).map(|_| r.pull(index_bits(f), f)).collect::<Result<Vec<_>>>()?;
                LayerPermutation::In {
                    filter_order,
                    channel_orders,
                }
            }
            PermutationVariant::None => unreachable!(),
        };
        layers.push(layer);
    }
    if pos != bytes.len() {
        return Err(NernError::Codec(format!("{} trailing bytes", bytes.len() - pos)));
    }
    PermutationMap::new(variant, layers).map_err(|e| NernError::Codec(e.to_string()))
}

/// Hex SHA-256 of the serialized map.
pub fn map_hash(map: &PermutationMap) -> Result<String> {
    Ok(hex(&Sha256::digest(serialize(map)?)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
