//! Unbiased stochastic quantization with exact bit accounting.
//!
//! The quantizer places `2^J` equally spaced levels on `[-D, D]`,
//!
//! ```text
//! level(j) = -D + 2 D j / (2^J - 1),   j = 0 .. 2^J - 1
//! ```
//!
//! and rounds each coordinate to one of its two bracketing levels with the
//! probabilities that make the decoded value unbiased. Every coordinate is
//! transmitted as a `J`-bit level index.
//!
//! The subsampling variant sends only `ceil(alpha n)` coordinates chosen
//! uniformly without replacement, scaled by `1 / alpha` before quantization,
//! and pays `ceil(log2 n)` extra bits per coordinate for its index.
//!
//! Wire layout ([`pack`]): the level indices are written back to back as
//! `J`-bit little-endian fields starting at bit 0 of byte 0; if coordinate ids
//! are present they follow immediately as `ceil(log2 n)`-bit fields in the
//! same bit order. The final byte is zero padded.

use rand::Rng;

use crate::error::{Error, Result};
use crate::util::ceil_snap_u64;

/// Largest supported bit width.
pub const MAX_BITS: u32 = 62;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerConfig {
    bound: f64,
    bits: u32,
}

impl QuantizerConfig {
    pub fn new(bound: f64, bits: u32) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::param("bound", format!("must be positive, got {bound}")));
        }
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::param(
                "bits",
                format!("must lie in [1, {MAX_BITS}], got {bits}"),
            ));
        }
        Ok(Self { bound, bits })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    /// Distance between adjacent levels, `2 D / (2^J - 1)`.
    pub fn spacing(&self) -> f64 {
        2.0 * self.bound / (self.levels() - 1) as f64
    }

    #[inline]
    pub fn level_value(&self, index: u64) -> f64 {
        let top = (self.levels() - 1) as f64;
        -self.bound + 2.0 * self.bound * (index as f64) / top
    }

    /// Stochastically rounds one value. Always consumes one uniform.
    fn round<R: Rng + ?Sized>(&self, value: f64, coordinate: usize, rng: &mut R) -> Result<u64> {
        let u: f64 = rng.random();
        if value.is_nan() || value.abs() > self.bound {
            return Err(Error::OutOfBound {
                coordinate,
                value,
                bound: self.bound,
            });
        }
        let top = self.levels() - 1;
        let pos = (value + self.bound) / self.spacing();
        let mut lo = (pos.floor().max(0.0) as u64).min(top - 1);
        // the floor of a rounded position can be off by one; fix it against
        // the decoded level values so the bracket is exact
        while lo > 0 && self.level_value(lo) > value {
            lo -= 1;
        }
        while lo + 1 < top && self.level_value(lo + 1) <= value {
            lo += 1;
        }
        let (d_lo, d_hi) = (self.level_value(lo), self.level_value(lo + 1));
        let up = ((value - d_lo) / (d_hi - d_lo)).clamp(0.0, 1.0);
        Ok(if u < up { lo + 1 } else { lo })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedMessage {
    pub level_indices: Vec<u64>,
    /// Transmitted coordinates, ascending. `None` means every coordinate in order.
    pub coordinate_ids: Option<Vec<u32>>,
    pub dim: usize,
    pub bit_cost: u64,
}

impl CompressedMessage {
    pub fn transmitted(&self) -> usize {
        self.level_indices.len()
    }
}

/// Bits needed to address one of `dim` coordinates.
pub fn index_bits(dim: usize) -> u32 {
    if dim <= 1 {
        0
    } else {
        usize::BITS - (dim - 1).leading_zeros()
    }
}

/// Number of coordinates kept by the subsampling compressor, `ceil(alpha n)`.
pub fn subsample_count(dim: usize, alpha: f64) -> usize {
    (ceil_snap_u64(alpha * dim as f64) as usize).clamp(usize::from(dim > 0), dim)
}

/// Quantizes every coordinate of `v` to `J` bits.
pub fn quantize<R: Rng + ?Sized>(v: &[f64], cfg: &QuantizerConfig, rng: &mut R) -> Result<CompressedMessage> {
    let level_indices = v
        .iter()
        .enumerate()
        .map(|(n, &x)| cfg.round(x, n, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedMessage {
        bit_cost: u64::from(cfg.bits) * v.len() as u64,
        level_indices,
        coordinate_ids: None,
        dim: v.len(),
    })
}

/// Sends `ceil(alpha n)` uniformly chosen coordinates of `v / alpha`.
pub fn subsample_quantize<R: Rng + ?Sized>(
    v: &[f64],
    cfg: &QuantizerConfig,
    alpha: f64,
    rng: &mut R,
) -> Result<CompressedMessage> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param("alpha", format!("must lie in (0, 1], got {alpha}")));
    }
    let dim = v.len();
    let keep = subsample_count(dim, alpha);
    let ids: Vec<u32> = if keep == dim {
        (0..dim as u32).collect()
    } else {
        let mut picked: Vec<u32> = rand::seq::index::sample(rng, dim, keep)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        picked.sort_unstable();
        picked
    };
    let level_indices = ids
        .iter()
        .map(|&n| cfg.round(v[n as usize] / alpha, n as usize, rng))
        .collect::<Result<Vec<_>>>()?;
    let per_coordinate = u64::from(cfg.bits) + u64::from(index_bits(dim));
    Ok(CompressedMessage {
        bit_cost: keep as u64 * per_coordinate,
        level_indices,
        coordinate_ids: Some(ids),
        dim,
    })
}

/// Reconstructs the vector a message encodes; untransmitted coordinates are 0.
pub fn decode(msg: &CompressedMessage, cfg: &QuantizerConfig, dim: usize) -> Result<Vec<f64>> {
    if msg.dim != dim {
        return Err(Error::Dimension {
            expected: (dim, 1),
            found: (msg.dim, 1),
        });
    }
    let levels = cfg.levels();
    if let Some(&bad) = msg.level_indices.iter().find(|&&j| j >= levels) {
        return Err(Error::InvalidLevel { index: bad, levels });
    }
    match &msg.coordinate_ids {
        None => {
            if msg.level_indices.len() != dim {
                return Err(Error::Dimension {
                    expected: (dim, 1),
                    found: (msg.level_indices.len(), 1),
                });
            }
            Ok(msg.level_indices.iter().map(|&j| cfg.level_value(j)).collect())
        }
        Some(ids) => {
            if ids.len() != msg.level_indices.len() {
                return Err(Error::Dimension {
                    expected: (ids.len(), 1),
                    found: (msg.level_indices.len(), 1),
                });
            }
            let mut out = vec![0.0; dim];
            for (&n, &j) in ids.iter().zip(&msg.level_indices) {
                let slot = out.get_mut(n as usize).ok_or_else(|| {
                    Error::param("coordinate_ids", format!("id {n} outside dimension {dim}"))
                })?;
                *slot = cfg.level_value(j);
            }
            Ok(out)
        }
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: u64,
}

impl BitWriter {
    fn push(&mut self, value: u64, width: u32) {
        for k in 0..width {
            let byte = (self.bit / 8) as usize;
            if byte == self.bytes.len() {
                self.bytes.push(0);
            }
            if (value >> k) & 1 == 1 {
                self.bytes[byte] |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

fn read_bits(bytes: &[u8], start: u64, width: u32) -> Option<u64> {
    let mut out = 0u64;
    for k in 0..width {
        let bit = start + u64::from(k);
        let byte = *bytes.get((bit / 8) as usize)?;
        if (byte >> (bit % 8)) & 1 == 1 {
            out |= 1 << k;
        }
    }
    Some(out)
}

/// Serialises a message in the documented bit layout. The payload is exactly
/// `bit_cost` bits, rounded up to whole bytes.
pub fn pack(msg: &CompressedMessage, cfg: &QuantizerConfig) -> Vec<u8> {
    let mut w = BitWriter {
        bytes: Vec::new(),
        bit: 0,
    };
    for &j in &msg.level_indices {
        w.push(j, cfg.bits);
    }
    if let Some(ids) = &msg.coordinate_ids {
        let width = index_bits(msg.dim);
        for &n in ids {
            w.push(u64::from(n), width);
        }
    }
    w.bytes
}

/// Inverse of [`pack`]. `transmitted` is the number of coordinates on the
/// wire and `with_ids` tells whether the id section is present.
pub fn unpack(
    bytes: &[u8],
    cfg: &QuantizerConfig,
    dim: usize,
    transmitted: usize,
    with_ids: bool,
) -> Result<CompressedMessage> {
    let truncated = || Error::param("bytes", "message is truncated");
    let mut bit = 0u64;
    let mut level_indices = Vec::with_capacity(transmitted);
    for _ in 0..transmitted {
        level_indices.push(read_bits(bytes, bit, cfg.bits).ok_or_else(truncated)?);
        bit += u64::from(cfg.bits);
    }
    let width = index_bits(dim);
    let coordinate_ids = if with_ids {
        let mut ids = Vec::with_capacity(transmitted);
        for _ in 0..transmitted {
            ids.push(read_bits(bytes, bit, width).ok_or_else(truncated)? as u32);
            bit += u64::from(width);
        }
        Some(ids)
    } else {
        None
    };
    Ok(CompressedMessage {
        level_indices,
        coordinate_ids,
        dim,
        bit_cost: bit,
    })
}
