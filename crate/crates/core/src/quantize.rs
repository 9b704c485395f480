//! Unbiased ω-quantization operators with exact bit-cost accounting.
//!
//! A quantizer `Q` here is a random operator with `E[Q(x)] = x` and
//! `E‖Q(x)‖² ≤ (ω+1)‖x‖²`; ω measures the relative variance inflation the
//! compression introduces. Three compressing schemes are provided next to the
//! identity:
//!
//! * random dithering: `Q(x) = sign(x)·‖x‖_p·(1/s)·⌊s|x|/‖x‖_p + ξ⌋` with
//!   ξ uniform on `[0,1)^d` and `s` rounding levels,
//! * random sparsification: a uniform r-hot mask scaled by `d/r`,
//! * block dithering: the vector split into blocks, each dithered
//!   independently with `p = 2`, `s = 1` and its own norm scalar.
//!
//! Encoding is separated from accounting: simulation arithmetic is always
//! 64-bit, while [`LedgerModel`] prices what a real transmission of the
//! message would cost in bits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{all_finite, ceil_log2, lp_norm_robust};

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("corrupt message: {0}")]
    CorruptMessage(String),
}

/// Which compression scheme to apply, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuantizerSpec {
    Identity,
    /// Random dithering with norm exponent `p ≥ 1` (`f64::INFINITY` for the
    /// max norm) and `s ≥ 1` rounding levels.
    Dither { p: f64, s: u32 },
    /// Uniform r-hot masking scaled by `d/r`.
    Sparsify { r: usize },
    /// Per-block random dithering with `p = 2`, `s = 1`; block sizes must sum
    /// to the vector dimension.
    BlockDither { block_sizes: Vec<usize> },
}

impl QuantizerSpec {
    /// Checks the scheme parameters against a vector dimension.
    pub fn validate(&self, dim: usize) -> Result<(), QuantizeError> {
        match self {
            QuantizerSpec::Identity => Ok(()),
            QuantizerSpec::Dither { p, s } => {
                if !(*p >= 1.0) {
                    return Err(QuantizeError::InvalidInput(format!(
                        "dither norm exponent must satisfy p >= 1, got {p}"
                    )));
                }
                if *s < 1 {
                    return Err(QuantizeError::InvalidInput(
                        "dither needs at least one level (s >= 1)".into(),
                    ));
                }
                Ok(())
            }
            QuantizerSpec::Sparsify { r } => {
                if *r < 1 || *r > dim {
                    return Err(QuantizeError::InvalidInput(format!(
                        "sparsify keeps r coordinates with 1 <= r <= d; got r={r}, d={dim}"
                    )));
                }
                Ok(())
            }
            QuantizerSpec::BlockDither { block_sizes } => {
                if block_sizes.is_empty() || block_sizes.iter().any(|&b| b == 0) {
                    return Err(QuantizeError::InvalidInput(
                        "block sizes must be positive".into(),
                    ));
                }
                let total: usize = block_sizes.iter().sum();
                if total != dim {
                    return Err(QuantizeError::InvalidInput(format!(
                        "block sizes sum to {total}, expected the dimension {dim}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Worst-case variance parameter ω valid for this scheme at dimension `d`.
    ///
    /// * identity: 0 (and only the identity has ω = 0);
    /// * dithering: `2 + √d · d^{max(1/p − 1/2, 0)} / s`, the Hölder bound on
    ///   `2 + ‖x‖₁‖x‖_p/(s‖x‖₂²)`;
    /// * sparsification: `d/r − 1`;
    /// * block dithering: `max_b √(size_b) + 1`.
    pub fn omega(&self, dim: usize) -> Result<f64, QuantizeError> {
        self.validate(dim)?;
        Ok(match self {
            QuantizerSpec::Identity => 0.0,
            QuantizerSpec::Dither { p, s } => {
                let d = dim as f64;
                let holder = d.sqrt() * d.powf((1.0 / p - 0.5).max(0.0));
                2.0 + holder / f64::from(*s)
            }
            QuantizerSpec::Sparsify { r } => dim as f64 / *r as f64 - 1.0,
            QuantizerSpec::BlockDither { block_sizes } => {
                let max_block = block_sizes.iter().copied().max().unwrap_or(1);
                (max_block as f64).sqrt() + 1.0
            }
        })
    }
}

/// One dithered coordinate: only nonzero levels are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitherEntry {
    pub index: u32,
    pub negative: bool,
    /// Level in `[1, s+1]`; the decoded value is `sign · norm · level / s`.
    pub level: u32,
}

/// Dither payload for one contiguous index range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitherBlock {
    pub norm: f64,
    pub entries: Vec<DitherEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Dense(Vec<f64>),
    Dither(DitherBlock),
    /// `(index, value)` pairs with strictly increasing indices; values are
    /// already scaled by `d/r`.
    Sparse(Vec<(u32, f64)>),
    /// One dither payload per block, indices local to the block.
    Blocks(Vec<DitherBlock>),
}

/// An encoded compressed vector plus its cost under the producing ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMessage {
    pub scheme: QuantizerSpec,
    pub dim: usize,
    pub payload: Payload,
    pub bit_cost: u64,
}

/// Bit accounting model: float width plus the index width. A `None` index
/// width means `⌈log₂ d⌉` of the indexed space (the block size for block
/// payload entries).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerModel {
    pub float_bits: u32,
    pub index_bits: Option<u32>,
}

impl Default for LedgerModel {
    fn default() -> Self {
        LedgerModel {
            float_bits: 64,
            index_bits: None,
        }
    }
}

impl LedgerModel {
    pub fn validate(&self) -> Result<(), QuantizeError> {
        if self.float_bits != 32 && self.float_bits != 64 {
            return Err(QuantizeError::InvalidInput(format!(
                "ledger float width must be 32 or 64 bits, got {}",
                self.float_bits
            )));
        }
        Ok(())
    }

    fn index_bits_for(&self, space: usize) -> u64 {
        match self.index_bits {
            Some(b) => u64::from(b),
            None => ceil_log2(space.max(1)),
        }
    }
}

/// Bits needed to transmit `msg` under `model`.
///
/// Identity: `d·w`. Dither: `w` for the norm plus
/// `⌈log₂ d⌉ + 1 + ⌈log₂(s+1)⌉` per kept coordinate. Sparsify:
/// `r·(⌈log₂ d⌉ + w)`. Block dithering: the per-block dither costs summed,
/// with indices priced against the block size.
pub fn bit_cost(msg: &QuantizedMessage, model: &LedgerModel) -> u64 {
    let w = u64::from(model.float_bits);
    match (&msg.scheme, &msg.payload) {
        (QuantizerSpec::Identity, _) => msg.dim as u64 * w,
        (QuantizerSpec::Dither { s, .. }, Payload::Dither(block)) => {
            dither_block_cost(block, msg.dim, *s, model, w)
        }
        (QuantizerSpec::Sparsify { r }, _) => {
            *r as u64 * (model.index_bits_for(msg.dim) + w)
        }
        (QuantizerSpec::BlockDither { block_sizes }, Payload::Blocks(blocks)) => blocks
            .iter()
            .zip(block_sizes)
            .map(|(block, &size)| dither_block_cost(block, size, 1, model, w))
            .sum(),
        // Scheme/payload mismatches are caught by decode; price the payload
        // we actually hold.
        (_, Payload::Dense(_)) => msg.dim as u64 * w,
        (_, Payload::Dither(block)) => dither_block_cost(block, msg.dim, 1, model, w),
        (_, Payload::Sparse(entries)) => {
            entries.len() as u64 * (model.index_bits_for(msg.dim) + w)
        }
        (_, Payload::Blocks(blocks)) => blocks
            .iter()
            .map(|b| dither_block_cost(b, msg.dim, 1, model, w))
            .sum(),
    }
}

fn dither_block_cost(
    block: &DitherBlock,
    space: usize,
    s: u32,
    model: &LedgerModel,
    float_bits: u64,
) -> u64 {
    let per_entry = model.index_bits_for(space) + 1 + ceil_log2(s as usize + 1);
    float_bits + block.entries.len() as u64 * per_entry
}

/// Worst-case ω for `spec` at dimension `d` (see [`QuantizerSpec::omega`]).
pub fn omega_bound(spec: &QuantizerSpec, dim: usize) -> Result<f64, QuantizeError> {
    spec.omega(dim)
}

fn check_input(x: &[f64]) -> Result<(), QuantizeError> {
    if !all_finite(x) {
        return Err(QuantizeError::InvalidInput(
            "input vector has non-finite entries".into(),
        ));
    }
    Ok(())
}

fn dither_block<R: Rng + ?Sized>(
    x: &[f64],
    index_base: usize,
    p: f64,
    s: u32,
    rng: &mut R,
) -> DitherBlock {
    let norm = lp_norm_robust(x, p);
    let mut entries = Vec::new();
    if norm == 0.0 {
        // The zero vector quantizes to the empty message exactly.
        return DitherBlock { norm: 0.0, entries };
    }
    let sf = f64::from(s);
    for (i, &v) in x.iter().enumerate() {
        let y = sf * v.abs() / norm;
        // ⌊y + ξ⌋ with ξ ∈ [0,1): integer arguments stay noise-free.
        let level = if y == y.floor() {
            y
        } else {
            (y + rng.gen::<f64>()).floor()
        };
        if level > 0.0 {
            entries.push(DitherEntry {
                index: (index_base + i) as u32,
                negative: v < 0.0,
                level: level as u32,
            });
        }
    }
    DitherBlock { norm, entries }
}

/// Random dithering of `x` with norm exponent `p` and `s` levels.
pub fn dither<R: Rng + ?Sized>(
    x: &[f64],
    p: f64,
    s: u32,
    rng: &mut R,
) -> Result<QuantizedMessage, QuantizeError> {
    let scheme = QuantizerSpec::Dither { p, s };
    scheme.validate(x.len())?;
    check_input(x)?;
    let payload = Payload::Dither(dither_block(x, 0, p, s, rng));
    let mut msg = QuantizedMessage {
        scheme,
        dim: x.len(),
        payload,
        bit_cost: 0,
    };
    msg.bit_cost = bit_cost(&msg, &LedgerModel::default());
    Ok(msg)
}

/// Keeps a uniform `r`-subset of coordinates scaled by `d/r`.
///
/// The subset is drawn by a partial Fisher–Yates shuffle, so it is uniform
/// over all `(d choose r)` subsets and costs O(d) time.
pub fn sparsify<R: Rng + ?Sized>(
    x: &[f64],
    r: usize,
    rng: &mut R,
) -> Result<QuantizedMessage, QuantizeError> {
    let scheme = QuantizerSpec::Sparsify { r };
    scheme.validate(x.len())?;
    check_input(x)?;
    let d = x.len();
    let mut idx: Vec<u32> = (0..d as u32).collect();
    for i in 0..r {
        let j = rng.gen_range(i..d);
        idx.swap(i, j);
    }
    let mut kept = idx[..r].to_vec();
    kept.sort_unstable();
    let scalef = d as f64 / r as f64;
    let entries = kept
        .into_iter()
        .map(|i| (i, scalef * x[i as usize]))
        .collect();
    let mut msg = QuantizedMessage {
        scheme,
        dim: d,
        payload: Payload::Sparse(entries),
        bit_cost: 0,
    };
    msg.bit_cost = bit_cost(&msg, &LedgerModel::default());
    Ok(msg)
}

/// Splits `x` into the given blocks and dithers each independently with
/// `p = 2`, `s = 1`.
pub fn block_dither<R: Rng + ?Sized>(
    x: &[f64],
    block_sizes: &[usize],
    rng: &mut R,
) -> Result<QuantizedMessage, QuantizeError> {
    let scheme = QuantizerSpec::BlockDither {
        block_sizes: block_sizes.to_vec(),
    };
    scheme.validate(x.len())?;
    check_input(x)?;
    let mut blocks = Vec::with_capacity(block_sizes.len());
    let mut offset = 0;
    for &size in block_sizes {
        // Indices are local to the block.
        blocks.push(dither_block(&x[offset..offset + size], 0, 2.0, 1, rng));
        offset += size;
    }
    let mut msg = QuantizedMessage {
        scheme,
        dim: x.len(),
        payload: Payload::Blocks(blocks),
        bit_cost: 0,
    };
    msg.bit_cost = bit_cost(&msg, &LedgerModel::default());
    Ok(msg)
}

fn identity_message(x: &[f64]) -> Result<QuantizedMessage, QuantizeError> {
    check_input(x)?;
    let mut msg = QuantizedMessage {
        scheme: QuantizerSpec::Identity,
        dim: x.len(),
        payload: Payload::Dense(x.to_vec()),
        bit_cost: 0,
    };
    msg.bit_cost = bit_cost(&msg, &LedgerModel::default());
    Ok(msg)
}

/// A quantizer bound to a ledger model; `encode` fills in the message's
/// `bit_cost` under that model.
#[derive(Debug, Clone)]
pub struct Quantizer {
    pub spec: QuantizerSpec,
    pub ledger: LedgerModel,
}

impl Quantizer {
    pub fn new(spec: QuantizerSpec, ledger: LedgerModel) -> Self {
        Quantizer { spec, ledger }
    }

    pub fn is_identity(&self) -> bool {
        self.spec == QuantizerSpec::Identity
    }

    pub fn omega(&self, dim: usize) -> Result<f64, QuantizeError> {
        self.spec.omega(dim)
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        rng: &mut R,
    ) -> Result<QuantizedMessage, QuantizeError> {
        let mut msg = match &self.spec {
            QuantizerSpec::Identity => identity_message(x)?,
            QuantizerSpec::Dither { p, s } => dither(x, *p, *s, rng)?,
            QuantizerSpec::Sparsify { r } => sparsify(x, *r, rng)?,
            QuantizerSpec::BlockDither { block_sizes } => block_dither(x, block_sizes, rng)?,
        };
        msg.bit_cost = bit_cost(&msg, &self.ledger);
        Ok(msg)
    }
}

fn decode_dither_block(
    block: &DitherBlock,
    out: &mut [f64],
    s: u32,
    dim: usize,
) -> Result<(), QuantizeError> {
    if !block.norm.is_finite() || block.norm < 0.0 {
        return Err(QuantizeError::CorruptMessage(format!(
            "dither norm must be a nonnegative finite value, got {}",
            block.norm
        )));
    }
    let mut last: Option<u32> = None;
    for e in &block.entries {
        if e.index as usize >= dim {
            return Err(QuantizeError::CorruptMessage(format!(
                "dither index {} out of range for dimension {dim}",
                e.index
            )));
        }
        if e.level == 0 || e.level > s + 1 {
            return Err(QuantizeError::CorruptMessage(format!(
                "dither level {} outside [1, {}]",
                e.level,
                s + 1
            )));
        }
        if let Some(prev) = last {
            if e.index <= prev {
                return Err(QuantizeError::CorruptMessage(
                    "dither indices must be strictly increasing".into(),
                ));
            }
        }
        last = Some(e.index);
        let sign = if e.negative { -1.0 } else { 1.0 };
        out[e.index as usize] = sign * block.norm * f64::from(e.level) / f64::from(s);
    }
    Ok(())
}

/// Materializes the dense vector a message represents.
pub fn decode(msg: &QuantizedMessage) -> Result<Vec<f64>, QuantizeError> {
    let mut out = vec![0.0; msg.dim];
    match (&msg.scheme, &msg.payload) {
        (QuantizerSpec::Identity, Payload::Dense(values)) => {
            if values.len() != msg.dim {
                return Err(QuantizeError::CorruptMessage(format!(
                    "identity payload holds {} values for dimension {}",
                    values.len(),
                    msg.dim
                )));
            }
            out.copy_from_slice(values);
        }
        (QuantizerSpec::Dither { s, .. }, Payload::Dither(block)) => {
            decode_dither_block(block, &mut out, *s, msg.dim)?;
        }
        (QuantizerSpec::Sparsify { r }, Payload::Sparse(entries)) => {
            if entries.len() != *r {
                return Err(QuantizeError::CorruptMessage(format!(
                    "sparsify payload holds {} entries, expected r = {r}",
                    entries.len()
                )));
            }
            let mut last: Option<u32> = None;
            for &(idx, value) in entries {
                if idx as usize >= msg.dim {
                    return Err(QuantizeError::CorruptMessage(format!(
                        "sparsify index {idx} out of range for dimension {}",
                        msg.dim
                    )));
                }
                if let Some(prev) = last {
                    if idx <= prev {
                        return Err(QuantizeError::CorruptMessage(
                            "sparsify indices must be strictly increasing".into(),
                        ));
                    }
                }
                if !value.is_finite() {
                    return Err(QuantizeError::CorruptMessage(
                        "sparsify value is not finite".into(),
                    ));
                }
                last = Some(idx);
                out[idx as usize] = value;
            }
        }
        (QuantizerSpec::BlockDither { block_sizes }, Payload::Blocks(blocks)) => {
            if blocks.len() != block_sizes.len() {
                return Err(QuantizeError::CorruptMessage(format!(
                    "{} block payloads for {} declared blocks",
                    blocks.len(),
                    block_sizes.len()
                )));
            }
            let mut offset = 0;
            for (block, &size) in blocks.iter().zip(block_sizes) {
                decode_dither_block(block, &mut out[offset..offset + size], 1, size)?;
                offset += size;
            }
        }
        _ => {
            return Err(QuantizeError::CorruptMessage(
                "payload kind does not match the declared scheme".into(),
            ));
        }
    }
    Ok(out)
}

// --- binary layout -----------------------------------------------------
//
// Little-endian. Header: scheme tag (1 byte), dimension (u32), scheme
// parameters. Then the bit cost (u64) and the payload:
//   identity     d × f64
//   dither       norm f64, count u32, then (index u32, sign u8, level u32)
//   sparsify     r × (index u32, value f64)
//   block dither per block: norm f64, count u32, entries as for dither

const TAG_IDENTITY: u8 = 0;
const TAG_DITHER: u8 = 1;
const TAG_SPARSIFY: u8 = 2;
const TAG_BLOCK: u8 = 3;

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QuantizeError> {
        if self.pos + n > self.buf.len() {
            return Err(QuantizeError::CorruptMessage(
                "message truncated".into(),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, QuantizeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, QuantizeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, QuantizeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, QuantizeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_dither_block(out: &mut Vec<u8>, block: &DitherBlock) {
    out.extend_from_slice(&block.norm.to_le_bytes());
    out.extend_from_slice(&(block.entries.len() as u32).to_le_bytes());
    for e in &block.entries {
        out.extend_from_slice(&e.index.to_le_bytes());
        out.push(u8::from(e.negative));
        out.extend_from_slice(&e.level.to_le_bytes());
    }
}

fn read_dither_block(r: &mut ByteReader) -> Result<DitherBlock, QuantizeError> {
    let norm = r.f64()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let index = r.u32()?;
        let negative = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(QuantizeError::CorruptMessage(format!(
                    "sign byte must be 0 or 1, got {other}"
                )))
            }
        };
        let level = r.u32()?;
        entries.push(DitherEntry {
            index,
            negative,
            level,
        });
    }
    Ok(DitherBlock { norm, entries })
}

impl QuantizedMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match &self.scheme {
            QuantizerSpec::Identity => out.push(TAG_IDENTITY),
            QuantizerSpec::Dither { .. } => out.push(TAG_DITHER),
            QuantizerSpec::Sparsify { .. } => out.push(TAG_SPARSIFY),
            QuantizerSpec::BlockDither { .. } => out.push(TAG_BLOCK),
        }
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        match &self.scheme {
            QuantizerSpec::Identity => {}
            QuantizerSpec::Dither { p, s } => {
                out.extend_from_slice(&p.to_le_bytes());
                out.extend_from_slice(&s.to_le_bytes());
            }
            QuantizerSpec::Sparsify { r } => {
                out.extend_from_slice(&(*r as u32).to_le_bytes());
            }
            QuantizerSpec::BlockDither { block_sizes } => {
                out.extend_from_slice(&(block_sizes.len() as u32).to_le_bytes());
                for &b in block_sizes {
                    out.extend_from_slice(&(b as u32).to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.bit_cost.to_le_bytes());
        match &self.payload {
            Payload::Dense(values) => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Dither(block) => write_dither_block(&mut out, block),
            Payload::Sparse(entries) => {
                for &(idx, value) in entries {
                    out.extend_from_slice(&idx.to_le_bytes());
                    out.extend_from_slice(&value.to_le_bytes());
                }
            }
            Payload::Blocks(blocks) => {
                for block in blocks {
                    write_dither_block(&mut out, block);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, QuantizeError> {
        let mut r = ByteReader { buf, pos: 0 };
        let tag = r.u8()?;
        let dim = r.u32()? as usize;
        let scheme = match tag {
            TAG_IDENTITY => QuantizerSpec::Identity,
            TAG_DITHER => {
                let p = r.f64()?;
                let s = r.u32()?;
                QuantizerSpec::Dither { p, s }
            }
            TAG_SPARSIFY => QuantizerSpec::Sparsify {
                r: r.u32()? as usize,
            },
            TAG_BLOCK => {
                let count = r.u32()? as usize;
                let mut block_sizes = Vec::with_capacity(count);
                for _ in 0..count {
                    block_sizes.push(r.u32()? as usize);
                }
                QuantizerSpec::BlockDither { block_sizes }
            }
            other => {
                return Err(QuantizeError::CorruptMessage(format!(
                    "unknown scheme tag {other}"
                )))
            }
        };
        scheme
            .validate(dim)
            .map_err(|e| QuantizeError::CorruptMessage(e.to_string()))?;
        let bit_cost = r.u64()?;
        let payload = match &scheme {
            QuantizerSpec::Identity => {
                let mut values = Vec::with_capacity(dim);
                for _ in 0..dim {
                    values.push(r.f64()?);
                }
                Payload::Dense(values)
            }
            QuantizerSpec::Dither { .. } => Payload::Dither(read_dither_block(&mut r)?),
            QuantizerSpec::Sparsify { r: count } => {
                let mut entries = Vec::with_capacity(*count);
                for _ in 0..*count {
                    let idx = r.u32()?;
                    let value = r.f64()?;
                    entries.push((idx, value));
                }
                Payload::Sparse(entries)
            }
            QuantizerSpec::BlockDither { block_sizes } => {
                let mut blocks = Vec::with_capacity(block_sizes.len());
                for _ in 0..block_sizes.len() {
                    blocks.push(read_dither_block(&mut r)?);
                }
                Payload::Blocks(blocks)
            }
        };
        if r.pos != buf.len() {
            return Err(QuantizeError::CorruptMessage(
                "trailing bytes after payload".into(),
            ));
        }
        let msg = QuantizedMessage {
            scheme,
            dim,
            payload,
            bit_cost,
        };
        // Surface structural corruption on load rather than at first use.
        decode(&msg)?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_vector_encodes_empty() {
        let msg = dither(&[0.0, 0.0, 0.0], 2.0, 3, &mut rng(0)).unwrap();
        match &msg.payload {
            Payload::Dither(block) => {
                assert_eq!(block.norm, 0.0);
                assert!(block.entries.is_empty());
            }
            other => panic!("unexpected payload {other:?}"),
        }
        assert_eq!(decode(&msg).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn boundary_level_is_exact() {
        // y = s|x|/‖x‖ = 4 exactly, so the level is deterministic.
        for seed in 0..10 {
            let msg = dither(&[-7.0], 2.0, 4, &mut rng(seed)).unwrap();
            assert_eq!(decode(&msg).unwrap(), vec![-7.0]);
        }
    }

    #[test]
    fn single_coordinate_block_is_exact() {
        let x = [1.5, -2.25, 0.5, 3.0];
        let msg = block_dither(&x, &[1, 1, 1, 1], &mut rng(7)).unwrap();
        assert_eq!(decode(&msg).unwrap(), x.to_vec());
    }

    #[test]
    fn one_block_matches_plain_dither() {
        // A single block consumes the stream exactly like dither(p=2, s=1).
        let x = [3.0, 4.0, -1.0];
        let blocked = block_dither(&x, &[3], &mut rng(123)).unwrap();
        let plain = dither(&x, 2.0, 1, &mut rng(123)).unwrap();
        assert_eq!(decode(&blocked).unwrap(), decode(&plain).unwrap());
    }

    #[test]
    fn sparsify_full_mask_is_identity() {
        let x = [0.25, -1.5, 3.0];
        let msg = sparsify(&x, 3, &mut rng(1)).unwrap();
        assert_eq!(decode(&msg).unwrap(), x.to_vec());
    }

    #[test]
    fn sparsify_two_outcomes() {
        let x = [1.0, 2.0];
        let mut seen = [false, false];
        for seed in 0..64 {
            let msg = sparsify(&x, 1, &mut rng(seed)).unwrap();
            let v = decode(&msg).unwrap();
            if v == vec![2.0, 0.0] {
                seen[0] = true;
            } else if v == vec![0.0, 4.0] {
                seen[1] = true;
            } else {
                panic!("unexpected outcome {v:?}");
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn sparsify_zero_vector() {
        let msg = sparsify(&[0.0, 0.0], 1, &mut rng(3)).unwrap();
        assert_eq!(decode(&msg).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn omega_values() {
        assert_eq!(QuantizerSpec::Identity.omega(50).unwrap(), 0.0);
        assert_eq!(
            QuantizerSpec::Sparsify { r: 10 }.omega(100).unwrap(),
            9.0
        );
        let w = QuantizerSpec::Dither { p: 2.0, s: 1 }.omega(100).unwrap();
        assert!((w - 12.0).abs() < 1e-12);
        // p = 1 pays both Hölder factors: 2 + d/s.
        let w1 = QuantizerSpec::Dither { p: 1.0, s: 2 }.omega(100).unwrap();
        assert!((w1 - 52.0).abs() < 1e-12);
        let winf = QuantizerSpec::Dither {
            p: f64::INFINITY,
            s: 1,
        }
        .omega(100)
        .unwrap();
        assert!((winf - 12.0).abs() < 1e-12);
        let wb = QuantizerSpec::BlockDither {
            block_sizes: vec![2, 2],
        }
        .omega(4)
        .unwrap();
        assert!((wb - (2.0_f64.sqrt() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn decode_examples() {
        let msg = identity_message(&[1.5, -2.0]).unwrap();
        assert_eq!(decode(&msg).unwrap(), vec![1.5, -2.0]);

        let empty = QuantizedMessage {
            scheme: QuantizerSpec::Dither { p: 2.0, s: 1 },
            dim: 3,
            payload: Payload::Dither(DitherBlock {
                norm: 5.0,
                entries: vec![],
            }),
            bit_cost: 64,
        };
        assert_eq!(decode(&empty).unwrap(), vec![0.0, 0.0, 0.0]);

        let one = QuantizedMessage {
            scheme: QuantizerSpec::Dither { p: 2.0, s: 1 },
            dim: 2,
            payload: Payload::Dither(DitherBlock {
                norm: 5.0,
                entries: vec![DitherEntry {
                    index: 0,
                    negative: false,
                    level: 1,
                }],
            }),
            bit_cost: 0,
        };
        assert_eq!(decode(&one).unwrap(), vec![5.0, 0.0]);
    }

    #[test]
    fn bit_costs() {
        let model = LedgerModel::default();
        let ident = identity_message(&vec![1.0; 20]).unwrap();
        assert_eq!(bit_cost(&ident, &model), 1280);

        let msg = QuantizedMessage {
            scheme: QuantizerSpec::Dither { p: 2.0, s: 1 },
            dim: 100,
            payload: Payload::Dither(DitherBlock {
                norm: 2.0,
                entries: (0..3)
                    .map(|i| DitherEntry {
                        index: i,
                        negative: false,
                        level: 1,
                    })
                    .collect(),
            }),
            bit_cost: 0,
        };
        assert_eq!(bit_cost(&msg, &model), 64 + 3 * (7 + 1 + 1));

        let empty = QuantizedMessage {
            scheme: QuantizerSpec::Dither { p: 2.0, s: 1 },
            dim: 100,
            payload: Payload::Dither(DitherBlock {
                norm: 0.0,
                entries: vec![],
            }),
            bit_cost: 0,
        };
        assert_eq!(bit_cost(&empty, &model), 64);

        let sp = sparsify(&[1.0, 2.0, 3.0, 4.0], 2, &mut rng(0)).unwrap();
        assert_eq!(bit_cost(&sp, &model), 2 * (2 + 64));

        let narrow = LedgerModel {
            float_bits: 32,
            index_bits: Some(12),
        };
        assert_eq!(bit_cost(&sp, &narrow), 2 * (12 + 32));
    }

    #[test]
    fn produced_bit_cost_matches_default_model() {
        let mut r = rng(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..17).map(|_| r.gen::<f64>() * 4.0 - 2.0).collect();
            for msg in [
                dither(&x, 2.0, 3, &mut r).unwrap(),
                sparsify(&x, 5, &mut r).unwrap(),
                block_dither(&x, &[8, 9], &mut r).unwrap(),
            ] {
                assert_eq!(msg.bit_cost, bit_cost(&msg, &LedgerModel::default()));
            }
        }
    }

    #[test]
    fn corrupt_messages_rejected() {
        let bad_index = QuantizedMessage {
            scheme: QuantizerSpec::Dither { p: 2.0, s: 1 },
            dim: 2,
            payload: Payload::Dither(DitherBlock {
                norm: 1.0,
                entries: vec![DitherEntry {
                    index: 2,
                    negative: false,
                    level: 1,
                }],
            }),
            bit_cost: 0,
        };
        assert!(matches!(
            decode(&bad_index),
            Err(QuantizeError::CorruptMessage(_))
        ));

        let bad_level = QuantizedMessage {
            scheme: QuantizerSpec::Dither { p: 2.0, s: 1 },
            dim: 2,
            payload: Payload::Dither(DitherBlock {
                norm: 1.0,
                entries: vec![DitherEntry {
                    index: 0,
                    negative: false,
                    level: 3,
                }],
            }),
            bit_cost: 0,
        };
        assert!(matches!(
            decode(&bad_level),
            Err(QuantizeError::CorruptMessage(_))
        ));

        let wrong_count = QuantizedMessage {
            scheme: QuantizerSpec::Sparsify { r: 2 },
            dim: 3,
            payload: Payload::Sparse(vec![(0, 1.0)]),
            bit_cost: 0,
        };
        assert!(matches!(
            decode(&wrong_count),
            Err(QuantizeError::CorruptMessage(_))
        ));

        let unsorted = QuantizedMessage {
            scheme: QuantizerSpec::Sparsify { r: 2 },
            dim: 3,
            payload: Payload::Sparse(vec![(1, 1.0), (0, 2.0)]),
            bit_cost: 0,
        };
        assert!(matches!(
            decode(&unsorted),
            Err(QuantizeError::CorruptMessage(_))
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(QuantizerSpec::Dither { p: 0.5, s: 1 }.validate(3).is_err());
        assert!(QuantizerSpec::Dither { p: 2.0, s: 0 }.validate(3).is_err());
        assert!(QuantizerSpec::Sparsify { r: 0 }.validate(3).is_err());
        assert!(QuantizerSpec::Sparsify { r: 4 }.validate(3).is_err());
        assert!(QuantizerSpec::BlockDither {
            block_sizes: vec![2, 2]
        }
        .validate(3)
        .is_err());
        assert!(QuantizerSpec::BlockDither {
            block_sizes: vec![0, 3]
        }
        .validate(3)
        .is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(matches!(
            dither(&[1.0, f64::NAN], 2.0, 1, &mut rng(0)),
            Err(QuantizeError::InvalidInput(_))
        ));
        assert!(matches!(
            sparsify(&[f64::INFINITY], 1, &mut rng(0)),
            Err(QuantizeError::InvalidInput(_))
        ));
    }

    #[test]
    fn golden_byte_layout() {
        let msg = QuantizedMessage {
            scheme: QuantizerSpec::Dither { p: 2.0, s: 1 },
            dim: 2,
            payload: Payload::Dither(DitherBlock {
                norm: 5.0,
                entries: vec![DitherEntry {
                    index: 1,
                    negative: true,
                    level: 1,
                }],
            }),
            bit_cost: 67,
        };
        let bytes = msg.to_bytes();
        let expected: Vec<u8> = vec![
            0x01, // dither tag
            0x02, 0x00, 0x00, 0x00, // d = 2
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x40, // p = 2.0
            0x01, 0x00, 0x00, 0x00, // s = 1
            0x43, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, // bit cost 67
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x14, 0x40, // norm = 5.0
            0x01, 0x00, 0x00, 0x00, // one entry
            0x01, 0x00, 0x00, 0x00, // index 1
            0x01, // negative
            0x01, 0x00, 0x00, 0x00, // level 1
        ];
        assert_eq!(bytes, expected);
        assert_eq!(QuantizedMessage::from_bytes(&bytes).unwrap(), msg);
    }

    #[test]
    fn from_bytes_rejects_truncation_and_garbage() {
        let msg = sparsify(&[1.0, 2.0, 3.0], 2, &mut rng(5)).unwrap();
        let bytes = msg.to_bytes();
        assert!(QuantizedMessage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(QuantizedMessage::from_bytes(&[9, 0, 0, 0, 0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_vector() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-100.0f64..100.0, 1..24)
        }

        proptest! {
            #[test]
            fn dither_payload_well_formed(x in arb_vector(), seed in 0u64..1000, s in 1u32..6) {
                let msg = dither(&x, 2.0, s, &mut rng(seed)).unwrap();
                if let Payload::Dither(block) = &msg.payload {
                    let mut last = None;
                    for e in &block.entries {
                        prop_assert!((e.index as usize) < x.len());
                        prop_assert!(e.level >= 1 && e.level <= s + 1);
                        if let Some(prev) = last {
                            prop_assert!(e.index > prev);
                        }
                        last = Some(e.index);
                    }
                } else {
                    prop_assert!(false, "wrong payload kind");
                }
            }

            #[test]
            fn sparsify_payload_well_formed(x in arb_vector(), seed in 0u64..1000) {
                let r = 1 + seed as usize % x.len();
                let msg = sparsify(&x, r, &mut rng(seed)).unwrap();
                if let Payload::Sparse(entries) = &msg.payload {
                    prop_assert_eq!(entries.len(), r);
                    for w in entries.windows(2) {
                        prop_assert!(w[0].0 < w[1].0);
                    }
                } else {
                    prop_assert!(false, "wrong payload kind");
                }
            }

            #[test]
            fn bytes_round_trip(x in arb_vector(), seed in 0u64..1000, which in 0u8..4) {
                let mut r = rng(seed);
                let msg = match which {
                    0 => identity_message(&x).unwrap(),
                    1 => dither(&x, 1.0, 2, &mut r).unwrap(),
                    2 => sparsify(&x, 1 + seed as usize % x.len(), &mut r).unwrap(),
                    _ => {
                        let head = x.len() / 2;
                        let sizes = if head == 0 { vec![x.len()] } else { vec![head, x.len() - head] };
                        block_dither(&x, &sizes, &mut r).unwrap()
                    }
                };
                let back = QuantizedMessage::from_bytes(&msg.to_bytes()).unwrap();
                prop_assert_eq!(back, msg);
            }
        }
    }
}
