//! Dense parameter vectors, layer partitioning and sparse coordinate deltas.
//!
//! Everything that crosses the (simulated) network is a [`SparseUpdate`]: a list
//! of `(index, value)` pairs addressed into the full flattened parameter vector.
//! The wire encoding is little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"DGS1"`               |
//! | 4      | 4    | worker id (`u32`)             |
//! | 8      | 8    | timestamp (`u64`)             |
//! | 16     | 4    | nnz (`u32`)                   |
//! | 20     | 12·n | records of `(u32 index, f64)` |
//!
//! A message is therefore exactly [`PREFIX_BYTES`] `+ 12·nnz` bytes long, and that
//! length is what byte accounting charges.

use std::sync::Arc;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DGS1";
/// Magic, worker id and timestamp.
pub const HEADER_BYTES: usize = 16;
/// Header plus the nnz count; the size of an empty message.
pub const PREFIX_BYTES: usize = HEADER_BYTES + 4;
/// Cost of one `(u32, f64)` record.
pub const ENTRY_BYTES: usize = 12;

/// Start offsets and sizes of each layer in a flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    total: usize,
}

impl LayerPartition {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidPartition("no layers".into()));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut total = 0usize;
        for (j, &size) in sizes.iter().enumerate() {
            if size == 0 {
                return Err(Error::InvalidPartition(format!("layer {j} is empty")));
            }
            offsets.push(total);
            total = total
                .checked_add(size)
                .ok_or_else(|| Error::InvalidPartition("total size overflows".into()))?;
        }
        if total > u32::MAX as usize {
            return Err(Error::InvalidPartition(format!(
                "{total} parameters exceed the 32-bit index space"
            )));
        }
        Ok(Self {
            offsets,
            sizes: sizes.to_vec(),
            total,
        })
    }

    pub fn single(size: usize) -> Result<Self> {
        Self::from_sizes(&[size])
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.offsets[layer];
        start..start + self.sizes[layer]
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.num_layers()).map(move |j| self.range(j))
    }

    /// Layer that owns flat position `index`.
    pub fn layer_of(&self, index: usize) -> Option<usize> {
        if index >= self.total {
            return None;
        }
        Some(self.offsets.partition_point(|&o| o <= index) - 1)
    }
}

/// Flattened model parameters or any accumulator of the same shape.
///
/// All components are finite; the length never changes after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    partition: Arc<LayerPartition>,
}

impl ParamVector {
    pub fn zeros(partition: Arc<LayerPartition>) -> Self {
        Self {
            values: vec![0.0; partition.total()],
            partition,
        }
    }

    pub fn from_values(values: Vec<f64>, partition: Arc<LayerPartition>) -> Result<Self> {
        if values.len() != partition.total() {
            return Err(Error::PartitionMismatch(format!(
                "{} values for a partition of {}",
                values.len(),
                partition.total()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { index });
        }
        Ok(Self { values, partition })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn partition(&self) -> &Arc<LayerPartition> {
        &self.partition
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layer(&self, j: usize) -> &[f64] {
        &self.values[self.partition.range(j)]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.partition, &other.partition) || self.partition == other.partition
    }

    pub fn ensure_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::PartitionMismatch(format!(
                "layers {:?} vs {:?}",
                self.partition.sizes(),
                other.partition.sizes()
            )))
        }
    }

    /// Builds a new vector with `f` applied to every pair of components.
    /// Fails if any resulting component is non-finite.
    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.ensure_same_shape(other)?;
        let values: Vec<f64> = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self::checked(values, self.partition.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ParamVector> {
        let values: Vec<f64> = self.values.iter().map(|&a| f(a)).collect();
        Self::checked(values, self.partition.clone())
    }

    fn checked(values: Vec<f64>, partition: Arc<LayerPartition>) -> Result<ParamVector> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { index });
        }
        Ok(Self { values, partition })
    }

    /// `self[i] += scale * value` for every entry of `delta`.
    ///
    /// Atomic: on error `self` is left untouched.
    pub fn apply_sparse(&mut self, delta: &SparseUpdate, scale: f64) -> Result<()> {
        delta.check_bounds(self.len())?;
        let updated: Vec<f64> = delta.iter().map(|(i, v)| self.values[i as usize] + scale * v).collect();
        if let Some(pos) = updated.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                index: delta.indices[pos] as usize,
            });
        }
        for (&i, v) in delta.indices.iter().zip(updated) {
            self.values[i as usize] = v;
        }
        Ok(())
    }

    pub fn applied_sparse(&self, delta: &SparseUpdate, scale: f64) -> Result<ParamVector> {
        let mut out = self.clone();
        out.apply_sparse(delta, scale)?;
        Ok(out)
    }

    /// Overwrites the components named by `delta` with the matching components of `src`.
    pub(crate) fn copy_entries_from(&mut self, src: &ParamVector, delta: &SparseUpdate) {
        for &i in &delta.indices {
            self.values[i as usize] = src.values[i as usize];
        }
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// Coordinate-format delta. Indices are strictly increasing positions in the
/// flattened vector; values are finite and nonzero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseUpdate {
    pub worker_id: u32,
    pub timestamp: u64,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseUpdate {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates and wraps parallel index/value arrays.
    pub fn new(indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::InvariantViolation(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        for (pos, (&i, &v)) in indices.iter().zip(&values).enumerate() {
            if pos > 0 && indices[pos - 1] >= i {
                return Err(Error::InvariantViolation(format!(
                    "index {i} at record {pos} is not above its predecessor {}",
                    indices[pos - 1]
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvariantViolation(format!("value at index {i} is not finite")));
            }
            if v == 0.0 {
                return Err(Error::InvariantViolation(format!("explicit zero at index {i}")));
            }
        }
        Ok(Self {
            worker_id: 0,
            timestamp: 0,
            indices,
            values,
        })
    }

    /// Accepts entries in any order; duplicates are an invariant violation.
    pub fn from_entries(mut entries: Vec<(u32, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        let (indices, values) = entries.into_iter().unzip();
        Self::new(indices, values)
    }

    /// Internal constructor for callers that already guarantee the invariants.
    pub(crate) fn from_sorted_unchecked(indices: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(values.iter().all(|v| v.is_finite() && *v != 0.0));
        Self {
            worker_id: 0,
            timestamp: 0,
            indices,
            values,
        }
    }

    pub fn with_header(mut self, worker_id: u32, timestamp: u64) -> Self {
        self.worker_id = worker_id;
        self.timestamp = timestamp;
        self
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, index: u32) -> Option<f64> {
        self.indices.binary_search(&index).ok().map(|pos| self.values[pos])
    }

    pub fn check_bounds(&self, len: usize) -> Result<()> {
        match self.indices.last() {
            Some(&last) if last as usize >= len => Err(Error::IndexOutOfBounds { index: last, len }),
            _ => Ok(()),
        }
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let values: Vec<f64> = self.values.iter().map(|v| v * factor).collect();
        let mut out = Self::new(self.indices.clone(), values)?;
        out.worker_id = self.worker_id;
        out.timestamp = self.timestamp;
        Ok(out)
    }

    pub fn densify(&self, partition: Arc<LayerPartition>) -> Result<ParamVector> {
        let mut out = ParamVector::zeros(partition);
        out.apply_sparse(self, 1.0)?;
        Ok(out)
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(self.nnz())
    }
}

pub fn encoded_len(nnz: usize) -> usize {
    PREFIX_BYTES + ENTRY_BYTES * nnz
}

/// Serializes an update to its wire form.
pub fn encode(update: &SparseUpdate) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX_BYTES + ENTRY_BYTES * update.nnz());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&update.worker_id.to_le_bytes());
    out.extend_from_slice(&update.timestamp.to_le_bytes());
    out.extend_from_slice(&(update.nnz() as u32).to_le_bytes());
    for (i, v) in update.iter() {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a wire message addressed into a vector of length `dim`.
pub fn decode(bytes: &[u8], dim: usize) -> Result<SparseUpdate> {
    if bytes.len() < PREFIX_BYTES {
        return Err(Error::Truncated {
            needed: PREFIX_BYTES,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let worker_id = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let timestamp = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let nnz = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;

    let needed = nnz
        .checked_mul(ENTRY_BYTES)
        .and_then(|n| n.checked_add(PREFIX_BYTES))
        .unwrap_or(usize::MAX);
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            got: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::TrailingBytes(bytes.len() - needed));
    }

    let mut indices = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    for (pos, rec) in bytes[PREFIX_BYTES..].chunks_exact(ENTRY_BYTES).enumerate() {
        let index = u32::from_le_bytes(rec[0..4].try_into().unwrap());
        let value = f64::from_le_bytes(rec[4..12].try_into().unwrap());
        if index as usize >= dim {
            return Err(Error::IndexOutOfBounds { index, len: dim });
        }
        if let Some(&last) = indices.last() {
            if index <= last {
                return Err(Error::NonIncreasingIndex { position: pos });
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFiniteValue { index });
        }
        if value == 0.0 {
            return Err(Error::ZeroValue { index });
        }
        indices.push(index);
        values.push(value);
    }
    Ok(SparseUpdate {
        worker_id,
        timestamp,
        indices,
        values,
    })
}

/// Entries exactly where `a[i] - b[i] != 0`, valued `a[i] - b[i]`.
pub fn diff_as_sparse(a: &ParamVector, b: &ParamVector) -> Result<SparseUpdate> {
    a.ensure_same_shape(b)?;
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, (&x, &y)) in a.values.iter().zip(&b.values).enumerate() {
        let d = x - y;
        if !d.is_finite() {
            return Err(Error::NumericOverflow { index: i });
        }
        if d != 0.0 {
            indices.push(i as u32);
            values.push(d);
        }
    }
    Ok(SparseUpdate::from_sorted_unchecked(indices, values))
}
