//! Latent-space vectors and the dot-product kernel every score goes through.
//!
//! Vectors are normalized once when constructed, so cosine similarity is a
//! plain dot product. The dot product has one canonical summation order
//! (32 lane accumulators, folded as four groups of eight into one group,
//! a fixed pairwise reduction of that group, then the scalar tail), which
//! makes scores reproducible across call sites, SIMD paths and argument
//! order.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw vectors with a Euclidean norm below this are rejected.
pub const MIN_RAW_NORM: f64 = 1e-12;

/// Lane count of the canonical dot product.
pub const DOT_LANES: usize = 32;

/// A unit-normalized embedding.
#[derive(Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Arc<[f32]>,
}

impl EmbeddingVector {
    /// Normalizes `raw` to unit length.
    pub fn from_raw(raw: &[f32]) -> Result<Self> {
        Self::normalize_iter(raw.len(), raw.iter().map(|&v| v as f64))
    }

    pub fn from_f64(raw: &[f64]) -> Result<Self> {
        Self::normalize_iter(raw.len(), raw.iter().copied())
    }

    fn normalize_iter(dim: usize, values: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding has zero dimensions".into()));
        }
        let mut sum_sq = 0.0f64;
        for v in values.clone() {
            if !v.is_finite() {
                return Err(Error::InvalidInput("embedding contains a non-finite value".into()));
            }
            sum_sq += v * v;
        }
        let norm = sum_sq.sqrt();
        if norm < MIN_RAW_NORM {
            return Err(Error::InvalidInput(format!(
                "embedding norm {norm:e} is too small to normalize"
            )));
        }
        let values: Arc<[f32]> = values.map(|v| (v / norm) as f32).collect();
        Ok(Self { values })
    }

    /// Wraps values that are already unit length, checking the norm.
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if values.is_empty() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Invariant(format!(
                "expected a unit vector, norm is {norm}"
            )));
        }
        Ok(Self {
            values: values.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f32> = self.values.iter().take(4).copied().collect();
        write!(f, "EmbeddingVector(d={}, {:?}…)", self.dim(), head)
    }
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(clamp_score(dot(a.values(), b.values())))
}

/// Clamps to `[-1, 1]` and folds `-0.0` into `+0.0` so that equal scores
/// compare equal under `total_cmp`.
#[inline]
pub fn clamp_score(s: f32) -> f32 {
    s.clamp(-1.0, 1.0) + 0.0
}

/// Canonical dot product. Callers must pass equal-length slices.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    dot_canonical(a, b)
}

#[inline(always)]
fn dot_canonical(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; DOT_LANES];
    let chunks_a = a.chunks_exact(DOT_LANES);
    let chunks_b = b.chunks_exact(DOT_LANES);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for lane in 0..DOT_LANES {
            acc[lane] += ca[lane] * cb[lane];
        }
    }
    let mut group = [0.0f32; 8];
    for (lane, g) in group.iter_mut().enumerate() {
        *g = (acc[lane] + acc[lane + 16]) + (acc[lane + 8] + acc[lane + 24]);
    }
    reduce8(&group) + tail_dot(tail_a, tail_b)
}

#[inline(always)]
fn reduce8(g: &[f32; 8]) -> f32 {
    ((g[0] + g[4]) + (g[1] + g[5])) + ((g[2] + g[6]) + (g[3] + g[7]))
}

#[inline(always)]
fn tail_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut tail = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        tail += x * y;
    }
    tail
}

/// Scores every row of a row-major block against `query`, writing clamped
/// scores into `out`. `rows.len()` must equal `out.len() * query.len()`.
pub fn score_rows(rows: &[f32], query: &[f32], out: &mut [f32]) {
    let d = query.len();
    assert_eq!(rows.len(), out.len() * d, "row block does not match output length");
    #[cfg(target_arch = "x86_64")]
    {
        if d >= DOT_LANES && std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { score_rows_avx2(rows, query, out) };
            return;
        }
    }
    score_rows_portable(rows, query, out);
}

fn score_rows_portable(rows: &[f32], query: &[f32], out: &mut [f32]) {
    let d = query.len();
    for (row, slot) in rows.chunks_exact(d).zip(out.iter_mut()) {
        *slot = clamp_score(dot_canonical(row, query));
    }
}

/// Rows ahead of the current one to prefetch.
#[cfg(target_arch = "x86_64")]
const PREFETCH_ROWS: usize = 8;

// Four 8-wide registers hold lanes 0..8, 8..16, 16..24, 24..32, and each
// step is a separate multiply and add, matching the portable loop exactly.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn score_rows_avx2(rows: &[f32], query: &[f32], out: &mut [f32]) {
    use std::arch::x86_64::*;
    let d = query.len();
    let full = d - d % DOT_LANES;
    let n = out.len();
    let q = query.as_ptr();
    let base = rows.as_ptr();
    for (i, slot) in out.iter_mut().enumerate() {
        // In bounds: rows.len() == n * d.
        let r = base.add(i * d);
        if i + PREFETCH_ROWS < n {
            let ahead = r.add(PREFETCH_ROWS * d) as *const i8;
            let mut off = 0;
            while off < d * 4 {
                _mm_prefetch::<_MM_HINT_T0>(ahead.wrapping_add(off));
                off += 64;
            }
        }
        let mut a0 = _mm256_setzero_ps();
        let mut a1 = _mm256_setzero_ps();
        let mut a2 = _mm256_setzero_ps();
        let mut a3 = _mm256_setzero_ps();
        let (mut rp, mut qp) = (r, q);
        let end = r.add(full);
        while rp < end {
            a0 = _mm256_add_ps(a0, _mm256_mul_ps(_mm256_loadu_ps(rp), _mm256_loadu_ps(qp)));
            a1 = _mm256_add_ps(a1, _mm256_mul_ps(_mm256_loadu_ps(rp.add(8)), _mm256_loadu_ps(qp.add(8))));
            a2 = _mm256_add_ps(a2, _mm256_mul_ps(_mm256_loadu_ps(rp.add(16)), _mm256_loadu_ps(qp.add(16))));
            a3 = _mm256_add_ps(a3, _mm256_mul_ps(_mm256_loadu_ps(rp.add(24)), _mm256_loadu_ps(qp.add(24))));
            rp = rp.add(DOT_LANES);
            qp = qp.add(DOT_LANES);
        }
        let folded = _mm256_add_ps(_mm256_add_ps(a0, a2), _mm256_add_ps(a1, a3));
        let mut group = [0.0f32; 8];
        _mm256_storeu_ps(group.as_mut_ptr(), folded);
        let row = std::slice::from_raw_parts(r, d);
        *slot = clamp_score(reduce8(&group) + tail_dot(&row[full..], &query[full..]));
    }
}

/// A class label from the segmentation class set.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClassLabel(String);

impl ClassLabel {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::InvalidInput("class label is empty".into()));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ClassLabel {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ClassLabel> for String {
    fn from(value: ClassLabel) -> Self {
        value.0
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
