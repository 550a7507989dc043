use crate::embedding::{score_rows, ClassLabel, EmbeddingVector};
use crate::preprocess::BoundingBox;

/// Rows scored per parallel task. Fixed so the work split never depends on
/// the thread count.
#[cfg(feature = "parallel")]
pub(crate) const SCAN_CHUNK_ROWS: usize = 16 * 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowMeta {
    /// Ordinal of the owning image inside the index.
    pub image: u32,
    pub object_index: u32,
    pub bbox: BoundingBox,
    pub confidence: Option<f32>,
}

/// All objects of one class: contiguous row-major f32 embeddings with a
/// parallel metadata array.
#[derive(Clone, Debug)]
pub struct ClassPartition {
    class: ClassLabel,
    dim: usize,
    rows: Vec<f32>,
    meta: Vec<RowMeta>,
}

impl ClassPartition {
    pub(crate) fn new(class: ClassLabel, dim: usize) -> Self {
        Self {
            class,
            dim,
            rows: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub(crate) fn from_parts(class: ClassLabel, dim: usize, rows: Vec<f32>, meta: Vec<RowMeta>) -> Self {
        debug_assert_eq!(rows.len(), meta.len() * dim);
        Self {
            class,
            dim,
            rows,
            meta,
        }
    }

    pub fn class(&self) -> &ClassLabel {
        &self.class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn push(&mut self, embedding: &EmbeddingVector, meta: RowMeta) -> u32 {
        debug_assert_eq!(embedding.dim(), self.dim);
        let cap = self.rows.capacity();
        self.rows.extend_from_slice(embedding.values());
        if self.rows.capacity() != cap {
            advise_huge_pages(&self.rows);
        }
        self.meta.push(meta);
        (self.meta.len() - 1) as u32
    }

    pub(crate) fn reserve(&mut self, additional: usize) {
        self.rows.reserve(additional * self.dim);
        advise_huge_pages(&self.rows);
        self.meta.reserve(additional);
    }

    /// Clamped cosine of every row against `query`.
    pub(crate) fn score_all(&self, query: &[f32]) -> Vec<f32> {
        score_block(&self.rows, query, self.len())
    }
}

const HUGE_PAGE: usize = 2 << 20;

/// Hints that the allocation behind `buf` should use transparent huge pages.
/// Scans stream through gigabytes of rows, and 4 KiB pages make them pay a
/// TLB miss every 8 rows at d=512. Only pages not yet touched are affected.
#[cfg(target_os = "linux")]
pub(crate) fn advise_huge_pages(buf: &Vec<f32>) {
    let bytes = buf.capacity() * std::mem::size_of::<f32>();
    if bytes < 2 * HUGE_PAGE {
        return;
    }
    let begin = buf.as_ptr() as usize;
    let start = begin.next_multiple_of(HUGE_PAGE);
    let end = (begin + bytes) / HUGE_PAGE * HUGE_PAGE;
    if end > start {
        // SAFETY: the range lies inside the live allocation and MADV_HUGEPAGE
        // only changes how the kernel backs it, never its contents.
        unsafe {
            libc::madvise(start as *mut libc::c_void, end - start, libc::MADV_HUGEPAGE);
        }
    }
}

#[cfg(not(target_os = "linux"))]
pub(crate) fn advise_huge_pages(_buf: &Vec<f32>) {}

pub(crate) fn score_block(rows: &[f32], query: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let d = query.len();
        if n > SCAN_CHUNK_ROWS {
            out.par_chunks_mut(SCAN_CHUNK_ROWS)
                .zip(rows.par_chunks(SCAN_CHUNK_ROWS * d))
                .for_each(|(o, r)| score_rows(r, query, o));
            return out;
        }
    }
    score_rows(rows, query, &mut out);
    out
}
