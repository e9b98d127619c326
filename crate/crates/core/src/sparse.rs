//! Sparse per-vertex gradient vectors.

/// Sorted, duplicate-free list of `(index, value)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGrad {
    entries: Vec<(usize, f64)>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sorts by index and sums duplicates. Duplicates are summed in their
    /// original order, so the result is deterministic for a given input.
    pub fn from_unsorted(mut raw: Vec<(usize, f64)>) -> Self {
        raw.sort_by_key(|e| e.0);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
        for (i, g) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == i => last.1 += g,
                _ => entries.push((i, g)),
            }
        }
        Self { entries }
    }

    /// Builds from a dense vector, keeping nonzero entries.
    pub fn from_dense(dense: &[f64]) -> Self {
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, g)| **g != 0.0)
            .map(|(i, g)| (i, *g))
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map(|p| self.entries[p].1)
            .unwrap_or(0.0)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Returns `self + scale * other` as a sorted merge. A zero scale
    /// returns `self` unchanged.
    pub fn add_scaled(&self, other: &SparseGrad, scale: f64) -> SparseGrad {
        if scale == 0.0 {
            return self.clone();
        }
        let (a, b) = (&self.entries, &other.entries);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let take_a = j >= b.len() || (i < a.len() && a[i].0 < b[j].0);
            let take_b = i >= a.len() || (j < b.len() && b[j].0 < a[i].0);
            if take_a {
                out.push(a[i]);
                i += 1;
            } else if take_b {
                out.push((b[j].0, scale * b[j].1));
                j += 1;
            } else {
                out.push((a[i].0, a[i].1 + scale * b[j].1));
                i += 1;
                j += 1;
            }
        }
        SparseGrad { entries: out }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for &(i, g) in &self.entries {
            out[i] += g;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.1.abs()))
    }
}

/// Grid-sized accumulator that remembers which entries were written.
#[derive(Clone, Debug, Default)]
pub struct DenseAccumulator {
    values: Vec<f64>,
    marked: Vec<bool>,
    touched: Vec<usize>,
}

impl DenseAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            marked: vec![false; len],
            touched: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn add(&mut self, index: usize, g: f64) {
        if !self.marked[index] {
            self.marked[index] = true;
            self.touched.push(index);
        }
        self.values[index] += g;
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Indices written since the last clear, in first-write order.
    pub fn touched(&self) -> &[usize] {
        &self.touched
    }

    pub fn add_sparse(&mut self, g: &SparseGrad, scale: f64) {
        for &(i, v) in g.entries() {
            self.add(i, scale * v);
        }
    }

    /// Zeroes the touched entries only.
    pub fn clear(&mut self) {
        for &i in &self.touched {
            self.values[i] = 0.0;
            self.marked[i] = false;
        }
        self.touched.clear();
    }

    /// Resizes and clears.
    pub fn reset(&mut self, len: usize) {
        self.values.clear();
        self.values.resize(len, 0.0);
        self.marked.clear();
        self.marked.resize(len, false);
        self.touched.clear();
    }

    pub fn to_sparse(&self) -> SparseGrad {
        let mut idx = self.touched.clone();
        idx.sort_unstable();
        SparseGrad {
            entries: idx.into_iter().map(|i| (i, self.values[i])).collect(),
        }
    }
}
