use std::collections::BTreeMap;

use super::DenseMatrix;

/// Row-sparse gradient: `row index -> row`, kept in index order so merging
/// and iteration are deterministic. Duplicate contributions are summed on
/// insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    width: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `rows[index] += scale · row`.
    pub fn accumulate(&mut self, index: usize, scale: f64, row: &[f64]) {
        debug_assert_eq!(row.len(), self.width);
        let width = self.width;
        let dst = self.rows.entry(index).or_insert_with(|| vec![0.0; width]);
        for (d, r) in dst.iter_mut().zip(row) {
            *d += scale * r;
        }
    }

    /// Ensures `index` is present (zero row if new) and returns it.
    pub fn row_mut(&mut self, index: usize) -> &mut [f64] {
        let width = self.width;
        self.rows.entry(index).or_insert_with(|| vec![0.0; width])
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.rows.get(&index).map(Vec::as_slice)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(i, r)| (*i, r.as_slice()))
    }

    /// Merges another shard's rows into this one.
    pub fn merge(&mut self, other: &SparseRows) {
        for (i, r) in other.iter() {
            self.accumulate(i, 1.0, r);
        }
    }

    /// Sorted, duplicate-free `(index, row)` pairs.
    pub fn to_pairs(&self) -> Vec<(usize, Vec<f64>)> {
        self.rows.iter().map(|(i, r)| (*i, r.clone())).collect()
    }

    pub fn to_dense(&self, n_rows: usize) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(n_rows, self.width);
        for (i, r) in self.iter() {
            out.row_mut(i).copy_from_slice(r);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_merges_duplicates() {
        let mut s = SparseRows::new(2);
        s.accumulate(3, 0.5, &[2.0, 4.0]);
        s.accumulate(1, 1.0, &[1.0, 1.0]);
        s.accumulate(3, 1.0, &[1.0, 0.0]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.get(3), Some(&[2.0, 2.0][..]));
        assert_eq!(s.indices().collect::<Vec<_>>(), vec![1, 3]);
        let d = s.to_dense(4);
        assert_eq!(d.row(0), &[0.0, 0.0]);
        assert_eq!(d.row(1), &[1.0, 1.0]);
    }
}
