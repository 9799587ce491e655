//! Dense numeric containers used throughout the crate.
//!
//! Activations live in a [`Tensor3`] with logical shape `(M, C, F)` where `M`
//! is the mini-batch size, `C` the channels dimension and `F` the spatial
//! dimension, stored row-major (`index = m*C*F + c*F + f`). Fully-connected
//! weights live in a row-major [`Matrix`]. Everything is double precision;
//! the gradient checks in the test suite rely on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense tensor with logical shape `(M, C, F)`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    m: usize,
    c: usize,
    f: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    /// Builds a tensor from row-major values.
    pub fn from_values(shape: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        let (m, c, f) = shape;
        let expected = m * c * f;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "shape ({m}, {c}, {f}) needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { m, c, f, data: values })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        let (m, c, f) = shape;
        Self { m, c, f, data: vec![0.0; m * c * f] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.m, self.c, self.f)
    }

    pub fn batch(&self) -> usize {
        self.m
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn features(&self) -> usize {
        self.f
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, m: usize, c: usize, f: usize) -> usize {
        debug_assert!(m < self.m && c < self.c && f < self.f);
        (m * self.c + c) * self.f + f
    }

    #[inline]
    pub fn at(&self, m: usize, c: usize, f: usize) -> f64 {
        self.data[self.index(m, c, f)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel index of the element at flat position `i`.
    #[inline]
    pub fn channel_of(&self, i: usize) -> usize {
        (i / self.f) % self.c
    }

    /// Reinterprets a `(rows, cols)` matrix as a `(rows, cols, 1)` tensor.
    /// The flat layouts coincide, so no data moves.
    pub fn from_matrix(mat: Matrix) -> Self {
        Self { m: mat.rows, c: mat.cols, f: 1, data: mat.data }
    }

    /// Inverse of [`Tensor3::from_matrix`]; requires `F == 1`.
    pub fn into_matrix(self) -> Result<Matrix> {
        if self.f != 1 {
            return Err(Error::Shape(format!(
                "tensor with F = {} cannot be viewed as a matrix",
                self.f
            )));
        }
        Ok(Matrix { rows: self.m, cols: self.c, data: self.data })
    }

    /// Splits the batch dimension into `g_m` contiguous groups, yielding the
    /// logical shape `(g_m, M/g_m, C, F)`. Group `i` holds samples
    /// `[i*M/g_m, (i+1)*M/g_m)`. Since batch grouping splits the leading
    /// dimension, each group is a contiguous view and no data moves.
    pub fn regroup_batch(&self, g_m: usize) -> Result<BatchGroups<'_>> {
        check_batch_grouping(self.m, g_m)?;
        Ok(BatchGroups { tensor: self, g_m, per_group: self.m / g_m })
    }

    /// Splits the channels dimension into `g_c` contiguous groups, yielding
    /// the logical shape `(M, g_c, C/g_c, F)`. Channel group `j` of sample
    /// `m` holds channels `[j*C/g_c, (j+1)*C/g_c)`.
    pub fn regroup_channels(&self, g_c: usize) -> Result<ChannelGroups<'_>> {
        check_channel_grouping(self.c, g_c)?;
        Ok(ChannelGroups { tensor: self, g_c, per_group: self.c / g_c })
    }
}

pub(crate) fn check_batch_grouping(m: usize, g_m: usize) -> Result<()> {
    if g_m == 0 || m % g_m != 0 {
        return Err(Error::Grouping(format!("g_m = {g_m} does not divide M = {m}")));
    }
    if m / g_m < 2 {
        return Err(Error::DegenerateGroup(format!(
            "M/g_m = {} but every batch group needs at least 2 samples",
            m / g_m
        )));
    }
    Ok(())
}

pub(crate) fn check_channel_grouping(c: usize, g_c: usize) -> Result<()> {
    if g_c == 0 || c % g_c != 0 {
        return Err(Error::Grouping(format!("g_c = {g_c} does not divide C = {c}")));
    }
    Ok(())
}

/// Borrowed view of a tensor regrouped along the batch dimension.
#[derive(Debug)]
pub struct BatchGroups<'a> {
    tensor: &'a Tensor3,
    g_m: usize,
    per_group: usize,
}

impl BatchGroups<'_> {
    pub fn groups(&self) -> usize {
        self.g_m
    }

    pub fn samples_per_group(&self) -> usize {
        self.per_group
    }

    /// Contiguous data of group `i` (shape `(M/g_m, C, F)` flattened).
    pub fn group(&self, i: usize) -> &[f64] {
        let stride = self.per_group * self.tensor.c * self.tensor.f;
        &self.tensor.data[i * stride..(i + 1) * stride]
    }

    /// Concatenates the groups back into the original tensor.
    pub fn flatten(&self) -> Tensor3 {
        self.tensor.clone()
    }
}

/// Borrowed view of a tensor regrouped along the channels dimension.
#[derive(Debug)]
pub struct ChannelGroups<'a> {
    tensor: &'a Tensor3,
    g_c: usize,
    per_group: usize,
}

impl ChannelGroups<'_> {
    pub fn groups(&self) -> usize {
        self.g_c
    }

    pub fn channels_per_group(&self) -> usize {
        self.per_group
    }

    /// Contiguous data of channel group `j` within sample `m`
    /// (shape `(C/g_c, F)` flattened).
    pub fn group(&self, m: usize, j: usize) -> &[f64] {
        let f = self.tensor.f;
        let start = self.tensor.index(m, j * self.per_group, 0);
        &self.tensor.data[start..start + self.per_group * f]
    }
}

/// Mean and biased variance (divisor `n`) of a non-empty slice of values.
///
/// Two-pass computation: the variance accumulates squared deviations from the
/// already-known mean rather than using the `E[x^2] - E[x]^2` shortcut, which
/// loses precision when the mean is large relative to the spread.
pub fn slice_stats(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptySlice);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, data: values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Gathers the given rows into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }
}

/// Row blocks per rayon task. Streaming `w` once per block instead of once
/// per row keeps the kernel memory-bound on `x` rather than on `w`.
const MATMUL_ROW_BLOCK: usize = 8;

/// Standard matrix product `x * w`.
pub fn matmul(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols != w.rows {
        return Err(Error::Shape(format!(
            "matmul: lhs is {}x{} but rhs is {}x{}",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    let (m, k, n) = (x.rows, x.cols, w.cols);
    let mut out = Matrix::zeros(m, n);
    // Each task owns a disjoint block of output rows and accumulates with a
    // fixed sequential inner order, so results are bit-reproducible no matter
    // how rayon schedules the blocks.
    out.data
        .par_chunks_mut(MATMUL_ROW_BLOCK * n)
        .zip(x.data.par_chunks(MATMUL_ROW_BLOCK * k))
        .for_each(|(out_block, x_block)| {
            let rows = x_block.len() / k;
            for kk in 0..k {
                let w_row = &w.data[kk * n..kk * n + n];
                for r in 0..rows {
                    let xik = x_block[r * k + kk];
                    if xik == 0.0 {
                        continue;
                    }
                    let out_row = &mut out_block[r * n..r * n + n];
                    for (o, &wv) in out_row.iter_mut().zip(w_row) {
                        *o += xik * wv;
                    }
                }
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_values_holds_row_major_order() {
        let t = Tensor3::from_values((2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(1, 0, 0), 3.0);
        assert_eq!(t.at(0, 1, 0), 2.0);

        let scalar = Tensor3::from_values((1, 1, 1), vec![0.0]).unwrap();
        assert_eq!(scalar.at(0, 0, 0), 0.0);

        let eight = Tensor3::from_values(
            (8, 1, 1),
            vec![35.0, 39.0, 30.0, 4.0, 38.0, 26.0, 27.0, 19.0],
        )
        .unwrap();
        assert_eq!(eight.at(4, 0, 0), 38.0);
    }

    #[test]
    fn from_values_rejects_length_mismatch() {
        let err = Tensor3::from_values((2, 2, 2), vec![1.0; 7]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn regroup_batch_splits_contiguously() {
        let t = Tensor3::from_values(
            (8, 1, 1),
            vec![35.0, 39.0, 30.0, 4.0, 38.0, 26.0, 27.0, 19.0],
        )
        .unwrap();
        let g = t.regroup_batch(2).unwrap();
        assert_eq!(g.group(0), &[35.0, 39.0, 30.0, 4.0]);
        assert_eq!(g.group(1), &[38.0, 26.0, 27.0, 19.0]);
        assert_eq!(g.flatten(), t);
    }

    #[test]
    fn regroup_batch_identity_grouping() {
        let t = Tensor3::from_values((4, 1, 2), (0..8).map(f64::from).collect()).unwrap();
        let g = t.regroup_batch(1).unwrap();
        assert_eq!(g.groups(), 1);
        assert_eq!(g.group(0), t.data());
    }

    #[test]
    fn regroup_batch_rejects_bad_group_counts() {
        let t = Tensor3::zeros((4, 2, 3));
        assert!(matches!(t.regroup_batch(3), Err(Error::Grouping(_))));
        assert!(matches!(t.regroup_batch(4), Err(Error::DegenerateGroup(_))));
    }

    #[test]
    fn regroup_channels_splits_per_sample() {
        let t = Tensor3::from_values((1, 4, 1), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let g = t.regroup_channels(2).unwrap();
        assert_eq!(g.group(0, 0), &[1.0, 3.0]);
        assert_eq!(g.group(0, 1), &[5.0, 7.0]);

        // g_c = 1 spans all channels; g_c = C gives singleton channel groups.
        let all = t.regroup_channels(1).unwrap();
        assert_eq!(all.group(0, 0), t.data());
        let single = t.regroup_channels(4).unwrap();
        assert_eq!(single.group(0, 2), &[5.0]);

        assert!(matches!(t.regroup_channels(3), Err(Error::Grouping(_))));
    }

    #[test]
    fn slice_stats_matches_hand_summation() {
        // Sum = 218, mean = 27.25, sum of squared deviations = 931.5.
        let (mean, var) =
            slice_stats(&[35.0, 39.0, 30.0, 4.0, 38.0, 26.0, 27.0, 19.0]).unwrap();
        assert_eq!(mean, 27.25);
        assert_eq!(var, 931.5 / 8.0);

        let (mean, var) = slice_stats(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((mean, var), (5.0, 0.0));

        let (a, b) = (3.0, 11.0);
        let (mean, var) = slice_stats(&[a, b]).unwrap();
        assert_eq!(mean, (a + b) / 2.0);
        assert_eq!(var, ((a - b) / 2.0) * ((a - b) / 2.0));

        assert!(matches!(slice_stats(&[]), Err(Error::EmptySlice)));
    }

    #[test]
    fn matmul_small_cases() {
        let id = Matrix::identity(3);
        let w = Matrix::from_values(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&id, &w).unwrap(), w);

        let a = Matrix::from_values(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_values(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);

        let bad = matmul(&a, &w);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    fn naive_matmul(x: &Matrix, w: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), w.cols());
        for i in 0..x.rows() {
            for j in 0..w.cols() {
                let mut acc = 0.0;
                for k in 0..x.cols() {
                    acc += x.at(i, k) * w.at(k, j);
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(3, 4, 2), (8, 8, 8), (17, 5, 13), (64, 64, 64)] {
            let x = Matrix::from_values(
                m,
                k,
                (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let w = Matrix::from_values(
                k,
                n,
                (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let fast = matmul(&x, &w).unwrap();
            let slow = naive_matmul(&x, &w);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                assert!(rel < 1e-12, "matmul deviates from naive reference: {a} vs {b}");
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a = Matrix::from_values(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transposed().transposed(), a);
        assert_eq!(a.transposed().at(2, 1), 6.0);
    }

    proptest! {
        #[test]
        fn slice_stats_shift_scale_covariance(
            values in proptest::collection::vec(-50.0f64..50.0, 1..32),
            a in -4.0f64..4.0,
            b in -10.0f64..10.0,
        ) {
            let (mean, var) = slice_stats(&values).unwrap();
            let scaled: Vec<f64> = values.iter().map(|&x| a * x + b).collect();
            let (mean2, var2) = slice_stats(&scaled).unwrap();
            let tol = 1e-12;
            prop_assert!((mean2 - (a * mean + b)).abs() <= tol * (1.0 + mean2.abs()));
            prop_assert!((var2 - a * a * var).abs() <= tol * (1.0 + var2.abs()));
        }

        #[test]
        fn regroup_batch_round_trip(
            m_groups in 1usize..4,
            per in 2usize..5,
            c in 1usize..4,
            f in 1usize..4,
            seed in 0u64..1000,
        ) {
            let m = m_groups * per;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor3::from_values(
                (m, c, f),
                (0..m * c * f).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ).unwrap();
            let grouped = t.regroup_batch(m_groups).unwrap();
            prop_assert_eq!(grouped.flatten(), t);
        }
    }
}
