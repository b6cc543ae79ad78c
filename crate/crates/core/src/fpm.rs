//! Feature perception: token embedding, a bank of convolution kernels of
//! several window heights, and per-kernel selection of the `P` strongest
//! windows plus the mean activation.
//!
//! Windows that would overlap padding are never computed, so right-padding an
//! input with `<PAD>` ids cannot change its feature matrix.

use std::cmp::Ordering;
use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lexer::PAD_ID;
use crate::scalar::Scalar;

/// Looks up one embedding row per id.
pub fn embed<T: Scalar>(ids: &[usize], table: &Array2<T>) -> Result<Array2<T>> {
    let vocab_size = table.nrows();
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (position, (&id, mut row)) in ids.iter().zip(out.rows_mut()).enumerate() {
        if id >= vocab_size {
            return Err(Error::TokenIdOutOfRange {
                position,
                id,
                vocab_size,
            });
        }
        row.assign(&table.row(id));
    }
    Ok(out)
}

/// A single `h x k` convolution kernel with scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub weight: Array2<T>,
    pub bias: T,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn height(&self) -> usize {
        self.weight.nrows()
    }
}

/// Number of windows of height `h` at `stride` over `n` rows.
pub fn window_count(n: usize, h: usize, stride: usize) -> usize {
    if n < h {
        0
    } else {
        (n - h) / stride + 1
    }
}

/// `C_t = ReLU(<W, E[t*stride .. t*stride+h]> + b)` for every full window.
pub fn convolve<T: Scalar>(e: ArrayView2<'_, T>, kernel: &ConvKernel<T>, stride: usize) -> Result<Vec<T>> {
    let h = kernel.height();
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if e.ncols() != kernel.weight.ncols() {
        return Err(Error::Shape(format!(
            "embedding width {} does not match kernel width {}",
            e.ncols(),
            kernel.weight.ncols()
        )));
    }
    if e.nrows() < h {
        return Err(Error::Shape(format!(
            "sequence of {} rows is shorter than kernel height {h}",
            e.nrows()
        )));
    }
    let count = window_count(e.nrows(), h, stride);
    Ok((0..count)
        .map(|t| {
            let window = e.slice(s![t * stride..t * stride + h, ..]);
            let dot = (&window * &kernel.weight).sum();
            relu(dot + kernel.bias)
        })
        .collect())
}

#[inline]
fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Output of [`select_features`]: `P` top values, then the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    pub values: Vec<T>,
    /// Window index of each of the first `P` values; `None` for unfilled slots.
    pub provenance: Vec<Option<usize>>,
}

// Descending by value, ascending by index on ties.
#[inline]
fn rank_order<T: Scalar>(a: (usize, T), b: (usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Indices of the `p` largest entries of `values`, in rank order.
fn top_indices<T: Scalar>(values: &[T], candidates: &mut [usize], p: usize) -> usize {
    let cmp = |&a: &usize, &b: &usize| rank_order((a, values[a]), (b, values[b]));
    let take = p.min(candidates.len());
    if take == 0 {
        return 0;
    }
    if candidates.len() > take {
        candidates.select_nth_unstable_by(take - 1, cmp);
    }
    candidates[..take].sort_unstable_by(cmp);
    take
}

/// Picks the `p` largest values among valid positions (ties to the smaller
/// index), zero-filling missing slots, and appends the mean over all valid
/// positions.
pub fn select_features<T: Scalar>(c: &[T], p: usize, valid: &[bool]) -> Result<Selection<T>> {
    if p == 0 {
        return Err(Error::Config("top_p must be at least 1".into()));
    }
    if c.len() != valid.len() {
        return Err(Error::Shape(format!(
            "feature map has {} entries but mask has {}",
            c.len(),
            valid.len()
        )));
    }
    let mut candidates: Vec<usize> = (0..c.len()).filter(|&i| valid[i]).collect();
    let mut sum = T::zero();
    for &i in &candidates {
        sum += c[i];
    }
    let count = candidates.len();
    let taken = top_indices(c, &mut candidates, p);

    let mut values = vec![T::zero(); p + 1];
    let mut provenance = vec![None; p];
    for (slot, &i) in candidates[..taken].iter().enumerate() {
        values[slot] = c[i];
        provenance[slot] = Some(i);
    }
    if count > 0 {
        values[p] = sum / T::lit(count as f64);
    }
    Ok(Selection { values, provenance })
}

/// All `J` kernels of one window height, stored as a `(J, h, k)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank<T> {
    pub weight: Array3<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ConvBank<T> {
    pub fn zeros(kernels: usize, height: usize, embed_dim: usize) -> Self {
        ConvBank {
            weight: Array3::zeros((kernels, height, embed_dim)),
            bias: Array1::zeros(kernels),
        }
    }

    pub fn height(&self) -> usize {
        self.weight.len_of(Axis(1))
    }

    pub fn kernels(&self) -> usize {
        self.weight.len_of(Axis(0))
    }

    pub fn kernel(&self, j: usize) -> ConvKernel<T> {
        ConvKernel {
            weight: self.weight.index_axis(Axis(0), j).to_owned(),
            bias: self.bias[j],
        }
    }

    /// Post-ReLU feature maps of every kernel over the `count` leading
    /// windows, as a `(count, J)` matrix.
    fn feature_maps(&self, e: ArrayView2<'_, T>, stride: usize, count: usize) -> Array2<T> {
        let mut out = Array2::from_shape_fn((count, self.kernels()), |(_, j)| self.bias[j]);
        if count == 0 {
            return out;
        }
        let last = (count - 1) * stride;
        for r in 0..self.height() {
            let rows = e.slice(s![r..=r + last; stride, ..]);
            let w_r = self.weight.index_axis(Axis(1), r);
            general_mat_mul(T::one(), &rows, &w_r.t(), T::one(), &mut out);
        }
        out.mapv_inplace(relu);
        out
    }
}

/// Embedding table plus one convolution bank per window height.
#[derive(Debug, Clone, PartialEq)]
pub struct FpmParams<T> {
    pub embedding: Array2<T>,
    pub banks: Vec<ConvBank<T>>,
}

impl<T: Scalar> FpmParams<T> {
    pub fn zeros(config: &ModelConfig, vocab_size: usize) -> Self {
        FpmParams {
            embedding: Array2::zeros((vocab_size, config.embed_dim)),
            banks: config
                .heights
                .iter()
                .map(|&h| ConvBank::zeros(config.kernels_per_height, h, config.embed_dim))
                .collect(),
        }
    }

    /// Zero-mean uniform initialization scaled by fan-in; biases and the
    /// `<PAD>` row start at zero.
    pub fn init<R: Rng>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Self {
        let mut params = Self::zeros(config, vocab_size);
        let k = config.embed_dim;
        let bound = (3.0 / k as f64).sqrt();
        for (id, mut row) in params.embedding.rows_mut().into_iter().enumerate() {
            if id != PAD_ID {
                row.mapv_inplace(|_| T::lit(rng.gen_range(-bound..bound)));
            }
        }
        for bank in &mut params.banks {
            let bound = 1.0 / ((bank.height() * k) as f64).sqrt();
            bank.weight.mapv_inplace(|_| T::lit(rng.gen_range(-bound..bound)));
        }
        params
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }
}

/// The `(J*L) x (P+1)` feature matrix with window provenance.
///
/// Row `l * J + j` belongs to kernel `j` of height index `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    values: Array2<T>,
    provenance: Vec<Option<usize>>,
    heights: Vec<usize>,
    kernels_per_height: usize,
    valid_windows: Vec<usize>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn top_p(&self) -> usize {
        self.values.ncols() - 1
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    /// `(height index, kernel index)` of a row.
    pub fn kernel_of(&self, row: usize) -> (usize, usize) {
        (row / self.kernels_per_height, row % self.kernels_per_height)
    }

    pub fn height_of(&self, row: usize) -> usize {
        self.heights[row / self.kernels_per_height]
    }

    /// Start token of the window behind cell `(row, slot)`, for `slot < P`.
    pub fn provenance(&self, row: usize, slot: usize) -> Option<usize> {
        self.provenance[row * self.top_p() + slot]
    }

    /// Token range of the window behind cell `(row, slot)`.
    pub fn window(&self, row: usize, slot: usize) -> Option<Range<usize>> {
        self.provenance(row, slot).map(|start| start..start + self.height_of(row))
    }

    /// Number of unmasked windows for each height.
    pub fn valid_windows(&self) -> &[usize] {
        &self.valid_windows
    }

    /// Wraps a bare value matrix (no provenance), e.g. for driving the
    /// attention stack directly.
    pub fn from_values(values: Array2<T>) -> Self {
        let rows = values.nrows();
        let p = values.ncols().saturating_sub(1);
        FeatureMatrix {
            provenance: vec![None; rows * p],
            heights: vec![0],
            kernels_per_height: rows.max(1),
            valid_windows: vec![0],
            values,
        }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FpmCache<T> {
    /// Unpadded ids; empty when the forward started from embeddings.
    pub ids: Vec<usize>,
    pub embedded: Array2<T>,
    /// Post-ReLU `(windows, J)` maps per height.
    pub maps: Vec<Array2<T>>,
}

/// Length of `ids` without trailing `<PAD>` ids.
pub fn unpadded_len(ids: &[usize]) -> usize {
    ids.iter().rposition(|&id| id != PAD_ID).map_or(0, |i| i + 1)
}

pub fn fpm_forward<T: Scalar>(ids: &[usize], params: &FpmParams<T>, config: &ModelConfig) -> Result<FeatureMatrix<T>> {
    fpm_forward_cached(ids, params, config, false).map(|(m, _)| m)
}

pub fn fpm_forward_cached<T: Scalar>(
    ids: &[usize],
    params: &FpmParams<T>,
    config: &ModelConfig,
    parallel: bool,
) -> Result<(FeatureMatrix<T>, FpmCache<T>)> {
    if ids.is_empty() {
        return Err(Error::Shape("empty id sequence".into()));
    }
    let real = &ids[..unpadded_len(ids)];
    let embedded = embed(real, &params.embedding)?;
    let (m, mut cache) = fpm_forward_embedded(embedded, &params.banks, config, parallel)?;
    cache.ids = real.to_vec();
    Ok((m, cache))
}

/// Feature matrix from an already-embedded, unpadded sequence.
pub fn fpm_forward_embedded<T: Scalar>(
    embedded: Array2<T>,
    banks: &[ConvBank<T>],
    config: &ModelConfig,
    parallel: bool,
) -> Result<(FeatureMatrix<T>, FpmCache<T>)> {
    if banks.len() != config.num_heights() {
        return Err(Error::Shape(format!(
            "{} convolution banks for {} heights",
            banks.len(),
            config.num_heights()
        )));
    }
    if !embedded.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("embedded input".into()));
    }
    let n = embedded.nrows();
    let j_count = config.kernels_per_height;
    let p = config.top_p;
    let stride = config.stride;

    let run_bank = |bank: &ConvBank<T>| {
        let count = window_count(n, bank.height(), stride);
        let maps = bank.feature_maps(embedded.view(), stride, count);
        let mut values = Array2::zeros((j_count, p + 1));
        let mut provenance = vec![None; j_count * p];
        let mut column = Vec::with_capacity(count);
        let mut candidates = Vec::with_capacity(count);
        for (j, mut row) in values.rows_mut().into_iter().enumerate() {
            column.clear();
            column.extend(maps.column(j).iter().copied());
            candidates.clear();
            candidates.extend(0..count);
            let mut sum = T::zero();
            for &v in &column {
                sum += v;
            }
            let taken = top_indices(&column, &mut candidates, p);
            for (slot, &t) in candidates[..taken].iter().enumerate() {
                row[slot] = column[t];
                provenance[j * p + slot] = Some(t * stride);
            }
            if count > 0 {
                row[p] = sum / T::lit(count as f64);
            }
        }
        (values, provenance, maps, count)
    };

    let per_bank: Vec<_> = if parallel {
        banks.par_iter().map(run_bank).collect()
    } else {
        banks.iter().map(run_bank).collect()
    };

    let mut values = Array2::zeros((config.rows(), p + 1));
    let mut provenance = Vec::with_capacity(config.rows() * p);
    let mut maps = Vec::with_capacity(banks.len());
    let mut valid_windows = Vec::with_capacity(banks.len());
    for (l, (v, prov, map, count)) in per_bank.into_iter().enumerate() {
        values.slice_mut(s![l * j_count..(l + 1) * j_count, ..]).assign(&v);
        provenance.extend(prov);
        maps.push(map);
        valid_windows.push(count);
    }
    let matrix = FeatureMatrix {
        values,
        provenance,
        heights: config.heights.clone(),
        kernels_per_height: j_count,
        valid_windows,
    };
    let cache = FpmCache {
        ids: Vec::new(),
        embedded,
        maps,
    };
    Ok((matrix, cache))
}

/// Back-propagates `d_matrix` (gradient w.r.t. the feature matrix) into the
/// convolution banks of `grads` and returns the gradient w.r.t. the embedded
/// input rows.
///
/// Each selected slot routes its gradient to its own window; the mean column
/// spreads its gradient evenly over every valid window.
pub fn fpm_backward<T: Scalar>(
    cache: &FpmCache<T>,
    matrix: &FeatureMatrix<T>,
    d_matrix: ArrayView2<'_, T>,
    banks: &[ConvBank<T>],
    stride: usize,
    grads: &mut [ConvBank<T>],
) -> Array2<T> {
    let p = matrix.top_p();
    let j_count = matrix.kernels_per_height;
    let mut d_embedded = Array2::zeros(cache.embedded.raw_dim());

    for (l, (bank, grad)) in banks.iter().zip(grads.iter_mut()).enumerate() {
        let map = &cache.maps[l];
        let count = map.nrows();
        if count == 0 {
            continue;
        }
        let inv_count = T::one() / T::lit(count as f64);
        let mut d_pre = Array2::<T>::zeros((count, j_count));
        for j in 0..j_count {
            let row = l * j_count + j;
            let mean_grad = d_matrix[[row, p]] * inv_count;
            for t in 0..count {
                d_pre[[t, j]] = mean_grad;
            }
            for slot in 0..p {
                if let Some(start) = matrix.provenance(row, slot) {
                    d_pre[[start / stride, j]] += d_matrix[[row, slot]];
                }
            }
        }
        ndarray::Zip::from(&mut d_pre).and(map).for_each(|g, &out| {
            if out <= T::zero() {
                *g = T::zero();
            }
        });

        grad.bias += &d_pre.sum_axis(Axis(0));
        let last = (count - 1) * stride;
        for r in 0..bank.height() {
            let rows = cache.embedded.slice(s![r..=r + last; stride, ..]);
            let mut gw_r: ArrayViewMut2<'_, T> = grad.weight.index_axis_mut(Axis(1), r);
            general_mat_mul(T::one(), &d_pre.t(), &rows, T::one(), &mut gw_r);
            let w_r = bank.weight.index_axis(Axis(1), r);
            let mut d_rows = d_embedded.slice_mut(s![r..=r + last; stride, ..]);
            general_mat_mul(T::one(), &d_pre, &w_r, T::one(), &mut d_rows);
        }
    }
    d_embedded
}

/// Adds per-position embedding gradients into the table gradient.
pub fn scatter_embedding_grad<T: Scalar>(ids: &[usize], d_embedded: &Array2<T>, d_table: &mut Array2<T>) {
    for (&id, row) in ids.iter().zip(d_embedded.rows()) {
        let mut target = d_table.row_mut(id);
        target += &row;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_lookup() {
        let table = array![[0.0, 0.0], [1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(embed(&[0], &table).unwrap(), array![[0.0, 0.0]]);
        let e = embed(&[3, 3], &table).unwrap();
        assert_eq!(e.row(0), e.row(1));
        match embed(&[1, 9], &table) {
            Err(Error::TokenIdOutOfRange { position: 1, id: 9, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn convolve_forced_arithmetic() {
        let e = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let k = ConvKernel { weight: Array2::ones((2, 2)), bias: 0.0 };
        // second window is [[0,1],[1,1]], whose sum is 3
        assert_eq!(convolve(e.view(), &k, 1).unwrap(), vec![2.0, 3.0]);
        let zero = Array2::<f64>::zeros((5, 2));
        assert!(convolve(zero.view(), &k, 1).unwrap().iter().all(|&c| c == 0.0));
        assert!(convolve(e.slice(s![..1, ..]), &k, 1).is_err());
    }

    #[test]
    fn convolve_with_stride() {
        let e = Array2::from_shape_fn((7, 1), |(i, _)| i as f64);
        let k = ConvKernel { weight: array![[1.0], [1.0]], bias: 0.0 };
        // windows start at 0, 2, 4
        assert_eq!(convolve(e.view(), &k, 2).unwrap(), vec![1.0, 5.0, 9.0]);
    }

    #[test]
    fn select_examples() {
        let s = select_features(&[3.0, 1.0, 4.0, 1.0, 5.0], 2, &[true; 5]).unwrap();
        assert_eq!(s.values, vec![5.0, 4.0, 2.8]);
        assert_eq!(s.provenance, vec![Some(4), Some(2)]);

        let s = select_features(&[2.0, 2.0, 1.0], 2, &[true; 3]).unwrap();
        assert_eq!(s.values, vec![2.0, 2.0, 5.0 / 3.0]);
        assert_eq!(s.provenance, vec![Some(0), Some(1)]);
    }

    #[test]
    fn select_short_and_masked() {
        let s = select_features(&[1.0, 9.0, 3.0], 4, &[true, false, true]).unwrap();
        assert_eq!(s.values, vec![3.0, 1.0, 0.0, 0.0, 2.0]);
        assert_eq!(s.provenance, vec![Some(2), Some(0), None, None]);
        let s = select_features(&[1.0, 2.0], 2, &[false, false]).unwrap();
        assert_eq!(s.values, vec![0.0; 3]);
        assert!(select_features(&[1.0], 0, &[true]).is_err());
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            heights: vec![2, 3],
            kernels_per_height: 3,
            top_p: 3,
            blocks: 1,
            heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn bank_rows_match_single_kernel_convolve() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = FpmParams::<f64>::init(&cfg, 10, &mut rng);
        let ids = [2, 5, 7, 3, 9, 4, 4, 8];
        let m = fpm_forward(&ids, &params, &cfg).unwrap();
        let e = embed(&ids, &params.embedding).unwrap();
        for (l, bank) in params.banks.iter().enumerate() {
            for j in 0..bank.kernels() {
                let c = convolve(e.view(), &bank.kernel(j), 1).unwrap();
                let sel = select_features(&c, cfg.top_p, &vec![true; c.len()]).unwrap();
                let row = l * cfg.kernels_per_height + j;
                for (slot, v) in sel.values.iter().enumerate() {
                    assert!((m.values()[[row, slot]] - v).abs() < 1e-12);
                }
                for slot in 0..cfg.top_p {
                    assert_eq!(m.provenance(row, slot), sel.provenance[slot]);
                }
            }
        }
    }

    #[test]
    fn short_sequence_rows_are_zero() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = FpmParams::<f32>::init(&cfg, 10, &mut rng);
        let m = fpm_forward(&[3, 4], &params, &cfg).unwrap();
        assert_eq!(m.valid_windows(), &[1, 0]);
        for row in 3..6 {
            assert!(m.values().row(row).iter().all(|&v| v == 0.0));
            assert_eq!(m.provenance(row, 0), None);
        }
        assert!(fpm_forward::<f32>(&[], &params, &cfg).is_err());
    }

    #[test]
    fn pad_row_starts_at_zero() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = FpmParams::<f64>::init(&cfg, 6, &mut rng);
        assert!(params.embedding.row(PAD_ID).iter().all(|&v| v == 0.0));
        assert!(params.embedding.row(1).iter().any(|&v| v != 0.0));
    }
}
