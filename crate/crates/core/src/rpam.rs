//! Relationship perception: `N` multi-head self-attention blocks over the
//! feature-matrix rows, each followed by a two-layer ReLU feed-forward map,
//! then a sigmoid classifier over the flattened result.
//!
//! The model width is `P + 1` throughout; there is no input projection,
//! positional encoding, residual path or normalization.

use ndarray::{concatenate, s, Array0, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fpm::FeatureMatrix;
use crate::scalar::Scalar;

/// Query/key/value projections of one head, each `width x d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub query: Array2<T>,
    pub key: Array2<T>,
    pub value: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub heads: Vec<HeadParams<T>>,
    /// Output mixer applied to the concatenated heads.
    pub mix: Array2<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub weight: Array1<T>,
    pub bias: Array0<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpamParams<T> {
    pub blocks: Vec<BlockParams<T>>,
    pub classifier: ClassifierParams<T>,
}

fn uniform<T: Scalar, R: Rng>(shape: (usize, usize), fan_in: usize, rng: &mut R) -> Array2<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || T::lit(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (w, dk, f) = (config.width(), config.head_dim(), config.ffn_width());
        BlockParams {
            heads: (0..config.heads)
                .map(|_| HeadParams {
                    query: Array2::zeros((w, dk)),
                    key: Array2::zeros((w, dk)),
                    value: Array2::zeros((w, dk)),
                })
                .collect(),
            mix: Array2::zeros((w, w)),
            w1: Array2::zeros((w, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, w)),
            b2: Array1::zeros(w),
        }
    }

    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let (w, dk, f) = (config.width(), config.head_dim(), config.ffn_width());
        BlockParams {
            heads: (0..config.heads)
                .map(|_| HeadParams {
                    query: uniform((w, dk), w, rng),
                    key: uniform((w, dk), w, rng),
                    value: uniform((w, dk), w, rng),
                })
                .collect(),
            mix: uniform((w, w), w, rng),
            w1: uniform((w, f), w, rng),
            b1: Array1::zeros(f),
            w2: uniform((f, w), f, rng),
            b2: Array1::zeros(w),
        }
    }
}

impl<T: Scalar> RpamParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        RpamParams {
            blocks: (0..config.blocks).map(|_| BlockParams::zeros(config)).collect(),
            classifier: ClassifierParams {
                weight: Array1::zeros(config.rows() * config.width()),
                bias: Array0::zeros(()),
            },
        }
    }

    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let blocks = (0..config.blocks).map(|_| BlockParams::init(config, rng)).collect();
        let flat = config.rows() * config.width();
        let bound = 1.0 / (flat as f64).sqrt();
        RpamParams {
            blocks,
            classifier: ClassifierParams {
                weight: Array1::from_shape_simple_fn(flat, || T::lit(rng.gen_range(-bound..bound))),
                bias: Array0::zeros(()),
            },
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutput<T> {
    pub output: Array2<T>,
    /// Row-stochastic attention weights.
    pub weights: Array2<T>,
    pub query: Array2<T>,
    pub key: Array2<T>,
    pub value: Array2<T>,
}

/// `softmax(q k^T / sqrt(d_k)) v` with `q, k, v` projected from `x`.
pub fn attention_head<T: Scalar>(x: ArrayView2<'_, T>, head: &HeadParams<T>) -> Result<HeadOutput<T>> {
    if x.ncols() != head.query.nrows() {
        return Err(Error::Shape(format!(
            "attention input width {} does not match projection rows {}",
            x.ncols(),
            head.query.nrows()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("attention input".into()));
    }
    let query = x.dot(&head.query);
    let key = x.dot(&head.key);
    let value = x.dot(&head.value);
    let scale = T::one() / T::lit(head.query.ncols() as f64).sqrt();
    let mut weights = query.dot(&key.t()) * scale;
    softmax_rows(&mut weights);
    let output = weights.dot(&value);
    Ok(HeadOutput {
        output,
        weights,
        query,
        key,
        value,
    })
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub input: Array2<T>,
    pub heads: Vec<HeadOutput<T>>,
    pub concat: Array2<T>,
    /// `concat * mix`
    pub mixed: Array2<T>,
    /// Feed-forward pre-activation.
    pub hidden: Array2<T>,
    pub output: Array2<T>,
}

pub fn attention_block<T: Scalar>(x: ArrayView2<'_, T>, block: &BlockParams<T>) -> Result<Array2<T>> {
    attention_block_cached(x, block).map(|c| c.output)
}

pub fn attention_block_cached<T: Scalar>(x: ArrayView2<'_, T>, block: &BlockParams<T>) -> Result<BlockCache<T>> {
    let heads = block
        .heads
        .iter()
        .map(|h| attention_head(x, h))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = heads.iter().map(|h| h.output.view()).collect();
    let concat = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    if concat.ncols() != block.mix.nrows() {
        return Err(Error::Shape(format!(
            "concatenated heads have width {} but mixer expects {}",
            concat.ncols(),
            block.mix.nrows()
        )));
    }
    let mixed = concat.dot(&block.mix);
    let hidden = mixed.dot(&block.w1) + &block.b1;
    let output = hidden.mapv(|v| v.max(T::zero())).dot(&block.w2) + &block.b2;
    Ok(BlockCache {
        input: x.to_owned(),
        heads,
        concat,
        mixed,
        hidden,
        output,
    })
}

/// Back-propagates `d_out` through one block, accumulating into `grad`, and
/// returns the gradient w.r.t. the block input.
pub fn attention_block_backward<T: Scalar>(
    cache: &BlockCache<T>,
    block: &BlockParams<T>,
    d_out: ArrayView2<'_, T>,
    grad: &mut BlockParams<T>,
) -> Array2<T> {
    let activated = cache.hidden.mapv(|v| v.max(T::zero()));
    grad.w2 += &activated.t().dot(&d_out);
    grad.b2 += &d_out.sum_axis(Axis(0));
    let mut d_hidden = d_out.dot(&block.w2.t());
    ndarray::Zip::from(&mut d_hidden).and(&cache.hidden).for_each(|g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
    grad.w1 += &cache.mixed.t().dot(&d_hidden);
    grad.b1 += &d_hidden.sum_axis(Axis(0));
    let d_mixed = d_hidden.dot(&block.w1.t());
    grad.mix += &cache.concat.t().dot(&d_mixed);
    let d_concat = d_mixed.dot(&block.mix.t());

    let x = &cache.input;
    let mut d_x = Array2::zeros(x.raw_dim());
    let mut offset = 0;
    for ((head, out), g) in block.heads.iter().zip(&cache.heads).zip(grad.heads.iter_mut()) {
        let dk = head.query.ncols();
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let d_head = d_concat.slice(s![.., offset..offset + dk]);
        offset += dk;

        let d_weights = d_head.dot(&out.value.t());
        let d_value = out.weights.t().dot(&d_head);
        let mut d_scores = &d_weights * &out.weights;
        for (mut row, a_row) in d_scores.rows_mut().into_iter().zip(out.weights.rows()) {
            let dot: T = row.sum();
            row.zip_mut_with(&a_row, |v, &a| *v = *v - a * dot);
        }
        d_scores *= scale;
        let d_query = d_scores.dot(&out.key);
        let d_key = d_scores.t().dot(&out.query);

        g.query += &x.t().dot(&d_query);
        g.key += &x.t().dot(&d_key);
        g.value += &x.t().dot(&d_value);
        d_x += &d_query.dot(&head.query.t());
        d_x += &d_key.dot(&head.key.t());
        d_x += &d_value.dot(&head.value.t());
    }
    d_x
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone)]
pub struct RpamCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    /// Row-major flattening of the last block output (classifier input).
    pub features: Array1<T>,
    pub logit: T,
    /// Shape of the feature matrix fed to the stack.
    pub shape: (usize, usize),
}

impl<T> RpamCache<T> {
    /// Number of attention blocks applied in the forward pass.
    pub fn block_applications(&self) -> usize {
        self.blocks.len()
    }
}

pub fn rpam_forward_cached<T: Scalar>(
    matrix: ArrayView2<'_, T>,
    params: &RpamParams<T>,
    config: &ModelConfig,
) -> Result<RpamCache<T>> {
    if matrix.dim() != (config.rows(), config.width()) {
        return Err(Error::Config(format!(
            "feature matrix is {:?}, expected ({}, {})",
            matrix.dim(),
            config.rows(),
            config.width()
        )));
    }
    if params.blocks.len() != config.blocks {
        return Err(Error::Config(format!(
            "{} attention blocks for configured {}",
            params.blocks.len(),
            config.blocks
        )));
    }
    let mut blocks = Vec::with_capacity(params.blocks.len());
    let mut current = matrix.to_owned();
    for block in &params.blocks {
        let cache = attention_block_cached(current.view(), block)?;
        current = cache.output.clone();
        blocks.push(cache);
    }
    let features = Array1::from_iter(current.iter().copied());
    let logit = classify_logit(features.view(), &params.classifier)?;
    Ok(RpamCache {
        blocks,
        features,
        logit,
        shape: matrix.dim(),
    })
}

pub fn classify_logit<T: Scalar>(features: ArrayView1<'_, T>, clf: &ClassifierParams<T>) -> Result<T> {
    if features.len() != clf.weight.len() {
        return Err(Error::Shape(format!(
            "classifier expects {} features, got {}",
            clf.weight.len(),
            features.len()
        )));
    }
    Ok(features.dot(&clf.weight) + clf.bias[()])
}

/// Back-propagates `d_logit` through the classifier and every block; returns
/// the gradient w.r.t. the feature matrix.
pub fn rpam_backward<T: Scalar>(
    cache: &RpamCache<T>,
    params: &RpamParams<T>,
    d_logit: T,
    grad: &mut RpamParams<T>,
) -> Array2<T> {
    grad.classifier.weight.scaled_add(d_logit, &cache.features);
    grad.classifier.bias[()] += d_logit;
    let mut d = (&params.classifier.weight * d_logit)
        .into_shape_with_order(cache.shape)
        .expect("classifier weight matches flattened features");
    for ((block, bcache), bgrad) in params.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
        d = attention_block_backward(bcache, block, d.view(), bgrad);
    }
    d
}

/// A classifier decision. `probability` is the sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub decision: u8,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribution: Option<Vec<FeaturePoint>>,
}

impl Prediction {
    pub fn new(probability: f64, threshold: f64) -> Self {
        Prediction {
            probability,
            decision: u8::from(probability >= threshold),
            threshold,
            attribution: None,
        }
    }
}

/// One selected feature point with the window it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub row: usize,
    pub slot: usize,
    pub height_index: usize,
    pub kernel: usize,
    pub window_start: usize,
    pub window_len: usize,
    pub value: f64,
}

impl<T: Scalar> FeatureMatrix<T> {
    /// Every filled top-P cell with its provenance, in row-major order.
    pub fn feature_points(&self) -> Vec<FeaturePoint> {
        let mut points = Vec::new();
        for row in 0..self.rows() {
            let (height_index, kernel) = self.kernel_of(row);
            for slot in 0..self.top_p() {
                if let Some(start) = self.provenance(row, slot) {
                    points.push(FeaturePoint {
                        row,
                        slot,
                        height_index,
                        kernel,
                        window_start: start,
                        window_len: self.height_of(row),
                        value: self.values()[[row, slot]].to_f64_lossy(),
                    });
                }
            }
        }
        points
    }
}

/// Runs the attention stack and classifier on a feature matrix.
pub fn rpam_forward<T: Scalar>(
    matrix: &FeatureMatrix<T>,
    params: &RpamParams<T>,
    config: &ModelConfig,
) -> Result<Prediction> {
    let cache = rpam_forward_cached(matrix.values().view(), params, config)?;
    Ok(Prediction::new(sigmoid(cache.logit).to_f64_lossy(), config.threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(rows_per_height: usize, p: usize, heads: usize, blocks: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            heights: vec![2],
            kernels_per_height: rows_per_height,
            top_p: p,
            blocks,
            heads,
            ..Default::default()
        }
    }

    #[test]
    fn singleton_attention_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = config(1, 3, 2, 1);
        let block = BlockParams::<f64>::init(&cfg, &mut rng);
        let x = array![[0.3, -1.0, 2.0, 0.5]];
        let out = attention_head(x.view(), &block.heads[0]).unwrap();
        assert_eq!(out.weights, array![[1.0]]);
        assert_eq!(out.output, x.dot(&block.heads[0].value));
    }

    #[test]
    fn identical_rows_split_attention_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = config(2, 3, 1, 1);
        let block = BlockParams::<f64>::init(&cfg, &mut rng);
        let x = array![[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]];
        let out = attention_head(x.view(), &block.heads[0]).unwrap();
        for &w in &out.weights {
            assert!((w - 0.5).abs() < 1e-15);
        }
        assert_eq!(out.output.row(0), out.output.row(1));
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = config(2, 3, 1, 1);
        let block = BlockParams::<f32>::init(&cfg, &mut rng);
        let x = array![[1.0, f32::NAN, 0.0, 0.0], [0.0; 4]];
        assert!(matches!(attention_head(x.view(), &block.heads[0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_heads_give_bias_rows() {
        let cfg = config(3, 3, 2, 1);
        let mut block = BlockParams::<f64>::zeros(&cfg);
        block.b2 = array![0.1, 0.2, 0.3, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        block.w2 = Array2::from_shape_simple_fn((cfg.ffn_width(), 4), || rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
        let out = attention_block(x.view(), &block).unwrap();
        for row in out.rows() {
            assert_eq!(row, block.b2);
        }
    }

    #[test]
    fn zero_classifier_gives_half() {
        let cfg = config(2, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = RpamParams::<f64>::init(&cfg, &mut rng);
        params.classifier.weight.fill(0.0);
        let m = FeatureMatrix::from_values(Array2::from_shape_simple_fn((2, 4), || rng.gen_range(0.0..3.0)));
        let pred = rpam_forward(&m, &params, &cfg).unwrap();
        assert_eq!(pred.probability, 0.5);
        assert_eq!(pred.decision, 1);
    }

    #[test]
    fn zero_blocks_classify_flattened_matrix() {
        let cfg = config(2, 1, 1, 0);
        let mut params = RpamParams::<f64>::zeros(&cfg);
        params.classifier.weight = array![1.0, -1.0, 0.5, 2.0];
        params.classifier.bias[()] = -0.25;
        let m = FeatureMatrix::from_values(array![[1.0, 2.0], [3.0, 4.0]]);
        let pred = rpam_forward(&m, &params, &cfg).unwrap();
        let logit: f64 = 1.0 - 2.0 + 1.5 + 8.0 - 0.25;
        assert!((pred.probability - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-15);
    }

    #[test]
    fn traces_configured_block_count() {
        for n in 0..4 {
            let cfg = config(3, 3, 2, n);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let params = RpamParams::<f64>::init(&cfg, &mut rng);
            let x = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(0.0..1.0));
            let cache = rpam_forward_cached(x.view(), &params, &cfg).unwrap();
            assert_eq!(cache.block_applications(), n);
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let cfg = config(3, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = RpamParams::<f64>::init(&cfg, &mut rng);
        let m = FeatureMatrix::from_values(Array2::zeros((2, 4)));
        assert!(matches!(rpam_forward(&m, &params, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(2.0f64) + sigmoid(-2.0f64) - 1.0).abs() < 1e-15);
    }
}
