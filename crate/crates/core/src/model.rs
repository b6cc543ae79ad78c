//! The assembled network and its parameter bookkeeping.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fpm::{self, FeatureMatrix, FpmCache, FpmParams};
use crate::lexer::{self, TokenSequence, Vocabulary};
use crate::rpam::{self, Prediction, RpamCache, RpamParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub fpm: FpmParams<T>,
    pub rpam: RpamParams<T>,
}

/// A named, shaped view of one parameter tensor (row-major).
#[derive(Debug)]
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

// Walks every tensor in canonical order. Instantiated once for shared and once
// for mutable access.
macro_rules! walk_params {
    ($params:expr, $Out:ident, $iter:ident, $slice:ident, $chunks:ident) => {{
        let p = $params;
        let mut out: Vec<$Out<'_, T>> = Vec::new();
        macro_rules! push {
            ($name:expr, $shape:expr, $data:expr) => {
                out.push($Out {
                    name: $name,
                    shape: $shape,
                    data: $data,
                })
            };
        }
        let embed_shape = p.fpm.embedding.shape().to_vec();
        push!("embed.table".to_string(), embed_shape, p.fpm.embedding.$slice().expect("standard layout"));
        for (l, bank) in p.fpm.banks.$iter().enumerate() {
            let (h, k) = (bank.weight.shape()[1], bank.weight.shape()[2]);
            let weights = bank.weight.$slice().expect("standard layout").$chunks(h * k);
            let biases = bank.bias.$slice().expect("standard layout").$chunks(1);
            for (j, (w, b)) in weights.zip(biases).enumerate() {
                push!(format!("fpm.l{l}.j{j}.weight"), vec![h, k], w);
                push!(format!("fpm.l{l}.j{j}.bias"), vec![], b);
            }
        }
        for (i, block) in p.rpam.blocks.$iter().enumerate() {
            for (s, head) in block.heads.$iter().enumerate() {
                let shape = head.query.shape().to_vec();
                push!(format!("rpam.block{i}.head{s}.q"), shape.clone(), head.query.$slice().expect("standard layout"));
                push!(format!("rpam.block{i}.head{s}.k"), shape.clone(), head.key.$slice().expect("standard layout"));
                push!(format!("rpam.block{i}.head{s}.v"), shape, head.value.$slice().expect("standard layout"));
            }
            let shapes = [
                block.mix.shape().to_vec(),
                block.w1.shape().to_vec(),
                block.b1.shape().to_vec(),
                block.w2.shape().to_vec(),
                block.b2.shape().to_vec(),
            ];
            let [s_mix, s_w1, s_b1, s_w2, s_b2] = shapes;
            push!(format!("rpam.block{i}.W"), s_mix, block.mix.$slice().expect("standard layout"));
            push!(format!("rpam.block{i}.W1"), s_w1, block.w1.$slice().expect("standard layout"));
            push!(format!("rpam.block{i}.b1"), s_b1, block.b1.$slice().expect("standard layout"));
            push!(format!("rpam.block{i}.W2"), s_w2, block.w2.$slice().expect("standard layout"));
            push!(format!("rpam.block{i}.b2"), s_b2, block.b2.$slice().expect("standard layout"));
        }
        let w_shape = p.rpam.classifier.weight.shape().to_vec();
        push!("clf.weight".to_string(), w_shape, p.rpam.classifier.weight.$slice().expect("standard layout"));
        push!("clf.bias".to_string(), vec![], p.rpam.classifier.bias.$slice().expect("standard layout"));
        out
    }};
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig, vocab_size: usize) -> Self {
        ModelParams {
            fpm: FpmParams::zeros(config, vocab_size),
            rpam: RpamParams::zeros(config),
        }
    }

    /// Seeded initialization; the same seed gives the same draws for every
    /// scalar type.
    pub fn init(config: &ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fpm = FpmParams::init(config, vocab_size, &mut rng);
        let rpam = RpamParams::init(config, &mut rng);
        ModelParams { fpm, rpam }
    }

    /// All tensors under their canonical names, in canonical order.
    pub fn tensors(&self) -> Vec<ParamRef<'_, T>> {
        walk_params!(self, ParamRef, iter, as_slice, chunks)
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        walk_params!(self, ParamMut, iter_mut, as_slice_mut, chunks_mut)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(T::zero());
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn cast<U: Scalar>(&self, config: &ModelConfig) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(config, self.fpm.vocab_size());
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d = U::lit(s.to_f64_lossy());
            }
        }
        out
    }

    /// Checks every tensor shape against `config` and `vocab_size`.
    pub fn check_shapes(&self, config: &ModelConfig, vocab_size: usize) -> Result<()> {
        let expected = ModelParams::<T>::zeros(config, vocab_size);
        let got = self.tensors();
        let want = expected.tensors();
        if got.len() != want.len() {
            return Err(Error::Shape(format!("{} tensors, expected {}", got.len(), want.len())));
        }
        for (g, w) in got.iter().zip(&want) {
            if g.name != w.name || g.shape != w.shape {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    g.name, g.shape, w.name, w.shape
                )));
            }
        }
        Ok(())
    }
}

/// Everything one forward pass produces, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub matrix: FeatureMatrix<T>,
    pub fpm: FpmCache<T>,
    pub rpam: RpamCache<T>,
    pub probability: T,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logit(&self) -> T {
        self.rpam.logit
    }

    /// Classifier input: the flattened output of the last attention block.
    pub fn features(&self) -> &Array1<T> {
        &self.rpam.features
    }
}

/// Which parts of the feature matrix pass gradient back into the FPM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanGradient {
    #[default]
    Include,
    /// Treat the average column as a constant during backward.
    Stop,
}

/// The full detector network over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Afpnet<T> {
    config: ModelConfig,
    params: ModelParams<T>,
}

impl<T: Scalar> Afpnet<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config, params.fpm.vocab_size())?;
        Ok(Afpnet { config, params })
    }

    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary must contain at least <PAD> and <UNK>".into()));
        }
        let params = ModelParams::init(&config, vocab_size, seed);
        Ok(Afpnet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.params.fpm.vocab_size()
    }

    pub fn zero_grads(&self) -> ModelParams<T> {
        ModelParams::zeros(&self.config, self.vocab_size())
    }

    pub fn cast<U: Scalar>(&self) -> Afpnet<U> {
        Afpnet {
            config: self.config.clone(),
            params: self.params.cast(&self.config),
        }
    }

    pub fn feature_matrix(&self, ids: &[usize]) -> Result<FeatureMatrix<T>> {
        fpm::fpm_forward(ids, &self.params.fpm, &self.config)
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardPass<T>> {
        self.forward_with(ids, false)
    }

    pub fn forward_with(&self, ids: &[usize], parallel: bool) -> Result<ForwardPass<T>> {
        let (matrix, fpm) = fpm::fpm_forward_cached(ids, &self.params.fpm, &self.config, parallel)?;
        self.finish_forward(matrix, fpm)
    }

    /// Forward pass from an embedded (unpadded) sequence instead of ids.
    pub fn forward_embedded(&self, embedded: Array2<T>) -> Result<ForwardPass<T>> {
        let (matrix, fpm) = fpm::fpm_forward_embedded(embedded, &self.params.fpm.banks, &self.config, false)?;
        self.finish_forward(matrix, fpm)
    }

    fn finish_forward(&self, matrix: FeatureMatrix<T>, fpm: FpmCache<T>) -> Result<ForwardPass<T>> {
        let rpam = rpam::rpam_forward_cached(matrix.values().view(), &self.params.rpam, &self.config)?;
        let probability = rpam::sigmoid(rpam.logit);
        Ok(ForwardPass {
            matrix,
            fpm,
            rpam,
            probability,
        })
    }

    pub fn predict(&self, ids: &[usize]) -> Result<Prediction> {
        let pass = self.forward(ids)?;
        Ok(Prediction::new(pass.probability.to_f64_lossy(), self.config.threshold))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logit`,
    /// and returns the gradient w.r.t. the embedded input rows.
    pub fn backward(&self, pass: &ForwardPass<T>, d_logit: T, grads: &mut ModelParams<T>, mean: MeanGradient) -> Array2<T> {
        let mut d_matrix = rpam::rpam_backward(&pass.rpam, &self.params.rpam, d_logit, &mut grads.rpam);
        if mean == MeanGradient::Stop {
            let p = self.config.top_p;
            d_matrix.column_mut(p).fill(T::zero());
        }
        let d_embedded = fpm::fpm_backward(
            &pass.fpm,
            &pass.matrix,
            d_matrix.view(),
            &self.params.fpm.banks,
            self.config.stride,
            &mut grads.fpm.banks,
        );
        fpm::scatter_embedding_grad(&pass.fpm.ids, &d_embedded, &mut grads.fpm.embedding);
        d_embedded
    }
}

/// A network bundled with the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T> {
    pub model: Afpnet<T>,
    pub vocab: Vocabulary,
}

impl<T: Scalar> Detector<T> {
    pub fn new(model: Afpnet<T>, vocab: Vocabulary) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(Error::Shape(format!(
                "embedding table has {} rows but vocabulary has {} entries",
                model.vocab_size(),
                vocab.len()
            )));
        }
        Ok(Detector { model, vocab })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn encode_source(&self, source: &str) -> Result<(TokenSequence, Vec<usize>)> {
        let tokens = lexer::tokenize(source)?;
        let ids = lexer::encode(&tokens, &self.vocab);
        Ok((tokens, ids))
    }

    pub fn predict_source(&self, source: &str) -> Result<Prediction> {
        let (_, ids) = self.encode_source(source)?;
        self.model.predict(&ids)
    }

    /// Prediction with every selected feature point attached.
    pub fn predict_with_attribution(&self, source: &str) -> Result<Prediction> {
        let (_, ids) = self.encode_source(source)?;
        let pass = self.model.forward(&ids)?;
        let mut pred = Prediction::new(pass.probability.to_f64_lossy(), self.config().threshold);
        pred.attribution = Some(pass.matrix.feature_points());
        Ok(pred)
    }
}
