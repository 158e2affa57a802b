//! Small feed-forward encoder with a meta-information input channel,
//! classifier/projection/prediction heads, and manual reverse-mode
//! gradients.
//!
//! The encoder input is the concatenation of the feature vector and an
//! embedded meta one-hot (`meta_onehot x meta_embed`); a disabled meta
//! channel is exactly a zero one-hot, so both paths share one code path.
//! Every layer uses tanh, which keeps finite-difference checks clean. In
//! angular-margin mode the classifier has no bias and inference logits are
//! `scale * cos(theta)` over the normalized embedding and class weights.

pub mod checkpoint;
pub mod optim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{l2_normalize_rows, Matrix, SeededRng};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGrad(String),
    #[error("cosine schedule needs total_steps > 0")]
    EmptySchedule,
    #[error("parameter containers are structurally different: {0}")]
    StructureMismatch(String),
}

/// Architecture description; serialized into run configs and manifests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Width of the meta one-hot input (number of meta-categories).
    pub num_meta: usize,
    /// Width the one-hot is embedded into before concatenation.
    pub meta_dim: usize,
    /// Encoder hidden widths; the embedding layer is appended after these.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Angular-margin mode: classifier bias is absent and inference logits
    /// are `arcface_scale * cos(theta)`.
    pub arcface_mode: bool,
    pub arcface_scale: f64,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            num_meta: 4,
            meta_dim: 4,
            hidden: vec![64, 64],
            embed_dim: 32,
            num_classes: 12,
            arcface_mode: false,
            arcface_scale: 16.0,
            proj_hidden: 32,
            proj_dim: 16,
            pred_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn encoder_input_dim(&self) -> usize {
        self.feature_dim + self.meta_dim
    }

    /// Widths of every encoder layer output, embedding included.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = self.hidden.clone();
        w.push(self.embed_dim);
        w
    }
}

/// One dense layer. The bias is stored as a 1 x out matrix so that every
/// parameter in the model is a named matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseLayer {
    fn zeros(input: usize, output: usize) -> Self {
        DenseLayer {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let mut weight = Matrix::zeros(input, output);
        for v in weight.data_mut() {
            *v = scale * rng.next_gaussian();
        }
        DenseLayer {
            weight,
            bias: Matrix::zeros(1, output),
        }
    }

    /// `x @ W + b` (bias broadcast over rows).
    fn affine(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight);
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, out.get(r, c) + self.bias.get(0, c));
            }
        }
        out
    }
}

/// A flat set of named parameter matrices. The same shape is used for
/// parameters, gradients, and optimizer moments; the momentum update of
/// the contrastive trainers operates on pairs of these.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub meta_embed: Matrix,
    pub encoder: Vec<DenseLayer>,
    pub classifier_weight: Matrix,
    pub classifier_bias: Option<Matrix>,
    pub projection: Vec<DenseLayer>,
    pub prediction: Vec<DenseLayer>,
}

/// Gradients use the identical container.
pub type ParamGrads = ParamSet;

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> ParamSet {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let zlayer = |l: &DenseLayer| DenseLayer {
            weight: zeros(&l.weight),
            bias: zeros(&l.bias),
        };
        ParamSet {
            meta_embed: zeros(&other.meta_embed),
            encoder: other.encoder.iter().map(zlayer).collect(),
            classifier_weight: zeros(&other.classifier_weight),
            classifier_bias: other.classifier_bias.as_ref().map(zeros),
            projection: other.projection.iter().map(zlayer).collect(),
            prediction: other.prediction.iter().map(zlayer).collect(),
        }
    }

    /// Named views in a stable order (the checkpoint and optimizer order).
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![("meta_embed".into(), &self.meta_embed)];
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier_weight));
        if let Some(b) = &self.classifier_bias {
            out.push(("classifier.bias".into(), b));
        }
        for (i, l) in self.projection.iter().enumerate() {
            out.push((format!("proj.{i}.weight"), &l.weight));
            out.push((format!("proj.{i}.bias"), &l.bias));
        }
        for (i, l) in self.prediction.iter().enumerate() {
            out.push((format!("pred.{i}.weight"), &l.weight));
            out.push((format!("pred.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> =
            vec![("meta_embed".into(), &mut self.meta_embed)];
        for (i, l) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut l.weight));
            out.push((format!("encoder.{i}.bias"), &mut l.bias));
        }
        out.push(("classifier.weight".into(), &mut self.classifier_weight));
        if let Some(b) = &mut self.classifier_bias {
            out.push(("classifier.bias".into(), b));
        }
        for (i, l) in self.projection.iter_mut().enumerate() {
            out.push((format!("proj.{i}.weight"), &mut l.weight));
            out.push((format!("proj.{i}.bias"), &mut l.bias));
        }
        for (i, l) in self.prediction.iter_mut().enumerate() {
            out.push((format!("pred.{i}.weight"), &mut l.weight));
            out.push((format!("pred.{i}.bias"), &mut l.bias));
        }
        out
    }

    pub fn same_structure(&self, other: &ParamSet) -> Result<(), ModelError> {
        let a = self.named();
        let b = other.named();
        if a.len() != b.len() {
            return Err(ModelError::StructureMismatch(format!(
                "{} vs {} parameter arrays",
                a.len(),
                b.len()
            )));
        }
        for ((na, ma), (nb, mb)) in a.iter().zip(&b) {
            if na != nb || ma.rows() != mb.rows() || ma.cols() != mb.cols() {
                return Err(ModelError::StructureMismatch(format!(
                    "{na} {}x{} vs {nb} {}x{}",
                    ma.rows(),
                    ma.cols(),
                    mb.rows(),
                    mb.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in self.named_mut() {
            m.scale(s);
        }
    }

    /// `self += s * other`, element-wise over every matrix.
    pub fn add_scaled(&mut self, other: &ParamSet, s: f64) {
        self.same_structure(other).expect("structure");
        let other_named = other.named();
        for ((_, m), (_, o)) in self.named_mut().into_iter().zip(other_named) {
            m.add_scaled(o, s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, m)| m.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Model parameters plus the architecture they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
}

impl ModelParams {
    /// Gaussian init scaled by 1/sqrt(fan_in); biases start at zero.
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> ModelParams {
        let mut meta_embed = Matrix::zeros(config.num_meta, config.meta_dim);
        for v in meta_embed.data_mut() {
            *v = rng.next_gaussian() / (config.num_meta.max(1) as f64).sqrt();
        }
        let mut encoder = Vec::new();
        let mut input = config.encoder_input_dim();
        for width in config.encoder_widths() {
            encoder.push(DenseLayer::init(input, width, rng));
            input = width;
        }
        let mut classifier_weight = Matrix::zeros(config.embed_dim, config.num_classes);
        for v in classifier_weight.data_mut() {
            *v = rng.next_gaussian() / (config.embed_dim as f64).sqrt();
        }
        let classifier_bias = if config.arcface_mode {
            None
        } else {
            Some(Matrix::zeros(1, config.num_classes))
        };
        let projection = vec![
            DenseLayer::init(config.embed_dim, config.proj_hidden, rng),
            DenseLayer::init(config.proj_hidden, config.proj_dim, rng),
        ];
        let prediction = vec![
            DenseLayer::init(config.proj_dim, config.pred_hidden, rng),
            DenseLayer::init(config.pred_hidden, config.proj_dim, rng),
        ];
        ModelParams {
            config: config.clone(),
            set: ParamSet {
                meta_embed,
                encoder,
                classifier_weight,
                classifier_bias,
                projection,
                prediction,
            },
        }
    }

    pub fn zeros(config: &ModelConfig) -> ModelParams {
        let mut encoder = Vec::new();
        let mut input = config.encoder_input_dim();
        for width in config.encoder_widths() {
            encoder.push(DenseLayer::zeros(input, width));
            input = width;
        }
        ModelParams {
            config: config.clone(),
            set: ParamSet {
                meta_embed: Matrix::zeros(config.num_meta, config.meta_dim),
                encoder,
                classifier_weight: Matrix::zeros(config.embed_dim, config.num_classes),
                classifier_bias: if config.arcface_mode {
                    None
                } else {
                    Some(Matrix::zeros(1, config.num_classes))
                },
                projection: vec![
                    DenseLayer::zeros(config.embed_dim, config.proj_hidden),
                    DenseLayer::zeros(config.proj_hidden, config.proj_dim),
                ],
                prediction: vec![
                    DenseLayer::zeros(config.proj_dim, config.pred_hidden),
                    DenseLayer::zeros(config.pred_hidden, config.proj_dim),
                ],
            },
        }
    }
}

/// Cached activations from [`encode`], consumed by the backward passes.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    /// Concatenated input (features | embedded meta).
    input: Matrix,
    meta_onehot: Matrix,
    /// Post-tanh activations per encoder layer; the last is the embedding.
    post: Vec<Matrix>,
}

impl EncodeCache {
    pub fn embedding(&self) -> &Matrix {
        self.post.last().expect("at least one encoder layer")
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Run the encoder: concat(features, meta_onehot x meta_embed) through the
/// tanh layer stack. The meta one-hot may be all-zero rows (disabled meta).
pub fn encode(
    params: &ModelParams,
    features: &Matrix,
    meta: &Matrix,
) -> Result<EncodeCache, ModelError> {
    encode_set(&params.config, &params.set, features, meta)
}

/// [`encode`] over an explicit parameter set (used for the momentum copy,
/// which shares the query model's architecture).
pub fn encode_set(
    cfg: &ModelConfig,
    set: &ParamSet,
    features: &Matrix,
    meta: &Matrix,
) -> Result<EncodeCache, ModelError> {
    if features.cols() != cfg.feature_dim {
        return Err(ModelError::DimMismatch(format!(
            "features have {} dims, model expects {}",
            features.cols(),
            cfg.feature_dim
        )));
    }
    if meta.rows() != features.rows() || meta.cols() != cfg.num_meta {
        return Err(ModelError::DimMismatch(format!(
            "meta is {}x{}, model expects {}x{}",
            meta.rows(),
            meta.cols(),
            features.rows(),
            cfg.num_meta
        )));
    }
    let n = features.rows();
    let meta_vec = meta.matmul(&set.meta_embed);
    let mut input = Matrix::zeros(n, cfg.encoder_input_dim());
    for i in 0..n {
        for d in 0..cfg.feature_dim {
            input.set(i, d, features.get(i, d));
        }
        for d in 0..cfg.meta_dim {
            input.set(i, cfg.feature_dim + d, meta_vec.get(i, d));
        }
    }

    let mut post = Vec::with_capacity(set.encoder.len());
    let mut x = input.clone();
    for layer in &set.encoder {
        let mut z = layer.affine(&x);
        for v in z.data_mut() {
            *v = v.tanh();
        }
        post.push(z.clone());
        x = z;
    }
    Ok(EncodeCache {
        input,
        meta_onehot: meta.clone(),
        post,
    })
}

/// Classifier logits from an embedding: `emb @ W + b`, or
/// `scale * cos(theta)` in angular-margin mode.
pub fn classifier_logits(params: &ModelParams, embedding: &Matrix) -> Matrix {
    if params.config.arcface_mode {
        let emb_n = l2_normalize_rows(embedding, 1e-12).matrix;
        let w_t = params.set.classifier_weight.transpose();
        let w_n = l2_normalize_rows(&w_t, 1e-12).matrix;
        let mut cos = emb_n.matmul_transpose(&w_n);
        cos.scale(params.config.arcface_scale);
        cos
    } else {
        let mut out = embedding.matmul(&params.set.classifier_weight);
        if let Some(b) = &params.set.classifier_bias {
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    out.set(r, c, out.get(r, c) + b.get(0, c));
                }
            }
        }
        out
    }
}

/// Full forward pass: encoder then classifier.
pub struct Forward {
    pub cache: EncodeCache,
    pub logits: Matrix,
}

pub fn forward(
    params: &ModelParams,
    features: &Matrix,
    meta: &Matrix,
) -> Result<Forward, ModelError> {
    let cache = encode(params, features, meta)?;
    let logits = classifier_logits(params, cache.embedding());
    Ok(Forward { cache, logits })
}

/// Backward through the encoder (and meta path) from a gradient on the
/// embedding, accumulating into `grads`.
pub fn backward_encoder(
    params: &ModelParams,
    cache: &EncodeCache,
    grad_embedding: &Matrix,
    grads: &mut ParamGrads,
) {
    let layers = &params.set.encoder;
    assert_eq!(cache.post.len(), layers.len(), "stale cache");
    let mut g = grad_embedding.clone();
    for l in (0..layers.len()).rev() {
        // d tanh = 1 - post^2
        let post = &cache.post[l];
        let mut gz = g.clone();
        for (v, a) in gz.data_mut().iter_mut().zip(post.data()) {
            *v *= 1.0 - a * a;
        }
        let below = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let layer_grads = &mut grads.encoder[l];
        layer_grads.weight.add_scaled(&below.transpose_matmul(&gz), 1.0);
        for c in 0..gz.cols() {
            let mut sum = 0.0;
            for r in 0..gz.rows() {
                sum += gz.get(r, c);
            }
            let cur = layer_grads.bias.get(0, c);
            layer_grads.bias.set(0, c, cur + sum);
        }
        g = gz.matmul_transpose(&layers[l].weight);
    }
    // Split the input gradient: feature columns have no parameters; meta
    // columns chain into meta_embed.
    let cfg = &params.config;
    let n = g.rows();
    let mut g_meta_vec = Matrix::zeros(n, cfg.meta_dim);
    for i in 0..n {
        for d in 0..cfg.meta_dim {
            g_meta_vec.set(i, d, g.get(i, cfg.feature_dim + d));
        }
    }
    grads
        .meta_embed
        .add_scaled(&cache.meta_onehot.transpose_matmul(&g_meta_vec), 1.0);
}

/// Backward through the plain (bias) classifier from a logits gradient,
/// returning the embedding gradient and accumulating classifier grads.
///
/// Angular-margin training never takes this path: its loss differentiates
/// the normalized cosine logits itself.
pub fn backward_classifier(
    params: &ModelParams,
    cache: &EncodeCache,
    grad_logits: &Matrix,
    grads: &mut ParamGrads,
) -> Matrix {
    assert!(
        !params.config.arcface_mode,
        "classifier backward is for the bias classifier"
    );
    let emb = cache.embedding();
    grads
        .classifier_weight
        .add_scaled(&emb.transpose_matmul(grad_logits), 1.0);
    if let Some(b) = &mut grads.classifier_bias {
        for c in 0..grad_logits.cols() {
            let mut sum = 0.0;
            for r in 0..grad_logits.rows() {
                sum += grad_logits.get(r, c);
            }
            b.set(0, c, b.get(0, c) + sum);
        }
    }
    grad_logits.matmul_transpose(&params.set.classifier_weight)
}

/// Full backward pass from a logits gradient (plain classifier mode).
pub fn backward(
    params: &ModelParams,
    cache: &EncodeCache,
    grad_logits: &Matrix,
) -> Result<ParamGrads, ModelError> {
    if grad_logits.rows() != cache.batch_size()
        || grad_logits.cols() != params.config.num_classes
    {
        return Err(ModelError::DimMismatch(format!(
            "grad_logits is {}x{}, expected {}x{}",
            grad_logits.rows(),
            grad_logits.cols(),
            cache.batch_size(),
            params.config.num_classes
        )));
    }
    let mut grads = ParamSet::zeros_like(&params.set);
    let grad_emb = backward_classifier(params, cache, grad_logits, &mut grads);
    backward_encoder(params, cache, &grad_emb, &mut grads);
    Ok(grads)
}

/// Cache for a two-layer head (dense, tanh, dense).
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Matrix,
    hidden: Matrix,
}

/// Forward through a two-layer head. `layers` is the projection or
/// prediction pair from a [`ParamSet`].
pub fn head_forward(layers: &[DenseLayer], input: &Matrix) -> (Matrix, HeadCache) {
    assert_eq!(layers.len(), 2, "heads are two dense layers");
    let mut hidden = layers[0].affine(input);
    for v in hidden.data_mut() {
        *v = v.tanh();
    }
    let out = layers[1].affine(&hidden);
    (
        out,
        HeadCache {
            input: input.clone(),
            hidden,
        },
    )
}

/// Backward through a two-layer head; returns the input gradient and
/// accumulates layer grads into `grad_layers`.
pub fn head_backward(
    layers: &[DenseLayer],
    cache: &HeadCache,
    grad_out: &Matrix,
    grad_layers: &mut [DenseLayer],
) -> Matrix {
    assert_eq!(layers.len(), 2);
    assert_eq!(grad_layers.len(), 2);
    grad_layers[1]
        .weight
        .add_scaled(&cache.hidden.transpose_matmul(grad_out), 1.0);
    for c in 0..grad_out.cols() {
        let mut sum = 0.0;
        for r in 0..grad_out.rows() {
            sum += grad_out.get(r, c);
        }
        grad_layers[1].bias.set(0, c, grad_layers[1].bias.get(0, c) + sum);
    }
    let mut g_hidden = grad_out.matmul_transpose(&layers[1].weight);
    for (v, a) in g_hidden.data_mut().iter_mut().zip(cache.hidden.data()) {
        *v *= 1.0 - a * a;
    }
    grad_layers[0]
        .weight
        .add_scaled(&cache.input.transpose_matmul(&g_hidden), 1.0);
    for c in 0..g_hidden.cols() {
        let mut sum = 0.0;
        for r in 0..g_hidden.rows() {
            sum += g_hidden.get(r, c);
        }
        grad_layers[0].bias.set(0, c, grad_layers[0].bias.get(0, c) + sum);
    }
    g_hidden.matmul_transpose(&layers[0].weight)
}
