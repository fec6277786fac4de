//! The full classifier: embedding, multi-width convolution, max-pooling,
//! bidirectional LSTM, additive attention and a softmax head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{
    self, AttentionHead, ConvBlock, Dense, Direction, EmbeddingTable, LstmCell,
};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};
use crate::train::Classifier;

pub const EMBEDDING: &str = "embedding";
pub const CONV: &str = "conv";
pub const LSTM_FORWARD: &str = "lstm_fwd";
pub const LSTM_BACKWARD: &str = "lstm_bwd";
pub const ATTENTION: &str = "attention";
pub const CLASSIFIER: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Tokens per input sequence (after padding/truncation).
    pub max_len: usize,
    pub conv_widths: Vec<usize>,
    /// Filters per convolution width.
    pub filters: usize,
    /// Pooling window, also used as its stride.
    pub pool: usize,
    pub lstm_hidden: usize,
    /// Attention projection size; `None` means `2 * lstm_hidden`.
    pub attention_dim: Option<usize>,
    pub classes: usize,
    pub dropout_conv: f64,
    pub dropout_recurrent: f64,
    pub embeddings_trainable: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 100,
            max_len: 256,
            conv_widths: vec![2, 3, 4, 5, 6],
            filters: 64,
            pool: 2,
            lstm_hidden: 128,
            attention_dim: None,
            classes: 0,
            dropout_conv: 0.5,
            dropout_recurrent: 0.25,
            embeddings_trainable: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn attention_dim(&self) -> usize {
        self.attention_dim.unwrap_or(2 * self.lstm_hidden)
    }

    /// Width of the concatenated convolution features.
    pub fn conv_features(&self) -> usize {
        self.conv_widths.len() * self.filters
    }

    /// Width of BiLSTM states.
    pub fn state_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// Sequence length after pooling.
    pub fn pooled_len(&self) -> usize {
        self.max_len.div_ceil(self.pool)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("max_len", self.max_len),
            ("filters", self.filters),
            ("pool", self.pool),
            ("lstm_hidden", self.lstm_hidden),
            ("attention_dim", self.attention_dim()),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "must be at least 2"));
        }
        ConvBlock::validate_widths(&self.conv_widths)?;
        let widest = *self.conv_widths.iter().max().expect("validated non-empty");
        if self.max_len < widest {
            return Err(Error::config(
                "max_len",
                format!("must be >= widest convolution ({widest})"),
            ));
        }
        layers::validate_dropout("dropout_conv", self.dropout_conv)?;
        layers::validate_dropout("dropout_recurrent", self.dropout_recurrent)?;
        Ok(())
    }
}

/// Allocates and initialises every weight. Same seed, same bytes.
pub fn build_model(config: &ModelConfig) -> Result<Parameters<f32>> {
    build_model_as::<f32>(config)
}

pub fn build_model_as<T: Real>(config: &ModelConfig) -> Result<Parameters<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Parameters::new();
    let h = config.lstm_hidden;
    EmbeddingTable::init(&mut params, EMBEDDING, config.vocab_size, config.embed_dim, &mut rng)?;
    ConvBlock::init(
        &mut params,
        CONV,
        &config.conv_widths,
        config.embed_dim,
        config.filters,
        &mut rng,
    )?;
    LstmCell::init(&mut params, LSTM_FORWARD, config.conv_features(), h, &mut rng);
    LstmCell::init(&mut params, LSTM_BACKWARD, config.conv_features(), h, &mut rng);
    AttentionHead::init(
        &mut params,
        ATTENTION,
        config.state_dim(),
        config.attention_dim(),
        &mut rng,
    );
    Dense::init(&mut params, CLASSIFIER, config.state_dim(), config.classes, &mut rng);
    Ok(params)
}

/// Checks that `params` has exactly the names and shapes `config` implies.
pub fn check_parameters<T: Real>(params: &Parameters<T>, config: &ModelConfig) -> Result<()> {
    let expected = expected_shapes(config)?;
    if params.len() != expected.len() {
        return Err(Error::Contract(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for (name, shape) in expected {
        let t = params.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Contract(format!(
                "{name}: shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Names and shapes of every parameter tensor for `config`.
pub fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    let (d, f, h) = (config.embed_dim, config.filters, config.lstm_hidden);
    let (s, a, c) = (config.state_dim(), config.attention_dim(), config.classes);
    let mut out = vec![(EMBEDDING.to_string(), vec![config.vocab_size, d])];
    for &k in &config.conv_widths {
        out.push((ConvBlock::weight_name(CONV, k), vec![k * d, f]));
        out.push((ConvBlock::bias_name(CONV, k), vec![f]));
    }
    for prefix in [LSTM_FORWARD, LSTM_BACKWARD] {
        out.push((format!("{prefix}.w_x"), vec![config.conv_features(), 4 * h]));
        out.push((format!("{prefix}.w_h"), vec![h, 4 * h]));
        out.push((format!("{prefix}.b"), vec![4 * h]));
    }
    out.push((format!("{ATTENTION}.w"), vec![s, a]));
    out.push((format!("{ATTENTION}.b"), vec![a]));
    out.push((format!("{ATTENTION}.z"), vec![a]));
    out.push((format!("{CLASSIFIER}.w"), vec![s, c]));
    out.push((format!("{CLASSIFIER}.b"), vec![c]));
    out.sort();
    Ok(out)
}

/// The network's layers bound to one graph.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    embedding: EmbeddingTable,
    conv: ConvBlock,
    forward_cell: LstmCell,
    backward_cell: LstmCell,
    attention: AttentionHead,
    classifier: Dense,
}

/// Output nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub probs: NodeId,
    pub alpha: NodeId,
}

impl Network {
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &Parameters<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.lstm_hidden;
        Ok(Self {
            config: config.clone(),
            embedding: EmbeddingTable::bind(g, params, EMBEDDING, config.embeddings_trainable)?,
            conv: ConvBlock::bind(
                g,
                params,
                CONV,
                &config.conv_widths,
                config.embed_dim,
                config.filters,
            )?,
            forward_cell: LstmCell::bind(g, params, LSTM_FORWARD, config.conv_features(), h)?,
            backward_cell: LstmCell::bind(g, params, LSTM_BACKWARD, config.conv_features(), h)?,
            attention: AttentionHead::bind(
                g,
                params,
                ATTENTION,
                config.state_dim(),
                config.attention_dim(),
            )?,
            classifier: Dense::bind(g, params, CLASSIFIER, config.state_dim(), config.classes)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ids: &[usize],
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        if ids.len() != cfg.max_len {
            return Err(Error::Contract(format!(
                "expected {} token ids, got {}",
                cfg.max_len,
                ids.len()
            )));
        }
        let x = layers::embed(g, ids, &self.embedding)?;
        let maps = cfg
            .conv_widths
            .iter()
            .map(|&k| layers::conv1d(g, x, &self.conv, k))
            .collect::<Result<Vec<_>>>()?;
        let features = g.concat(&maps, 1)?;
        let features = layers::dropout(g, features, cfg.dropout_conv, training, rng)?;
        let pooled = layers::max_pool_time(g, features, cfg.pool, cfg.pool)?;
        let fwd = layers::lstm_forward(g, pooled, &self.forward_cell, Direction::Forward)?;
        let bwd = layers::lstm_forward(g, pooled, &self.backward_cell, Direction::Backward)?;
        let states = g.concat(&[fwd, bwd], 1)?;
        let states = layers::dropout(g, states, cfg.dropout_recurrent, training, rng)?;
        let (context, alpha) = layers::attention(g, states, &self.attention)?;
        let probs = layers::dense_softmax(g, context, &self.classifier)?;
        Ok(ForwardNodes { probs, alpha })
    }
}

/// Class probabilities `[C]` and attention weights `[⌈m/p⌉]` for one input.
pub fn forward<T: Real>(
    params: &Parameters<T>,
    config: &ModelConfig,
    ids: &[usize],
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let net = Network::bind(&mut g, params, config)?;
    let out = net.forward(&mut g, ids, training, rng)?;
    Ok((g.value(out.probs).clone(), g.value(out.alpha).clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f32,
    pub alpha: Tensor<f32>,
}

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &Parameters<f32>, config: &ModelConfig, ids: &[usize]) -> Result<Prediction> {
    // Inference never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (probs, alpha) = forward(params, config, ids, false, &mut rng)?;
    let label = argmax(probs.data());
    Ok(Prediction {
        label,
        confidence: probs.data()[label],
        alpha,
    })
}

/// Half-open range of input token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn contains(&self, position: usize) -> bool {
        (self.start..self.end).contains(&position)
    }
}

/// Input token span covered by each pooled attention step.
pub fn attention_weights_to_tokens<T: Real>(alpha: &Tensor<T>, config: &ModelConfig) -> Vec<TokenSpan> {
    pooled_spans(alpha.len(), config.max_len, config.pool)
}

/// Step `j` covers `[j·pool, min(j·pool + pool, max_len))`.
pub fn pooled_spans(steps: usize, max_len: usize, pool: usize) -> Vec<TokenSpan> {
    (0..steps)
        .map(|j| TokenSpan {
            start: j * pool,
            end: (j * pool + pool).min(max_len),
        })
        .collect()
}

/// [`Classifier`] adapter so the trainer can drive the network.
#[derive(Debug, Clone)]
pub struct AttNet {
    pub config: ModelConfig,
}

impl Classifier for AttNet {
    type Input = Vec<usize>;

    fn probs<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Parameters<T>,
        input: &Vec<usize>,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        let net = Network::bind(g, params, &self.config)?;
        Ok(net.forward(g, input, training, rng)?.probs)
    }

    fn is_trainable(&self, name: &str) -> bool {
        name != EMBEDDING || self.config.embeddings_trainable
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            max_len: 12,
            filters: 4,
            lstm_hidden: 8,
            classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig { seed: 7, ..tiny() };
        assert_eq!(build_model(&cfg).unwrap(), build_model(&cfg).unwrap());
        let other = ModelConfig { seed: 8, ..tiny() };
        assert_ne!(build_model(&cfg).unwrap(), build_model(&other).unwrap());
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            filters: 2,
            lstm_hidden: 3,
            classes: 2,
            max_len: 8,
            ..ModelConfig::default()
        };
        let p = build_model(&cfg).unwrap();
        // embedding 10*4; conv sum_k (k*4*2 + 2) over k=2..6;
        // lstm 2 * (10*12 + 3*12 + 12); attention 6*6 + 6 + 6; classifier 6*2 + 2
        let expected = 40 + (20 * 8 + 5 * 2) + 2 * (120 + 36 + 12) + (36 + 12) + 14;
        assert_eq!(p.count(), expected);
        check_parameters(&p, &cfg).unwrap();
    }

    #[test]
    fn padding_row_zero_after_build() {
        let p = build_model(&tiny()).unwrap();
        assert!(p.get(EMBEDDING).unwrap().row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn config_validation_names_field() {
        let bad = ModelConfig { classes: 1, ..tiny() };
        match build_model(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "classes"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = ModelConfig { max_len: 5, ..tiny() };
        assert!(matches!(build_model(&bad), Err(Error::Config { field, .. }) if field == "max_len"));
        let bad = ModelConfig { dropout_conv: 1.0, ..tiny() };
        assert!(build_model(&bad).is_err());
    }

    #[test]
    fn zero_classifier_gives_uniform() {
        let cfg = tiny();
        let mut p = build_model(&cfg).unwrap();
        p.get_mut("classifier.w").unwrap().data_mut().fill(0.0);
        let ids: Vec<usize> = (0..12).map(|i| i % 20).collect();
        let pred = predict(&p, &cfg, &ids).unwrap();
        assert_eq!(pred.label, 0);
        assert!((pred.confidence - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(pred.alpha.len(), 6);
    }

    #[test]
    fn wrong_length_is_contract_error() {
        let cfg = tiny();
        let p = build_model(&cfg).unwrap();
        assert!(matches!(predict(&p, &cfg, &[2, 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn spans() {
        assert_eq!(
            pooled_spans(3, 3, 1),
            vec![
                TokenSpan { start: 0, end: 1 },
                TokenSpan { start: 1, end: 2 },
                TokenSpan { start: 2, end: 3 }
            ]
        );
        let s = pooled_spans(5, 10, 2);
        assert_eq!(s[0], TokenSpan { start: 0, end: 2 });
        assert_eq!(s[4], TokenSpan { start: 8, end: 10 });
        let s = pooled_spans(5, 9, 2);
        assert_eq!(s[4], TokenSpan { start: 8, end: 9 });
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = tiny();
        let p = build_model(&cfg).unwrap();
        let ids: Vec<usize> = (0..12).map(|i| (i * 7) % 20).collect();
        let a = predict(&p, &cfg, &ids).unwrap();
        let b = predict(&p, &cfg, &ids).unwrap();
        assert_eq!(a, b);
    }
}
