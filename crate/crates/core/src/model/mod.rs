//! Reward-function approximators `H(s, a)` with exact parameter gradients.
//!
//! Two families are provided:
//!
//! - [`LinearPerActionModel`]: one weight vector per action over the
//!   flattened observation (the TAMER baseline).
//! - [`DeepRewardModel`]: a frozen convolutional encoder followed by a small
//!   fully-connected head with one output node per action.
//!
//! Models split into a frozen feature map ([`RewardModel::features`]) and a
//! trainable part operating on those features. The learner caches features,
//! which is exact because the feature map never changes during training.

mod autoencoder;
mod nn;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{Observation, FRAME_STACK};
use crate::error::{Error, Result};

pub use autoencoder::{
    pretrain_autoencoder, Autoencoder, Optimizer, PretrainConfig, PretrainOutcome,
};
pub use nn::{
    Activation, Conv2d, ConvTranspose2d, Dense, Init, Layer, Sequential, TensorInfo, Trace,
};
pub use params::{load_params, read_manifest, save_params, Manifest, Persist, PARAMS_FORMAT};

/// Flat gradient over a model's trainable parameters, in parameter-file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Add for &Gradient {
    type Output = Gradient;

    fn add(self, rhs: &Gradient) -> Gradient {
        Gradient::new(
            self.values
                .iter()
                .zip(&rhs.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

/// One term of the weighted squared loss, over precomputed features.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    pub features: &'a [f64],
    pub action: usize,
    pub target: f64,
    pub weight: f64,
}

/// `w * (prediction - h)^2`.
pub fn weighted_squared_loss(prediction: f64, target: f64, weight: f64) -> f64 {
    let e = prediction - target;
    weight * e * e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default = "relu")]
    pub activation: Activation,
}

fn relu() -> Activation {
    Activation::Relu
}

/// Layer list of a [`ConvEncoder`]; the decoder is derived as its mirror.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub conv: Vec<ConvSpec>,
    pub latent_dim: usize,
    pub latent_activation: Activation,
}

impl Default for EncoderConfig {
    /// Desk-scale encoder for 32x32x2 inputs: two stride-2 3x3 convolutions
    /// (16 then 32 filters) and a dense map to 16 latent units. Wider 5x5
    /// kernels with fewer filters reconstruct the lane well but lose the
    /// ball, which is what the reward head most needs.
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            conv: vec![
                ConvSpec {
                    filters: 16,
                    kernel: 3,
                    stride: 2,
                    activation: Activation::Relu,
                },
                ConvSpec {
                    filters: 32,
                    kernel: 3,
                    stride: 2,
                    activation: Activation::Relu,
                },
            ],
            latent_dim: 16,
            latent_activation: Activation::Identity,
        }
    }
}

impl EncoderConfig {
    /// A 160x160x2 -> 100 instance expressed in the same schema.
    pub fn full_scale() -> Self {
        let spec = |filters, kernel, stride| ConvSpec {
            filters,
            kernel,
            stride,
            activation: Activation::Relu,
        };
        Self {
            input_height: 160,
            input_width: 160,
            conv: vec![
                spec(16, 8, 4),
                spec(16, 5, 2),
                spec(16, 3, 2),
                spec(16, 3, 1),
            ],
            latent_dim: 100,
            latent_activation: Activation::Identity,
        }
    }

    /// `(channels, height, width)` after each convolution.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = (FRAME_STACK, self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.conv.len());
        for (i, c) in self.conv.iter().enumerate() {
            if c.kernel == 0
                || c.stride == 0
                || c.filters == 0
                || c.kernel > shape.1
                || c.kernel > shape.2
            {
                return Err(Error::InvalidConfig(format!(
                    "encoder conv layer {i} ({}x{} kernel, stride {}) does not fit a {}x{} input",
                    c.kernel, c.kernel, c.stride, shape.1, shape.2
                )));
            }
            shape = (
                c.filters,
                (shape.1 - c.kernel) / c.stride + 1,
                (shape.2 - c.kernel) / c.stride + 1,
            );
            out.push(shape);
        }
        Ok(out)
    }

    pub fn input_len(&self) -> usize {
        FRAME_STACK * self.input_height * self.input_width
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig(
                "encoder latent_dim must be positive".into(),
            ));
        }
        self.conv_shapes().map(|_| ())
    }
}

/// Convolutional state encoder `f(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    config: EncoderConfig,
    net: Sequential,
}

impl ConvEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = config.conv_shapes()?;
        let mut layers = Vec::with_capacity(config.conv.len() + 1);
        let mut shape = (FRAME_STACK, config.input_height, config.input_width);
        for (spec, out) in config.conv.iter().zip(&shapes) {
            layers.push(Layer::Conv(Conv2d::zeros(
                shape,
                spec.filters,
                spec.kernel,
                spec.stride,
                spec.activation,
            )));
            shape = *out;
        }
        let flat = shape.0 * shape.1 * shape.2;
        layers.push(Layer::Dense(Dense::zeros(
            flat,
            config.latent_dim,
            config.latent_activation,
        )));
        let mut net = Sequential::new(layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..net.layers.len() {
            net.init_layer(i, init_for(&net.layers[i]), &mut rng);
        }
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (
            FRAME_STACK,
            self.config.input_height,
            self.config.input_width,
        )
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        self.net.params()
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        check_shape(self.input_shape(), obs)?;
        Ok(self.net.forward(obs.as_slice()))
    }
}

/// He-style uniform init for rectified layers, plain fan-in scaling otherwise.
fn init_for(layer: &Layer) -> Init {
    let act = match layer {
        Layer::Dense(l) => l.activation,
        Layer::Conv(l) => l.activation,
        Layer::Deconv(l) => l.activation,
    };
    let gain = if act == Activation::Relu {
        6f64.sqrt()
    } else {
        3f64.sqrt()
    };
    Init::UniformFanIn { gain }
}

fn check_shape(expected: (usize, usize, usize), obs: &Observation) -> Result<()> {
    if obs.shape() != expected {
        return Err(Error::shape(
            format!("observation {:?}", expected),
            format!("{:?}", obs.shape()),
        ));
    }
    Ok(())
}

/// Mirror-image deconvolutional decoder `g(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDecoder {
    output_activation: Activation,
    net: Sequential,
}

impl ConvDecoder {
    pub fn mirror(
        encoder: &EncoderConfig,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        encoder.validate()?;
        let shapes = encoder.conv_shapes()?;
        let input = (FRAME_STACK, encoder.input_height, encoder.input_width);
        let innermost = shapes.last().copied().unwrap_or(input);
        let mut layers = Vec::with_capacity(shapes.len() + 1);
        let first_act = if shapes.is_empty() {
            output_activation
        } else {
            Activation::Relu
        };
        layers.push(Layer::Dense(Dense::zeros(
            encoder.latent_dim,
            innermost.0 * innermost.1 * innermost.2,
            first_act,
        )));
        for i in (0..shapes.len()).rev() {
            let from = shapes[i];
            let to = if i == 0 { input } else { shapes[i - 1] };
            let spec = encoder.conv[i];
            let base = (from.1 - 1) * spec.stride + spec.kernel;
            let act = if i == 0 {
                output_activation
            } else {
                Activation::Relu
            };
            layers.push(Layer::Deconv(ConvTranspose2d::zeros(
                from,
                to.0,
                spec.kernel,
                spec.stride,
                to.1 - base,
                act,
            )));
        }
        let mut net = Sequential::new(layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..net.layers.len() {
            net.init_layer(i, init_for(&net.layers[i]), &mut rng);
        }
        Ok(Self {
            output_activation,
            net,
        })
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn decode(&self, latent: &[f64]) -> Vec<f64> {
        self.net.forward(latent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_units: 16,
            hidden_layers: 2,
            activation: Activation::Relu,
        }
    }
}

/// Fully-connected head `z(f(s), .)` with one linear output per action.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    config: HeadConfig,
    net: Sequential,
}

impl MlpHead {
    /// Hidden weights are uniform in `+-1/sqrt(fan_in)`; the output layer
    /// starts at zero so the untrained model predicts 0 everywhere.
    pub fn new(inputs: usize, num_actions: usize, config: HeadConfig, seed: u64) -> Result<Self> {
        if inputs == 0 || num_actions == 0 || (config.hidden_layers > 0 && config.hidden_units == 0)
        {
            return Err(Error::InvalidConfig(
                "head needs inputs, actions and hidden units > 0".into(),
            ));
        }
        let mut layers = Vec::with_capacity(config.hidden_layers + 1);
        let mut width = inputs;
        for _ in 0..config.hidden_layers {
            layers.push(Layer::Dense(Dense::zeros(
                width,
                config.hidden_units,
                config.activation,
            )));
            width = config.hidden_units;
        }
        layers.push(Layer::Dense(Dense::zeros(
            width,
            num_actions,
            Activation::Identity,
        )));
        let mut net = Sequential::new(layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = net.layers.len() - 1;
        for i in 0..last {
            net.init_layer(i, Init::UniformFanIn { gain: 1.0 }, &mut rng);
        }
        net.init_layer(last, Init::Zeros, &mut rng);
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn inputs(&self) -> usize {
        self.net.input_len()
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_len()
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }
}

/// Frozen encoder plus trainable head: `H(s, a) = head(encoder(s))[a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepRewardModel {
    encoder: ConvEncoder,
    head: MlpHead,
}

impl DeepRewardModel {
    pub fn new(
        encoder: ConvEncoder,
        num_actions: usize,
        head: HeadConfig,
        seed: u64,
    ) -> Result<Self> {
        let head = MlpHead::new(encoder.latent_dim(), num_actions, head, seed)?;
        Ok(Self { encoder, head })
    }

    pub fn from_parts(encoder: ConvEncoder, head: MlpHead) -> Result<Self> {
        if head.inputs() != encoder.latent_dim() {
            return Err(Error::shape(
                format!("head input {}", encoder.latent_dim()),
                head.inputs(),
            ));
        }
        Ok(Self { encoder, head })
    }

    pub fn encoder(&self) -> &ConvEncoder {
        &self.encoder
    }

    pub fn head(&self) -> &MlpHead {
        &self.head
    }

    /// Gradient of the batch-mean loss with respect to encoder and head
    /// parameters, backpropagating through the encoder. Interactive
    /// training never applies the encoder part; this exists so the full
    /// chain can be checked against finite differences.
    pub fn gradient_through_encoder(
        &self,
        batch: &[(&Observation, usize, f64, f64)],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len() as f64;
        let mut genc = vec![0.0; self.encoder.param_count()];
        let mut ghead = vec![0.0; self.head.net.param_count()];
        for &(obs, action, target, weight) in batch {
            check_shape(self.encoder.input_shape(), obs)?;
            check_action(action, self.head.num_actions())?;
            let etrace = self.encoder.net.forward_trace(obs.as_slice());
            let latent = etrace.output();
            let htrace = self.head.net.forward_trace(latent);
            let mut dout = vec![0.0; self.head.num_actions()];
            dout[action] = 2.0 * weight * (htrace.output()[action] - target) / n;
            let dlatent = self
                .head
                .net
                .backward(latent, &htrace, &dout, &mut ghead, true)
                .expect("input gradient requested");
            self.encoder
                .net
                .backward(obs.as_slice(), &etrace, &dlatent, &mut genc, false);
        }
        Ok((genc, ghead))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    /// Append a constant 1 feature.
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { bias: true }
    }
}

/// One linear weight vector per action over the flattened observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPerActionModel {
    input_shape: (usize, usize, usize),
    bias: bool,
    num_actions: usize,
    /// `[num_actions][feature_dim]`
    weights: Vec<f64>,
}

impl LinearPerActionModel {
    pub fn zeros(
        input_shape: (usize, usize, usize),
        num_actions: usize,
        config: LinearConfig,
    ) -> Self {
        let feature_dim = input_shape.0 * input_shape.1 * input_shape.2 + usize::from(config.bias);
        Self {
            input_shape,
            bias: config.bias,
            num_actions,
            weights: vec![0.0; num_actions * feature_dim],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len() / self.num_actions
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, action: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.weights[action * d..(action + 1) * d]
    }

    pub fn row_mut(&mut self, action: usize) -> &mut [f64] {
        let d = self.feature_dim();
        &mut self.weights[action * d..(action + 1) * d]
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::shape(self.weights.len(), weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("linear weights"));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn value(&self, features: &[f64], action: usize) -> f64 {
        self.row(action)
            .iter()
            .zip(features)
            .map(|(w, x)| w * x)
            .sum()
    }
}

/// Configuration-level choice of model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Linear {
        #[serde(default = "yes")]
        bias: bool,
    },
    Deep {
        #[serde(default)]
        head: HeadConfig,
    },
}

/// The reward model `H` used by the learner.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    Linear(LinearPerActionModel),
    Deep(DeepRewardModel),
}

fn check_action(action: usize, num_actions: usize) -> Result<()> {
    if action >= num_actions {
        return Err(Error::shape(format!("action < {num_actions}"), action));
    }
    Ok(())
}

impl RewardModel {
    pub fn num_actions(&self) -> usize {
        match self {
            RewardModel::Linear(m) => m.num_actions,
            RewardModel::Deep(m) => m.head.num_actions(),
        }
    }

    /// Expected `(channels, height, width)` of observations.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self {
            RewardModel::Linear(m) => m.input_shape,
            RewardModel::Deep(m) => m.encoder.input_shape(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            RewardModel::Linear(m) => m.feature_dim(),
            RewardModel::Deep(m) => m.encoder.latent_dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RewardModel::Linear(_) => "linear",
            RewardModel::Deep(_) => "deep",
        }
    }

    /// Output of the frozen part of the model: the flattened observation
    /// (plus bias) for linear models, the encoder latent for deep ones.
    pub fn features(&self, obs: &Observation) -> Result<Vec<f64>> {
        match self {
            RewardModel::Linear(m) => {
                check_shape(m.input_shape, obs)?;
                let mut f = Vec::with_capacity(m.feature_dim());
                f.extend_from_slice(obs.as_slice());
                if m.bias {
                    f.push(1.0);
                }
                Ok(f)
            }
            RewardModel::Deep(m) => m.encoder.encode(obs),
        }
    }

    /// `H(s, .)` from precomputed features.
    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        match self {
            RewardModel::Linear(m) => (0..m.num_actions).map(|a| m.value(features, a)).collect(),
            RewardModel::Deep(m) => m.head.net.forward(features),
        }
    }

    /// `H(s, .)`.
    pub fn forward(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.predict(&self.features(obs)?))
    }

    pub fn loss(&self, sample: &WeightedSample<'_>) -> f64 {
        weighted_squared_loss(
            self.predict(sample.features)[sample.action],
            sample.target,
            sample.weight,
        )
    }

    /// Mean loss over a batch.
    pub fn batch_loss(&self, batch: &[WeightedSample<'_>]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        batch.iter().map(|s| self.loss(s)).sum::<f64>() / batch.len() as f64
    }

    pub fn trainable_len(&self) -> usize {
        match self {
            RewardModel::Linear(m) => m.weights.len(),
            RewardModel::Deep(m) => m.head.net.param_count(),
        }
    }

    pub fn trainable_params(&self) -> Vec<f64> {
        match self {
            RewardModel::Linear(m) => m.weights.clone(),
            RewardModel::Deep(m) => m.head.net.params(),
        }
    }

    /// Batch-mean gradient of the weighted squared loss with respect to the
    /// trainable parameters. Error flows only through each sample's own
    /// action output.
    pub fn grad(&self, batch: &[WeightedSample<'_>]) -> Result<Gradient> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len() as f64;
        let mut g = vec![0.0; self.trainable_len()];
        match self {
            RewardModel::Linear(m) => {
                let d = m.feature_dim();
                for s in batch {
                    check_action(s.action, m.num_actions)?;
                    if s.features.len() != d {
                        return Err(Error::shape(d, s.features.len()));
                    }
                    let scale = 2.0 * s.weight * (m.value(s.features, s.action) - s.target) / n;
                    for (gi, x) in g[s.action * d..(s.action + 1) * d]
                        .iter_mut()
                        .zip(s.features)
                    {
                        *gi += scale * x;
                    }
                }
            }
            RewardModel::Deep(m) => {
                let head = &m.head.net;
                let mut dout = vec![0.0; m.head.num_actions()];
                for s in batch {
                    check_action(s.action, m.head.num_actions())?;
                    if s.features.len() != head.input_len() {
                        return Err(Error::shape(head.input_len(), s.features.len()));
                    }
                    let trace = head.forward_trace(s.features);
                    dout.fill(0.0);
                    dout[s.action] = 2.0 * s.weight * (trace.output()[s.action] - s.target) / n;
                    head.backward(s.features, &trace, &dout, &mut g, false);
                }
            }
        }
        Ok(Gradient::new(g))
    }

    /// `params -= eta * grad` on the trainable parameters only.
    pub fn sgd_step(&mut self, grad: &Gradient, eta: f64) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step size must be positive, got {eta}"
            )));
        }
        if grad.len() != self.trainable_len() {
            return Err(Error::shape(self.trainable_len(), grad.len()));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        match self {
            RewardModel::Linear(m) => {
                for (w, g) in m.weights.iter_mut().zip(grad.as_slice()) {
                    *w -= eta * g;
                }
            }
            RewardModel::Deep(m) => m.head.net.descend(grad.as_slice(), eta),
        }
        Ok(())
    }

    pub fn as_linear_mut(&mut self) -> Option<&mut LinearPerActionModel> {
        match self {
            RewardModel::Linear(m) => Some(m),
            RewardModel::Deep(_) => None,
        }
    }

    pub fn as_deep(&self) -> Option<&DeepRewardModel> {
        match self {
            RewardModel::Deep(m) => Some(m),
            RewardModel::Linear(_) => None,
        }
    }
}
