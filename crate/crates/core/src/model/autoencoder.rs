//! Unsupervised encoder pretraining by frame reconstruction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Activation, ConvDecoder, ConvEncoder, EncoderConfig};
use crate::envsim::Observation;
use crate::error::{Error, Result};

/// Samples handled per parallel task. Fixed so the summation order, and
/// therefore every bit of the result, does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: ConvEncoder,
    pub decoder: ConvDecoder,
}

impl Autoencoder {
    /// Fresh encoder and mirrored decoder with an identity output layer.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            decoder: ConvDecoder::mirror(&config, Activation::Identity, seed.wrapping_add(1))?,
            encoder: ConvEncoder::new(config, seed)?,
        })
    }

    pub fn reconstruct(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.decoder.decode(&self.encoder.encode(obs)?))
    }

    /// Mean per-pixel squared reconstruction error.
    pub fn reconstruction_loss(&self, states: &[Observation]) -> Result<f64> {
        if states.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for s in states {
            self.encoder.encode(s)?;
        }
        let per: Vec<f64> = states
            .par_chunks(CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|s| sample_loss(self, s.as_slice()))
                    .sum::<f64>()
            })
            .collect();
        Ok(per.iter().sum::<f64>() / states.len() as f64)
    }

    fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.network().param_count()
    }

    /// Gradient of the mean per-pixel squared error over `batch`.
    fn gradient(&self, batch: &[&Observation]) -> Vec<f64> {
        let ne = self.encoder.param_count();
        let np = self.param_count();
        let partial: Vec<Vec<f64>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; np];
                for obs in chunk {
                    let x = obs.as_slice();
                    let etrace = self.encoder.network().forward_trace(x);
                    let z = etrace.output();
                    let dtrace = self.decoder.network().forward_trace(z);
                    let scale = 2.0 / (x.len() as f64 * batch.len() as f64);
                    let dout: Vec<f64> = dtrace
                        .output()
                        .iter()
                        .zip(x)
                        .map(|(r, t)| scale * (r - t))
                        .collect();
                    let (genc, gdec) = g.split_at_mut(ne);
                    let dz = self
                        .decoder
                        .network()
                        .backward(z, &dtrace, &dout, gdec, true)
                        .expect("input gradient requested");
                    self.encoder
                        .network()
                        .backward(x, &etrace, &dz, genc, false);
                }
                g
            })
            .collect();
        let mut total = vec![0.0; np];
        for g in partial {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        total
    }

    fn apply(&mut self, step: &[f64]) {
        let ne = self.encoder.param_count();
        self.encoder.network_mut().descend(&step[..ne], 1.0);
        self.decoder.network_mut().descend(&step[ne..], 1.0);
    }
}

fn sample_loss(ae: &Autoencoder, x: &[f64]) -> f64 {
    let r = ae.decoder.decode(&ae.encoder.network().forward(x));
    r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        epsilon: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: beta1(),
            beta2: beta2(),
            epsilon: adam_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub autoencoder: Autoencoder,
    /// Reconstruction loss before training, then after each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains encoder and decoder jointly to reconstruct `states`. The result
/// is bit-for-bit reproducible for a given seed regardless of thread count.
pub fn pretrain_autoencoder(
    states: &[Observation],
    encoder: EncoderConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if states.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(
            "pretraining needs batch_size > 0 and a positive learning rate".into(),
        ));
    }
    let mut ae = Autoencoder::new(encoder, config.seed)?;
    let mut history = Vec::with_capacity(config.epochs + 1);
    history.push(ae.reconstruction_loss(states)?);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_a11e);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let np = ae.param_count();
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let mut t = 0i32;
    let mut step = vec![0.0; np];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Observation> = idx.iter().map(|&i| &states[i]).collect();
            let g = ae.gradient(&batch);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("autoencoder gradient"));
            }
            match config.optimizer {
                Optimizer::Sgd => {
                    for (s, gi) in step.iter_mut().zip(&g) {
                        *s = config.learning_rate * gi;
                    }
                }
                Optimizer::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    t += 1;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..np {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        step[i] =
                            config.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                    }
                }
            }
            ae.apply(&step);
        }
        history.push(ae.reconstruction_loss(states)?);
    }
    Ok(PretrainOutcome {
        autoencoder: ae,
        loss_history: history,
    })
}
