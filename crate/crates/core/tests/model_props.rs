mod common;

use common::{encoder_gradient_error, head_gradient_error, linear_gradient_error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamer_core::envsim::{EnvConfig, Observation};
use tamer_core::learner::{select_action, TieBreak};
use tamer_core::model::{
    load_params, pretrain_autoencoder, save_params, Activation, ConvEncoder, DeepRewardModel,
    EncoderConfig, Gradient, HeadConfig, LinearConfig, LinearPerActionModel, Persist,
    PretrainConfig, RewardModel, WeightedSample,
};
use tamer_core::session::collect_random_states;

#[test]
fn linear_gradients_match_finite_differences() {
    for seed in 0..20 {
        let e = linear_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e:.2e}");
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    for seed in 0..20 {
        let e = head_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e:.2e}");
    }
}

#[test]
fn encoder_chain_gradients_match_finite_differences() {
    for seed in 0..20 {
        let e = encoder_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e:.2e}");
    }
}

fn linear_with(weights: Vec<f64>) -> RewardModel {
    let mut m = RewardModel::Linear(LinearPerActionModel::zeros(
        (2, 2, 2),
        4,
        LinearConfig { bias: true },
    ));
    m.as_linear_mut().unwrap().set_weights(weights).unwrap();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Scaling the model by a positive constant never changes the greedy action.
    #[test]
    fn greedy_policy_is_scale_invariant(w in prop::collection::vec(-1.0f64..1.0, 36), x in prop::collection::vec(0.0f64..1.0, 8), c in 1e-3f64..1e3) {
        let obs = Observation::from_raw(2, 2, x).unwrap();
        let a = linear_with(w.clone());
        let b = linear_with(w.iter().map(|v| v * c).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qa = a.forward(&obs).unwrap();
        let qb = b.forward(&obs).unwrap();
        prop_assert_eq!(select_action(&qa, TieBreak::LowestIndex, &mut rng), select_action(&qb, TieBreak::LowestIndex, &mut rng));
    }

    /// One sample moves only the output for its own action.
    #[test]
    fn single_sample_update_touches_one_output(w in prop::collection::vec(-1.0f64..1.0, 36), x in prop::collection::vec(0.0f64..1.0, 8), action in 0usize..4, target in -1.0f64..1.0, weight in 0.01f64..1.0) {
        let obs = Observation::from_raw(2, 2, x).unwrap();
        let mut m = linear_with(w);
        let before = m.forward(&obs).unwrap();
        let f = m.features(&obs).unwrap();
        let g = m.grad(&[WeightedSample { features: &f, action, target, weight }]).unwrap();
        m.sgd_step(&g, 0.1).unwrap();
        let after = m.forward(&obs).unwrap();
        for a in 0..4 {
            if a != action {
                prop_assert_eq!(before[a], after[a]);
            }
        }
    }

    #[test]
    fn loss_is_nonnegative(w in prop::collection::vec(-1.0f64..1.0, 36), x in prop::collection::vec(-1.0f64..1.0, 9), action in 0usize..4, target in -5.0f64..5.0, weight in 0.0f64..1.0) {
        let m = linear_with(w);
        let loss = m.loss(&WeightedSample { features: &x, action, target, weight });
        prop_assert!(loss >= 0.0);
    }
}

#[test]
fn deep_head_update_touches_one_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = ConvEncoder::new(EncoderConfig::default(), 1).unwrap();
    let m0 = RewardModel::Deep(DeepRewardModel::new(enc, 4, HeadConfig::default(), 2).unwrap());
    let p: Vec<f64> = (0..m0.flat_params().len())
        .map(|_| rng.random_range(-0.3..0.3))
        .collect();
    let model = RewardModel::rebuild("deep", &m0.architecture(), &p).unwrap();
    let f: Vec<f64> = (0..model.feature_dim())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    for action in 0..4 {
        let g = model
            .grad(&[WeightedSample {
                features: &f,
                action,
                target: 1.0,
                weight: 0.5,
            }])
            .unwrap();
        // The last layer's weights and biases for other actions get no gradient.
        let head = model.as_deep().unwrap().head();
        let hidden = head.config().hidden_units;
        let n = g.len();
        let out_w = &g.as_slice()[n - 4 * hidden - 4..n - 4];
        let out_b = &g.as_slice()[n - 4..];
        for a in 0..4 {
            let row = &out_w[a * hidden..(a + 1) * hidden];
            if a != action {
                assert!(
                    row.iter().all(|&v| v == 0.0) && out_b[a] == 0.0,
                    "action {action} leaked into {a}"
                );
            } else {
                assert!(out_b[a] != 0.0);
            }
        }
    }
}

#[test]
fn zero_gradient_step_is_a_no_op() {
    let mut m = linear_with((0..36).map(|i| i as f64 / 36.0).collect());
    let before = m.clone();
    m.sgd_step(&Gradient::zeros(36), 0.5).unwrap();
    assert_eq!(m, before);
}

#[test]
fn dense_autoencoder_can_learn_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let states: Vec<Observation> = (0..100)
        .map(|_| {
            Observation::from_raw(2, 2, (0..8).map(|_| rng.random_range(0.0..1.0)).collect())
                .unwrap()
        })
        .collect();
    let cfg = EncoderConfig {
        input_height: 2,
        input_width: 2,
        conv: vec![],
        latent_dim: 8,
        latent_activation: Activation::Identity,
    };
    let out = pretrain_autoencoder(
        &states,
        cfg,
        &PretrainConfig {
            epochs: 300,
            batch_size: 10,
            learning_rate: 1e-2,
            ..Default::default()
        },
    )
    .unwrap();
    let loss = out.autoencoder.reconstruction_loss(&states).unwrap();
    assert!(loss < 1e-3, "reconstruction loss {loss}");
}

#[test]
fn saved_models_reload_with_bit_exact_outputs() {
    let env = EnvConfig::default();
    let states = collect_random_states(&env, 100, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let enc = ConvEncoder::new(EncoderConfig::default(), 6).unwrap();
    let m0 = RewardModel::Deep(DeepRewardModel::new(enc, 4, HeadConfig::default(), 7).unwrap());
    let p: Vec<f64> = (0..m0.flat_params().len())
        .map(|_| rng.random_range(-0.2..0.2))
        .collect();
    let deep = RewardModel::rebuild("deep", &m0.architecture(), &p).unwrap();
    let lin = linear_with((0..36).map(|_| rng.random_range(-1.0..1.0)).collect());

    let mut bytes = Vec::new();
    save_params(&deep, Some(7), &mut bytes).unwrap();
    let (back, manifest): (RewardModel, _) = load_params(bytes.as_slice()).unwrap();
    assert_eq!(manifest.param_count, p.len());
    for s in &states {
        let a = deep.forward(s).unwrap();
        let b = back.forward(s).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let mut bytes = Vec::new();
    save_params(&lin, None, &mut bytes).unwrap();
    let (back, _): (RewardModel, _) = load_params(bytes.as_slice()).unwrap();
    assert_eq!(back, lin);
}
