mod common;

use ced_core::corpus::partition;
use ced_core::encoder::{encode, StackedGru};
use ced_core::model::Head;
use ced_core::numerics::{grad_check, Graph, ParamStore, Sampling, DEFAULT_EPSILON};
use ced_core::textfeat::{featurize_intervals, FeatureTrace};
use ced_core::{CedModel, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{refs, scramble, synthetic, toy_config};

fn random_trace(rng: &mut ChaCha8Rng, steps: usize, dim: usize, scale: f64) -> FeatureTrace {
    FeatureTrace {
        stream_id: "r".into(),
        dim,
        columns: (0..steps)
            .map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect())
            .collect(),
    }
}

fn gru(seed: u64, input: usize, hidden: &[usize]) -> (ParamStore, StackedGru) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gru = StackedGru::init(&mut store, input, hidden, true, &mut rng).unwrap();
    (store, gru)
}

#[test]
fn states_stay_inside_unit_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..20 {
        let (store, g) = gru(seed, 6, &[5, 4]);
        let trace = random_trace(&mut rng, 30, 6, 5.0);
        let h = encode(&trace, &store, &g, None).unwrap();
        assert_eq!(h.states.len(), 30);
        assert!(h.states.iter().flatten().all(|x| x.abs() < 1.0));
    }
}

#[test]
fn prefix_encoding_matches_full() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (store, g) = gru(3, 7, &[6, 6]);
    let trace = random_trace(&mut rng, 12, 7, 1.0);
    let full = encode(&trace, &store, &g, Some(&[0.25, -0.5])).unwrap();
    for k in 1..=12 {
        let prefix = FeatureTrace {
            columns: trace.columns[..k].to_vec(),
            ..trace.clone()
        };
        let part = encode(&prefix, &store, &g, Some(&[0.25, -0.5])).unwrap();
        assert_eq!(part.states[..], full.states[..k]);
    }
    assert!(full.states.iter().all(|h| h.len() == 8 && h[6..] == [0.25, -0.5]));
}

#[test]
fn streaming_scan_matches_offline_curve() {
    let streams = synthetic(30, 4, 0.3, 60.0);
    for variant in [Variant::CedCnn, Variant::Ced, Variant::TfidfLin] {
        let model = CedModel::init(&toy_config(variant, 4), &refs(&streams)).unwrap();
        for s in &streams {
            let p = model.prepare(s).unwrap();
            let offline = model.stream_pass(&p, false).unwrap().probs;
            for k in 1..=p.num_steps() {
                let mut online = Vec::new();
                model
                    .scan_prepared(&p, k, &mut |_, prob| {
                        online.push(prob);
                        true
                    })
                    .unwrap();
                assert_eq!(online[..], offline[..k]);
            }
        }
    }
}

#[test]
fn model_states_match_value_level_encoder() {
    let streams = synthetic(10, 5, 0.3, 50.0);
    let model = CedModel::init(&toy_config(Variant::Ced, 5), &refs(&streams)).unwrap();
    let Head::Recurrent { gru, readout } = &model.head else {
        panic!("recurrent head expected")
    };
    let s = model.params.get(*readout).data();
    for stream in &streams {
        let seq = partition(stream, 10).unwrap();
        let trace = featurize_intervals(&seq, &model.featurizer, &model.params).unwrap();
        let h = encode(&trace, &model.params, gru, None).unwrap();
        let p = model.prepare(stream).unwrap();
        let probs = model.stream_pass(&p, false).unwrap().probs;
        for (state, prob) in h.states.iter().zip(&probs) {
            let logit: f64 = state.iter().zip(s).map(|(a, b)| a * b).sum();
            assert!((ced_core::numerics::sigmoid(logit) - prob).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut store, g) = gru(6, 4, &[5, 3]);
    let trace = random_trace(&mut rng, 5, 4, 1.0);
    let loss_of = |s: &ParamStore, grad: bool| {
        let mut graph = Graph::new(s);
        let xs: Vec<_> = trace
            .columns
            .iter()
            .map(|c| graph.constant(ced_core::numerics::Tensor::vector(c.clone())).unwrap())
            .collect();
        let hs = g.encode(&mut graph, &xs, None).unwrap();
        let all = graph.concat(&hs).unwrap();
        let sq = graph.mul(all, all).unwrap();
        let loss = graph.sum(sq).unwrap();
        let grads = grad.then(|| graph.backward(loss).unwrap());
        (graph.scalar(loss), graph.signature(), grads)
    };
    let (_, _, grads) = loss_of(&store, true);
    let report = grad_check(
        &mut store,
        &grads.unwrap(),
        |s| Ok(loss_of(s, false)).map(|(l, sig, _)| (l, sig)),
        DEFAULT_EPSILON,
        Sampling::All,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn scrambled_model_states_remain_bounded() {
    let streams = synthetic(20, 8, 0.3, 80.0);
    let mut model = CedModel::init(&toy_config(Variant::CedCnn, 8), &refs(&streams)).unwrap();
    scramble(&mut model, 8, 3.0);
    for s in &streams {
        let p = model.prepare(s).unwrap();
        let probs = model.stream_pass(&p, false).unwrap().probs;
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

proptest! {
    #[test]
    fn boundedness_holds_for_any_input(seed in 0u64..1000, steps in 1usize..20, scale in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, g) = gru(seed, 3, &[4, 4]);
        let trace = random_trace(&mut rng, steps, 3, scale);
        let h = encode(&trace, &store, &g, None).unwrap();
        prop_assert!(h.states.iter().flatten().all(|x| x.abs() < 1.0));
    }
}
