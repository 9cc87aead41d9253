//! Engine-vs-oracle spot checks on small fixtures. The full sweep lives in
//! the acceptance suite; these narrow failures down faster.

#![allow(clippy::needless_range_loop)]

mod common;

use common::{close_rel, dense_delta, oracle_kl, OracleModel};
use qaflora::*;

fn toy() -> BaseModel {
    make_toy_model(7, &toy_config(2, 32, 4, 64, 259, 128)).unwrap()
}

#[test]
fn base_capture_matches_oracle() {
    let model = toy();
    let oracle = OracleModel::from_model(&model);
    let tokens = ByteTokenizer::new().encode_str("check the streams");
    let trace = model
        .forward_capture(&tokens, None, None, Granularity::AllTokens)
        .unwrap();
    let reference = oracle.capture(&tokens);
    for l in 0..trace.n_layers() {
        for p in 0..tokens.len() {
            let engine = trace.hidden(l, p);
            for (c, (&a, &b)) in engine.as_slice().iter().zip(reference[l][p].iter()).enumerate() {
                assert!(
                    close_rel(a, b, 1e-9),
                    "layer {l} pos {p} dim {c}: engine {a} vs oracle {b}"
                );
            }
        }
    }
}

#[test]
fn merged_adapter_capture_matches_dense_merge_oracle() {
    let model = toy();
    let adapter = make_toy_adapter("a", 11, &model, 4, 16.0, None, 1.0).unwrap();
    let tokens = ByteTokenizer::new().encode_str("adapter stream");
    let trace = model
        .forward_capture(&tokens, Some(&adapter), None, Granularity::AllTokens)
        .unwrap();
    let mut oracle = OracleModel::from_model(&model);
    for layer in adapter.layers() {
        let (block, proj) = parse_target(layer.target()).unwrap();
        oracle.merge_delta(block, proj, layer, 1.0);
    }
    let reference = oracle.capture(&tokens);
    for l in 0..trace.n_layers() {
        let engine = trace.hidden(l, tokens.len() - 1);
        for (&a, &b) in engine.as_slice().iter().zip(reference[l].last().unwrap().iter()) {
            assert!(close_rel(a, b, 1e-6), "layer {l}: engine {a} vs oracle {b}");
        }
    }
}

#[test]
fn lens_matches_oracle() {
    let model = toy();
    let oracle = OracleModel::from_model(&model);
    let tokens = ByteTokenizer::new().encode_str("lens check");
    let trace = model
        .forward_capture(&tokens, None, None, Granularity::LastToken)
        .unwrap();
    for l in 0..trace.n_layers() {
        let hidden = trace.last_token(l);
        let engine = model.logit_lens(&hidden).unwrap();
        let reference = oracle.lens(hidden.as_slice());
        for (&a, &b) in engine.as_slice().iter().zip(reference.iter()) {
            assert!((a - b).abs() <= 1e-12, "layer {l}: {a} vs {b}");
        }
    }
}

#[test]
fn kl_matches_oracle_formulation() {
    let mut rng = SplitMix64::new(42);
    for _ in 0..50 {
        let dim = 2 + (rng.next_u64() % 300) as usize;
        let za: Vec<f64> = (0..dim).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let zb: Vec<f64> = (0..dim).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let p = softmax(&Vector::new(za)).unwrap();
        let q = softmax(&Vector::new(zb)).unwrap();
        let engine = kl_divergence(&p, &q, KL_FLOOR_DEFAULT).unwrap();
        let reference = oracle_kl(p.as_slice(), q.as_slice());
        assert!((engine - reference).abs() <= 1e-10 * reference.abs().max(1.0));
    }
}

#[test]
fn delta_matrix_matches_triple_loop() {
    let model = toy();
    let adapter = make_toy_adapter("a", 11, &model, 4, 16.0, None, 1.0).unwrap();
    for layer in adapter.layers() {
        let cached = layer.delta_matrix();
        let reference = dense_delta(layer);
        for i in 0..cached.rows() {
            for j in 0..cached.cols() {
                assert!(close_rel(cached.get(i, j), reference[i][j], 1e-12));
            }
        }
    }
}
