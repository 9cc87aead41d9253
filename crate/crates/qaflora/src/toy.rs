//! Deterministic toy-model and toy-adapter generation.
//!
//! Weights are drawn from a SplitMix64 stream so the same seed produces
//! byte-identical containers on every platform, independent of external
//! RNG crate versions.

use std::collections::BTreeMap;

use crate::adapter::{LoraAdapter, LoraLayer};
use crate::error::Result;
use crate::model::{
    target_name, AdapterStreamMode, BaseModel, BlockWeights, ModelConfig, PositionEncoding,
    Projection, Tensor32,
};

/// SplitMix64 pseudo-random stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// Convenience config for toy models: rotary positions, RMS eps 1e-5,
/// merged adapter stream, lens normalization on.
pub fn toy_config(
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    vocab_size: usize,
    max_seq_len: usize,
) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_ff,
        vocab_size,
        max_seq_len,
        norm_eps: 1e-5,
        positions: PositionEncoding::Rope,
        lens_apply_final_norm: true,
        adapter_stream_mode: AdapterStreamMode::Merged,
    }
}

fn draw_tensor(rng: &mut SplitMix64, rows: usize, cols: usize, bound: f64) -> Tensor32 {
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| rng.uniform(-bound, bound) as f32)
        .collect();
    Tensor32::new(rows, cols, data).expect("toy tensor shape")
}

fn draw_gains(rng: &mut SplitMix64, n: usize) -> Vec<f32> {
    (0..n).map(|_| (1.0 + rng.uniform(-0.1, 0.1)) as f32).collect()
}

/// Build a toy model with pseudo-random weights drawn from `seed`.
pub fn make_toy_model(seed: u64, config: &ModelConfig) -> Result<BaseModel> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let d = config.d_model;
    let lin = 1.0 / (d as f64).sqrt();
    let ff = 1.0 / (config.d_ff as f64).sqrt();

    let embedding = draw_tensor(&mut rng, config.vocab_size, d, 0.1);
    let pos_embedding = match config.positions {
        PositionEncoding::Learned => Some(draw_tensor(&mut rng, config.max_seq_len, d, 0.1)),
        PositionEncoding::Rope => None,
    };
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(BlockWeights {
            attn_norm: draw_gains(&mut rng, d),
            attn_q: draw_tensor(&mut rng, d, d, lin),
            attn_k: draw_tensor(&mut rng, d, d, lin),
            attn_v: draw_tensor(&mut rng, d, d, lin),
            attn_o: draw_tensor(&mut rng, d, d, lin),
            ffn_norm: draw_gains(&mut rng, d),
            ffn_gate: draw_tensor(&mut rng, config.d_ff, d, lin),
            ffn_up: draw_tensor(&mut rng, config.d_ff, d, lin),
            ffn_down: draw_tensor(&mut rng, d, config.d_ff, ff),
        });
    }
    let final_norm = draw_gains(&mut rng, d);
    let lm_head = draw_tensor(&mut rng, config.vocab_size, d, lin);
    BaseModel::new(config.clone(), embedding, pos_embedding, blocks, final_norm, lm_head)
}

/// Every LoRA-eligible target of `config`: all attention and feed-forward
/// projections of every block.
pub fn all_targets(config: &ModelConfig) -> Vec<String> {
    let mut out = Vec::with_capacity(config.n_layers * Projection::ALL.len());
    for l in 0..config.n_layers {
        for proj in Projection::ALL {
            out.push(target_name(l, proj));
        }
    }
    out
}

/// Build a toy adapter with pseudo-random factors.
///
/// `magnitude` multiplies every factor entry, so the materialized delta
/// scales with `magnitude²`; magnitude 0 produces exactly zero deltas.
/// `targets = None` covers all attention and feed-forward projections.
pub fn make_toy_adapter(
    id: impl Into<String>,
    seed: u64,
    model: &BaseModel,
    rank: usize,
    scale: f64,
    targets: Option<&[String]>,
    magnitude: f64,
) -> Result<LoraAdapter> {
    let mut rng = SplitMix64::new(seed);
    let config = model.config();
    let owned;
    let targets: &[String] = match targets {
        Some(t) => t,
        None => {
            owned = all_targets(config);
            &owned
        }
    };
    let mut layers = Vec::with_capacity(targets.len());
    for target in targets {
        let (d_out, d_in) = model.target_shape(target).ok_or_else(|| {
            crate::error::Error::AdapterBinding {
                details: vec![format!("{target}: unknown target")],
            }
        })?;
        let a_bound = magnitude / (d_in as f64).sqrt();
        let b_bound = magnitude / (rank as f64).sqrt();
        let a = draw_tensor(&mut rng, rank, d_in, a_bound);
        let b = draw_tensor(&mut rng, d_out, rank, b_bound);
        layers.push(LoraLayer::new(target.clone(), a, b, scale)?);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "toy".to_string());
    metadata.insert("seed".to_string(), seed.to_string());
    LoraAdapter::new(id, layers, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_is_deterministic() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = toy_config(2, 32, 4, 64, 64, 128);
        let m1 = make_toy_model(7, &cfg).unwrap();
        let m2 = make_toy_model(7, &cfg).unwrap();
        assert_eq!(m1.embedding().as_slice(), m2.embedding().as_slice());
        assert_eq!(m1.lm_head().as_slice(), m2.lm_head().as_slice());
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = toy_config(2, 32, 4, 64, 64, 128);
        let m1 = make_toy_model(7, &cfg).unwrap();
        let m2 = make_toy_model(8, &cfg).unwrap();
        assert_ne!(m1.embedding().as_slice(), m2.embedding().as_slice());
    }

    #[test]
    fn zero_magnitude_adapter_has_zero_factors() {
        let cfg = toy_config(2, 32, 4, 64, 64, 128);
        let model = make_toy_model(7, &cfg).unwrap();
        let adapter = make_toy_adapter("z", 11, &model, 4, 16.0, None, 0.0).unwrap();
        for layer in adapter.layers() {
            assert!(layer.a_factor().as_slice().iter().all(|&v| v == 0.0));
            assert!(layer.b_factor().as_slice().iter().all(|&v| v == 0.0));
        }
    }
}
