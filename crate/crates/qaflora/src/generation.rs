//! Fused autoregressive generation and latency instrumentation.
//!
//! Deltas are applied on the fly as scaled low-rank products `B(Ax)` rather
//! than dense pre-merges: the per-layer fusion weight varies by query, so a
//! dense re-merge per query would dominate cost. A KV cache is kept for the
//! fused stream only; the capture passes that produce fusion weights never
//! share state with the decode loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterRegistry, BoundAdapter};
use crate::error::{Error, Result};
use crate::fusion::{divergence_profile_with, qa_flora_weights, FusionWeights, Measure, ProfileOptions};
use crate::math::{softmax, Vector};
use crate::model::{capture_pass, head_logits, AdapterRun, BaseModel, Granularity, Stream};
use crate::toy::SplitMix64;

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Argmax with lowest-token-id tie break (cross-platform determinism).
    Greedy,
    /// Softmax sampling at the given temperature (> 0), seeded.
    Temperature(f64),
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    /// Seeds the sampler; greedy output does not depend on it.
    pub seed: u64,
    pub stop_tokens: Vec<u32>,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            max_new_tokens: 64,
            sampling: Sampling::Greedy,
            seed: 0,
            stop_tokens: Vec::new(),
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if let Sampling::Temperature(t) = self.sampling {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Contract {
                    message: format!("sampling temperature must be positive, got {t}"),
                });
            }
        }
        Ok(())
    }
}

/// Timing summary for weight computation and fused decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Mean fusion-weight computation time per query per adapter.
    pub weight_compute_ms_per_adapter: f64,
    pub prefill_ms: f64,
    pub decode_ms_per_token: f64,
    pub k: usize,
    pub parallel: bool,
    pub n_queries: usize,
}

// Shape-only validation: reduction identities legitimately pass
// non-normalized rows (e.g. all zeros) through the fused path.
fn bind_all<'a>(
    model: &BaseModel,
    registry: &'a AdapterRegistry,
    weights: &FusionWeights,
) -> Result<Vec<AdapterRun<'a>>> {
    if weights.adapter_ids != registry.ids() {
        return Err(Error::Shape {
            context: "fused forward",
            expected: format!("adapter ids {:?}", registry.ids()),
            got: format!("adapter ids {:?}", weights.adapter_ids),
        });
    }
    if weights.n_layers() != model.config().n_layers
        || weights.alphas.iter().any(|row| row.len() != registry.len())
    {
        return Err(Error::Shape {
            context: "fused forward",
            expected: format!(
                "{}x{} weight matrix",
                model.config().n_layers,
                registry.len()
            ),
            got: format!("{} rows", weights.n_layers()),
        });
    }
    if weights.alphas.iter().flatten().any(|a| !a.is_finite()) {
        return Err(Error::Numeric {
            context: "fusion weights must be finite",
        });
    }
    registry
        .adapters()
        .iter()
        .enumerate()
        .map(|(j, adapter)| {
            Ok(AdapterRun {
                bound: BoundAdapter::bind(adapter, model)?,
                scales: weights.column(j),
            })
        })
        .collect()
}

/// One-shot fused forward: every LoRA-targeted linear layer in block `l`
/// computes `Wx + Σ_j α_j^{(l)}·ΔW_j x` on the shared fused stream. Returns
/// next-token logits at the last position (f64 path).
pub fn fused_forward(
    model: &BaseModel,
    registry: &AdapterRegistry,
    weights: &FusionWeights,
    tokens: &[u32],
) -> Result<Vector> {
    let runs = bind_all(model, registry, weights)?;
    let outputs = capture_pass::<f64>(model, &runs, tokens)?;
    let d = model.config().d_model;
    let last = &outputs[model.config().n_layers - 1][(tokens.len() - 1) * d..];
    Ok(Vector::new(head_logits::<f64>(model, last)))
}

fn pick_token(logits: &[f32], sampling: Sampling, rng: &mut SplitMix64) -> Result<u32> {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0usize;
            let mut best_score = f32::NEG_INFINITY;
            for (i, &z) in logits.iter().enumerate() {
                if z > best_score {
                    best_score = z;
                    best = i;
                }
            }
            Ok(best as u32)
        }
        Sampling::Temperature(t) => {
            let scaled: Vec<f64> = logits.iter().map(|&z| f64::from(z) / t).collect();
            let probs = softmax(&Vector::new(scaled))?;
            let u = rng.next_f64();
            let mut cum = 0.0;
            for (i, &p) in probs.as_slice().iter().enumerate() {
                cum += p;
                if u < cum {
                    return Ok(i as u32);
                }
            }
            Ok((probs.dim() - 1) as u32)
        }
    }
}

/// Autoregressive fused generation. Returns the continuation only (prompt
/// excluded); a produced stop token terminates the loop and is not emitted.
pub fn generate(
    model: &BaseModel,
    registry: &AdapterRegistry,
    weights: &FusionWeights,
    prompt: &[u32],
    params: &GenParams,
) -> Result<Vec<u32>> {
    params.validate()?;
    if prompt.is_empty() {
        return Err(Error::Input {
            message: "empty prompt".to_string(),
        });
    }
    let runs = bind_all(model, registry, weights)?;
    let mut stream: Stream<'_, f32> = Stream::new(model, runs);
    let mut rng = SplitMix64::new(params.seed);
    let mut out = Vec::new();
    let mut hidden = stream.advance(prompt)?;
    for _ in 0..params.max_new_tokens {
        let logits = head_logits::<f32>(model, &hidden);
        let token = pick_token(&logits, params.sampling, &mut rng)?;
        if params.stop_tokens.contains(&token) {
            break;
        }
        out.push(token);
        if out.len() == params.max_new_tokens {
            break;
        }
        hidden = stream.advance(&[token])?;
    }
    Ok(out)
}

/// Options for [`bench_latency`].
#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Fan adapter scoring out across threads.
    pub parallel: bool,
    pub max_threads: usize,
    /// Greedy tokens decoded per query when timing the decode loop.
    pub decode_tokens: usize,
    pub measure: Measure,
    pub granularity: Granularity,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            parallel: false,
            max_threads: crate::fusion::default_thread_cap(),
            decode_tokens: 16,
            measure: Measure::Kl,
            granularity: Granularity::LastToken,
        }
    }
}

/// Measure fusion-weight computation, prefill, and per-token decode cost
/// over a query set. Timings vary run to run; the weight values themselves
/// are identical between serial and parallel scoring.
pub fn bench_latency(
    model: &BaseModel,
    registry: &AdapterRegistry,
    queries: &[Vec<u32>],
    options: &BenchOptions,
) -> Result<LatencyReport> {
    if queries.is_empty() {
        return Err(Error::Input {
            message: "bench needs at least one query".to_string(),
        });
    }
    let profile_options = ProfileOptions {
        parallel: options.parallel,
        max_threads: options.max_threads,
        query_id: None,
    };
    let k = registry.len();
    let mut weight_ms = 0.0;
    let mut prefill_ms = 0.0;
    let mut decode_ms = 0.0;
    let mut decoded_tokens = 0usize;
    for query in queries {
        let t0 = Instant::now();
        let profile = divergence_profile_with(
            model,
            registry,
            query,
            options.measure,
            options.granularity,
            &profile_options,
        )?;
        let weights = qa_flora_weights(&profile, crate::math::NORM_EPSILON_DEFAULT)?;
        weight_ms += t0.elapsed().as_secs_f64() * 1e3;

        let runs = bind_all(model, registry, &weights)?;
        let mut stream: Stream<'_, f32> = Stream::new(model, runs);
        let t1 = Instant::now();
        let mut hidden = stream.advance(query)?;
        prefill_ms += t1.elapsed().as_secs_f64() * 1e3;

        let budget = options
            .decode_tokens
            .min(model.config().max_seq_len.saturating_sub(query.len()));
        let t2 = Instant::now();
        let mut rng = SplitMix64::new(0);
        for _ in 0..budget {
            let logits = head_logits::<f32>(model, &hidden);
            let token = pick_token(&logits, Sampling::Greedy, &mut rng)?;
            hidden = stream.advance(&[token])?;
        }
        decode_ms += t2.elapsed().as_secs_f64() * 1e3;
        decoded_tokens += budget;
    }
    let n = queries.len() as f64;
    Ok(LatencyReport {
        weight_compute_ms_per_adapter: weight_ms / n / k as f64,
        prefill_ms: prefill_ms / n,
        decode_ms_per_token: if decoded_tokens == 0 {
            0.0
        } else {
            decode_ms / decoded_tokens as f64
        },
        k,
        parallel: options.parallel,
        n_queries: queries.len(),
    })
}

/// Experimental: refresh fusion weights every `recompute_every` generated
/// tokens by re-scoring the full context, rebuilding the fused stream with
/// the new weights. `recompute_every = 0` never refreshes and matches
/// [`generate`] with the initial weights.
pub struct AdaptiveSpec {
    pub measure: Measure,
    pub granularity: Granularity,
    pub epsilon: f64,
    pub recompute_every: usize,
    pub parallel: bool,
    pub max_threads: usize,
}

impl Default for AdaptiveSpec {
    fn default() -> Self {
        AdaptiveSpec {
            measure: Measure::Kl,
            granularity: Granularity::LastToken,
            epsilon: crate::math::NORM_EPSILON_DEFAULT,
            recompute_every: 0,
            parallel: false,
            max_threads: crate::fusion::default_thread_cap(),
        }
    }
}

/// Divergence-routed generation: computes qa weights at prefill, then
/// decodes, optionally refreshing weights per [`AdaptiveSpec`]. Returns the
/// continuation and the initial weights.
pub fn generate_adaptive(
    model: &BaseModel,
    registry: &AdapterRegistry,
    prompt: &[u32],
    params: &GenParams,
    spec: &AdaptiveSpec,
) -> Result<(Vec<u32>, FusionWeights)> {
    params.validate()?;
    if prompt.is_empty() {
        return Err(Error::Input {
            message: "empty prompt".to_string(),
        });
    }
    let profile_options = ProfileOptions {
        parallel: spec.parallel,
        max_threads: spec.max_threads,
        query_id: None,
    };
    let score = |context: &[u32]| -> Result<FusionWeights> {
        let profile = divergence_profile_with(
            model,
            registry,
            context,
            spec.measure,
            spec.granularity,
            &profile_options,
        )?;
        qa_flora_weights(&profile, spec.epsilon)
    };
    let initial = score(prompt)?;
    if spec.recompute_every == 0 {
        let out = generate(model, registry, &initial, prompt, params)?;
        return Ok((out, initial));
    }

    let mut context = prompt.to_vec();
    let mut weights = initial.clone();
    let mut rng = SplitMix64::new(params.seed);
    let mut out = Vec::new();
    let mut runs = bind_all(model, registry, &weights)?;
    let mut stream: Stream<'_, f32> = Stream::new(model, runs);
    let mut hidden = stream.advance(&context)?;
    let mut since_refresh = 0usize;
    for _ in 0..params.max_new_tokens {
        let logits = head_logits::<f32>(model, &hidden);
        let token = pick_token(&logits, params.sampling, &mut rng)?;
        if params.stop_tokens.contains(&token) {
            break;
        }
        out.push(token);
        context.push(token);
        since_refresh += 1;
        if out.len() == params.max_new_tokens {
            break;
        }
        if since_refresh >= spec.recompute_every {
            since_refresh = 0;
            weights = score(&context)?;
            runs = bind_all(model, registry, &weights)?;
            stream = Stream::new(model, runs);
            hidden = stream.advance(&context)?;
        } else {
            hidden = stream.advance(&[token])?;
        }
    }
    Ok((out, initial))
}
