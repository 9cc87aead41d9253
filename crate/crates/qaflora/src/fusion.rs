//! Fusion-weight strategies: divergence-based per-layer weights, the static
//! baseline, and the centroid-similarity baseline.
//!
//! The divergence route runs one base capture pass plus one capture pass per
//! adapter (full-strength delta), compares the two streams layer by layer
//! under the chosen measure, and normalizes each layer's scores into a
//! weight row. KL compares logit-lens vocabulary distributions; cosine and
//! euclidean compare raw hidden states. Weights are computed once per query
//! at prefill and held fixed through generation.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterRegistry, LoraAdapter};
use crate::error::{Error, Result};
use crate::math::{
    cosine_distance, euclidean_distance, kl_divergence, normalize_scores, softmax, Vector,
    KL_FLOOR_DEFAULT, NORM_EPSILON_DEFAULT,
};
use crate::model::{BaseModel, Granularity, LayerTrace};

/// Divergence measure between base and adapter streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// KL divergence between logit-lens vocabulary distributions (nats).
    Kl,
    /// Cosine distance between raw hidden states.
    Cosine,
    /// Euclidean distance between raw hidden states.
    Euclidean,
}

/// Per-layer, per-adapter relevance scores for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceProfile {
    pub query_id: String,
    pub adapter_ids: Vec<String>,
    pub measure: Measure,
    pub granularity: Granularity,
    /// `values[layer][adapter]`, finite and non-negative.
    pub values: Vec<Vec<f64>>,
}

impl DivergenceProfile {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn k(&self) -> usize {
        self.adapter_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.adapter_ids.len();
        if k == 0 || self.values.is_empty() {
            return Err(Error::Input {
                message: "divergence profile must cover at least one adapter and layer"
                    .to_string(),
            });
        }
        for row in &self.values {
            if row.len() != k {
                return Err(Error::Shape {
                    context: "divergence profile",
                    expected: format!("{k} columns"),
                    got: format!("{} columns", row.len()),
                });
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Numeric {
                    context: "divergence values must be finite and non-negative",
                });
            }
        }
        Ok(())
    }
}

/// Per-layer, per-adapter normalized fusion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub adapter_ids: Vec<String>,
    /// `alphas[layer][adapter]`; every row sums to 1.
    pub alphas: Vec<Vec<f64>>,
}

impl FusionWeights {
    pub fn n_layers(&self) -> usize {
        self.alphas.len()
    }

    pub fn k(&self) -> usize {
        self.adapter_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.adapter_ids.len();
        for row in &self.alphas {
            if row.len() != k {
                return Err(Error::Shape {
                    context: "fusion weights",
                    expected: format!("{k} columns"),
                    got: format!("{} columns", row.len()),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Contract {
                    message: "fusion weight rows must lie in [0,1] and sum to 1".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Column `j` as per-layer scales.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.alphas.iter().map(|row| row[j]).collect()
    }
}

/// How sample hidden states are pooled into a query embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    LastToken,
}

/// Per-adapter domain centroids built from representative samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    pub adapter_ids: Vec<String>,
    pub d_model: usize,
    pub pooling: Pooling,
    pub sample_counts: Vec<usize>,
    pub centroids: Vec<Vector>,
}

impl CentroidSet {
    pub fn validate(&self) -> Result<()> {
        if self.adapter_ids.len() != self.centroids.len()
            || self.adapter_ids.len() != self.sample_counts.len()
        {
            return Err(Error::Shape {
                context: "centroid set",
                expected: format!("{} centroids and counts", self.adapter_ids.len()),
                got: format!(
                    "{} centroids, {} counts",
                    self.centroids.len(),
                    self.sample_counts.len()
                ),
            });
        }
        if self.centroids.iter().any(|c| c.dim() != self.d_model) {
            return Err(Error::Shape {
                context: "centroid set",
                expected: format!("centroid dim {}", self.d_model),
                got: "mismatched centroid dims".to_string(),
            });
        }
        if self.sample_counts.contains(&0) {
            return Err(Error::Input {
                message: "centroid sample counts must be at least 1".to_string(),
            });
        }
        Ok(())
    }
}

/// Options for divergence scoring.
#[derive(Debug, Clone)]
pub struct ProfileOptions {
    /// Fan the per-adapter capture passes out across threads.
    pub parallel: bool,
    /// Thread cap for the fan-out (ignored when serial).
    pub max_threads: usize,
    /// Label recorded in the profile; derived from the tokens when absent.
    pub query_id: Option<String>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            parallel: false,
            max_threads: default_thread_cap(),
            query_id: None,
        }
    }
}

/// Host parallelism, used when no explicit thread cap is given.
pub fn default_thread_cap() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn fnv1a(tokens: &[u32]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &t in tokens {
        for b in t.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// Score every adapter against the base model for one query (serial).
pub fn divergence_profile(
    model: &BaseModel,
    registry: &AdapterRegistry,
    tokens: &[u32],
    measure: Measure,
    granularity: Granularity,
) -> Result<DivergenceProfile> {
    divergence_profile_with(model, registry, tokens, measure, granularity, &ProfileOptions::default())
}

/// Score every adapter against the base model for one query.
///
/// The per-adapter capture passes are independent and may fan out across
/// threads; results are gathered in registry order regardless of completion
/// order, so serial and parallel runs produce bitwise-identical profiles.
pub fn divergence_profile_with(
    model: &BaseModel,
    registry: &AdapterRegistry,
    tokens: &[u32],
    measure: Measure,
    granularity: Granularity,
    options: &ProfileOptions,
) -> Result<DivergenceProfile> {
    if registry.is_empty() {
        return Err(Error::Input {
            message: "registry holds no adapters".to_string(),
        });
    }
    if tokens.is_empty() {
        return Err(Error::Input {
            message: "empty query".to_string(),
        });
    }
    let base = model.forward_capture(tokens, None, None, granularity)?;
    let k = registry.len();
    let score_one = |adapter: &LoraAdapter| -> Result<Vec<f64>> {
        let trace = model.forward_capture(tokens, Some(adapter), None, granularity)?;
        adapter_column(model, measure, &base, &trace)
    };
    let columns: Vec<Result<Vec<f64>>> = if options.parallel && options.max_threads > 1 && k > 1 {
        run_indexed(k, options.max_threads.min(k), |j| score_one(registry.get(j)))
    } else {
        (0..k).map(|j| score_one(registry.get(j))).collect()
    };
    let mut cols = Vec::with_capacity(k);
    for c in columns {
        cols.push(c?);
    }
    let n_layers = model.config().n_layers;
    let values: Vec<Vec<f64>> = (0..n_layers)
        .map(|l| cols.iter().map(|c| c[l]).collect())
        .collect();
    let profile = DivergenceProfile {
        query_id: options
            .query_id
            .clone()
            .unwrap_or_else(|| format!("q-{:016x}", fnv1a(tokens))),
        adapter_ids: registry.ids(),
        measure,
        granularity,
        values,
    };
    profile.validate()?;
    Ok(profile)
}

/// Run `f(0..k)` on up to `threads` worker threads, returning results in
/// index order.
pub(crate) fn run_indexed<T, F>(k: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let slots: Vec<Mutex<Option<T>>> = (0..k).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= k {
                    break;
                }
                let value = f(j);
                *slots[j].lock().expect("result slot") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("worker filled slot"))
        .collect()
}

/// Per-layer scores of one adapter trace against the base trace.
fn adapter_column(
    model: &BaseModel,
    measure: Measure,
    base: &LayerTrace,
    adapted: &LayerTrace,
) -> Result<Vec<f64>> {
    let n_layers = base.n_layers();
    let positions = base.position_count();
    let mut column = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut total = 0.0;
        for p in 0..positions {
            let hb = base.hidden(l, p);
            let ha = adapted.hidden(l, p);
            total += match measure {
                Measure::Kl => {
                    let pb = model.logit_lens(&hb)?;
                    let pa = model.logit_lens(&ha)?;
                    kl_divergence(&pb, &pa, KL_FLOOR_DEFAULT)?
                }
                Measure::Cosine => match cosine_distance(&hb, &ha) {
                    Ok(d) => d,
                    Err(Error::DegenerateVector { .. }) => 0.0,
                    Err(e) => return Err(e),
                },
                Measure::Euclidean => euclidean_distance(&hb, &ha)?,
            };
        }
        column.push(total / positions as f64);
    }
    Ok(column)
}

/// Normalize each profile row into fusion weights
/// (`α_j = div_j / Σ_i div_i`, uniform on degenerate rows).
pub fn qa_flora_weights(profile: &DivergenceProfile, epsilon: f64) -> Result<FusionWeights> {
    profile.validate()?;
    let alphas = profile
        .values
        .iter()
        .map(|row| normalize_scores(row, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let weights = FusionWeights {
        adapter_ids: profile.adapter_ids.clone(),
        alphas,
    };
    weights.validate()?;
    Ok(weights)
}

/// Query-independent equal weighting: every entry is `1/k`.
pub fn static_weights(n_layers: usize, adapter_ids: Vec<String>) -> Result<FusionWeights> {
    let k = adapter_ids.len();
    if k == 0 || n_layers == 0 {
        return Err(Error::Input {
            message: "static weights need at least one adapter and layer".to_string(),
        });
    }
    Ok(FusionWeights {
        adapter_ids,
        alphas: vec![vec![1.0 / k as f64; k]; n_layers],
    })
}

/// Mean-pooled (or last-token) final-layer base hidden state for a query.
pub fn query_embedding(model: &BaseModel, tokens: &[u32], pooling: Pooling) -> Result<Vector> {
    let trace = model.forward_capture(tokens, None, None, Granularity::AllTokens)?;
    let last_layer = trace.n_layers() - 1;
    match pooling {
        Pooling::LastToken => Ok(trace.last_token(last_layer)),
        Pooling::Mean => {
            let n = trace.position_count();
            let d = model.config().d_model;
            let mut acc = vec![0.0f64; d];
            for p in 0..n {
                for (a, v) in acc.iter_mut().zip(trace.hidden(last_layer, p).as_slice()) {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a /= n as f64;
            }
            Ok(Vector::new(acc))
        }
    }
}

/// Build per-adapter centroids from representative sample queries.
pub fn build_centroids(
    model: &BaseModel,
    registry: &AdapterRegistry,
    samples: &BTreeMap<String, Vec<Vec<u32>>>,
    pooling: Pooling,
) -> Result<CentroidSet> {
    if registry.is_empty() {
        return Err(Error::Input {
            message: "registry holds no adapters".to_string(),
        });
    }
    let d = model.config().d_model;
    let mut centroids = Vec::with_capacity(registry.len());
    let mut counts = Vec::with_capacity(registry.len());
    for adapter in registry.adapters() {
        let adapter_samples = samples
            .get(adapter.id())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Input {
                message: format!("no samples for adapter {}", adapter.id()),
            })?;
        let mut acc = vec![0.0f64; d];
        for sample in adapter_samples {
            let emb = query_embedding(model, sample, pooling)?;
            for (a, v) in acc.iter_mut().zip(emb.as_slice()) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= adapter_samples.len() as f64;
        }
        centroids.push(Vector::new(acc));
        counts.push(adapter_samples.len());
    }
    let set = CentroidSet {
        adapter_ids: registry.ids(),
        d_model: d,
        pooling,
        sample_counts: counts,
        centroids,
    };
    set.validate()?;
    Ok(set)
}

/// Centroid-similarity baseline: cosine similarity between the query
/// embedding and each centroid, softmaxed at `temperature` and replicated
/// across all layers (this baseline is not layer-resolved).
pub fn centroid_weights(
    model: &BaseModel,
    centroids: &CentroidSet,
    tokens: &[u32],
    temperature: f64,
) -> Result<FusionWeights> {
    centroids.validate()?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Contract {
            message: format!("temperature must be positive, got {temperature}"),
        });
    }
    let emb = query_embedding(model, tokens, centroids.pooling)?;
    let emb_norm = emb.norm();
    if emb_norm == 0.0 {
        return Err(Error::DegenerateVector {
            context: "query embedding has zero norm",
        });
    }
    let mut sims = Vec::with_capacity(centroids.centroids.len());
    for c in &centroids.centroids {
        let cn = c.norm();
        if cn == 0.0 {
            return Err(Error::DegenerateVector {
                context: "centroid has zero norm",
            });
        }
        sims.push(emb.dot(c)? / (emb_norm * cn) / temperature);
    }
    let row = softmax(&Vector::new(sims))?.as_slice().to_vec();
    let weights = FusionWeights {
        adapter_ids: centroids.adapter_ids.clone(),
        alphas: vec![row; model.config().n_layers],
    };
    weights.validate()?;
    Ok(weights)
}

/// Cosine similarities between a query embedding and each centroid (the raw
/// scores behind [`centroid_weights`]).
pub fn centroid_similarities(
    model: &BaseModel,
    centroids: &CentroidSet,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    centroids.validate()?;
    let emb = query_embedding(model, tokens, centroids.pooling)?;
    let emb_norm = emb.norm();
    if emb_norm == 0.0 {
        return Err(Error::DegenerateVector {
            context: "query embedding has zero norm",
        });
    }
    centroids
        .centroids
        .iter()
        .map(|c| {
            let cn = c.norm();
            if cn == 0.0 {
                return Err(Error::DegenerateVector {
                    context: "centroid has zero norm",
                });
            }
            Ok(emb.dot(c)? / (emb_norm * cn))
        })
        .collect()
}

/// Average profiles cell-wise across queries, then normalize each layer row
/// to sum 1. Inputs must share shape, ids, measure, and granularity.
pub fn mean_normalized_profile(profiles: &[DivergenceProfile]) -> Result<DivergenceProfile> {
    let first = profiles.first().ok_or_else(|| Error::Input {
        message: "mean profile needs at least one input profile".to_string(),
    })?;
    first.validate()?;
    for p in &profiles[1..] {
        p.validate()?;
        if p.adapter_ids != first.adapter_ids
            || p.measure != first.measure
            || p.granularity != first.granularity
            || p.n_layers() != first.n_layers()
        {
            return Err(Error::Input {
                message: "profiles disagree on adapters, measure, granularity, or layers"
                    .to_string(),
            });
        }
    }
    let n = profiles.len() as f64;
    let mut values = vec![vec![0.0f64; first.k()]; first.n_layers()];
    for p in profiles {
        for (row, prow) in values.iter_mut().zip(p.values.iter()) {
            for (v, pv) in row.iter_mut().zip(prow.iter()) {
                *v += pv / n;
            }
        }
    }
    for row in &mut values {
        *row = normalize_scores(row, NORM_EPSILON_DEFAULT)?;
    }
    Ok(DivergenceProfile {
        query_id: format!("mean:{}", profiles.len()),
        adapter_ids: first.adapter_ids.clone(),
        measure: first.measure,
        granularity: first.granularity,
        values,
    })
}
