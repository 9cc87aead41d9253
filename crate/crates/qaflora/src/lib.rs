//! Query-adaptive LoRA fusion engine.
//!
//! A decoder-only transformer inference library with pluggable low-rank
//! adapters. Per query and per layer, training-free fusion weights are
//! computed from the distributional divergence between the base model and
//! each adapter (logit-lens KL by default), and generation runs with the
//! weighted adapter mixture. Static-fusion and centroid-similarity
//! baselines ship alongside, plus the cosine/euclidean and token-granularity
//! ablation axes.
//!
//! Start with the `examples/` directory: each file is a runnable walkthrough
//! of one capability. The `qaflora` binary exposes the same functionality
//! for batch use.

pub mod adapter;
pub mod cli;
pub mod container;
pub mod error;
pub mod eval;
pub mod export;
pub mod fusion;
pub mod generation;
pub mod math;
pub mod model;
pub mod tokenizer;
pub mod toy;

pub use adapter::{bind, rank_sweep_check, AdapterRegistry, BoundAdapter, LoraAdapter, LoraLayer};
pub use container::{
    load_adapter, load_model, read_container, save_adapter, save_model, write_container,
    TensorContainer, TensorRecord,
};
pub use error::{Error, Result};
pub use eval::{exact_match, extract_number, score_set, MatchMode, ScoredSet};
pub use export::{
    export_profile, export_weights, import_matrix_csv, load_centroids, save_centroids,
    ExportFormat,
};
pub use fusion::{
    build_centroids, centroid_weights, divergence_profile, divergence_profile_with,
    mean_normalized_profile, qa_flora_weights, query_embedding, static_weights, CentroidSet,
    DivergenceProfile, FusionWeights, Measure, Pooling, ProfileOptions,
};
pub use generation::{
    bench_latency, fused_forward, generate, generate_adaptive, AdaptiveSpec, BenchOptions,
    GenParams, LatencyReport, Sampling,
};
pub use math::{
    affine_apply, cosine_distance, euclidean_distance, kl_divergence, normalize_scores, softmax,
    Distribution, Matrix, Vector, KL_FLOOR_DEFAULT, NORM_EPSILON_DEFAULT,
};
pub use model::{
    parse_target, target_name, AdapterStreamMode, BaseModel, Granularity, LayerTrace, ModelConfig,
    PositionEncoding, Projection, Tensor32, TraceEntry,
};
pub use tokenizer::ByteTokenizer;
pub use toy::{make_toy_adapter, make_toy_model, toy_config, SplitMix64};
