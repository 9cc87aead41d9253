//! LoRA adapter representation, delta materialization, and the registry.
//!
//! An adapter is a set of per-target low-rank factor pairs. The effective
//! delta for a target is `(scale / rank) · B · A`, the standard LoRA
//! convention, which keeps adapters of different ranks comparable.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{parse_target, BaseModel, Projection, Tensor32};

/// One low-rank factor pair bound to a named linear layer.
#[derive(Debug, Clone)]
pub struct LoraLayer {
    target: String,
    a_factor: Tensor32,
    b_factor: Tensor32,
    rank: usize,
    scale: f64,
    delta: OnceLock<Matrix>,
}

impl LoraLayer {
    /// `a_factor` is `rank × d_in`, `b_factor` is `d_out × rank`.
    pub fn new(target: impl Into<String>, a_factor: Tensor32, b_factor: Tensor32, scale: f64) -> Result<Self> {
        let target = target.into();
        let rank = a_factor.rows();
        if rank == 0 {
            return Err(Error::Shape {
                context: "lora factors",
                expected: "positive rank".to_string(),
                got: "rank 0".to_string(),
            });
        }
        if b_factor.cols() != rank {
            return Err(Error::Shape {
                context: "lora factors",
                expected: format!("b_factor with {rank} columns"),
                got: format!("{} columns", b_factor.cols()),
            });
        }
        if !(scale.is_finite()) {
            return Err(Error::Numeric {
                context: "lora scale must be finite",
            });
        }
        Ok(LoraLayer {
            target,
            a_factor,
            b_factor,
            rank,
            scale,
            delta: OnceLock::new(),
        })
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn a_factor(&self) -> &Tensor32 {
        &self.a_factor
    }

    pub fn b_factor(&self) -> &Tensor32 {
        &self.b_factor
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `scale / rank`, the coefficient on `B·A`.
    pub fn effective_scale(&self) -> f64 {
        self.scale / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a_factor.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b_factor.rows()
    }

    /// Materialized dense delta `(scale / rank) · B · A`, computed once and
    /// cached (first-writer-wins; safe for concurrent readers).
    pub fn delta_matrix(&self) -> &Matrix {
        self.delta.get_or_init(|| {
            let (d_out, d_in, r) = (self.d_out(), self.d_in(), self.rank);
            let c = self.effective_scale();
            let mut data = vec![0.0f64; d_out * d_in];
            for i in 0..d_out {
                let brow = self.b_factor.row(i);
                for (t, &bv) in brow.iter().enumerate().take(r) {
                    let b = f64::from(bv);
                    if b == 0.0 {
                        continue;
                    }
                    let arow = self.a_factor.row(t);
                    for j in 0..d_in {
                        data[i * d_in + j] += b * f64::from(arow[j]);
                    }
                }
            }
            for v in &mut data {
                *v *= c;
            }
            Matrix::new(d_out, d_in, data).expect("delta buffer shape")
        })
    }
}

/// A named set of LoRA layers, at most one per target.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    id: String,
    layers: Vec<LoraLayer>,
    metadata: BTreeMap<String, String>,
}

impl LoraAdapter {
    pub fn new(
        id: impl Into<String>,
        layers: Vec<LoraLayer>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Input {
                message: "adapter id must be non-empty".to_string(),
            });
        }
        let mut seen = BTreeMap::new();
        for layer in &layers {
            match seen.entry(layer.target().to_string()) {
                Entry::Vacant(e) => {
                    e.insert(());
                }
                Entry::Occupied(_) => {
                    return Err(Error::Input {
                        message: format!(
                            "adapter {id}: duplicate target {}",
                            layer.target()
                        ),
                    });
                }
            }
        }
        Ok(LoraAdapter { id, layers, metadata })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn layer_for(&self, target: &str) -> Option<&LoraLayer> {
        self.layers.iter().find(|l| l.target() == target)
    }
}

/// Ordered adapter collection; position defines the adapter index used in
/// all weight and divergence matrices and in exported files.
#[derive(Debug, Clone, Default)]
pub struct AdapterRegistry {
    adapters: Vec<LoraAdapter>,
}

impl AdapterRegistry {
    pub fn new(adapters: Vec<LoraAdapter>) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for a in &adapters {
            if ids.insert(a.id().to_string(), ()).is_some() {
                return Err(Error::Input {
                    message: format!("duplicate adapter id {}", a.id()),
                });
            }
        }
        Ok(AdapterRegistry { adapters })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn get(&self, index: usize) -> &LoraAdapter {
        &self.adapters[index]
    }

    pub fn ids(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.id().to_string()).collect()
    }

    /// Per-layer rank listing across every adapter; heterogeneous ranks are
    /// valid and coexist in one registry.
    pub fn rank_report(&self) -> Vec<RankReport> {
        self.adapters.iter().map(rank_sweep_check).collect()
    }
}

/// Per-layer rank listing for one adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankReport {
    pub adapter_id: String,
    pub entries: Vec<(String, usize)>,
    pub min_rank: Option<usize>,
    pub max_rank: Option<usize>,
}

impl RankReport {
    pub fn uniform(&self) -> bool {
        self.min_rank == self.max_rank
    }
}

/// List the rank of every layer in an adapter.
pub fn rank_sweep_check(adapter: &LoraAdapter) -> RankReport {
    let entries: Vec<(String, usize)> = adapter
        .layers()
        .iter()
        .map(|l| (l.target().to_string(), l.rank()))
        .collect();
    let min_rank = entries.iter().map(|(_, r)| *r).min();
    let max_rank = entries.iter().map(|(_, r)| *r).max();
    RankReport {
        adapter_id: adapter.id().to_string(),
        entries,
        min_rank,
        max_rank,
    }
}

/// An adapter validated against a model, with per-(block, projection)
/// lookup. Holding a handle never mutates the model.
#[derive(Debug)]
pub struct BoundAdapter<'a> {
    adapter: &'a LoraAdapter,
    resolved: Vec<[Option<usize>; 7]>,
}

impl<'a> BoundAdapter<'a> {
    /// Resolve every target name against `model`, collecting all offending
    /// targets into a single binding error.
    pub fn bind(adapter: &'a LoraAdapter, model: &BaseModel) -> Result<Self> {
        let n_layers = model.config().n_layers;
        let mut resolved = vec![[None; 7]; n_layers];
        let mut offenders = Vec::new();
        for (idx, layer) in adapter.layers().iter().enumerate() {
            match parse_target(layer.target()).filter(|(b, _)| *b < n_layers) {
                Some((block, proj)) => {
                    let (d_out, d_in) = proj.shape(model.config());
                    if layer.d_in() != d_in || layer.d_out() != d_out {
                        offenders.push(format!(
                            "{}: expected {d_out}x{d_in}, got {}x{}",
                            layer.target(),
                            layer.d_out(),
                            layer.d_in()
                        ));
                    } else {
                        resolved[block][proj.index()] = Some(idx);
                    }
                }
                None => offenders.push(format!("{}: unknown target", layer.target())),
            }
        }
        if !offenders.is_empty() {
            return Err(Error::AdapterBinding { details: offenders });
        }
        Ok(BoundAdapter { adapter, resolved })
    }

    pub fn adapter(&self) -> &'a LoraAdapter {
        self.adapter
    }

    pub(crate) fn layer(&self, block: usize, proj: Projection) -> Option<&'a LoraLayer> {
        self.resolved[block][proj.index()].map(|i| &self.adapter.layers()[i])
    }
}

/// Validate a lone adapter against a model.
pub fn bind<'a>(adapter: &'a LoraAdapter, model: &BaseModel) -> Result<BoundAdapter<'a>> {
    BoundAdapter::bind(adapter, model)
}
