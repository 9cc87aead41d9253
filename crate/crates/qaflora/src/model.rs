//! Frozen decoder-only transformer with capture-mode forward passes.
//!
//! The architecture is a pre-norm decoder with RMS normalization, gated
//! feed-forward blocks, and rotary or learned positions, selected by
//! config. Weights are stored in f32; capture passes compute activations
//! in f64 so downstream divergence math keeps full precision, while the
//! generation loop runs in f32.
//!
//! The capture point for layer hidden states is the residual-stream output
//! of each transformer block.

use serde::{Deserialize, Serialize};

use crate::adapter::{BoundAdapter, LoraAdapter};
use crate::error::{Error, Result};
use crate::math::{softmax, Distribution, Matrix, Vector};

/// Rotary base frequency.
const ROPE_THETA: f64 = 10000.0;

/// Dense row-major 32-bit float weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor32 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor32 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                context: "tensor construction",
                expected: format!("{} elements for {rows}x{cols}", rows * cols),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor32 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor32 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// How token positions enter the computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// Rotary embedding applied to attention queries/keys (adjacent-pair layout).
    Rope,
    /// Learned additive position table applied at the embedding.
    Learned,
}

/// How an adapter-bearing forward composes base and adapter activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterStreamMode {
    /// Each LoRA-targeted linear layer computes `Wx + ΔWx` on the adapter
    /// stream's own activations (standard LoRA inference).
    Merged,
    /// Block-level recurrence: the adapter hidden state at block `l` is the
    /// base hidden state plus the block's adapter-induced delta evaluated on
    /// the adapter stream's previous hidden state.
    BlockRecurrence,
}

/// Architecture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    #[serde(default = "default_positions")]
    pub positions: PositionEncoding,
    #[serde(default = "default_true")]
    pub lens_apply_final_norm: bool,
    #[serde(default = "default_stream_mode")]
    pub adapter_stream_mode: AdapterStreamMode,
}

fn default_positions() -> PositionEncoding {
    PositionEncoding::Rope
}

fn default_true() -> bool {
    true
}

fn default_stream_mode() -> AdapterStreamMode {
    AdapterStreamMode::Merged
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Contract {
                message: "model dimensions must be positive".to_string(),
            });
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Contract {
                message: format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.vocab_size < 2 {
            return Err(Error::Contract {
                message: format!("vocab_size must be at least 2, got {}", self.vocab_size),
            });
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::Contract {
                message: format!("norm_eps must be positive and finite, got {}", self.norm_eps),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Linear-layer roles that can carry LoRA deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Projection {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnGate,
    FfnUp,
    FfnDown,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::AttnQ,
        Projection::AttnK,
        Projection::AttnV,
        Projection::AttnO,
        Projection::FfnGate,
        Projection::FfnUp,
        Projection::FfnDown,
    ];

    pub fn suffix(&self) -> &'static str {
        match self {
            Projection::AttnQ => "attn_q",
            Projection::AttnK => "attn_k",
            Projection::AttnV => "attn_v",
            Projection::AttnO => "attn_o",
            Projection::FfnGate => "ffn_gate",
            Projection::FfnUp => "ffn_up",
            Projection::FfnDown => "ffn_down",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Projection::AttnQ => 0,
            Projection::AttnK => 1,
            Projection::AttnV => 2,
            Projection::AttnO => 3,
            Projection::FfnGate => 4,
            Projection::FfnUp => 5,
            Projection::FfnDown => 6,
        }
    }

    /// `(d_out, d_in)` of this projection under `config`.
    pub fn shape(&self, config: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::AttnQ | Projection::AttnK | Projection::AttnV | Projection::AttnO => {
                (config.d_model, config.d_model)
            }
            Projection::FfnGate | Projection::FfnUp => (config.d_ff, config.d_model),
            Projection::FfnDown => (config.d_model, config.d_ff),
        }
    }
}

/// Canonical target name for a linear layer, e.g. `block0.attn_q`.
pub fn target_name(block: usize, proj: Projection) -> String {
    format!("block{block}.{}", proj.suffix())
}

/// Parse a target name back into `(block index, projection)`.
pub fn parse_target(name: &str) -> Option<(usize, Projection)> {
    let rest = name.strip_prefix("block")?;
    let (idx, suffix) = rest.split_once('.')?;
    let block: usize = idx.parse().ok()?;
    let proj = Projection::ALL.into_iter().find(|p| p.suffix() == suffix)?;
    Some((block, proj))
}

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub attn_norm: Vec<f32>,
    pub attn_q: Tensor32,
    pub attn_k: Tensor32,
    pub attn_v: Tensor32,
    pub attn_o: Tensor32,
    pub ffn_norm: Vec<f32>,
    pub ffn_gate: Tensor32,
    pub ffn_up: Tensor32,
    pub ffn_down: Tensor32,
}

impl BlockWeights {
    pub fn projection(&self, proj: Projection) -> &Tensor32 {
        match proj {
            Projection::AttnQ => &self.attn_q,
            Projection::AttnK => &self.attn_k,
            Projection::AttnV => &self.attn_v,
            Projection::AttnO => &self.attn_o,
            Projection::FfnGate => &self.ffn_gate,
            Projection::FfnUp => &self.ffn_up,
            Projection::FfnDown => &self.ffn_down,
        }
    }
}

/// Frozen decoder-only transformer; immutable after construction.
#[derive(Debug, Clone)]
pub struct BaseModel {
    config: ModelConfig,
    embedding: Tensor32,
    pos_embedding: Option<Tensor32>,
    blocks: Vec<BlockWeights>,
    final_norm: Vec<f32>,
    lm_head: Tensor32,
}

impl BaseModel {
    pub fn new(
        config: ModelConfig,
        embedding: Tensor32,
        pos_embedding: Option<Tensor32>,
        blocks: Vec<BlockWeights>,
        final_norm: Vec<f32>,
        lm_head: Tensor32,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let check = |name: &str, t: &Tensor32, rows: usize, cols: usize| -> Result<()> {
            if t.rows() != rows || t.cols() != cols {
                return Err(Error::Format {
                    field: "model",
                    message: format!(
                        "{name}: expected {rows}x{cols}, got {}x{}",
                        t.rows(),
                        t.cols()
                    ),
                });
            }
            if !t.is_finite() {
                return Err(Error::Format {
                    field: "model",
                    message: format!("{name}: non-finite entries"),
                });
            }
            Ok(())
        };
        check("embedding", &embedding, config.vocab_size, d)?;
        match (config.positions, &pos_embedding) {
            (PositionEncoding::Learned, Some(p)) => {
                check("pos_embedding", p, config.max_seq_len, d)?;
            }
            (PositionEncoding::Learned, None) => {
                return Err(Error::Format {
                    field: "model",
                    message: "learned positions configured but pos_embedding missing".to_string(),
                });
            }
            (PositionEncoding::Rope, Some(_)) => {
                return Err(Error::Format {
                    field: "model",
                    message: "pos_embedding present but positions are rotary".to_string(),
                });
            }
            (PositionEncoding::Rope, None) => {}
        }
        if blocks.len() != config.n_layers {
            return Err(Error::Format {
                field: "model",
                message: format!(
                    "expected {} blocks, got {}",
                    config.n_layers,
                    blocks.len()
                ),
            });
        }
        for (l, b) in blocks.iter().enumerate() {
            if b.attn_norm.len() != d || b.ffn_norm.len() != d {
                return Err(Error::Format {
                    field: "model",
                    message: format!("block {l}: norm gain length mismatch"),
                });
            }
            for proj in Projection::ALL {
                let (rows, cols) = proj.shape(&config);
                check(&target_name(l, proj), b.projection(proj), rows, cols)?;
            }
        }
        if final_norm.len() != d {
            return Err(Error::Format {
                field: "model",
                message: "final_norm length mismatch".to_string(),
            });
        }
        check("lm_head", &lm_head, config.vocab_size, d)?;
        Ok(BaseModel {
            config,
            embedding,
            pos_embedding,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Tensor32 {
        &self.embedding
    }

    pub fn pos_embedding(&self) -> Option<&Tensor32> {
        self.pos_embedding.as_ref()
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &Tensor32 {
        &self.lm_head
    }

    /// Shape of a named LoRA target, if it resolves in this model.
    pub fn target_shape(&self, name: &str) -> Option<(usize, usize)> {
        let (block, proj) = parse_target(name)?;
        if block >= self.config.n_layers {
            return None;
        }
        Some(proj.shape(&self.config))
    }

    /// Capture pass: residual-stream output of every block.
    ///
    /// With no adapter this is the pure base forward. With an adapter and no
    /// weights, the adapter runs at full strength per the configured
    /// [`AdapterStreamMode`]. With per-layer weights, the adapter delta at
    /// block `l` is scaled by `weights[l]`.
    pub fn forward_capture(
        &self,
        tokens: &[u32],
        adapter: Option<&LoraAdapter>,
        weights: Option<&[f64]>,
        granularity: Granularity,
    ) -> Result<LayerTrace> {
        let scales = match weights {
            Some(w) => {
                if w.len() != self.config.n_layers {
                    return Err(Error::Shape {
                        context: "forward_capture weights",
                        expected: format!("{} per-layer entries", self.config.n_layers),
                        got: format!("{} entries", w.len()),
                    });
                }
                if w.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return Err(Error::Contract {
                        message: "per-layer adapter weights must lie in [0,1]".to_string(),
                    });
                }
                w.to_vec()
            }
            None => vec![1.0; self.config.n_layers],
        };
        let runs = match adapter {
            Some(a) => vec![AdapterRun {
                bound: BoundAdapter::bind(a, self)?,
                scales,
            }],
            None => Vec::new(),
        };
        let outputs = match (adapter, self.config.adapter_stream_mode) {
            (Some(_), AdapterStreamMode::BlockRecurrence) => {
                check_capture_input(&self.config, tokens)?;
                let x0 = embed_acts::<f64>(self, tokens, 0)?;
                block_recurrence_outputs::<f64>(self, &runs[0], x0)?
            }
            _ => capture_pass::<f64>(self, &runs, tokens)?,
        };
        let seq_len = tokens.len();
        let d = self.config.d_model;
        let entries = outputs
            .into_iter()
            .map(|layer| match granularity {
                Granularity::LastToken => {
                    TraceEntry::LastToken(Vector::new(layer[(seq_len - 1) * d..].to_vec()))
                }
                Granularity::AllTokens => TraceEntry::AllTokens(
                    Matrix::new(seq_len, d, layer).expect("capture buffer shape"),
                ),
            })
            .collect();
        Ok(LayerTrace {
            granularity,
            d_model: d,
            entries,
        })
    }

    /// Project a hidden state through the final normalization (per config)
    /// and the LM head, then softmax.
    pub fn logit_lens(&self, hidden: &Vector) -> Result<Distribution> {
        softmax(&self.lens_logits(hidden)?)
    }

    /// Raw lens logits (final normalization per config, then LM head).
    pub fn lens_logits(&self, hidden: &Vector) -> Result<Vector> {
        let d = self.config.d_model;
        if hidden.dim() != d {
            return Err(Error::Shape {
                context: "logit_lens",
                expected: format!("dim {d}"),
                got: format!("dim {}", hidden.dim()),
            });
        }
        let normed: Vec<f64> = if self.config.lens_apply_final_norm {
            let mut out = vec![0.0; d];
            rms_norm_into::<f64>(hidden.as_slice(), &self.final_norm, self.config.norm_eps, &mut out);
            out
        } else {
            hidden.as_slice().to_vec()
        };
        let mut logits = vec![0.0f64; self.config.vocab_size];
        gemv32::<f64>(&self.lm_head, &normed, &mut logits);
        Ok(Vector::new(logits))
    }

    /// Ordinary next-token logits of the base model (no adapters), f64 path.
    pub fn next_token_logits(&self, tokens: &[u32]) -> Result<Vector> {
        let outputs = capture_pass::<f64>(self, &[], tokens)?;
        let d = self.config.d_model;
        let last = &outputs[self.config.n_layers - 1][(tokens.len() - 1) * d..];
        Ok(Vector::new(head_logits::<f64>(self, last)))
    }

    /// Token embeddings plus positional terms (learned positions only; the
    /// rotary variant injects position at attention time, so rows are the
    /// raw table entries).
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let acts = embed_acts::<f64>(self, tokens, 0)?;
        Matrix::new(tokens.len(), self.config.d_model, acts)
    }
}

/// Which positions a capture records per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    LastToken,
    AllTokens,
}

/// One captured layer: last-position hidden state or all positions.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEntry {
    LastToken(Vector),
    AllTokens(Matrix),
}

/// Residual-stream outputs of every block for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    granularity: Granularity,
    d_model: usize,
    entries: Vec<TraceEntry>,
}

impl LayerTrace {
    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn n_layers(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, layer: usize) -> &TraceEntry {
        &self.entries[layer]
    }

    /// Hidden state at the last query position for `layer`.
    pub fn last_token(&self, layer: usize) -> Vector {
        match &self.entries[layer] {
            TraceEntry::LastToken(v) => v.clone(),
            TraceEntry::AllTokens(m) => m.row_vector(m.rows() - 1),
        }
    }

    /// Number of recorded positions (1 for last-token captures).
    pub fn position_count(&self) -> usize {
        match &self.entries[0] {
            TraceEntry::LastToken(_) => 1,
            TraceEntry::AllTokens(m) => m.rows(),
        }
    }

    /// Hidden state at `pos` for `layer` (pos must be 0 for last-token captures).
    pub fn hidden(&self, layer: usize, pos: usize) -> Vector {
        match &self.entries[layer] {
            TraceEntry::LastToken(v) => {
                assert_eq!(pos, 0, "last-token trace has a single position");
                v.clone()
            }
            TraceEntry::AllTokens(m) => m.row_vector(pos),
        }
    }
}

// ---------------------------------------------------------------------------
// Activation arithmetic, generic over f32 (decode loop) and f64 (capture).
// ---------------------------------------------------------------------------

pub(crate) trait Act:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Act for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f32(v: f32) -> f32 {
        v
    }
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
}

impl Act for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f32(v: f32) -> f64 {
        f64::from(v)
    }
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
}

/// One adapter participating in a forward pass, with per-block fusion scales.
pub(crate) struct AdapterRun<'a> {
    pub bound: BoundAdapter<'a>,
    pub scales: Vec<f64>,
}

pub(crate) fn gemv32<A: Act>(w: &Tensor32, x: &[A], out: &mut [A]) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), out.len());
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = A::ZERO;
        for (wv, xv) in w.row(r).iter().zip(x.iter()) {
            acc = acc + A::from_f32(*wv) * *xv;
        }
        *o = acc;
    }
}

pub(crate) fn rms_norm_into<A: Act>(x: &[A], gains: &[f32], eps: f64, out: &mut [A]) {
    let n = A::from_f64(x.len() as f64);
    let mut ms = A::ZERO;
    for &v in x {
        ms = ms + v * v;
    }
    ms = ms / n;
    let denom = (ms + A::from_f64(eps)).sqrt();
    for (o, (&v, &g)) in out.iter_mut().zip(x.iter().zip(gains.iter())) {
        *o = v / denom * A::from_f32(g);
    }
}

fn silu<A: Act>(x: A) -> A {
    x / (A::ONE + (A::ZERO - x).exp())
}

pub(crate) fn softmax_in_place<A: Act>(xs: &mut [A]) {
    let mut max = xs[0];
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = A::ZERO;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

/// Rotate query/key head slices in place (adjacent-pair rotary layout).
fn apply_rope<A: Act>(vec: &mut [A], pos: usize, n_heads: usize, head_dim: usize) {
    for h in 0..n_heads {
        let base = h * head_dim;
        for i in 0..head_dim / 2 {
            let inv_freq = ROPE_THETA.powf(-((2 * i) as f64) / head_dim as f64);
            let angle = pos as f64 * inv_freq;
            let (sin, cos) = (A::from_f64(angle.sin()), A::from_f64(angle.cos()));
            let a = vec[base + 2 * i];
            let b = vec[base + 2 * i + 1];
            vec[base + 2 * i] = a * cos - b * sin;
            vec[base + 2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// Linear-layer application with weighted LoRA deltas:
/// `out = Wx + Σ_j α_j·(scale_j/rank_j)·B_j(A_j x)`.
///
/// Adapters with a zero fusion scale at this block are skipped entirely, so
/// an all-zero weight row reproduces the base computation bit for bit.
pub(crate) fn project_into<A: Act>(
    model: &BaseModel,
    adapters: &[AdapterRun<'_>],
    block: usize,
    proj: Projection,
    x: &[A],
    out: &mut [A],
) {
    gemv32(model.blocks()[block].projection(proj), x, out);
    for run in adapters {
        let alpha = run.scales[block];
        if alpha == 0.0 {
            continue;
        }
        if let Some(layer) = run.bound.layer(block, proj) {
            let coeff = A::from_f64(alpha * layer.effective_scale());
            let mut t = vec![A::ZERO; layer.rank()];
            gemv32(layer.a_factor(), x, &mut t);
            let b = layer.b_factor();
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = A::ZERO;
                for (wv, tv) in b.row(i).iter().zip(t.iter()) {
                    acc = acc + A::from_f32(*wv) * *tv;
                }
                *o = *o + coeff * acc;
            }
        }
    }
}

/// Attend one query position over a key/value prefix of `ctx` positions.
fn attend_position<A: Act>(
    q: &[A],
    keys: &[A],
    values: &[A],
    ctx: usize,
    n_heads: usize,
    head_dim: usize,
    scale: A,
) -> Vec<A> {
    let d = n_heads * head_dim;
    let mut out = vec![A::ZERO; d];
    let mut scores = vec![A::ZERO; ctx];
    for h in 0..n_heads {
        let base = h * head_dim;
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = A::ZERO;
            let krow = &keys[j * d + base..j * d + base + head_dim];
            for (qv, kv) in q[base..base + head_dim].iter().zip(krow.iter()) {
                acc = acc + *qv * *kv;
            }
            *s = acc * scale;
        }
        softmax_in_place(&mut scores);
        for (j, &s) in scores.iter().enumerate() {
            let vrow = &values[j * d + base..j * d + base + head_dim];
            for (o, &vv) in out[base..base + head_dim].iter_mut().zip(vrow.iter()) {
                *o = *o + s * vv;
            }
        }
    }
    out
}

/// Token embeddings (plus learned positional terms) as activation values,
/// for positions starting at `start_pos`.
pub(crate) fn embed_acts<A: Act>(
    model: &BaseModel,
    tokens: &[u32],
    start_pos: usize,
) -> Result<Vec<A>> {
    let cfg = model.config();
    let d = cfg.d_model;
    let mut x = Vec::with_capacity(tokens.len() * d);
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Vocab {
                token: t,
                vocab_size: cfg.vocab_size,
            });
        }
        let row = model.embedding().row(t as usize);
        match (cfg.positions, model.pos_embedding()) {
            (PositionEncoding::Learned, Some(pe)) => {
                let prow = pe.row(start_pos + i);
                for (e, p) in row.iter().zip(prow.iter()) {
                    x.push(A::from_f32(*e) + A::from_f32(*p));
                }
            }
            _ => x.extend(row.iter().map(|&e| A::from_f32(e))),
        }
    }
    Ok(x)
}

/// Run one block over a full sequence starting at position 0 (causal, no
/// cache). Shared by capture passes and the block-recurrence mode.
pub(crate) fn block_forward_full<A: Act>(
    model: &BaseModel,
    adapters: &[AdapterRun<'_>],
    block: usize,
    x: &[A],
) -> Vec<A> {
    let cfg = model.config();
    let d = cfg.d_model;
    let seq = x.len() / d;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let weights = &model.blocks()[block];

    let mut q = vec![A::ZERO; seq * d];
    let mut k = vec![A::ZERO; seq * d];
    let mut v = vec![A::ZERO; seq * d];
    let mut h = vec![A::ZERO; d];
    for i in 0..seq {
        rms_norm_into(&x[i * d..(i + 1) * d], &weights.attn_norm, cfg.norm_eps, &mut h);
        project_into(model, adapters, block, Projection::AttnQ, &h, &mut q[i * d..(i + 1) * d]);
        project_into(model, adapters, block, Projection::AttnK, &h, &mut k[i * d..(i + 1) * d]);
        project_into(model, adapters, block, Projection::AttnV, &h, &mut v[i * d..(i + 1) * d]);
        if cfg.positions == PositionEncoding::Rope {
            apply_rope(&mut q[i * d..(i + 1) * d], i, nh, hd);
            apply_rope(&mut k[i * d..(i + 1) * d], i, nh, hd);
        }
    }

    let scale = A::from_f64(1.0 / (hd as f64).sqrt());
    let mut out = x.to_vec();
    let mut o = vec![A::ZERO; d];
    for i in 0..seq {
        let attn = attend_position(&q[i * d..(i + 1) * d], &k, &v, i + 1, nh, hd, scale);
        project_into(model, adapters, block, Projection::AttnO, &attn, &mut o);
        for (dst, &src) in out[i * d..(i + 1) * d].iter_mut().zip(o.iter()) {
            *dst = *dst + src;
        }
    }

    let mut gate = vec![A::ZERO; cfg.d_ff];
    let mut up = vec![A::ZERO; cfg.d_ff];
    let mut down = vec![A::ZERO; d];
    for i in 0..seq {
        rms_norm_into(&out[i * d..(i + 1) * d], &weights.ffn_norm, cfg.norm_eps, &mut h);
        project_into(model, adapters, block, Projection::FfnGate, &h, &mut gate);
        project_into(model, adapters, block, Projection::FfnUp, &h, &mut up);
        for (g, &u) in gate.iter_mut().zip(up.iter()) {
            *g = silu(*g) * u;
        }
        project_into(model, adapters, block, Projection::FfnDown, &gate, &mut down);
        for (dst, &src) in out[i * d..(i + 1) * d].iter_mut().zip(down.iter()) {
            *dst = *dst + src;
        }
    }
    out
}

fn check_capture_input(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input {
            message: "empty token sequence".to_string(),
        });
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Capacity {
            length: tokens.len(),
            max: config.max_seq_len,
        });
    }
    Ok(())
}

/// Full-sequence capture through all blocks on a single merged stream.
pub(crate) fn capture_pass<A: Act>(
    model: &BaseModel,
    adapters: &[AdapterRun<'_>],
    tokens: &[u32],
) -> Result<Vec<Vec<A>>> {
    check_capture_input(model.config(), tokens)?;
    let mut x = embed_acts::<A>(model, tokens, 0)?;
    let mut outputs = Vec::with_capacity(model.config().n_layers);
    for l in 0..model.config().n_layers {
        x = block_forward_full(model, adapters, l, &x);
        outputs.push(x.clone());
    }
    Ok(outputs)
}

/// Two-stream block recurrence:
/// `h_A(l) = h_M(l) + [block_l^{adapted}(h_A(l-1)) − block_l^{base}(h_A(l-1))]`,
/// the base term taken from the base stream. The bracketed difference is the
/// block's adapter-induced delta evaluated on the adapter stream's previous
/// hidden state, which reduces to `ΔW^(l)·h_A(l-1)` for a purely linear block.
pub(crate) fn block_recurrence_outputs<A: Act>(
    model: &BaseModel,
    run: &AdapterRun<'_>,
    x0: Vec<A>,
) -> Result<Vec<Vec<A>>> {
    let cfg = model.config();
    let runs = std::slice::from_ref(run);
    let mut base = x0.clone();
    let mut adapted = x0;
    let mut outputs = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let base_next = block_forward_full::<A>(model, &[], l, &base);
        let with_delta = block_forward_full::<A>(model, runs, l, &adapted);
        let without_delta = block_forward_full::<A>(model, &[], l, &adapted);
        let mut adapted_next = base_next.clone();
        for ((a, w), wo) in adapted_next
            .iter_mut()
            .zip(with_delta.iter())
            .zip(without_delta.iter())
        {
            *a = *a + (*w - *wo);
        }
        outputs.push(adapted_next.clone());
        base = base_next;
        adapted = adapted_next;
    }
    Ok(outputs)
}

/// Incremental fused stream with per-block KV cache; used by the decode loop.
pub(crate) struct Stream<'a, A: Act> {
    model: &'a BaseModel,
    adapters: Vec<AdapterRun<'a>>,
    keys: Vec<Vec<A>>,
    values: Vec<Vec<A>>,
    n_cached: usize,
}

impl<'a, A: Act> Stream<'a, A> {
    pub fn new(model: &'a BaseModel, adapters: Vec<AdapterRun<'a>>) -> Self {
        let n = model.config().n_layers;
        Stream {
            model,
            adapters,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            n_cached: 0,
        }
    }

    /// Process `tokens` as the next positions and return the final block's
    /// hidden state at the last new position.
    pub fn advance(&mut self, tokens: &[u32]) -> Result<Vec<A>> {
        let cfg = self.model.config();
        if tokens.is_empty() {
            return Err(Error::Input {
                message: "empty token sequence".to_string(),
            });
        }
        if self.n_cached + tokens.len() > cfg.max_seq_len {
            return Err(Error::Capacity {
                length: self.n_cached + tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let hd = cfg.head_dim();
        let new_len = tokens.len();
        let start = self.n_cached;
        let scale = A::from_f64(1.0 / (hd as f64).sqrt());

        let mut x = embed_acts::<A>(self.model, tokens, start)?;
        let mut h = vec![A::ZERO; d];
        for l in 0..cfg.n_layers {
            let weights = &self.model.blocks()[l];
            let mut q = vec![A::ZERO; new_len * d];
            let mut k = vec![A::ZERO; new_len * d];
            let mut v = vec![A::ZERO; new_len * d];
            for i in 0..new_len {
                rms_norm_into(&x[i * d..(i + 1) * d], &weights.attn_norm, cfg.norm_eps, &mut h);
                project_into(self.model, &self.adapters, l, Projection::AttnQ, &h, &mut q[i * d..(i + 1) * d]);
                project_into(self.model, &self.adapters, l, Projection::AttnK, &h, &mut k[i * d..(i + 1) * d]);
                project_into(self.model, &self.adapters, l, Projection::AttnV, &h, &mut v[i * d..(i + 1) * d]);
                if cfg.positions == PositionEncoding::Rope {
                    apply_rope(&mut q[i * d..(i + 1) * d], start + i, nh, hd);
                    apply_rope(&mut k[i * d..(i + 1) * d], start + i, nh, hd);
                }
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);

            let mut o = vec![A::ZERO; d];
            for i in 0..new_len {
                let ctx = start + i + 1;
                let attn = attend_position(
                    &q[i * d..(i + 1) * d],
                    &self.keys[l],
                    &self.values[l],
                    ctx,
                    nh,
                    hd,
                    scale,
                );
                project_into(self.model, &self.adapters, l, Projection::AttnO, &attn, &mut o);
                for (dst, &src) in x[i * d..(i + 1) * d].iter_mut().zip(o.iter()) {
                    *dst = *dst + src;
                }
            }

            let mut gate = vec![A::ZERO; cfg.d_ff];
            let mut up = vec![A::ZERO; cfg.d_ff];
            let mut down = vec![A::ZERO; d];
            for i in 0..new_len {
                rms_norm_into(&x[i * d..(i + 1) * d], &weights.ffn_norm, cfg.norm_eps, &mut h);
                project_into(self.model, &self.adapters, l, Projection::FfnGate, &h, &mut gate);
                project_into(self.model, &self.adapters, l, Projection::FfnUp, &h, &mut up);
                for (g, &u) in gate.iter_mut().zip(up.iter()) {
                    *g = silu(*g) * u;
                }
                project_into(self.model, &self.adapters, l, Projection::FfnDown, &gate, &mut down);
                for (dst, &src) in x[i * d..(i + 1) * d].iter_mut().zip(down.iter()) {
                    *dst = *dst + src;
                }
            }
        }
        self.n_cached += new_len;
        Ok(x[(new_len - 1) * d..].to_vec())
    }

}

/// Next-token logits from a final-block hidden state (ordinary head path:
/// final normalization always applies here).
pub(crate) fn head_logits<A: Act>(model: &BaseModel, hidden: &[A]) -> Vec<A> {
    let cfg = model.config();
    let mut normed = vec![A::ZERO; cfg.d_model];
    rms_norm_into(hidden, model.final_norm(), cfg.norm_eps, &mut normed);
    let mut logits = vec![A::ZERO; cfg.vocab_size];
    gemv32(model.lm_head(), &normed, &mut logits);
    logits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{make_toy_adapter, make_toy_model, toy_config};

    fn toy() -> BaseModel {
        make_toy_model(7, &toy_config(2, 32, 4, 64, 64, 128)).unwrap()
    }

    fn query() -> Vec<u32> {
        vec![1, 5, 9, 13, 21, 34]
    }

    #[test]
    fn capture_is_deterministic() {
        let model = toy();
        let a = model
            .forward_capture(&query(), None, None, Granularity::AllTokens)
            .unwrap();
        let b = model
            .forward_capture(&query(), None, None, Granularity::AllTokens)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_delta_adapter_equals_base_trace() {
        let model = toy();
        let zero = make_toy_adapter("z", 3, &model, 4, 16.0, None, 0.0).unwrap();
        let base = model
            .forward_capture(&query(), None, None, Granularity::AllTokens)
            .unwrap();
        let adapted = model
            .forward_capture(&query(), Some(&zero), None, Granularity::AllTokens)
            .unwrap();
        assert_eq!(base, adapted);
    }

    #[test]
    fn all_zero_weights_equal_base_bitwise() {
        let model = toy();
        let adapter = make_toy_adapter("a", 3, &model, 4, 16.0, None, 1.0).unwrap();
        let base = model
            .forward_capture(&query(), None, None, Granularity::AllTokens)
            .unwrap();
        let zeroed = model
            .forward_capture(
                &query(),
                Some(&adapter),
                Some(&[0.0, 0.0]),
                Granularity::AllTokens,
            )
            .unwrap();
        for l in 0..base.n_layers() {
            match (base.entry(l), zeroed.entry(l)) {
                (TraceEntry::AllTokens(m1), TraceEntry::AllTokens(m2)) => {
                    for (a, b) in m1.as_slice().iter().zip(m2.as_slice()) {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
                _ => panic!("granularity mismatch"),
            }
        }
    }

    #[test]
    fn last_token_matches_all_tokens_final_row() {
        let model = toy();
        let adapter = make_toy_adapter("a", 3, &model, 4, 16.0, None, 1.0).unwrap();
        let last = model
            .forward_capture(&query(), Some(&adapter), None, Granularity::LastToken)
            .unwrap();
        let all = model
            .forward_capture(&query(), Some(&adapter), None, Granularity::AllTokens)
            .unwrap();
        for l in 0..last.n_layers() {
            let lv = last.last_token(l);
            let av = all.last_token(l);
            for (x, y) in lv.as_slice().iter().zip(av.as_slice()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lens_is_valid_distribution_per_layer() {
        let model = toy();
        let trace = model
            .forward_capture(&query(), None, None, Granularity::AllTokens)
            .unwrap();
        for l in 0..trace.n_layers() {
            let dist = model.logit_lens(&trace.last_token(l)).unwrap();
            let sum: f64 = dist.as_slice().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn lens_of_zero_vector_is_valid() {
        let model = toy();
        let dist = model.logit_lens(&Vector::zeros(32)).unwrap();
        let sum: f64 = dist.as_slice().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn lens_matches_ordinary_next_token_distribution() {
        let model = toy();
        let trace = model
            .forward_capture(&query(), None, None, Granularity::LastToken)
            .unwrap();
        let lens = model.logit_lens(&trace.last_token(1)).unwrap();
        let ordinary = softmax(&model.next_token_logits(&query()).unwrap()).unwrap();
        for (a, b) in lens.as_slice().iter().zip(ordinary.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn embed_learned_positions_match_table_lookup() {
        let mut cfg = toy_config(2, 32, 4, 64, 64, 128);
        cfg.positions = PositionEncoding::Learned;
        let model = make_toy_model(7, &cfg).unwrap();
        let m = model.embed(&[3, 7]).unwrap();
        let pe = model.pos_embedding().unwrap();
        for (row_idx, &tok) in [3usize, 7].iter().enumerate() {
            let erow = model.embedding().row(tok);
            let prow = pe.row(row_idx);
            for c in 0..32 {
                let expected = f64::from(erow[c]) + f64::from(prow[c]);
                assert_eq!(m.get(row_idx, c).to_bits(), expected.to_bits());
            }
        }
    }

    #[test]
    fn embed_single_bos_token() {
        let model = make_toy_model(7, &toy_config(2, 32, 4, 64, 259, 128)).unwrap();
        let m = model.embed(&[256]).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 32));
    }

    #[test]
    fn embed_repeated_token_rows_identical() {
        let model = toy();
        let m = model.embed(&[5, 5]).unwrap();
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let model = toy();
        assert!(matches!(
            model.embed(&[64]),
            Err(Error::Vocab { token: 64, .. })
        ));
    }

    #[test]
    fn capture_rejects_overlong_sequence() {
        let model = toy();
        let long = vec![1u32; 129];
        assert!(matches!(
            model.forward_capture(&long, None, None, Granularity::LastToken),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn misbound_adapter_reports_target() {
        let model = toy();
        let a = Tensor32::new(2, 32, vec![0.1; 64]).unwrap();
        let b = Tensor32::new(32, 2, vec![0.1; 64]).unwrap();
        let layer = crate::adapter::LoraLayer::new("block9.attn_q", a, b, 8.0).unwrap();
        let adapter =
            crate::adapter::LoraAdapter::new("bad", vec![layer], Default::default()).unwrap();
        match model.forward_capture(&query(), Some(&adapter), None, Granularity::LastToken) {
            Err(Error::AdapterBinding { details }) => {
                assert!(details[0].contains("block9.attn_q"));
            }
            other => panic!("expected binding error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_reports_expected_and_actual() {
        let model = toy();
        let a = Tensor32::new(2, 16, vec![0.1; 32]).unwrap();
        let b = Tensor32::new(32, 2, vec![0.1; 64]).unwrap();
        let layer = crate::adapter::LoraLayer::new("block0.attn_q", a, b, 8.0).unwrap();
        let adapter =
            crate::adapter::LoraAdapter::new("narrow", vec![layer], Default::default()).unwrap();
        match crate::adapter::bind(&adapter, &model) {
            Err(Error::AdapterBinding { details }) => {
                assert!(details[0].contains("expected 32x32"));
                assert!(details[0].contains("got 32x16"));
            }
            other => panic!("expected binding error, got {other:?}"),
        }
    }

    #[test]
    fn incremental_stream_matches_full_pass_bitwise() {
        let model = toy();
        let adapter = make_toy_adapter("a", 3, &model, 4, 16.0, None, 1.0).unwrap();
        let tokens = query();
        let runs = vec![AdapterRun {
            bound: crate::adapter::BoundAdapter::bind(&adapter, &model).unwrap(),
            scales: vec![0.7, 0.3],
        }];
        let full = capture_pass::<f32>(&model, &runs, &tokens).unwrap();
        let d = model.config().d_model;
        let full_last = &full[model.config().n_layers - 1][(tokens.len() - 1) * d..];

        let runs2 = vec![AdapterRun {
            bound: crate::adapter::BoundAdapter::bind(&adapter, &model).unwrap(),
            scales: vec![0.7, 0.3],
        }];
        let mut stream: Stream<'_, f32> = Stream::new(&model, runs2);
        let mut hidden = stream.advance(&tokens[..1]).unwrap();
        for i in 1..tokens.len() {
            hidden = stream.advance(&tokens[i..=i]).unwrap();
        }
        for (a, b) in full_last.iter().zip(hidden.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn block_recurrence_zero_delta_equals_base() {
        let mut cfg = toy_config(2, 32, 4, 64, 64, 128);
        cfg.adapter_stream_mode = AdapterStreamMode::BlockRecurrence;
        let model = make_toy_model(7, &cfg).unwrap();
        let zero = make_toy_adapter("z", 3, &model, 4, 16.0, None, 0.0).unwrap();
        let base = model
            .forward_capture(&query(), None, None, Granularity::AllTokens)
            .unwrap();
        let adapted = model
            .forward_capture(&query(), Some(&zero), None, Granularity::AllTokens)
            .unwrap();
        assert_eq!(base, adapted);
    }

    #[test]
    fn block_recurrence_differs_from_merged_on_nonzero_adapter() {
        let merged_model = toy();
        let mut cfg = toy_config(2, 32, 4, 64, 64, 128);
        cfg.adapter_stream_mode = AdapterStreamMode::BlockRecurrence;
        let literal_model = make_toy_model(7, &cfg).unwrap();
        let adapter = make_toy_adapter("a", 3, &merged_model, 4, 16.0, None, 1.0).unwrap();
        let merged = merged_model
            .forward_capture(&query(), Some(&adapter), None, Granularity::LastToken)
            .unwrap();
        let literal = literal_model
            .forward_capture(&query(), Some(&adapter), None, Granularity::LastToken)
            .unwrap();
        let m = merged.last_token(1);
        let l = literal.last_token(1);
        let diff: f64 = m
            .as_slice()
            .iter()
            .zip(l.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "modes should be observably different");
    }

    #[test]
    fn target_name_roundtrip() {
        for l in 0..3 {
            for proj in Projection::ALL {
                let name = target_name(l, proj);
                assert_eq!(parse_target(&name), Some((l, proj)));
            }
        }
        assert_eq!(parse_target("block0.nope"), None);
        assert_eq!(parse_target("blk0.attn_q"), None);
    }
}
