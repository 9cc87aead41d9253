//! Independent brute-force reference implementation used by the test
//! suites. Everything here recomputes from raw weight accessors with plain
//! dense f64 matrices: full attention matrices with an explicit causal
//! mask, dense-merged adapter deltas, and its own softmax/rmsnorm/KL
//! formulations. It deliberately shares no forward-pass code with the
//! library.

// Index-loop style is the point of a naive oracle; each test target uses a
// different subset of these helpers.
#![allow(dead_code, clippy::needless_range_loop)]

use qaflora::{BaseModel, LoraLayer, PositionEncoding, Projection};

pub struct OracleBlock {
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub o: Vec<Vec<f64>>,
    pub gate: Vec<Vec<f64>>,
    pub up: Vec<Vec<f64>>,
    pub down: Vec<Vec<f64>>,
}

pub struct OracleModel {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub eps: f64,
    pub rope: bool,
    pub lens_final_norm: bool,
    pub embedding: Vec<Vec<f64>>,
    pub pos: Option<Vec<Vec<f64>>>,
    pub blocks: Vec<OracleBlock>,
    pub final_norm: Vec<f64>,
    pub lm_head: Vec<Vec<f64>>,
}

fn to_rows(t: &qaflora::Tensor32) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn gains(g: &[f32]) -> Vec<f64> {
    g.iter().map(|&v| f64::from(v)).collect()
}

impl OracleModel {
    pub fn from_model(model: &BaseModel) -> Self {
        let cfg = model.config();
        OracleModel {
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            eps: cfg.norm_eps,
            rope: cfg.positions == PositionEncoding::Rope,
            lens_final_norm: cfg.lens_apply_final_norm,
            embedding: to_rows(model.embedding()),
            pos: model.pos_embedding().map(to_rows),
            blocks: model
                .blocks()
                .iter()
                .map(|b| OracleBlock {
                    attn_norm: gains(&b.attn_norm),
                    ffn_norm: gains(&b.ffn_norm),
                    q: to_rows(&b.attn_q),
                    k: to_rows(&b.attn_k),
                    v: to_rows(&b.attn_v),
                    o: to_rows(&b.attn_o),
                    gate: to_rows(&b.ffn_gate),
                    up: to_rows(&b.ffn_up),
                    down: to_rows(&b.ffn_down),
                })
                .collect(),
            final_norm: gains(model.final_norm()),
            lm_head: to_rows(model.lm_head()),
        }
    }

    fn weight_mut(&mut self, block: usize, proj: Projection) -> &mut Vec<Vec<f64>> {
        let b = &mut self.blocks[block];
        match proj {
            Projection::AttnQ => &mut b.q,
            Projection::AttnK => &mut b.k,
            Projection::AttnV => &mut b.v,
            Projection::AttnO => &mut b.o,
            Projection::FfnGate => &mut b.gate,
            Projection::FfnUp => &mut b.up,
            Projection::FfnDown => &mut b.down,
        }
    }

    /// Densely merge `alpha · (scale/rank) · B·A` into the named weight.
    pub fn merge_delta(&mut self, block: usize, proj: Projection, layer: &LoraLayer, alpha: f64) {
        let delta = dense_delta(layer);
        let w = self.weight_mut(block, proj);
        for (wrow, drow) in w.iter_mut().zip(delta.iter()) {
            for (wv, dv) in wrow.iter_mut().zip(drow.iter()) {
                *wv += alpha * dv;
            }
        }
    }

    /// Per-block residual-stream outputs: `[layer][pos][dim]`.
    pub fn capture(&self, tokens: &[u32]) -> Vec<Vec<Vec<f64>>> {
        let seq = tokens.len();
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut row = self.embedding[t as usize].clone();
                if let Some(pos) = &self.pos {
                    for (r, p) in row.iter_mut().zip(pos[i].iter()) {
                        *r += p;
                    }
                }
                row
            })
            .collect();
        let mut outputs = Vec::with_capacity(self.n_layers);
        for block in &self.blocks {
            // attention
            let normed: Vec<Vec<f64>> = x
                .iter()
                .map(|row| rms_norm(row, &block.attn_norm, self.eps))
                .collect();
            let mut qs: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&block.q, h)).collect();
            let mut ks: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&block.k, h)).collect();
            let vs: Vec<Vec<f64>> = normed.iter().map(|h| matvec(&block.v, h)).collect();
            if self.rope {
                for (i, row) in qs.iter_mut().enumerate() {
                    rope(row, i, self.n_heads);
                }
                for (i, row) in ks.iter_mut().enumerate() {
                    rope(row, i, self.n_heads);
                }
            }
            let hd = self.d_model / self.n_heads;
            let scale = 1.0 / (hd as f64).sqrt();
            for i in 0..seq {
                let mut attn = vec![0.0; self.d_model];
                for h in 0..self.n_heads {
                    // full score row with explicit causal mask
                    let mut scores = vec![f64::NEG_INFINITY; seq];
                    for (j, s) in scores.iter_mut().enumerate() {
                        if j <= i {
                            let mut dot = 0.0;
                            for t in 0..hd {
                                dot += qs[i][h * hd + t] * ks[j][h * hd + t];
                            }
                            *s = dot * scale;
                        }
                    }
                    let probs = softmax_lse(&scores);
                    for (j, &p) in probs.iter().enumerate() {
                        if p > 0.0 {
                            for t in 0..hd {
                                attn[h * hd + t] += p * vs[j][h * hd + t];
                            }
                        }
                    }
                }
                let proj = matvec(&block.o, &attn);
                for (xv, pv) in x[i].iter_mut().zip(proj.iter()) {
                    *xv += pv;
                }
            }
            // feed-forward
            for row in x.iter_mut() {
                let h = rms_norm(row, &block.ffn_norm, self.eps);
                let g = matvec(&block.gate, &h);
                let u = matvec(&block.up, &h);
                let act: Vec<f64> = g
                    .iter()
                    .zip(u.iter())
                    .map(|(&gv, &uv)| gv * sigmoid(gv) * uv)
                    .collect();
                let down = matvec(&block.down, &act);
                for (xv, dv) in row.iter_mut().zip(down.iter()) {
                    *xv += dv;
                }
            }
            outputs.push(x.clone());
        }
        outputs
    }

    /// Logit-lens distribution from a hidden state.
    pub fn lens(&self, hidden: &[f64]) -> Vec<f64> {
        let h = if self.lens_final_norm {
            rms_norm(hidden, &self.final_norm, self.eps)
        } else {
            hidden.to_vec()
        };
        softmax_lse(&matvec(&self.lm_head, &h))
    }

    /// Ordinary next-token logits (final norm always applied).
    pub fn head_logits(&self, hidden: &[f64]) -> Vec<f64> {
        matvec(&self.lm_head, &rms_norm(hidden, &self.final_norm, self.eps))
    }
}

/// `(scale/rank) · B·A` by triple loop over the raw factors.
pub fn dense_delta(layer: &LoraLayer) -> Vec<Vec<f64>> {
    let (d_out, d_in, r) = (layer.d_out(), layer.d_in(), layer.rank());
    let c = layer.scale() / r as f64;
    let mut out = vec![vec![0.0; d_in]; d_out];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..r {
                acc += f64::from(layer.b_factor().get(i, t)) * f64::from(layer.a_factor().get(t, j));
            }
            *cell = c * acc;
        }
    }
    out
}

pub fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn rms_norm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    x.iter().zip(g.iter()).map(|(v, gv)| v / denom * gv).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax via the log-sum-exp identity (`p_i = exp(z_i − lse)`), a
/// different algebraic route than the library's normalize-by-sum.
pub fn softmax_lse(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|&v| (v - lse).exp()).collect()
}

/// KL in nats via the difference-of-logs form with the 1e-10 floor.
pub fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(1e-10).ln()))
        .sum()
}

/// Rotary rotation matching the architecture definition (adjacent pairs,
/// base 10000), written from the angle formula directly.
pub fn rope(row: &mut [f64], pos: usize, n_heads: usize) {
    let hd = row.len() / n_heads;
    for h in 0..n_heads {
        for i in 0..hd / 2 {
            let theta = (pos as f64) * 10000f64.powf(-(2.0 * i as f64) / hd as f64);
            let (s, c) = theta.sin_cos();
            let a = row[h * hd + 2 * i];
            let b = row[h * hd + 2 * i + 1];
            row[h * hd + 2 * i] = a * c - b * s;
            row[h * hd + 2 * i + 1] = a * s + b * c;
        }
    }
}

/// Mixed relative/absolute comparison: `|a−b| ≤ tol·max(1, |a|, |b|)`.
pub fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
