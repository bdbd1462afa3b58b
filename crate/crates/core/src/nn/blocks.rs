//! Transformer building blocks: pre-norm cross-attention, gated fusion,
//! learnable-query resampler and attention pooling.

use std::cell::Cell;

use super::params::{Bound, Init, ParamId, ParamSet};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

thread_local! {
    static FUSION_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of resampler and gated-fusion forward passes run on the
/// current thread.
pub fn fusion_invocations() -> u64 {
    FUSION_CALLS.with(Cell::get)
}

fn count_fusion_call() {
    FUSION_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let mut layer = Self::without_bias(ps, init, name, in_dim, out_dim);
        layer.bias = Some(ps.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        layer
    }

    pub fn without_bias<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), init.normal(in_dim, out_dim, std));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::full(1, dim, T::one())),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), T::of(LN_EPS))
    }
}

/// Pre-norm multi-head cross-attention followed by a GELU feed-forward,
/// both with residual connections. No positional encoding is applied, so
/// the output is invariant to the order of the key/value rows.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub dim: usize,
    pub heads: usize,
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl CrossAttentionBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        let hidden = dim * ff_mult.max(1);
        Ok(Self {
            dim,
            heads,
            norm_q: LayerNorm::new(ps, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(ps, &format!("{name}.norm_kv"), dim),
            q_proj: Linear::new(ps, init, &format!("{name}.q"), dim, dim),
            // a key bias shifts every logit of a query row equally and has
            // no effect after the softmax
            k_proj: Linear::without_bias(ps, init, &format!("{name}.k"), dim, dim),
            v_proj: Linear::new(ps, init, &format!("{name}.v"), dim, dim),
            out_proj: Linear::new(ps, init, &format!("{name}.out"), dim, dim),
            norm_ff: LayerNorm::new(ps, &format!("{name}.norm_ff"), dim),
            ff_in: Linear::new(ps, init, &format!("{name}.ff_in"), dim, hidden),
            ff_out: Linear::new(ps, init, &format!("{name}.ff_out"), hidden, dim),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        kv: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, queries, kv)?.0)
    }

    /// Forward pass that also returns the per-head attention weights
    /// (`m x L` each).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        kv: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (_, qd) = g.shape(queries);
        let (_, kd) = g.shape(kv);
        if qd != self.dim || kd != self.dim {
            return Err(Error::shape(
                "cross_attention_block",
                format!("query dim {qd}, key/value dim {kd}, model dim {}", self.dim),
            ));
        }
        let qn = self.norm_q.forward(g, p, queries)?;
        let kvn = self.norm_kv.forward(g, p, kv)?;
        let q = self.q_proj.forward(g, p, qn)?;
        let k = self.k_proj.forward(g, p, kvn)?;
        let v = self.v_proj.forward(g, p, kvn)?;

        let head_dim = self.dim / self.heads;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let logits = g.matmul_t(qh, kh)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            heads.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = g.concat_cols(&heads)?;
        let attended = self.out_proj.forward(g, p, merged)?;
        let x = g.add(queries, attended)?;

        let xn = self.norm_ff.forward(g, p, x)?;
        let hidden = self.ff_in.forward(g, p, xn)?;
        let hidden = g.gelu(hidden);
        let ff = self.ff_out.forward(g, p, hidden)?;
        Ok((g.add(x, ff)?, weights))
    }
}

/// Cross-attention blocks applied in sequence; the key/value tokens are
/// the same for every block while the query stream is updated.
#[derive(Clone, Debug)]
pub struct CrossAttentionStack {
    pub blocks: Vec<CrossAttentionBlock>,
}

impl CrossAttentionStack {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        cfg: &BlockConfig,
        layers: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| {
                CrossAttentionBlock::new(
                    ps,
                    init,
                    &format!("{name}.{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.ff_mult,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        kv: Var,
    ) -> Result<Var> {
        let mut x = queries;
        for block in &self.blocks {
            x = block.forward(g, p, x, kv)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

/// `tanh(gate) * stack(visual, modality)`. The gate starts at 0, so a
/// freshly initialized fusion contributes exactly nothing.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub stack: CrossAttentionStack,
    pub gate: ParamId,
}

impl GatedFusion {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        cfg: &BlockConfig,
        layers: usize,
    ) -> Result<Self> {
        let stack = CrossAttentionStack::new(ps, init, name, cfg, layers)?;
        let gate = ps.add(format!("{name}.gate"), Tensor::zeros(1, 1));
        Ok(Self { stack, gate })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        visual: Var,
        modality: Var,
    ) -> Result<Var> {
        count_fusion_call();
        let fused = self.stack.forward(g, p, visual, modality)?;
        let gate = g.tanh(p.var(self.gate));
        g.mul_scalar(fused, gate)
    }
}

/// `m` learnable queries cross-attending to a variable-length input that
/// carries learned positional embeddings.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub queries: ParamId,
    pub positions: ParamId,
    pub stack: CrossAttentionStack,
    pub num_queries: usize,
    pub max_len: usize,
}

impl Resampler {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        cfg: &BlockConfig,
        layers: usize,
        num_queries: usize,
        max_len: usize,
    ) -> Result<Self> {
        if num_queries == 0 || max_len == 0 {
            return Err(Error::invalid("resampler needs at least one query and position"));
        }
        let queries = ps.add(
            format!("{name}.queries"),
            init.normal(num_queries, cfg.dim, 1.0),
        );
        let positions = ps.add(
            format!("{name}.positions"),
            init.normal(max_len, cfg.dim, 0.02),
        );
        let stack = CrossAttentionStack::new(ps, init, name, cfg, layers)?;
        Ok(Self {
            queries,
            positions,
            stack,
            num_queries,
            max_len,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var> {
        count_fusion_call();
        let (len, _) = g.shape(tokens);
        if len > self.max_len {
            return Err(Error::shape(
                "resample",
                format!("{len} input tokens exceed {} positions", self.max_len),
            ));
        }
        let idx: Vec<usize> = (0..len).collect();
        let pos = g.select_rows(p.var(self.positions), &idx)?;
        let kv = g.add(tokens, pos)?;
        self.stack.forward(g, p, p.var(self.queries), kv)
    }
}

/// Single-vector aggregation: weights `softmax_i(q . tanh(W x_i))`,
/// output `sum_i w_i x_i`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPool {
    pub proj: ParamId,
    pub query: ParamId,
}

impl AttentionPool {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, dim: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            proj: ps.add(format!("{name}.proj"), init.normal(dim, dim, std)),
            query: ps.add(format!("{name}.query"), init.normal(1, dim, std)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var> {
        let h = g.matmul(tokens, p.var(self.proj))?;
        let h = g.tanh(h);
        let scores = g.matmul_t(p.var(self.query), h)?; // 1 x m
        let w = g.softmax_rows(scores);
        g.matmul(w, tokens)
    }
}
