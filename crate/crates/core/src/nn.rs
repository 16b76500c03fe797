//! Transformer building blocks expressed on the [`Graph`] tape.
//!
//! Linear weights are stored `out × in`, biases and norm affines as `1 × n`
//! rows.

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec};

pub fn linear(g: &mut Graph, x: Var, prefix: &str, bias: bool) -> Var {
    let w = g.param(&format!("{prefix}.weight"));
    let y = g.matmul_t(x, w);
    if bias {
        let b = g.param(&format!("{prefix}.bias"));
        g.add_row(y, b)
    } else {
        y
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str, eps: f64) -> Var {
    let gamma = g.param(&format!("{prefix}.weight"));
    let beta = g.param(&format!("{prefix}.bias"));
    g.layer_norm(x, gamma, beta, eps)
}

pub fn linear_specs(prefix: &str, input: usize, output: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(
        format!("{prefix}.weight"),
        (output, input),
        Init::Normal((input as f64).powf(-0.5)),
    )];
    if bias {
        v.push(ParamSpec::new(format!("{prefix}.bias"), (1, output), Init::Zeros));
    }
    v
}

pub fn norm_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), (1, dim), Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), (1, dim), Init::Zeros),
    ]
}

/// Where each part of a pre-norm transformer block reads its weights from.
///
/// Local patch branches reuse the attention/MLP weights of another block
/// while owning their normalization parameters, so the prefixes are separate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockWeights {
    pub ln_1: String,
    pub attn: String,
    pub ln_2: String,
    pub mlp: String,
}

impl BlockWeights {
    pub fn under(prefix: &str) -> Self {
        Self {
            ln_1: format!("{prefix}.ln_1"),
            attn: format!("{prefix}.attn"),
            ln_2: format!("{prefix}.ln_2"),
            mlp: format!("{prefix}.mlp"),
        }
    }

    pub fn specs(prefix: &str, dim: usize, mlp_dim: usize) -> Vec<ParamSpec> {
        let w = Self::under(prefix);
        let mut v = norm_specs(&w.ln_1, dim);
        for part in ["q", "k", "v", "out"] {
            v.extend(linear_specs(&format!("{}.{part}", w.attn), dim, dim, true));
        }
        v.extend(norm_specs(&w.ln_2, dim));
        v.extend(linear_specs(&format!("{}.fc1", w.mlp), dim, mlp_dim, true));
        v.extend(linear_specs(&format!("{}.fc2", w.mlp), mlp_dim, dim, true));
        v
    }
}

/// Modification applied at one branch (attention output projection or MLP)
/// of a block.
#[derive(Debug, Clone, Default)]
pub enum SiteHook {
    #[default]
    None,
    /// `V' = s ⊙ V + V` on the branch output.
    Direct(Var),
    /// `V' = FC2(s ⊙ FC1(V_in)) + branch(V_in)`; `scale = None` drops the
    /// text scaling and keeps the bare side branch.
    Sideway {
        scale: Option<Var>,
        prefix: String,
    },
}

#[derive(Debug, Clone, Default)]
pub struct BlockHooks {
    pub attn: SiteHook,
    pub mlp: SiteHook,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub weights: BlockWeights,
    pub heads: usize,
    pub causal: bool,
    pub eps: f64,
}

impl Block {
    pub fn forward(&self, g: &mut Graph, x: Var, hooks: &BlockHooks) -> Var {
        let w = &self.weights;
        let h = layer_norm(g, x, &w.ln_1, self.eps);
        let ctx = self.attention_context(g, h);
        let attn_out = linear(g, ctx, &format!("{}.out", w.attn), true);
        let attn_out = apply_hook(g, &hooks.attn, ctx, attn_out);
        let x = g.add(x, attn_out);

        let h2 = layer_norm(g, x, &w.ln_2, self.eps);
        let m = linear(g, h2, &format!("{}.fc1", w.mlp), true);
        let m = g.quick_gelu(m);
        let m = linear(g, m, &format!("{}.fc2", w.mlp), true);
        let m = apply_hook(g, &hooks.mlp, h2, m);
        g.add(x, m)
    }

    /// Multi-head attention up to (not including) the output projection.
    fn attention_context(&self, g: &mut Graph, h: Var) -> Var {
        let a = &self.weights.attn;
        let q = linear(g, h, &format!("{a}.q"), true);
        let k = linear(g, h, &format!("{a}.k"), true);
        let v = linear(g, h, &format!("{a}.v"), true);
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = (dh as f64).powf(-0.5);
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh);
            let kh = g.slice_cols(k, head * dh, dh);
            let vh = g.slice_cols(v, head * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores, self.causal);
            outs.push(g.matmul(probs, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        }
    }
}

fn apply_hook(g: &mut Graph, hook: &SiteHook, input: Var, output: Var) -> Var {
    match hook {
        SiteHook::None => output,
        SiteHook::Direct(s) => apply_direct(g, output, *s),
        SiteHook::Sideway { scale, prefix } => apply_sideway(g, input, output, *scale, prefix),
    }
}

/// `s ⊙ V + V`, `s` broadcast over token rows.
pub fn apply_direct(g: &mut Graph, v: Var, s: Var) -> Var {
    let scaled = g.mul_row(v, s);
    g.add(v, scaled)
}

/// `FC2(s ⊙ FC1(V_in)) + base`, where `base` is the frozen branch evaluated on
/// `V_in`.
pub fn apply_sideway(g: &mut Graph, input: Var, base: Var, s: Option<Var>, prefix: &str) -> Var {
    let hidden = linear(g, input, &format!("{prefix}.fc1"), false);
    let hidden = match s {
        Some(s) => g.mul_row(hidden, s),
        None => hidden,
    };
    let side = linear(g, hidden, &format!("{prefix}.fc2"), false);
    g.add(base, side)
}
