//! Prompt-injectable vision transformer.
//!
//! The token sequence at every layer is `[CLS, prompts, patches]` (or
//! `[prompts, CLS, patches]` with [`PromptPosition::BeforeCls`]). Prompt
//! positions are replaced, never accumulated: their outputs are dropped after
//! each layer and the next layer's prompt group is inserted fresh.

use crate::config::{BackboneConfig, PromptPosition, ScalingMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::PixelNorm;
use crate::nn::{layer_norm, Block, BlockHooks, BlockWeights, SiteHook};
use crate::params::{Init, ParamSpec};

pub const PREFIX: &str = "backbone";

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub pixel_norm: PixelNorm,
}

/// Per-layer channel scaling handed to the backbone.
#[derive(Debug, Clone)]
pub struct ScalingVars {
    pub mode: ScalingMode,
    /// `(attention-projection site, MLP site)` per layer.
    pub sites: Vec<(Option<Var>, Option<Var>)>,
}

/// What one layer saw and produced at the prompt and patch positions.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub prompt_in: Var,
    pub prompt_out: Var,
    pub patches_in: Var,
    pub patches_out: Var,
}

#[derive(Debug, Clone)]
pub struct VisualOutput {
    /// Final-layer CLS after the output normalization.
    pub final_cls: Var,
    /// Spatial tokens entering the final layer, `grid² × L_V`.
    pub penultimate_grid: Var,
    /// CLS token entering the final layer.
    pub penultimate_cls: Var,
    pub trace: Vec<LayerTrace>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, pixel_norm: PixelNorm) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, pixel_norm })
    }

    pub fn layer_prefix(i: usize) -> String {
        format!("{PREFIX}.layers.{i}")
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let c = &self.cfg;
        let d = c.embed_dim;
        let mut v = vec![
            ParamSpec::new(
                format!("{PREFIX}.patch_embed.weight"),
                (d, c.patch_pixels()),
                Init::Normal((c.patch_pixels() as f64).powf(-0.5)),
            ),
            ParamSpec::new(format!("{PREFIX}.class_embedding"), (1, d), Init::Normal(0.02)),
            ParamSpec::new(
                format!("{PREFIX}.pos_embed"),
                (1 + c.num_patches(), d),
                Init::Normal(0.02),
            ),
        ];
        v.extend(crate::nn::norm_specs(&format!("{PREFIX}.ln_pre"), d));
        for i in 0..c.num_layers {
            v.extend(BlockWeights::specs(&Self::layer_prefix(i), d, c.mlp_dim()));
        }
        v.extend(crate::nn::norm_specs(&format!("{PREFIX}.ln_post"), d));
        v
    }

    pub fn block(&self, i: usize) -> Block {
        Block {
            weights: BlockWeights::under(&Self::layer_prefix(i)),
            heads: self.cfg.num_heads,
            causal: false,
            eps: self.cfg.norm_eps,
        }
    }

    /// Sequence length inside a layer with `prompts` prompt tokens.
    pub fn sequence_len(&self, prompts: usize) -> usize {
        1 + prompts + self.cfg.num_patches()
    }

    /// Patch embedding + CLS + positions + pre-norm: `(1 + grid²) × L_V`.
    pub fn embed(&self, g: &mut Graph, patches: Var) -> Var {
        let w = g.param(&format!("{PREFIX}.patch_embed.weight"));
        let tokens = g.matmul_t(patches, w);
        let cls = g.param(&format!("{PREFIX}.class_embedding"));
        let seq = g.concat_rows(&[cls, tokens]);
        let pos = g.param(&format!("{PREFIX}.pos_embed"));
        let seq = g.add(seq, pos);
        layer_norm(g, seq, &format!("{PREFIX}.ln_pre"), self.cfg.norm_eps)
    }

    /// Runs the transformer with optional per-layer prompts and scaling.
    ///
    /// `patches` is the flattened image from [`crate::image::patchify`].
    pub fn forward(
        &self,
        g: &mut Graph,
        patches: Var,
        prompts: Option<&[Var]>,
        scaling: Option<&ScalingVars>,
        keep_trace: bool,
    ) -> Result<VisualOutput> {
        let c = &self.cfg;
        let (rows, cols) = g.shape(patches);
        if rows != c.num_patches() || cols != c.patch_pixels() {
            return Err(Error::Shape(format!(
                "image patches {rows}x{cols}, expected {}x{}",
                c.num_patches(),
                c.patch_pixels()
            )));
        }
        if let Some(p) = prompts {
            if p.len() != c.num_layers {
                return Err(Error::Shape(format!(
                    "{} prompt groups for {} layers",
                    p.len(),
                    c.num_layers
                )));
            }
            for v in p {
                if g.shape(*v).1 != c.embed_dim {
                    return Err(Error::Shape(format!(
                        "prompt width {} != embed_dim {}",
                        g.shape(*v).1,
                        c.embed_dim
                    )));
                }
            }
        }
        if let Some(s) = scaling {
            if s.sites.len() != c.num_layers {
                return Err(Error::Shape(format!(
                    "{} scaling layers for {} layers",
                    s.sites.len(),
                    c.num_layers
                )));
            }
        }

        let n_patch = c.num_patches();
        let mut h = self.embed(g, patches);
        let mut penultimate = None;
        let mut trace = Vec::new();
        for i in 0..c.num_layers {
            if i + 1 == c.num_layers {
                penultimate = Some(h);
            }
            let hooks = scaling.map(|s| hooks_for(s, i)).unwrap_or_default();
            let block = self.block(i);
            match prompts {
                None => h = block.forward(g, h, &hooks),
                Some(p) => {
                    let prompt = p[i];
                    let n = g.shape(prompt).0;
                    let cls = g.slice_rows(h, 0, 1);
                    let grid = g.slice_rows(h, 1, n_patch);
                    let (seq, cls_at, prompt_at, grid_at) = match c.prompt_position {
                        PromptPosition::AfterCls => (g.concat_rows(&[cls, prompt, grid]), 0, 1, 1 + n),
                        PromptPosition::BeforeCls => (g.concat_rows(&[prompt, cls, grid]), n, 0, 1 + n),
                    };
                    let out = block.forward(g, seq, &hooks);
                    let cls_out = g.slice_rows(out, cls_at, 1);
                    let grid_out = g.slice_rows(out, grid_at, n_patch);
                    if keep_trace {
                        let prompt_out = g.slice_rows(out, prompt_at, n);
                        trace.push(LayerTrace {
                            prompt_in: prompt,
                            prompt_out,
                            patches_in: grid,
                            patches_out: grid_out,
                        });
                    }
                    h = g.concat_rows(&[cls_out, grid_out]);
                }
            }
        }
        let pen = penultimate.expect("at least one layer");
        let penultimate_cls = g.slice_rows(pen, 0, 1);
        let penultimate_grid = g.slice_rows(pen, 1, n_patch);
        let cls = g.slice_rows(h, 0, 1);
        let final_cls = layer_norm(g, cls, &format!("{PREFIX}.ln_post"), c.norm_eps);
        Ok(VisualOutput {
            final_cls,
            penultimate_grid,
            penultimate_cls,
            trace,
        })
    }
}

fn hooks_for(s: &ScalingVars, layer: usize) -> BlockHooks {
    let (attn, mlp) = s.sites[layer];
    let site = |v: Option<Var>, name: &str| match s.mode {
        ScalingMode::None => SiteHook::None,
        ScalingMode::Direct => v.map(SiteHook::Direct).unwrap_or_default(),
        ScalingMode::Sideway | ScalingMode::SidewayNoScale => SiteHook::Sideway {
            scale: if s.mode == ScalingMode::Sideway { v } else { None },
            prefix: crate::textual_prompting::sideway_prefix(layer, name),
        },
    };
    BlockHooks {
        attn: site(attn, "attn"),
        mlp: site(mlp, "mlp"),
    }
}

/// Parameter-name mapping from the published Hugging Face CLIP ViT-B/32
/// checkpoint to internal names, with the transform each tensor needs.
pub fn pretrained_name_map(num_vision_layers: usize, num_text_layers: usize) -> Vec<(String, String)> {
    let mut m = vec![
        (
            "backbone.patch_embed.weight".to_string(),
            "vision_model.embeddings.patch_embedding.weight".to_string(),
        ),
        (
            "backbone.class_embedding".into(),
            "vision_model.embeddings.class_embedding".into(),
        ),
        (
            "backbone.pos_embed".into(),
            "vision_model.embeddings.position_embedding.weight".into(),
        ),
        ("backbone.ln_pre.weight".into(), "vision_model.pre_layrnorm.weight".into()),
        ("backbone.ln_pre.bias".into(), "vision_model.pre_layrnorm.bias".into()),
        ("backbone.ln_post.weight".into(), "vision_model.post_layernorm.weight".into()),
        ("backbone.ln_post.bias".into(), "vision_model.post_layernorm.bias".into()),
        (
            "text.token_embedding".into(),
            "text_model.embeddings.token_embedding.weight".into(),
        ),
        (
            "text.pos_embed".into(),
            "text_model.embeddings.position_embedding.weight".into(),
        ),
        ("text.ln_final.weight".into(), "text_model.final_layer_norm.weight".into()),
        ("text.ln_final.bias".into(), "text_model.final_layer_norm.bias".into()),
        ("text.projection.weight".into(), "text_projection.weight".into()),
    ];
    let layer = |ours: &str, theirs: &str, m: &mut Vec<(String, String)>| {
        for (a, b) in [
            ("ln_1", "layer_norm1"),
            ("ln_2", "layer_norm2"),
            ("attn.q", "self_attn.q_proj"),
            ("attn.k", "self_attn.k_proj"),
            ("attn.v", "self_attn.v_proj"),
            ("attn.out", "self_attn.out_proj"),
            ("mlp.fc1", "mlp.fc1"),
            ("mlp.fc2", "mlp.fc2"),
        ] {
            for p in ["weight", "bias"] {
                m.push((format!("{ours}.{a}.{p}"), format!("{theirs}.{b}.{p}")));
            }
        }
    };
    for i in 0..num_vision_layers {
        layer(
            &Backbone::layer_prefix(i),
            &format!("vision_model.encoder.layers.{i}"),
            &mut m,
        );
    }
    for i in 0..num_text_layers {
        layer(
            &format!("text.layers.{i}"),
            &format!("text_model.encoder.layers.{i}"),
            &mut m,
        );
    }
    m
}
