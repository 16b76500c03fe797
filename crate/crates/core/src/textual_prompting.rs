//! Text-derived channel scaling.
//!
//! The frozen text tower embeds the category sentence (or the learnable
//! prompt); one shared MLP maps that embedding to a scaling vector that is
//! applied at the attention output projection and the MLP of every backbone
//! layer, either directly on the branch output or inside a low-rank side
//! branch.

use crate::backbone::ScalingVars;
use crate::config::ScalingMode;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{self, linear, linear_specs};
use crate::params::{Init, ParamSpec};

pub const MLP_PREFIX: &str = "text_mlp";
pub const SITES: [&str; 2] = ["attn", "mlp"];

pub fn sideway_prefix(layer: usize, site: &str) -> String {
    format!("sideway.layers.{layer}.{site}")
}

/// Scaling vectors as values: `(attention site, MLP site)` per layer. The
/// side-way mode without text scaling carries no vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPlan {
    pub mode: ScalingMode,
    pub layers: usize,
    pub vectors: Vec<(Mat, Mat)>,
}

impl ScalingPlan {
    pub fn site_count(&self) -> usize {
        2 * self.vectors.len()
    }

    pub fn to_vars(&self, g: &mut Graph) -> ScalingVars {
        let sites = if self.vectors.is_empty() {
            vec![(None, None); self.layers]
        } else {
            self.vectors
                .iter()
                .map(|(a, m)| (Some(g.constant(a.clone())), Some(g.constant(m.clone()))))
                .collect()
        };
        ScalingVars {
            mode: self.mode,
            sites,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextualPrompter {
    pub mode: ScalingMode,
    pub text_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub side_dim: usize,
    pub num_layers: usize,
}

impl TextualPrompter {
    /// Width of each scaling vector, `None` when the mode consumes no text.
    pub fn vector_dim(&self) -> Option<usize> {
        match self.mode {
            ScalingMode::Direct => Some(self.embed_dim),
            ScalingMode::Sideway => Some(self.side_dim),
            ScalingMode::None | ScalingMode::SidewayNoScale => None,
        }
    }

    pub fn mlp_specs(&self) -> Vec<ParamSpec> {
        let Some(out) = self.vector_dim() else {
            return Vec::new();
        };
        let mut v = linear_specs(&format!("{MLP_PREFIX}.fc1"), self.text_dim, self.hidden, true);
        v.extend(linear_specs(&format!("{MLP_PREFIX}.fc2"), self.hidden, out, true));
        v
    }

    pub fn adapter_specs(&self) -> Vec<ParamSpec> {
        if !matches!(self.mode, ScalingMode::Sideway | ScalingMode::SidewayNoScale) {
            return Vec::new();
        }
        let mut v = Vec::with_capacity(4 * self.num_layers);
        for layer in 0..self.num_layers {
            for site in SITES {
                let p = sideway_prefix(layer, site);
                v.push(ParamSpec::new(
                    format!("{p}.fc1.weight"),
                    (self.side_dim, self.embed_dim),
                    Init::Normal(0.02),
                ));
                v.push(ParamSpec::new(
                    format!("{p}.fc2.weight"),
                    (self.embed_dim, self.side_dim),
                    Init::Zeros,
                ));
            }
        }
        v
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = self.mlp_specs();
        v.extend(self.adapter_specs());
        v
    }

    /// `2 · (2 · num_layers) · L_V · L_S` for the side-way modes, else 0.
    pub fn adapter_numel(&self) -> usize {
        self.adapter_specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn mlp_numel(&self) -> usize {
        self.mlp_specs().iter().map(ParamSpec::numel).sum()
    }

    /// One scaling vector from a `1 × L_T` text embedding.
    pub fn scale_vector(&self, g: &mut Graph, text: Var) -> Result<Var> {
        if g.shape(text) != (1, self.text_dim) {
            return Err(Error::Shape(format!(
                "text embedding {:?}, expected (1, {})",
                g.shape(text),
                self.text_dim
            )));
        }
        let h = linear(g, text, &format!("{MLP_PREFIX}.fc1"), true);
        let h = g.relu(h);
        Ok(linear(g, h, &format!("{MLP_PREFIX}.fc2"), true))
    }

    /// Builds the per-site scaling for the backbone. The MLP is shared, so
    /// every site receives the same vector.
    pub fn make_plan(&self, g: &mut Graph, text: Option<Var>) -> Result<Option<ScalingVars>> {
        match self.mode {
            ScalingMode::None => Ok(None),
            ScalingMode::SidewayNoScale => Ok(Some(ScalingVars {
                mode: self.mode,
                sites: vec![(None, None); self.num_layers],
            })),
            ScalingMode::Direct | ScalingMode::Sideway => {
                let text = text.ok_or_else(|| {
                    Error::Usage("text scaling needs a text embedding".into())
                })?;
                let s = self.scale_vector(g, text)?;
                Ok(Some(ScalingVars {
                    mode: self.mode,
                    sites: vec![(Some(s), Some(s)); self.num_layers],
                }))
            }
        }
    }

    /// Value-level plan (the form cached per category).
    pub fn plan_values(&self, g: &Graph, vars: &ScalingVars) -> ScalingPlan {
        let vectors = vars
            .sites
            .iter()
            .filter_map(|(a, m)| Some((g.value((*a)?).clone(), g.value((*m)?).clone())))
            .collect();
        ScalingPlan {
            mode: vars.mode,
            layers: vars.sites.len(),
            vectors,
        }
    }
}

/// Checked `s ⊙ V + V`.
pub fn apply_direct(g: &mut Graph, v: Var, s: Var) -> Result<Var> {
    if g.shape(s) != (1, g.shape(v).1) {
        return Err(Error::Shape(format!(
            "scale {:?} does not match {} channels",
            g.shape(s),
            g.shape(v).1
        )));
    }
    Ok(nn::apply_direct(g, v, s))
}

/// Checked `FC2(s ⊙ FC1(V_in)) + base`.
pub fn apply_sideway(
    g: &mut Graph,
    input: Var,
    base: Var,
    s: Option<Var>,
    prefix: &str,
) -> Result<Var> {
    let store = g.store();
    let fc1 = store
        .get(&format!("{prefix}.fc1.weight"))
        .ok_or_else(|| Error::Shape(format!("missing side branch {prefix}")))?;
    let fc2 = store
        .get(&format!("{prefix}.fc2.weight"))
        .ok_or_else(|| Error::Shape(format!("missing side branch {prefix}")))?;
    let (ls, lv) = fc1.dim();
    if g.shape(input).1 != lv || fc2.dim() != (g.shape(base).1, ls) {
        return Err(Error::Shape(format!(
            "side branch {prefix} is {ls}x{lv}, input width {}",
            g.shape(input).1
        )));
    }
    if let Some(s) = s {
        if g.shape(s) != (1, ls) {
            return Err(Error::Shape(format!("scale {:?} != (1, {ls})", g.shape(s))));
        }
    }
    Ok(nn::apply_sideway(g, input, base, s, prefix))
}
