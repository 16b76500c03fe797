//! Category-conditioned visual prompt generation.
//!
//! A support set (one sketch, two photos) is patch-embedded by a dedicated
//! convolution, concatenated with one learnable token bank per backbone layer
//! and passed through a single shared transformer layer; the outputs at the
//! bank positions become that layer's prompt tokens and the support outputs
//! are thrown away.

use serde::{Deserialize, Serialize};

use crate::config::PromptMode;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{linear, linear_specs, Block, BlockWeights};
use crate::params::{Init, ParamSpec};

pub const PREFIX: &str = "prompt";

pub fn bank_name(layer: usize) -> String {
    format!("{PREFIX}.bank.{layer}")
}

/// Support images of one category, referenced by path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    pub category: String,
    pub sketch: String,
    pub photos: [String; 2],
    pub seed: u64,
}

/// Generated prompts as values: one `N × L_V` group per backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub prompts: Vec<Mat>,
}

impl PromptBundle {
    pub fn is_finite(&self) -> bool {
        self.prompts.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct VisualPrompter {
    pub mode: PromptMode,
    pub embed_dim: usize,
    pub patch_pixels: usize,
    pub num_layers: usize,
    pub num_prompts: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub eps: f64,
    pub init_std: f64,
}

impl VisualPrompter {
    fn uses_generator(&self) -> bool {
        matches!(
            self.mode,
            PromptMode::CategorySpecific | PromptMode::InstanceSpecific
        )
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        if self.mode == PromptMode::None {
            return Vec::new();
        }
        let mut v: Vec<ParamSpec> = (0..self.num_layers)
            .map(|i| {
                ParamSpec::new(
                    bank_name(i),
                    (self.num_prompts, self.embed_dim),
                    Init::Normal(self.init_std),
                )
            })
            .collect();
        if self.uses_generator() {
            v.extend(linear_specs(
                &format!("{PREFIX}.support_conv"),
                self.patch_pixels,
                self.embed_dim,
                true,
            ));
            v.extend(BlockWeights::specs(
                &format!("{PREFIX}.generator"),
                self.embed_dim,
                self.mlp_dim,
            ));
        }
        v
    }

    /// Token-bank parameter count: `num_layers · N · L_V`.
    pub fn bank_numel(&self) -> usize {
        self.num_layers * self.num_prompts * self.embed_dim
    }

    /// Convolves each image (already flattened into patches) and concatenates
    /// the token grids in the given order.
    pub fn encode_support(&self, g: &mut Graph, images: &[Var]) -> Var {
        let feats: Vec<Var> = images
            .iter()
            .map(|p| linear(g, *p, &format!("{PREFIX}.support_conv"), true))
            .collect();
        if feats.len() == 1 {
            feats[0]
        } else {
            g.concat_rows(&feats)
        }
    }

    fn generator(&self) -> Block {
        Block {
            weights: BlockWeights::under(&format!("{PREFIX}.generator")),
            heads: self.heads,
            causal: false,
            eps: self.eps,
        }
    }

    /// Runs the shared layer once per backbone layer on `[feats, bank_i]`.
    pub fn generate(&self, g: &mut Graph, feats: Var) -> Result<Vec<Var>> {
        if g.shape(feats).1 != self.embed_dim {
            return Err(Error::Shape(format!(
                "support features have width {}, expected {}",
                g.shape(feats).1,
                self.embed_dim
            )));
        }
        let n_feat = g.shape(feats).0;
        let block = self.generator();
        let mut out = Vec::with_capacity(self.num_layers);
        for i in 0..self.num_layers {
            let bank = g.param(&bank_name(i));
            if g.shape(bank).0 != self.num_prompts {
                return Err(Error::Shape(format!(
                    "bank {i} holds {} tokens, expected {}",
                    g.shape(bank).0,
                    self.num_prompts
                )));
            }
            let seq = g.concat_rows(&[feats, bank]);
            let y = block.forward(g, seq, &Default::default());
            out.push(g.slice_rows(y, n_feat, self.num_prompts));
        }
        Ok(out)
    }

    /// Prompt groups for the configured mode.
    ///
    /// * category-specific: generated from `support` (flattened support images)
    /// * instance-specific: generated from the input image alone
    /// * common: the raw token banks
    pub fn prompts(
        &self,
        g: &mut Graph,
        input: Option<Var>,
        support: Option<&[Var]>,
    ) -> Result<Option<Vec<Var>>> {
        match self.mode {
            PromptMode::None => Ok(None),
            PromptMode::Common => Ok(Some(
                (0..self.num_layers).map(|i| g.param(&bank_name(i))).collect(),
            )),
            PromptMode::CategorySpecific => {
                let support = support.ok_or_else(|| {
                    Error::Usage("category-specific prompts need a support set".into())
                })?;
                let feats = self.encode_support(g, support);
                self.generate(g, feats).map(Some)
            }
            PromptMode::InstanceSpecific => {
                let input = input.ok_or_else(|| {
                    Error::Usage("instance-specific prompts need the input image".into())
                })?;
                let feats = self.encode_support(g, &[input]);
                self.generate(g, feats).map(Some)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prompter(mode: PromptMode) -> (VisualPrompter, ParamStore) {
        let p = VisualPrompter {
            mode,
            embed_dim: 16,
            patch_pixels: 12,
            num_layers: 3,
            num_prompts: 3,
            heads: 2,
            mlp_dim: 64,
            eps: 1e-5,
            init_std: 0.02,
        };
        let store = ParamStore::from_specs(&p.specs(), 9);
        (p, store)
    }

    fn random_patches(seed: u64, n: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_simple_fn((49 * n / n, 12), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn support_features_have_three_grids() {
        let (p, store) = prompter(PromptMode::CategorySpecific);
        let mut g = Graph::new(&store);
        let imgs: Vec<Var> = (0..3).map(|s| g.constant(random_patches(s, 1))).collect();
        let feats = p.encode_support(&mut g, &imgs);
        assert_eq!(g.shape(feats), (147, 16));
    }

    #[test]
    fn different_supports_give_different_features_and_prompts() {
        let (p, store) = prompter(PromptMode::CategorySpecific);
        let mut g = Graph::new(&store);
        let a: Vec<Var> = (0..3).map(|s| g.constant(random_patches(s, 1))).collect();
        let b: Vec<Var> = (10..13).map(|s| g.constant(random_patches(s, 1))).collect();
        let fa = p.encode_support(&mut g, &a);
        let fb = p.encode_support(&mut g, &b);
        let diff = g.value(fa) - g.value(fb);
        assert!(diff.iter().map(|d| d * d).sum::<f64>().sqrt() > 0.0);
        let pa = p.prompts(&mut g, None, Some(&a)).unwrap().unwrap();
        let pb = p.prompts(&mut g, None, Some(&b)).unwrap().unwrap();
        assert_eq!(pa.len(), 3);
        assert_eq!(g.shape(pa[0]), (3, 16));
        assert_ne!(g.value(pa[2]), g.value(pb[2]));
        let again = p.prompts(&mut g, None, Some(&a)).unwrap().unwrap();
        for (x, y) in pa.iter().zip(&again) {
            assert_eq!(g.value(*x), g.value(*y));
        }
    }

    #[test]
    fn common_mode_returns_bank_values() {
        let (p, store) = prompter(PromptMode::Common);
        let mut g = Graph::new(&store);
        let x = g.constant(random_patches(0, 1));
        let out = p.prompts(&mut g, Some(x), None).unwrap().unwrap();
        for (i, v) in out.iter().enumerate() {
            assert_eq!(g.value(*v), store.get(&bank_name(i)).unwrap());
        }
    }

    #[test]
    fn instance_mode_uses_input_image() {
        let (p, store) = prompter(PromptMode::InstanceSpecific);
        let mut g = Graph::new(&store);
        let x = g.constant(random_patches(0, 1));
        let y = g.constant(random_patches(1, 1));
        let px = p.prompts(&mut g, Some(x), None).unwrap().unwrap();
        let py = p.prompts(&mut g, Some(y), None).unwrap().unwrap();
        assert_eq!(g.shape(px[0]), (3, 16));
        assert_ne!(g.value(px[0]), g.value(py[0]));
    }

    #[test]
    fn category_mode_without_support_is_usage_error() {
        let (p, store) = prompter(PromptMode::CategorySpecific);
        let mut g = Graph::new(&store);
        assert!(matches!(p.prompts(&mut g, None, None), Err(Error::Usage(_))));
    }

    #[test]
    fn banks_are_layer_specific() {
        let (p, mut store) = prompter(PromptMode::CategorySpecific);
        let mut g = Graph::new(&store);
        let imgs: Vec<Var> = (0..3).map(|s| g.constant(random_patches(s, 1))).collect();
        let before = p.prompts(&mut g, None, Some(&imgs)).unwrap().unwrap();
        let before: Vec<Mat> = before.iter().map(|v| g.value(*v).clone()).collect();
        drop(g);
        let b0 = store.get(&bank_name(0)).unwrap().clone();
        let b1 = store.get(&bank_name(1)).unwrap().clone();
        store.insert(&bank_name(0), b1);
        store.insert(&bank_name(1), b0);
        let mut g = Graph::new(&store);
        let imgs: Vec<Var> = (0..3).map(|s| g.constant(random_patches(s, 1))).collect();
        let after = p.prompts(&mut g, None, Some(&imgs)).unwrap().unwrap();
        assert_ne!(&before[0], g.value(after[0]));
        assert_eq!(before[0], *g.value(after[1]));
    }

    #[test]
    fn bank_count_at_full_scale() {
        let p = VisualPrompter {
            mode: PromptMode::CategorySpecific,
            embed_dim: 768,
            patch_pixels: 3072,
            num_layers: 12,
            num_prompts: 3,
            heads: 12,
            mlp_dim: 3072,
            eps: 1e-5,
            init_std: 0.02,
        };
        assert_eq!(p.bank_numel(), 27_648);
        let banks: usize = p
            .specs()
            .iter()
            .filter(|s| s.name.starts_with("prompt.bank."))
            .map(ParamSpec::numel)
            .sum();
        assert_eq!(banks, 27_648);
    }
}
