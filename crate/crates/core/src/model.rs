//! Full model: backbone, text tower, both prompting paths and the local
//! branches over one parameter store.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use crate::backbone::{pretrained_name_map, Backbone, VisualOutput};
use crate::config::{ModelConfig, PromptMode, TextSource, WeightSource};
use crate::error::{Error, Result};
use crate::graph::{Graph, GradMode, Mat, Var};
use crate::image::{patchify, Image, PixelNorm};
use crate::params::{ParamSpec, ParamStore, ParameterPolicy, Tier};
use crate::patch_matching::PatchMatcher;
use crate::tensor_file::TensorFile;
use crate::text::{self, BpeTokenizer, HashTokenizer, TextEncoder, Tokenizer};
use crate::textual_prompting::{ScalingPlan, TextualPrompter};
use crate::visual_prompting::VisualPrompter;

/// Parameter groups reported by the audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Backbone,
    TextEncoder,
    TokenBank,
    PromptGenerator,
    SupportConv,
    TextMlp,
    SideWay,
    LocalBranches,
    TextPrompt,
}

impl Component {
    pub fn added(self) -> bool {
        !matches!(self, Component::Backbone | Component::TextEncoder)
    }

    pub fn label(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::TextEncoder => "text_encoder",
            Component::TokenBank => "token_bank",
            Component::PromptGenerator => "prompt_generator",
            Component::SupportConv => "support_conv",
            Component::TextMlp => "text_mlp",
            Component::SideWay => "side_way",
            Component::LocalBranches => "local_branches",
            Component::TextPrompt => "text_prompt",
        }
    }

    fn of(name: &str) -> Self {
        if name == text::PROMPT_TOKENS {
            Component::TextPrompt
        } else if name.starts_with("backbone.") {
            Component::Backbone
        } else if name.starts_with("text.") {
            Component::TextEncoder
        } else if name.starts_with("prompt.bank.") {
            Component::TokenBank
        } else if name.starts_with("prompt.generator.") {
            Component::PromptGenerator
        } else if name.starts_with("prompt.support_conv.") {
            Component::SupportConv
        } else if name.starts_with("text_mlp.") {
            Component::TextMlp
        } else if name.starts_with("sideway.") {
            Component::SideWay
        } else {
            Component::LocalBranches
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Tier of a parameter name. Inside the pretrained towers only the vision
/// normalization affines train; the text tower is frozen except for the
/// learnable prompt tokens; every added module trains.
pub fn tier_of(name: &str) -> Tier {
    if let Some(rest) = name.strip_prefix("backbone.") {
        let is_norm = rest.starts_with("ln_pre.")
            || rest.starts_with("ln_post.")
            || rest.contains(".ln_1.")
            || rest.contains(".ln_2.");
        if is_norm {
            Tier::Norm
        } else {
            Tier::Frozen
        }
    } else if name == text::PROMPT_TOKENS {
        Tier::Module
    } else if name.starts_with("text.") {
        Tier::Frozen
    } else {
        Tier::Module
    }
}

pub fn classify_parameters<'a>(names: impl IntoIterator<Item = &'a str>) -> ParameterPolicy {
    ParameterPolicy {
        tiers: names
            .into_iter()
            .map(|n| (n.to_string(), tier_of(n)))
            .collect(),
    }
}

/// Structural pieces of a model, without any parameter values.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub text: Option<TextEncoder>,
    pub visual: VisualPrompter,
    pub textual: TextualPrompter,
    pub matcher: Option<PatchMatcher>,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let b = &cfg.backbone;
        let pixel_norm = match b.weight_source {
            WeightSource::Toy { .. } => PixelNorm::IDENTITY,
            WeightSource::Pretrained { .. } => PixelNorm::CLIP,
        };
        let backbone = Backbone::new(b.clone(), pixel_norm)?;
        let text = cfg.uses_text().then(|| TextEncoder {
            cfg: cfg.text.clone(),
            out_dim: b.text_dim,
            eps: b.norm_eps,
            prompt_len: cfg.text_prompt_len,
        });
        let visual = VisualPrompter {
            mode: cfg.visual_prompt,
            embed_dim: b.embed_dim,
            patch_pixels: b.patch_pixels(),
            num_layers: b.num_layers,
            num_prompts: cfg.num_prompts,
            heads: b.num_heads,
            mlp_dim: b.mlp_dim(),
            eps: b.norm_eps,
            init_std: cfg.prompt_init_std,
        };
        let textual = TextualPrompter {
            mode: cfg.scaling,
            text_dim: b.text_dim,
            hidden: cfg.text_mlp_hidden,
            embed_dim: b.embed_dim,
            side_dim: cfg.side_dim,
            num_layers: b.num_layers,
        };
        let matcher = cfg.local.then(|| PatchMatcher {
            embed_dim: b.embed_dim,
            source_layer: b.num_layers - 1,
            heads: b.num_heads,
            eps: b.norm_eps,
        });
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            text,
            visual,
            textual,
            matcher,
        })
    }

    fn learnable_text(&self) -> bool {
        self.text.is_some() && self.cfg.text_source == TextSource::Learnable
    }

    /// Every declared parameter.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = self.backbone.specs();
        if let Some(t) = &self.text {
            v.extend(t.specs(self.learnable_text()));
        }
        v.extend(self.visual.specs());
        v.extend(self.textual.specs());
        if let Some(m) = &self.matcher {
            v.extend(m.specs());
        }
        v
    }

    /// Parameter count per component, in a stable order.
    pub fn audit(&self) -> Vec<AuditRow> {
        let mut rows: Vec<AuditRow> = Vec::new();
        for spec in self.specs() {
            let c = Component::of(&spec.name);
            let tier = tier_of(&spec.name);
            match rows.iter_mut().find(|r| r.component == c) {
                Some(r) => {
                    r.params += spec.numel();
                    if tier != Tier::Frozen {
                        r.trainable += spec.numel();
                    }
                }
                None => rows.push(AuditRow {
                    component: c,
                    params: spec.numel(),
                    trainable: if tier == Tier::Frozen { 0 } else { spec.numel() },
                }),
            }
        }
        rows.sort_by_key(|r| r.component);
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditRow {
    pub component: Component,
    pub params: usize,
    pub trainable: usize,
}

/// Graph-level conditioning shared by every image of one category.
#[derive(Debug, Clone, Default)]
pub struct Conditioning {
    pub prompts: Option<Vec<Var>>,
    pub scaling: Option<crate::backbone::ScalingVars>,
}

/// Conditioning as plain values, cached per category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPlan {
    pub prompts: Option<Vec<Mat>>,
    pub scaling: Option<ScalingPlan>,
}

/// Graph nodes produced for one image.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub visual: VisualOutput,
    pub prompts: Option<Vec<Var>>,
    pub global: Var,
    pub locals: Vec<Var>,
}

/// Global and local features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub global: Vec<f64>,
    pub locals: Vec<Vec<f64>>,
}

type PlanKey = (String, String);

/// Category → plan cache, invalidated by the store version.
#[derive(Debug, Default)]
pub struct PlanCache {
    inner: RwLock<HashMap<PlanKey, (u64, Arc<CategoryPlan>)>>,
}

impl PlanCache {
    pub fn get(&self, key: &PlanKey, version: u64) -> Option<Arc<CategoryPlan>> {
        let map = self.inner.read().expect("plan cache poisoned");
        map.get(key)
            .filter(|(v, _)| *v == version)
            .map(|(_, p)| Arc::clone(p))
    }

    pub fn put(&self, key: PlanKey, version: u64, plan: Arc<CategoryPlan>) {
        let mut map = self.inner.write().expect("plan cache poisoned");
        map.insert(key, (version, plan));
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("plan cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.inner.write().expect("plan cache poisoned").clear();
    }
}

pub struct Model {
    pub arch: Architecture,
    store: ParamStore,
    pub policy: ParameterPolicy,
    trainable: std::collections::BTreeSet<String>,
    tokenizer: Arc<dyn Tokenizer>,
    version: u64,
    cache: PlanCache,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("params", &self.store.len())
            .field("version", &self.version)
            .finish()
    }
}

impl Model {
    /// Builds the model from its configuration: toy weights are drawn from
    /// the seed, pretrained weights are read and validated tensor by tensor.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        let arch = Architecture::new(cfg)?;
        let specs = arch.specs();
        let (seed, pretrained) = match &cfg.backbone.weight_source {
            WeightSource::Toy { seed } => (*seed, None),
            WeightSource::Pretrained { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::Config("pretrained weights need `weights_path`".into()));
                }
                (0, Some(TensorFile::read(path)?))
            }
        };
        let mut store = ParamStore::from_specs(&specs, seed);
        if let Some(file) = &pretrained {
            load_pretrained(&mut store, &specs, file, &arch)?;
        }
        if let Some(m) = &arch.matcher {
            for (dst, src) in m.copied_norms() {
                let v = store.get_arc(&src).expect("source layer declared");
                store.insert_arc(&dst, v);
            }
        }
        let tokenizer: Arc<dyn Tokenizer> = match &cfg.text.tokenizer_path {
            Some(p) => Arc::new(BpeTokenizer::from_file(p)?),
            None if pretrained.is_some() && arch.text.is_some() => {
                return Err(Error::Config(
                    "pretrained text tower needs `tokenizer_path`".into(),
                ))
            }
            None => Arc::new(HashTokenizer::new(cfg.text.vocab)),
        };
        Self::from_parts(arch, store, tokenizer)
    }

    /// Wraps an existing store after checking it against the architecture.
    pub fn from_parts(
        arch: Architecture,
        store: ParamStore,
        tokenizer: Arc<dyn Tokenizer>,
    ) -> Result<Self> {
        for spec in arch.specs() {
            match store.get(&spec.name) {
                None => {
                    return Err(Error::Load {
                        tensor: spec.name,
                        msg: "missing".into(),
                    })
                }
                Some(m) if m.dim() != spec.shape => {
                    return Err(Error::Load {
                        msg: format!("shape {:?}, expected {:?}", m.dim(), spec.shape),
                        tensor: spec.name,
                    })
                }
                Some(_) => {}
            }
        }
        let policy = classify_parameters(store.names());
        let trainable = policy.trainable();
        Ok(Self {
            arch,
            store,
            policy,
            trainable,
            tokenizer,
            version: 0,
            cache: PlanCache::default(),
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access; bumps the version so cached plans are recomputed.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.version += 1;
        &mut self.store
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn trainable(&self) -> &std::collections::BTreeSet<String> {
        &self.trainable
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn cache(&self) -> &PlanCache {
        &self.cache
    }

    pub fn graph(&self, train: bool) -> Graph<'_> {
        if train {
            Graph::with_mode(&self.store, GradMode::Trainable(&self.trainable))
        } else {
            Graph::new(&self.store)
        }
    }

    pub fn patches(&self, img: &Image) -> Result<Mat> {
        let size = self.arch.cfg.backbone.image_size;
        if img.height() != size || img.width() != size {
            return Err(Error::Shape(format!(
                "image is {}x{}, model expects {size}x{size}",
                img.height(),
                img.width()
            )));
        }
        patchify(
            img,
            self.arch.cfg.backbone.patch_size,
            self.arch.backbone.pixel_norm,
        )
    }

    /// Text embedding used by the scaling path, if the mode needs one.
    pub fn text_embedding(&self, g: &mut Graph, category: Option<&str>) -> Result<Option<Var>> {
        let Some(enc) = &self.arch.text else {
            return Ok(None);
        };
        let tok = self.tokenizer.as_ref();
        match self.arch.cfg.text_source {
            TextSource::Learnable => enc.embed_learnable(g, tok).map(Some),
            TextSource::CategoryLabel => {
                let label = category.ok_or_else(|| {
                    Error::Usage("label-driven scaling needs a category".into())
                })?;
                enc.embed_label(g, tok, label).map(Some)
            }
        }
    }

    /// Prompts and scaling shared by all images of a category.
    pub fn condition(
        &self,
        g: &mut Graph,
        category: Option<&str>,
        support: Option<&[Image]>,
    ) -> Result<Conditioning> {
        let text = self.text_embedding(g, category)?;
        let scaling = self.arch.textual.make_plan(g, text)?;
        let prompts = match self.arch.cfg.visual_prompt {
            PromptMode::CategorySpecific => {
                let support = support.ok_or_else(|| {
                    Error::Usage("category-specific prompts need a support set".into())
                })?;
                let vars = support
                    .iter()
                    .map(|img| Ok(g.constant(self.patches(img)?)))
                    .collect::<Result<Vec<_>>>()?;
                self.arch.visual.prompts(g, None, Some(&vars))?
            }
            PromptMode::Common => self.arch.visual.prompts(g, None, None)?,
            PromptMode::InstanceSpecific | PromptMode::None => None,
        };
        Ok(Conditioning { prompts, scaling })
    }

    /// Runs one image through the backbone and the local branches.
    pub fn forward_image(
        &self,
        g: &mut Graph,
        img: &Image,
        cond: &Conditioning,
        keep_trace: bool,
    ) -> Result<ImageForward> {
        let patches = g.constant(self.patches(img)?);
        let prompts = match self.arch.cfg.visual_prompt {
            PromptMode::InstanceSpecific => self.arch.visual.prompts(g, Some(patches), None)?,
            _ => cond.prompts.clone(),
        };
        let visual = self.arch.backbone.forward(
            g,
            patches,
            prompts.as_deref(),
            cond.scaling.as_ref(),
            keep_trace,
        )?;
        let locals = match &self.arch.matcher {
            Some(m) => m
                .forward(g, visual.penultimate_grid, visual.penultimate_cls)?
                .to_vec(),
            None => Vec::new(),
        };
        Ok(ImageForward {
            global: visual.final_cls,
            visual,
            prompts,
            locals,
        })
    }

    /// Value-level conditioning for a category, served from the cache when
    /// the parameters have not changed. `support_key` identifies the support
    /// set (for example its seed and paths).
    pub fn category_plan(
        &self,
        category: Option<&str>,
        support: Option<&[Image]>,
        support_key: &str,
    ) -> Result<Arc<CategoryPlan>> {
        let key = (category.unwrap_or("").to_string(), support_key.to_string());
        if let Some(p) = self.cache.get(&key, self.version) {
            return Ok(p);
        }
        let mut g = self.graph(false);
        let cond = self.condition(&mut g, category, support)?;
        let plan = Arc::new(CategoryPlan {
            prompts: cond
                .prompts
                .as_ref()
                .map(|p| p.iter().map(|v| g.value(*v).clone()).collect()),
            scaling: cond
                .scaling
                .as_ref()
                .map(|s| self.arch.textual.plan_values(&g, s)),
        });
        self.cache.put(key, self.version, Arc::clone(&plan));
        Ok(plan)
    }

    /// Rebuilds graph conditioning from cached values.
    pub fn plan_vars(&self, g: &mut Graph, plan: &CategoryPlan) -> Conditioning {
        Conditioning {
            prompts: plan
                .prompts
                .as_ref()
                .map(|p| p.iter().map(|m| g.constant(m.clone())).collect()),
            scaling: plan.scaling.as_ref().map(|s| s.to_vars(g)),
        }
    }

    /// Inference features of one image under a category plan.
    pub fn embed(&self, img: &Image, plan: &CategoryPlan) -> Result<Features> {
        let mut g = self.graph(false);
        let cond = self.plan_vars(&mut g, plan);
        let f = self.forward_image(&mut g, img, &cond, false)?;
        let row = |v: Var| g.value(v).iter().copied().collect::<Vec<f64>>();
        let out = Features {
            global: row(f.global),
            locals: f.locals.iter().map(|v| row(*v)).collect(),
        };
        let finite = out.global.iter().chain(out.locals.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        Ok(out)
    }

    /// Replaces trainable tensors with the given values (checkpoint restore).
    pub fn load_trainable(&mut self, file: &TensorFile) -> Result<()> {
        let names: Vec<String> = self.trainable.iter().cloned().collect();
        for name in names {
            let shape = self.store.get(&name).expect("declared").dim();
            let t = file.get(&name)?;
            let m = t.to_mat(&name, shape.0, shape.1)?;
            self.store_mut().insert(&name, m);
        }
        Ok(())
    }

    pub fn trainable_tensors(&self) -> TensorFile {
        let mut f = TensorFile::default();
        for name in &self.trainable {
            f.insert_mat(name, self.store.get(name).expect("declared"));
        }
        f
    }

    /// SHA-256 over every frozen tensor.
    pub fn frozen_hash(&self) -> String {
        self.store.hash_where(|n| self.policy.is_frozen(n))
    }
}

fn load_pretrained(
    store: &mut ParamStore,
    specs: &[ParamSpec],
    file: &TensorFile,
    arch: &Architecture,
) -> Result<()> {
    let text_layers = arch.text.as_ref().map_or(0, |t| t.cfg.layers);
    let map = pretrained_name_map(arch.cfg.backbone.num_layers, text_layers);
    for (ours, theirs) in map {
        let Some(spec) = specs.iter().find(|s| s.name == ours) else {
            continue;
        };
        let t = file.get(&theirs)?;
        let (r, c) = spec.shape;
        let lead_ok = match t.shape.as_slice() {
            [n] => r == 1 && *n == c,
            [a, ..] => *a == r,
            [] => false,
        };
        if !lead_ok {
            return Err(Error::Load {
                tensor: theirs,
                msg: format!("shape {:?} does not fit {r}x{c}", t.shape),
            });
        }
        let m = t.to_mat(&theirs, r, c)?;
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Load {
                tensor: theirs,
                msg: "non-finite values".into(),
            });
        }
        store.insert(&ours, m);
    }
    Ok(())
}
