//! Flat `key=value` run configuration and the typed configs resolved from it.
//!
//! Resolution order is CLI override > config file > registry default. Unknown
//! keys are rejected. The resolved map is hashed and the hash is stamped into
//! every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::hex;

/// Registry of every accepted key with its default and a short description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("weights", "pretrained", "toy | pretrained"),
    ("weights_path", "", "pretrained checkpoint (named-tensor container)"),
    ("tokenizer_path", "", "tokenizer.json for the pretrained text tower"),
    ("seed", "0", "global seed (toy init, sampling, augmentation)"),
    ("image_size", "224", "input resolution in pixels"),
    ("patch_size", "32", "patch size in pixels"),
    ("num_layers", "12", "vision transformer depth"),
    ("embed_dim", "768", "vision channel width"),
    ("num_heads", "12", "vision attention heads"),
    ("mlp_ratio", "4", "vision MLP expansion"),
    ("text_dim", "512", "text embedding size fed to the scaling MLP"),
    ("text_width", "512", "text transformer width"),
    ("text_layers", "12", "text transformer depth"),
    ("text_heads", "8", "text attention heads"),
    ("text_context", "77", "text context length in tokens"),
    ("text_vocab", "49408", "text vocabulary size"),
    ("norm_eps", "1e-5", "layer-norm epsilon"),
    ("prompt_position", "after_cls", "after_cls | before_cls"),
    ("num_prompts", "3", "prompt tokens per layer"),
    ("visual_prompt", "category_specific", "none | category_specific | instance_specific | common"),
    ("prompt_init_std", "0.02", "std of the learnable token banks"),
    ("text_source", "category_label", "category_label | learnable"),
    ("text_prompt_len", "4", "learnable text prompt tokens"),
    ("scaling", "sideway", "none | direct | sideway | sideway_noscale"),
    ("side_dim", "16", "hidden width of the side-way branches"),
    ("text_mlp_hidden", "16", "hidden width of the text scaling MLP"),
    ("local", "true", "enable the four local patch branches"),
    ("task", "fine_grained", "fine_grained | category_level"),
    ("margin", "0.15", "triplet margin"),
    ("mining", "hardest", "hardest | random"),
    ("distance", "cosine", "cosine | euclidean"),
    ("lambda_local", "0.1", "weight of the local triplet terms"),
    ("batch_size", "64", "pairs per batch"),
    ("epochs", "60", "training epochs"),
    ("max_steps", "0", "stop after this many steps (0 = epochs only)"),
    ("lr_norm", "1e-6", "learning rate of backbone normalization parameters"),
    ("lr_module", "1e-5", "learning rate of added modules"),
    ("augment", "true", "grayscale/flip augmentation during training"),
    ("checkpoint_every", "0", "steps between checkpoints (0 = end of every epoch)"),
    ("support_seed", "0", "seed of the test-gallery support selection"),
    ("exclude_self_support", "false", "drop a query sketch that is its category's support sketch"),
    ("vis_layer", "-1", "layer analysed by the prompt visualizer (-1 = last)"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Small randomly initialized model that keeps the 7×7 token grid.
    pub fn toy() -> Self {
        let mut c = Self::default();
        for (k, v) in [
            ("weights", "toy"),
            ("image_size", "56"),
            ("patch_size", "8"),
            ("num_layers", "2"),
            ("embed_dim", "64"),
            ("num_heads", "4"),
            ("text_dim", "32"),
            ("text_width", "32"),
            ("text_layers", "1"),
            ("text_heads", "2"),
            ("text_context", "16"),
            ("text_vocab", "512"),
            ("batch_size", "6"),
            ("lr_norm", "1e-3"),
            ("lr_module", "1e-2"),
        ] {
            c.values.insert(k.into(), v.into());
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{raw}`", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_str(&text)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key `{key}` not registered"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("`{key}`: expected a boolean, got `{other}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical `key=value` lines in key order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the canonical text, first 16 hex digits.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex(&digest[..8])
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let backbone = BackboneConfig {
            image_size: self.parse("image_size")?,
            patch_size: self.parse("patch_size")?,
            num_layers: self.parse("num_layers")?,
            embed_dim: self.parse("embed_dim")?,
            num_heads: self.parse("num_heads")?,
            mlp_ratio: self.parse("mlp_ratio")?,
            text_dim: self.parse("text_dim")?,
            norm_eps: self.parse("norm_eps")?,
            prompt_position: self.parse("prompt_position")?,
            weight_source: match self.get("weights") {
                "toy" => WeightSource::Toy {
                    seed: self.parse("seed")?,
                },
                "pretrained" => WeightSource::Pretrained {
                    path: PathBuf::from(self.get("weights_path")),
                },
                other => return Err(Error::Config(format!("`weights`: unknown source `{other}`"))),
            },
        };
        let text = TextConfig {
            width: self.parse("text_width")?,
            layers: self.parse("text_layers")?,
            heads: self.parse("text_heads")?,
            context: self.parse("text_context")?,
            vocab: self.parse("text_vocab")?,
            tokenizer_path: match self.get("tokenizer_path") {
                "" => None,
                p => Some(PathBuf::from(p)),
            },
        };
        let cfg = ModelConfig {
            backbone,
            text,
            num_prompts: self.parse("num_prompts")?,
            visual_prompt: self.parse("visual_prompt")?,
            prompt_init_std: self.parse("prompt_init_std")?,
            text_source: self.parse("text_source")?,
            text_prompt_len: self.parse("text_prompt_len")?,
            scaling: self.parse("scaling")?,
            side_dim: self.parse("side_dim")?,
            text_mlp_hidden: self.parse("text_mlp_hidden")?,
            local: self.flag("local")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let margin: f64 = self.parse("margin")?;
        if margin < 0.0 || !margin.is_finite() {
            return Err(Error::Config("`margin` must be a finite value >= 0".into()));
        }
        Ok(TrainConfig {
            triplet: TripletConfig {
                margin,
                mining: self.parse("mining")?,
                distance: self.parse("distance")?,
            },
            schedule: OptimSchedule {
                lr_norm: self.parse("lr_norm")?,
                lr_module: self.parse("lr_module")?,
                epochs: self.parse("epochs")?,
                lambda_local: self.parse("lambda_local")?,
                ..OptimSchedule::default()
            },
            batch_size: self.parse("batch_size")?,
            max_steps: self.parse("max_steps")?,
            augment: self.flag("augment")?,
            seed: self.parse("seed")?,
            checkpoint_every: self.parse("checkpoint_every")?,
            task: self.parse("task")?,
        })
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
    };
}

string_enum!(PromptPosition { AfterCls => "after_cls", BeforeCls => "before_cls" });
string_enum!(PromptMode {
    None => "none",
    CategorySpecific => "category_specific",
    InstanceSpecific => "instance_specific",
    Common => "common",
});
string_enum!(ScalingMode {
    None => "none",
    Direct => "direct",
    Sideway => "sideway",
    SidewayNoScale => "sideway_noscale",
});
string_enum!(TextSource { CategoryLabel => "category_label", Learnable => "learnable" });
string_enum!(Mining { Hardest => "hardest", Random => "random" });
string_enum!(Distance { Cosine => "cosine", Euclidean => "euclidean" });
string_enum!(Task { FineGrained => "fine_grained", CategoryLevel => "category_level" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightSource {
    Toy { seed: u64 },
    Pretrained { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub text_dim: usize,
    pub norm_eps: f64,
    pub prompt_position: PromptPosition,
    pub weight_source: WeightSource,
}

impl BackboneConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Pixels per patch across the three channels.
    pub fn patch_pixels(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be positive".into()));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
    pub tokenizer_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub text: TextConfig,
    pub num_prompts: usize,
    pub visual_prompt: PromptMode,
    pub prompt_init_std: f64,
    pub text_source: TextSource,
    pub text_prompt_len: usize,
    pub scaling: ScalingMode,
    pub side_dim: usize,
    pub text_mlp_hidden: usize,
    pub local: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.local && self.backbone.grid_side() != 7 {
            return Err(Error::Config(format!(
                "patch matching needs a 7x7 token grid, got {0}x{0}",
                self.backbone.grid_side()
            )));
        }
        if self.visual_prompt != PromptMode::None && self.num_prompts == 0 {
            return Err(Error::Config("num_prompts must be positive when prompting".into()));
        }
        if self.text.heads == 0 || !self.text.width.is_multiple_of(self.text.heads) {
            return Err(Error::Config("text_width not divisible by text_heads".into()));
        }
        if matches!(self.scaling, ScalingMode::Sideway | ScalingMode::SidewayNoScale)
            && self.side_dim == 0
        {
            return Err(Error::Config("side_dim must be positive".into()));
        }
        Ok(())
    }

    /// Prompt tokens inserted per layer (0 when visual prompting is off).
    pub fn prompts_per_layer(&self) -> usize {
        if self.visual_prompt == PromptMode::None {
            0
        } else {
            self.num_prompts
        }
    }

    pub fn uses_text(&self) -> bool {
        matches!(self.scaling, ScalingMode::Direct | ScalingMode::Sideway)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
    pub distance: Distance,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.15,
            mining: Mining::Hardest,
            distance: Distance::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSchedule {
    pub lr_norm: f64,
    pub lr_module: f64,
    pub epochs: usize,
    pub lambda_local: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSchedule {
    fn default() -> Self {
        Self {
            lr_norm: 1e-6,
            lr_module: 1e-5,
            epochs: 60,
            lambda_local: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub triplet: TripletConfig,
    pub schedule: OptimSchedule,
    pub batch_size: usize,
    pub max_steps: usize,
    pub augment: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub task: Task,
}
