//! Frozen text tower: tokenizers, sentence templates and the causal text
//! transformer that maps a sentence to an `L_T` embedding.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::config::TextConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{layer_norm, linear, norm_specs, Block, BlockHooks, BlockWeights};
use crate::params::{Init, ParamSpec};

pub const PREFIX: &str = "text";
pub const PROMPT_TOKENS: &str = "text.prompt_tokens";

/// Words preceding the learnable tokens in the label-free template.
pub const LEARNABLE_TEMPLATE: &str = "Focus on the discriminative";

/// `This is a/an <label> in the image.`, article picked by the leading vowel.
pub fn category_sentence(label: &str) -> String {
    let label = label.replace(['_', '-'], " ");
    let label = label.trim();
    let article = match label.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    };
    format!("This is {article} {label} in the image.")
}

pub trait Tokenizer: Send + Sync {
    /// Token ids of `text` without start/end markers.
    fn encode(&self, text: &str) -> Vec<u32>;
    fn start(&self) -> u32;
    fn end(&self) -> u32;
}

/// Word-level tokenizer hashing lowercase words into a fixed vocabulary; ids
/// 0 and 1 are the start and end markers. Used with randomly initialized text
/// towers.
#[derive(Debug, Clone)]
pub struct HashTokenizer {
    vocab: usize,
}

impl HashTokenizer {
    pub fn new(vocab: usize) -> Self {
        assert!(vocab > 2, "vocabulary too small");
        Self { vocab }
    }
}

impl Tokenizer for HashTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                // FNV-1a
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in w.bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
                2 + (h % (self.vocab as u64 - 2)) as u32
            })
            .collect()
    }

    fn start(&self) -> u32 {
        0
    }

    fn end(&self) -> u32 {
        1
    }
}

/// Byte-level BPE in the CLIP flavour (`</w>` word-end marker), loaded from a
/// `tokenizer.json`.
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: Vec<char>,
    pattern: Regex,
    start: u32,
    end: u32,
}

fn bytes_to_unicode() -> Vec<char> {
    let mut bs: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    let mut table = vec!['\0'; 256];
    for (b, c) in bs.into_iter().zip(cs) {
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

impl BpeTokenizer {
    pub fn from_json(text: &str) -> Result<Self> {
        let root: serde_json::Value = serde_json::from_str(text)?;
        let model = &root["model"];
        let vocab = model["vocab"]
            .as_object()
            .ok_or_else(|| Error::Format("tokenizer.json: model.vocab missing".into()))?;
        let mut encoder = HashMap::with_capacity(vocab.len());
        for (tok, id) in vocab {
            let id = id
                .as_u64()
                .ok_or_else(|| Error::Format(format!("tokenizer.json: bad id for `{tok}`")))?;
            encoder.insert(tok.clone(), id as u32);
        }
        if let Some(added) = root["added_tokens"].as_array() {
            for t in added {
                if let (Some(c), Some(id)) = (t["content"].as_str(), t["id"].as_u64()) {
                    encoder.insert(c.to_string(), id as u32);
                }
            }
        }
        let merges = model["merges"]
            .as_array()
            .ok_or_else(|| Error::Format("tokenizer.json: model.merges missing".into()))?;
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, m) in merges.iter().enumerate() {
            let pair = match m {
                serde_json::Value::String(s) => s
                    .split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string())),
                serde_json::Value::Array(a) if a.len() == 2 => {
                    match (a[0].as_str(), a[1].as_str()) {
                        (Some(x), Some(y)) => Some((x.to_string(), y.to_string())),
                        _ => None,
                    }
                }
                _ => None,
            }
            .ok_or_else(|| Error::Format(format!("tokenizer.json: bad merge #{rank}")))?;
            ranks.insert(pair, rank);
        }
        let lookup = |t: &str| {
            encoder
                .get(t)
                .copied()
                .ok_or_else(|| Error::Format(format!("tokenizer.json: `{t}` missing")))
        };
        let start = lookup("<|startoftext|>")?;
        let end = lookup("<|endoftext|>")?;
        let pattern = Regex::new(
            r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(Self {
            encoder,
            ranks,
            byte_encoder: bytes_to_unicode(),
            pattern,
            start,
            end,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        if let Some(last) = parts.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|r| (*r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let (a, b) = (parts[i].clone(), parts[i + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut j = 0;
            while j < parts.len() {
                if j + 1 < parts.len() && parts[j] == a && parts[j + 1] == b {
                    merged.push(format!("{a}{b}"));
                    j += 2;
                } else {
                    merged.push(parts[j].clone());
                    j += 1;
                }
            }
            parts = merged;
        }
        parts
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for piece in self.bpe(&mapped) {
                if let Some(id) = self.encoder.get(&piece) {
                    ids.push(*id);
                }
            }
        }
        ids
    }

    fn start(&self) -> u32 {
        self.start
    }

    fn end(&self) -> u32 {
        self.end
    }
}

fn as_rows(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|i| *i as usize).collect()
}

/// Causal text transformer; the embedding is the projected end-marker token.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    pub out_dim: usize,
    pub eps: f64,
    pub prompt_len: usize,
}

impl TextEncoder {
    pub fn specs(&self, learnable_prompt: bool) -> Vec<ParamSpec> {
        let w = self.cfg.width;
        let mut v = vec![
            ParamSpec::new(
                format!("{PREFIX}.token_embedding"),
                (self.cfg.vocab, w),
                Init::Normal(0.02),
            ),
            ParamSpec::new(format!("{PREFIX}.pos_embed"), (self.cfg.context, w), Init::Normal(0.01)),
        ];
        for i in 0..self.cfg.layers {
            v.extend(BlockWeights::specs(&format!("{PREFIX}.layers.{i}"), w, 4 * w));
        }
        v.extend(norm_specs(&format!("{PREFIX}.ln_final"), w));
        v.push(ParamSpec::new(
            format!("{PREFIX}.projection.weight"),
            (self.out_dim, w),
            Init::Normal((w as f64).powf(-0.5)),
        ));
        if learnable_prompt {
            v.push(ParamSpec::new(PROMPT_TOKENS, (self.prompt_len, w), Init::Normal(0.02)));
        }
        v
    }

    /// `[start] + ids + [end]`, rejecting sequences longer than the context.
    pub fn frame(&self, tok: &dyn Tokenizer, text: &str, extra: usize) -> Result<Vec<u32>> {
        let mut ids = vec![tok.start()];
        ids.extend(tok.encode(text));
        if ids.len() + extra + 1 > self.cfg.context {
            return Err(Error::Input(format!(
                "`{text}` needs {} tokens, context holds {}",
                ids.len() + extra + 1,
                self.cfg.context
            )));
        }
        if let Some(bad) = ids.iter().find(|i| **i as usize >= self.cfg.vocab) {
            return Err(Error::Input(format!("token id {bad} outside the vocabulary")));
        }
        Ok(ids)
    }

    /// Embedding of the category template sentence.
    pub fn embed_label(&self, g: &mut Graph, tok: &dyn Tokenizer, label: &str) -> Result<Var> {
        if label.trim().is_empty() {
            return Err(Error::Input("empty category label".into()));
        }
        let mut ids = self.frame(tok, &category_sentence(label), 0)?;
        ids.push(tok.end());
        let table = g.param(&format!("{PREFIX}.token_embedding"));
        let x = g.gather_rows(table, &as_rows(&ids));
        Ok(self.encode_embeddings(g, x))
    }

    /// Embedding of `Focus on the discriminative [T_p]` with trainable `T_p`.
    pub fn embed_learnable(&self, g: &mut Graph, tok: &dyn Tokenizer) -> Result<Var> {
        let ids = self.frame(tok, LEARNABLE_TEMPLATE, self.prompt_len)?;
        let table = g.param(&format!("{PREFIX}.token_embedding"));
        let head = g.gather_rows(table, &as_rows(&ids));
        let learned = g.param(PROMPT_TOKENS);
        let tail = g.gather_rows(table, &[tok.end() as usize]);
        let x = g.concat_rows(&[head, learned, tail]);
        Ok(self.encode_embeddings(g, x))
    }

    /// Runs the tower on token embeddings whose last row is the end marker.
    fn encode_embeddings(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.shape(x).0;
        let pos = g.param(&format!("{PREFIX}.pos_embed"));
        let pos = g.slice_rows(pos, 0, n);
        let mut h = g.add(x, pos);
        for i in 0..self.cfg.layers {
            let block = Block {
                weights: BlockWeights::under(&format!("{PREFIX}.layers.{i}")),
                heads: self.cfg.heads,
                causal: true,
                eps: self.eps,
            };
            h = block.forward(g, h, &BlockHooks::default());
        }
        let h = layer_norm(g, h, &format!("{PREFIX}.ln_final"), self.eps);
        let last = g.slice_rows(h, n - 1, 1);
        linear(g, last, &format!("{PREFIX}.projection"), false)
    }
}
