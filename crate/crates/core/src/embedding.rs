//! Per-image embedding records, their binary container and extraction from a
//! model over a catalog.
//!
//! File layout: an 8-byte little-endian header length, a JSON header
//! (`dims`, `count`, `locals`, `config_hash`, `records`), then for every
//! record `(1 + locals) × dims` little-endian `f32` values: the global
//! feature followed by the local features in TL, TR, BL, BR order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::PromptMode;
use crate::data::{load_support, Catalog, Modality, SupportFile};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{CategoryPlan, Model};
use crate::visual_prompting::SupportSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub id: String,
    pub category: String,
    pub instance: String,
    pub modality: Modality,
    #[serde(skip)]
    pub global: Vec<f32>,
    #[serde(skip)]
    pub locals: Vec<Vec<f32>>,
}

impl EmbeddingSet {
    pub fn is_finite(&self) -> bool {
        self.global.iter().chain(self.locals.iter().flatten()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: usize,
    count: usize,
    locals: usize,
    config_hash: String,
    records: Vec<EmbeddingSet>,
}

/// A serialized batch of embeddings and the config hash that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub config_hash: String,
    pub sets: Vec<EmbeddingSet>,
}

impl EmbeddingFile {
    pub fn dims(&self) -> usize {
        self.sets.first().map_or(0, |s| s.global.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dims = self.dims();
        let locals = self.sets.first().map_or(0, |s| s.locals.len());
        for s in &self.sets {
            if s.global.len() != dims || s.locals.len() != locals || s.locals.iter().any(|l| l.len() != dims) {
                return Err(Error::Shape(format!("record `{}` has mixed feature widths", s.id)));
            }
        }
        let header = Header {
            dims,
            count: self.sets.len(),
            locals,
            config_hash: self.config_hash.clone(),
            records: self.sets.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + self.sets.len() * (1 + locals) * dims * 4);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.sets {
            for v in s.global.iter().chain(s.locals.iter().flatten()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("embedding file: {m}"));
        let len = bytes
            .get(..8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| bad("truncated header length"))?;
        let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        if header.count != header.records.len() {
            return Err(bad("count does not match the record list"));
        }
        let per = (1 + header.locals) * header.dims;
        let body = &bytes[8 + len..];
        if body.len() != header.count * per * 4 {
            return Err(bad("body size does not match the header"));
        }
        let mut values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut sets = header.records;
        for s in &mut sets {
            s.global = values.by_ref().take(header.dims).collect();
            s.locals = (0..header.locals)
                .map(|_| values.by_ref().take(header.dims).collect())
                .collect();
        }
        Ok(Self {
            config_hash: header.config_hash,
            sets,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Runs a model over catalog records.
pub struct Embedder<'a> {
    pub model: &'a Model,
    pub catalog: &'a Catalog,
    pub exec: Exec,
}

impl<'a> Embedder<'a> {
    pub fn new(model: &'a Model, catalog: &'a Catalog, exec: Exec) -> Self {
        Self {
            model,
            catalog,
            exec,
        }
    }

    fn record(&self, index: usize, plan: &CategoryPlan) -> Result<EmbeddingSet> {
        let r = &self.catalog.records[index];
        let img = self.catalog.load(index, self.model.cfg().backbone.image_size)?;
        let f = self.model.embed(&img, plan)?;
        let narrow = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
        Ok(EmbeddingSet {
            id: r.id(),
            category: r.category.clone(),
            instance: r.instance_id.clone(),
            modality: r.modality,
            global: narrow(&f.global),
            locals: f.locals.iter().map(|l| narrow(l)).collect(),
        })
    }

    fn plan_for(&self, category: &str, set: Option<&SupportSet>) -> Result<Arc<CategoryPlan>> {
        match set {
            Some(s) => {
                let imgs = load_support(self.catalog, s, self.model.cfg().backbone.image_size)?;
                let key = format!("{}|{}|{}|{}", s.seed, s.sketch, s.photos[0], s.photos[1]);
                self.model.category_plan(Some(category), Some(&imgs), &key)
            }
            None => self.model.category_plan(Some(category), None, ""),
        }
    }

    /// Same support set with its sketch swapped for another sketch of the
    /// category, so a query never conditions on itself.
    fn alternate_support(&self, set: &SupportSet) -> Option<SupportSet> {
        let other = self
            .catalog
            .indices(&set.category, Modality::Sketch)
            .into_iter()
            .map(|i| self.catalog.records[i].id())
            .find(|id| *id != set.sketch)?;
        Some(SupportSet {
            sketch: other,
            ..set.clone()
        })
    }

    /// Fine-grained extraction: every sketch and photo of `categories`, each
    /// category conditioned on its support set. Returns the sets and any
    /// warnings.
    pub fn fine_grained(
        &self,
        categories: &[String],
        support: Option<&SupportFile>,
        exclude_self_support: bool,
    ) -> Result<(Vec<EmbeddingSet>, Vec<String>)> {
        let needs_support = self.model.cfg().visual_prompt == PromptMode::CategorySpecific;
        let mut out = Vec::new();
        let mut warnings = Vec::new();
        for cat in categories {
            let set = if needs_support {
                let file = support.ok_or_else(|| {
                    Error::Usage("category-specific prompts need a support file".into())
                })?;
                Some(file.sets.get(cat).ok_or_else(|| {
                    Error::Dataset(format!("support file has no entry for `{cat}`"))
                })?)
            } else {
                None
            };
            let plan = self.plan_for(cat, set)?;
            let mut indices = self.catalog.indices(cat, Modality::Sketch);
            indices.extend(self.catalog.indices(cat, Modality::Photo));
            let alternate = match set {
                Some(s) if exclude_self_support => match self.alternate_support(s) {
                    Some(a) => Some((s.sketch.clone(), self.plan_for(cat, Some(&a))?)),
                    None => {
                        warnings.push(format!("`{cat}` has one sketch; it stays its own support"));
                        None
                    }
                },
                _ => None,
            };
            let sets = self.exec.try_map(&indices, |&i| {
                let p = match &alternate {
                    Some((sketch, alt)) if self.catalog.records[i].id() == *sketch => alt,
                    _ => &plan,
                };
                self.record(i, p)
            })?;
            out.extend(sets);
        }
        Ok((out, warnings))
    }

    /// Category-level extraction: prompts come from each image itself, so no
    /// category information enters the query features.
    pub fn category_level(&self, categories: &[String]) -> Result<Vec<EmbeddingSet>> {
        let cfg = self.model.cfg();
        if cfg.visual_prompt == PromptMode::CategorySpecific {
            return Err(Error::Config(
                "category-level retrieval needs instance_specific or common prompts".into(),
            ));
        }
        if cfg.uses_text() && cfg.text_source != crate::config::TextSource::Learnable {
            return Err(Error::Config(
                "category-level retrieval needs text_source=learnable".into(),
            ));
        }
        let plan = self.model.category_plan(None, None, "")?;
        let indices: Vec<usize> = categories
            .iter()
            .flat_map(|c| {
                let mut v = self.catalog.indices(c, Modality::Sketch);
                v.extend(self.catalog.indices(c, Modality::Photo));
                v
            })
            .collect();
        self.exec.try_map(&indices, |&i| self.record(i, &plan))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &str, modality: Modality, dims: usize, locals: usize) -> EmbeddingSet {
        EmbeddingSet {
            id: id.into(),
            category: "tree".into(),
            instance: "i0".into(),
            modality,
            global: (0..dims).map(|i| i as f32 * 0.5 - 1.0).collect(),
            locals: (0..locals)
                .map(|k| (0..dims).map(|i| (i * k) as f32 / 7.0).collect())
                .collect(),
        }
    }

    #[test]
    fn file_round_trip() {
        let f = EmbeddingFile {
            config_hash: "abc".into(),
            sets: vec![set("a", Modality::Sketch, 5, 4), set("b", Modality::Photo, 5, 4)],
        };
        let bytes = f.to_bytes().unwrap();
        let back = EmbeddingFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        let json_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + json_len + 2 * 5 * 5 * 4);
    }

    #[test]
    fn without_locals() {
        let f = EmbeddingFile {
            config_hash: String::new(),
            sets: vec![set("a", Modality::Sketch, 3, 0)],
        };
        assert_eq!(EmbeddingFile::from_bytes(&f.to_bytes().unwrap()).unwrap(), f);
    }

    #[test]
    fn mixed_widths_and_truncation_are_rejected() {
        let f = EmbeddingFile {
            config_hash: String::new(),
            sets: vec![set("a", Modality::Sketch, 3, 4), set("b", Modality::Photo, 4, 4)],
        };
        assert!(matches!(f.to_bytes(), Err(Error::Shape(_))));
        let good = EmbeddingFile {
            config_hash: String::new(),
            sets: vec![set("a", Modality::Sketch, 3, 4)],
        };
        let bytes = good.to_bytes().unwrap();
        assert!(EmbeddingFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(EmbeddingFile::from_bytes(&bytes[..4]).is_err());
    }
}
