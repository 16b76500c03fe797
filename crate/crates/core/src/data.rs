//! Dataset catalog, splits, support selection, batch sampling and
//! augmentation.
//!
//! Layout: `root/photo/<category>/<stem>.<ext>` and
//! `root/sketch/<category>/<stem>-<k>.<ext>`. A sketch belongs to the photo
//! whose stem precedes the last `-`. A manifest CSV
//! (`path,modality,category,instance_id`) overrides that rule per path.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::name_seed;
use crate::visual_prompting::SupportSet;

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "webp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sketch,
    Photo,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Sketch => "sketch",
            Modality::Photo => "photo",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sketch" => Ok(Modality::Sketch),
            "photo" => Ok(Modality::Photo),
            other => Err(Error::Dataset(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    /// Relative to the catalog root.
    pub path: PathBuf,
    pub modality: Modality,
    pub category: String,
    pub instance_id: String,
    pub sketch_variant: Option<u32>,
}

impl InstanceRecord {
    /// Stable identifier: `<modality>/<category>/<file name>`.
    pub fn id(&self) -> String {
        self.path.to_string_lossy().replace('\\', "/")
    }
}

/// Splits a sketch stem `X-k` into `(X, Some(k))`.
pub fn split_sketch_stem(stem: &str) -> (String, Option<u32>) {
    if let Some((head, tail)) = stem.rsplit_once('-') {
        if let Ok(k) = tail.parse::<u32>() {
            if !head.is_empty() {
                return (head.to_string(), Some(k));
            }
        }
    }
    (stem.to_string(), None)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    pub root: PathBuf,
    pub records: Vec<InstanceRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    modality: String,
    category: String,
    instance_id: String,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scans `root`, applies the manifest, and reports orphan sketches as
/// warnings when `fine_grained` is set.
pub fn scan_dataset(root: &Path, manifest: Option<&Path>, fine_grained: bool) -> Result<Catalog> {
    let mut by_path: BTreeMap<PathBuf, InstanceRecord> = BTreeMap::new();
    for (sub, modality) in [("photo", Modality::Photo), ("sketch", Modality::Sketch)] {
        let dir = root.join(sub);
        if !dir.exists() {
            continue;
        }
        for cat_dir in list_dirs(&dir)? {
            let category = name_of(&cat_dir);
            for file in list_images(&cat_dir)? {
                let rel = PathBuf::from(sub).join(&category).join(name_of(&file));
                let stem = stem_of(&file);
                let (instance_id, sketch_variant) = match modality {
                    Modality::Photo => (stem, None),
                    Modality::Sketch => split_sketch_stem(&stem),
                };
                by_path.insert(
                    rel.clone(),
                    InstanceRecord {
                        path: rel,
                        modality,
                        category: category.clone(),
                        instance_id,
                        sketch_variant,
                    },
                );
            }
        }
    }
    if let Some(m) = manifest {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(m)
            .map_err(|e| Error::data(m, e.to_string()))?;
        for row in reader.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| Error::data(m, e.to_string()))?;
            let path = PathBuf::from(&row.path);
            if !root.join(&path).is_file() {
                return Err(Error::data(root.join(&path), "manifest entry does not exist"));
            }
            let modality: Modality = row.modality.parse()?;
            let sketch_variant = match modality {
                Modality::Sketch => split_sketch_stem(&stem_of(&path)).1,
                Modality::Photo => None,
            };
            by_path.insert(
                path.clone(),
                InstanceRecord {
                    path,
                    modality,
                    category: row.category,
                    instance_id: row.instance_id,
                    sketch_variant,
                },
            );
        }
    }
    let mut records: Vec<InstanceRecord> = by_path.into_values().collect();
    records.sort_by(|a, b| {
        (a.modality, &a.category, &a.path).cmp(&(b.modality, &b.category, &b.path))
    });
    let mut warnings = Vec::new();
    if fine_grained {
        let photos: BTreeSet<(&str, &str)> = records
            .iter()
            .filter(|r| r.modality == Modality::Photo)
            .map(|r| (r.category.as_str(), r.instance_id.as_str()))
            .collect();
        for r in records.iter().filter(|r| r.modality == Modality::Sketch) {
            if !photos.contains(&(r.category.as_str(), r.instance_id.as_str())) {
                warnings.push(format!("orphan sketch {} (no photo `{}`)", r.id(), r.instance_id));
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Catalog {
        root: root.to_path_buf(),
        records,
        warnings,
    })
}

impl Catalog {
    pub fn categories(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.category.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn indices(&self, category: &str, modality: Modality) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.category == category && r.modality == modality)
            .map(|(i, _)| i)
            .collect()
    }

    /// `(sketch, photo)` record index pairs of one category.
    pub fn pairs(&self, category: &str) -> Vec<(usize, usize)> {
        let photos: BTreeMap<&str, usize> = self
            .indices(category, Modality::Photo)
            .into_iter()
            .map(|i| (self.records[i].instance_id.as_str(), i))
            .collect();
        self.indices(category, Modality::Sketch)
            .into_iter()
            .filter_map(|s| {
                photos
                    .get(self.records[s].instance_id.as_str())
                    .map(|p| (s, *p))
            })
            .collect()
    }

    pub fn load(&self, index: usize, size: usize) -> Result<Image> {
        Image::load(&self.root.join(&self.records[index].path), size)
    }

    pub fn find(&self, rel: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id() == rel)
    }
}

/// Seen/unseen category split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl Split {
    /// Draws `unseen` categories uniformly with `seed`.
    pub fn random(categories: &[String], unseen: usize, seed: u64) -> Result<Self> {
        if unseen > categories.len() {
            return Err(Error::Dataset(format!(
                "cannot hold out {unseen} of {} categories",
                categories.len()
            )));
        }
        let mut cats = categories.to_vec();
        cats.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cats.shuffle(&mut rng);
        let mut unseen_set: Vec<String> = cats[..unseen].to_vec();
        let mut seen: Vec<String> = cats[unseen..].to_vec();
        unseen_set.sort();
        seen.sort();
        Ok(Self {
            seen,
            unseen: unseen_set,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let seen: BTreeSet<&String> = self.seen.iter().collect();
        if let Some(c) = self.unseen.iter().find(|c| seen.contains(c)) {
            return Err(Error::Dataset(format!("category `{c}` is both seen and unseen")));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Picks one sketch and two photos of `category`, deterministically in
/// `(category, seed)`.
pub fn select_support(catalog: &Catalog, category: &str, seed: u64) -> Result<SupportSet> {
    let sketches = catalog.indices(category, Modality::Sketch);
    let photos = catalog.indices(category, Modality::Photo);
    if sketches.is_empty() || photos.len() < 2 {
        return Err(Error::Dataset(format!(
            "category `{category}` has {} sketches and {} photos; support needs 1 and 2",
            sketches.len(),
            photos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, category));
    let sketch = *sketches.choose(&mut rng).expect("non-empty");
    let chosen: Vec<usize> = photos.choose_multiple(&mut rng, 2).copied().collect();
    let id = |i: usize| catalog.records[i].id();
    Ok(SupportSet {
        category: category.to_string(),
        sketch: id(sketch),
        photos: [id(chosen[0]), id(chosen[1])],
        seed,
    })
}

/// Support assignment of every category: `{category: {sketch, photos}, seed}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportFile {
    pub seed: u64,
    pub sets: BTreeMap<String, SupportSet>,
}

#[derive(Serialize, Deserialize)]
struct SupportEntry {
    sketch: String,
    photos: [String; 2],
}

impl SupportFile {
    pub fn select(catalog: &Catalog, categories: &[String], seed: u64) -> Result<Self> {
        let sets = categories
            .iter()
            .map(|c| Ok((c.clone(), select_support(catalog, c, seed)?)))
            .collect::<Result<_>>()?;
        Ok(Self { seed, sets })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (cat, s) in &self.sets {
            map.insert(
                cat.clone(),
                serde_json::to_value(SupportEntry {
                    sketch: s.sketch.clone(),
                    photos: s.photos.clone(),
                })
                .expect("plain struct"),
            );
        }
        map.insert("seed".into(), self.seed.into());
        serde_json::Value::Object(map)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Dataset("support file must be a JSON object".into()))?;
        let seed = obj
            .get("seed")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::Dataset("support file lacks an integer `seed`".into()))?;
        let mut sets = BTreeMap::new();
        for (cat, entry) in obj.iter().filter(|(k, _)| k.as_str() != "seed") {
            let e: SupportEntry = serde_json::from_value(entry.clone())
                .map_err(|e| Error::Dataset(format!("support entry `{cat}`: {e}")))?;
            sets.insert(
                cat.clone(),
                SupportSet {
                    category: cat.clone(),
                    sketch: e.sketch,
                    photos: e.photos,
                    seed,
                },
            );
        }
        Ok(Self { seed, sets })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
        Self::from_json(&v)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Loads the three support images in order sketch, photo, photo.
pub fn load_support(catalog: &Catalog, set: &SupportSet, size: usize) -> Result<[Image; 3]> {
    let load = |rel: &str| Image::load(&catalog.root.join(rel), size);
    Ok([load(&set.sketch)?, load(&set.photos[0])?, load(&set.photos[1])?])
}

/// One training pair, as record indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub sketch: usize,
    pub photo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// The single category of a fine-grained batch; `None` for mixed
    /// category-level batches.
    pub category: Option<String>,
    pub pairs: Vec<Pair>,
}

/// Categories that can produce at least one pair.
fn trainable_categories(catalog: &Catalog, categories: &[String]) -> Vec<(String, Vec<(usize, usize)>)> {
    categories
        .iter()
        .map(|c| (c.clone(), catalog.pairs(c)))
        .filter(|(_, p)| !p.is_empty())
        .collect()
}

fn draw<T: Copy>(items: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if items.len() >= n {
        items.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n).map(|_| *items.choose(rng).expect("non-empty")).collect()
    }
}

/// One category drawn uniformly, then `batch_size` of its pairs (without
/// replacement when it has enough, with replacement otherwise).
pub fn sample_batch(
    catalog: &Catalog,
    categories: &[String],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let eligible = trainable_categories(catalog, categories);
    let (category, pairs) = eligible
        .choose(rng)
        .ok_or_else(|| Error::Dataset("no training category has a sketch-photo pair".into()))?;
    let pairs = draw(pairs, batch_size, rng)
        .into_iter()
        .map(|(sketch, photo)| Pair { sketch, photo })
        .collect();
    Ok(Batch {
        category: Some(category.clone()),
        pairs,
    })
}

/// Mixed-category batch for category-level training: each pair is a sketch
/// with a random photo of the same category.
pub fn sample_category_batch(
    catalog: &Catalog,
    categories: &[String],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let eligible: Vec<(Vec<usize>, Vec<usize>)> = categories
        .iter()
        .map(|c| (catalog.indices(c, Modality::Sketch), catalog.indices(c, Modality::Photo)))
        .filter(|(s, p)| !s.is_empty() && !p.is_empty())
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Dataset(
            "category-level training needs two categories with sketches and photos".into(),
        ));
    }
    let pairs = (0..batch_size)
        .map(|_| {
            let (s, p) = eligible.choose(rng).expect("non-empty");
            Pair {
                sketch: *s.choose(rng).expect("non-empty"),
                photo: *p.choose(rng).expect("non-empty"),
            }
        })
        .collect();
    Ok(Batch {
        category: None,
        pairs,
    })
}

/// `⌈pairs / batch_size⌉` over the given categories.
pub fn batches_per_epoch(catalog: &Catalog, categories: &[String], batch_size: usize) -> usize {
    let total: usize = categories.iter().map(|c| catalog.pairs(c).len()).sum();
    total.div_ceil(batch_size.max(1)).max(1)
}

/// Augmentation stream of one record in one epoch.
pub fn record_rng(seed: u64, epoch: u64, record_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(name_seed(seed ^ epoch.rotate_left(32), record_id))
}

/// What [`augment`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentOps {
    pub flip: bool,
    pub grayscale: bool,
}

impl AugmentOps {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            grayscale: rng.random_bool(0.5),
        }
    }
}

/// Coupled horizontal flip and photo-only grayscale.
pub fn augment(sketch: &Image, photo: &Image, ops: AugmentOps) -> (Image, Image) {
    let mut photo = if ops.grayscale {
        photo.grayscale()
    } else {
        photo.clone()
    };
    let mut sketch = sketch.clone();
    if ops.flip {
        sketch = sketch.flip_horizontal();
        photo = photo.flip_horizontal();
    }
    (sketch, photo)
}
