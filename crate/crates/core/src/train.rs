//! Triplet objective over global and local features, the two-tier Adam
//! optimizer, the training loop and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{
    Distance, Mining, OptimSchedule, PromptMode, RunConfig, Task, TextSource, TrainConfig,
    TripletConfig,
};
use crate::data::{
    augment, batches_per_epoch, load_support, record_rng, sample_batch, sample_category_batch,
    select_support, AugmentOps, Batch, Catalog,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::image::Image;
use crate::model::Model;
use crate::params::{hex, name_seed, Tier};
use crate::tensor_file::TensorFile;

/// Distance between two feature vectors under the configured metric.
pub fn distance(a: &[f64], b: &[f64], metric: Distance) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm feature vector".into()));
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(match metric {
        Distance::Cosine => 1.0 - cos,
        Distance::Euclidean => (2.0 - 2.0 * cos).max(0.0).sqrt(),
    })
}

/// `max(0, d(a, p) − d(a, n) + margin)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], cfg: &TripletConfig) -> Result<f64> {
    let dp = distance(a, p, cfg.distance)?;
    let dn = distance(a, n, cfg.distance)?;
    Ok((dp - dn + cfg.margin).max(0.0))
}

/// `L_global + λ · Σ_k L_local[k]`.
pub fn combine_losses(global: f64, locals: &[f64], lambda: f64) -> f64 {
    global + lambda * locals.iter().sum::<f64>()
}

/// Graph loss of one batch with the per-feature values.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub global: f64,
    pub locals: Vec<f64>,
}

/// Hardest (or random) candidate for every anchor. Candidates for anchor `i`
/// are photos `j != i` whose group differs from `i`'s; ties go to the lowest
/// index. Anchors without a candidate are left out.
pub fn mine_negatives(
    dist: &Mat,
    groups: &[usize],
    mining: Mining,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..dist.nrows() {
        let cands: Vec<usize> = (0..dist.ncols())
            .filter(|&j| j != i && groups[j] != groups[i])
            .collect();
        let chosen = match mining {
            Mining::Hardest => cands.iter().copied().reduce(|best, j| {
                if dist[[i, j]] < dist[[i, best]] {
                    j
                } else {
                    best
                }
            }),
            Mining::Random => cands.choose(rng).copied(),
        };
        if let Some(j) = chosen {
            out.push((i, j));
        }
    }
    out
}

/// Triplet loss of one feature kind: rows of `sketch` are anchors, the
/// matching rows of `photo` positives.
fn feature_loss(
    g: &mut Graph,
    sketch: &[Var],
    photo: &[Var],
    groups: &[usize],
    cfg: &TripletConfig,
    rng: &mut impl Rng,
) -> Result<Option<Var>> {
    let s = g.concat_rows(sketch);
    let p = g.concat_rows(photo);
    for m in [s, p] {
        if g.value(m).rows().into_iter().any(|r| r.dot(&r) == 0.0) {
            return Err(Error::Numeric("zero-norm feature vector in batch".into()));
        }
    }
    let s = g.normalize_rows(s);
    let p = g.normalize_rows(p);
    let sim = g.matmul_t(s, p);
    let neg = g.scale(sim, -1.0);
    let d = match cfg.distance {
        Distance::Cosine => g.shift(neg, 1.0),
        Distance::Euclidean => {
            let two = g.scale(neg, 2.0);
            let sq = g.shift(two, 2.0);
            g.sqrt(sq)
        }
    };
    let triplets = mine_negatives(g.value(d), groups, cfg.mining, rng);
    if triplets.is_empty() {
        return Ok(None);
    }
    let n = triplets.len();
    let terms: Vec<Var> = triplets
        .into_iter()
        .map(|(i, j)| {
            let dp = g.pick(d, i, i);
            let dn = g.pick(d, i, j);
            let diff = g.sub(dp, dn);
            let h = g.shift(diff, cfg.margin);
            g.relu(h)
        })
        .collect();
    let sum = g.add_n(&terms);
    Ok(Some(g.scale(sum, 1.0 / n as f64)))
}

/// Combined triplet objective over a batch. `features[b]` holds
/// `[global, local_1..local_4]` for pair `b`. Returns `None` when no anchor
/// has a negative (for example a batch of one pair).
pub fn batch_loss(
    g: &mut Graph,
    sketch: &[Vec<Var>],
    photo: &[Vec<Var>],
    groups: &[usize],
    cfg: &TripletConfig,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<Option<BatchLoss>> {
    if sketch.len() < 2 || sketch.len() != photo.len() || groups.len() != sketch.len() {
        return Ok(None);
    }
    let kinds = sketch[0].len();
    let mut parts = Vec::with_capacity(kinds);
    for k in 0..kinds {
        let s: Vec<Var> = sketch.iter().map(|f| f[k]).collect();
        let p: Vec<Var> = photo.iter().map(|f| f[k]).collect();
        match feature_loss(g, &s, &p, groups, cfg, rng)? {
            Some(l) => parts.push(l),
            None => return Ok(None),
        }
    }
    let global = g.scalar(parts[0]);
    let locals: Vec<f64> = parts[1..].iter().map(|v| g.scalar(*v)).collect();
    let total = if parts.len() == 1 {
        parts[0]
    } else {
        let local_sum = g.add_n(&parts[1..]);
        let weighted = g.scale(local_sum, lambda);
        g.add(parts[0], weighted)
    };
    Ok(Some(BatchLoss {
        total,
        global,
        locals,
    }))
}

/// Adam with one learning rate per tier; frozen parameters are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub schedule: OptimSchedule,
    pub step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(schedule: OptimSchedule) -> Self {
        Self {
            schedule,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr(&self, tier: Tier) -> Option<f64> {
        match tier {
            Tier::Norm => Some(self.schedule.lr_norm),
            Tier::Module => Some(self.schedule.lr_module),
            Tier::Frozen => None,
        }
    }

    /// One update from `grads`. Gradients of frozen parameters are ignored;
    /// a gradient for a name outside the policy is an assembly error.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Mat>) -> Result<()> {
        let mut plan = Vec::new();
        for (name, grad) in grads {
            let tier = model.policy.tier(name).ok_or_else(|| {
                Error::Config(format!("parameter `{name}` belongs to no optimizer group"))
            })?;
            if let Some(lr) = self.lr(tier) {
                plan.push((name, grad, lr));
            }
        }
        self.step += 1;
        let s = self.schedule;
        let t = self.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let store = model.store_mut();
        for (name, grad, lr) in plan {
            let param = store.get_mut(name).expect("policy names exist in the store");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(grad.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(grad.dim()));
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &gr| {
                    *m = s.beta1 * *m + (1.0 - s.beta1) * gr;
                    *v = s.beta2 * *v + (1.0 - s.beta2) * gr * gr;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + s.eps);
                });
        }
        Ok(())
    }

    fn save(&self, file: &mut TensorFile) {
        for (name, m) in &self.m {
            file.insert_mat(&format!("adam.m/{name}"), m);
        }
        for (name, v) in &self.v {
            file.insert_mat(&format!("adam.v/{name}"), v);
        }
        file.metadata.insert("adam_step".into(), self.step.to_string());
    }

    fn load(file: &TensorFile, schedule: OptimSchedule) -> Result<Self> {
        let mut adam = Self::new(schedule);
        adam.step = meta(file, "adam_step")?;
        for (name, t) in &file.tensors {
            let (slot, key) = if let Some(k) = name.strip_prefix("adam.m/") {
                (&mut adam.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                (&mut adam.v, k)
            } else {
                continue;
            };
            let (r, c) = match t.shape.as_slice() {
                [r, c] => (*r, *c),
                _ => {
                    return Err(Error::Load {
                        tensor: name.clone(),
                        msg: "optimizer state must be 2-D".into(),
                    })
                }
            };
            slot.insert(key.to_string(), t.to_mat(name, r, c)?);
        }
        Ok(adam)
    }
}

fn meta<T: std::str::FromStr>(file: &TensorFile, key: &str) -> Result<T> {
    file.metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
}

/// Learning rates in force for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrRecord {
    pub norm: f64,
    pub module: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub loss_global: f64,
    pub loss_local: Vec<f64>,
    pub lr: LrRecord,
    pub category: Option<String>,
}

/// Rebuilds a model from a checkpoint: configuration from its metadata,
/// trainable tensors from its body.
pub fn model_from_checkpoint(file: &TensorFile) -> Result<(RunConfig, Model)> {
    let text = file
        .metadata
        .get("config")
        .ok_or_else(|| Error::Format("checkpoint metadata lacks `config`".into()))?;
    let mut run = RunConfig::default();
    run.apply_str(text)?;
    let mut model = Model::build(&run.model()?)?;
    model.load_trainable(file)?;
    Ok((run, model))
}

pub fn read_checkpoint(path: &Path) -> Result<(RunConfig, Model)> {
    model_from_checkpoint(&TensorFile::read(path)?)
}

const IMAGE_CACHE_LIMIT: usize = 4096;

/// Single-writer training loop over one catalog.
pub struct Trainer<'a> {
    model: Model,
    catalog: &'a Catalog,
    categories: Vec<String>,
    cfg: TrainConfig,
    run: RunConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
    skipped: u64,
    history: Vec<LogRecord>,
    images: HashMap<usize, Image>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, catalog: &'a Catalog, categories: Vec<String>, run: &RunConfig) -> Result<Self> {
        let cfg = run.train()?;
        let mc = model.cfg();
        if cfg.task == Task::CategoryLevel && mc.visual_prompt == PromptMode::CategorySpecific {
            return Err(Error::Config(
                "category-level training mixes categories; use instance_specific or common prompts"
                    .into(),
            ));
        }
        if cfg.task == Task::CategoryLevel && mc.uses_text() && mc.text_source != TextSource::Learnable {
            return Err(Error::Config(
                "category-level training needs text_source=learnable".into(),
            ));
        }
        if cfg.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        Ok(Self {
            adam: Adam::new(cfg.schedule),
            rng: ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "batches")),
            model,
            catalog,
            categories,
            cfg,
            run: run.clone(),
            step: 0,
            skipped: 0,
            history: Vec::new(),
            images: HashMap::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(file: &TensorFile, catalog: &'a Catalog, categories: Vec<String>) -> Result<Self> {
        let (run, model) = model_from_checkpoint(file)?;
        let mut t = Self::new(model, catalog, categories, &run)?;
        t.adam = Adam::load(file, t.cfg.schedule)?;
        t.step = meta(file, "step")?;
        t.skipped = meta(file, "skipped")?;
        let stream: u64 = meta(file, "rng_stream")?;
        let pos: u128 = meta(file, "rng_word_pos")?;
        t.rng.set_stream(stream);
        t.rng.set_word_pos(pos);
        let history = file.metadata.get("history").map(String::as_str).unwrap_or("[]");
        t.history = serde_json::from_str(history)?;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn history(&self) -> &[LogRecord] {
        &self.history
    }

    pub fn batches_per_epoch(&self) -> u64 {
        batches_per_epoch(self.catalog, &self.categories, self.cfg.batch_size) as u64
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.batches_per_epoch()
    }

    pub fn total_steps(&self) -> u64 {
        if self.cfg.max_steps > 0 {
            self.cfg.max_steps as u64
        } else {
            self.cfg.schedule.epochs as u64 * self.batches_per_epoch()
        }
    }

    fn image(&mut self, index: usize) -> Result<Image> {
        if let Some(img) = self.images.get(&index) {
            return Ok(img.clone());
        }
        let img = self
            .catalog
            .load(index, self.model.cfg().backbone.image_size)?;
        if self.images.len() < IMAGE_CACHE_LIMIT {
            self.images.insert(index, img.clone());
        }
        Ok(img)
    }

    fn sample(&mut self) -> Result<Batch> {
        match self.cfg.task {
            Task::FineGrained => {
                sample_batch(self.catalog, &self.categories, self.cfg.batch_size, &mut self.rng)
            }
            Task::CategoryLevel => sample_category_batch(
                self.catalog,
                &self.categories,
                self.cfg.batch_size,
                &mut self.rng,
            ),
        }
    }

    /// Samples, forwards and updates once. Returns `None` for a skipped batch.
    pub fn step_once(&mut self) -> Result<Option<LogRecord>> {
        let batch = self.sample()?;
        let epoch = self.epoch();
        let mut pairs = Vec::with_capacity(batch.pairs.len());
        for p in &batch.pairs {
            let (s, ph) = (self.image(p.sketch)?, self.image(p.photo)?);
            pairs.push(if self.cfg.augment {
                let id = self.catalog.records[p.sketch].id();
                let ops = AugmentOps::draw(&mut record_rng(self.cfg.seed, epoch, &id));
                augment(&s, &ph, ops)
            } else {
                (s, ph)
            });
        }
        let support = match (&batch.category, self.model.cfg().visual_prompt) {
            (Some(c), PromptMode::CategorySpecific) => {
                let seed = name_seed(self.cfg.seed, &format!("support/{}", self.step));
                let set = select_support(self.catalog, c, seed)?;
                Some(load_support(self.catalog, &set, self.model.cfg().backbone.image_size)?)
            }
            _ => None,
        };
        let groups: Vec<usize> = batch
            .pairs
            .iter()
            .map(|p| match self.cfg.task {
                Task::FineGrained => p.photo,
                Task::CategoryLevel => self
                    .categories
                    .iter()
                    .position(|c| *c == self.catalog.records[p.photo].category)
                    .expect("sampled from categories"),
            })
            .collect();
        let mut loss_rng = ChaCha8Rng::seed_from_u64(name_seed(self.cfg.seed, &format!("mining/{}", self.step)));

        let (grads, global, locals) = {
            let mut g = self.model.graph(true);
            let loss = pair_objective(
                &self.model,
                &mut g,
                batch.category.as_deref(),
                support.as_ref().map(|s| s.as_slice()),
                &pairs,
                &groups,
                &self.cfg,
                &mut loss_rng,
            )?;
            let Some(loss) = loss else {
                self.step += 1;
                self.skipped += 1;
                return Ok(None);
            };
            let total = g.scalar(loss.total);
            if !total.is_finite() {
                let ids: Vec<String> = batch
                    .pairs
                    .iter()
                    .map(|p| self.catalog.records[p.sketch].id())
                    .collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {}; batch sketches: {}",
                    self.step,
                    ids.join(", ")
                )));
            }
            (g.backward(loss.total).into_params(), loss.global, loss.locals)
        };
        self.adam.step(&mut self.model, &grads)?;
        let record = LogRecord {
            step: self.step,
            epoch,
            loss: combine_losses(global, &locals, self.cfg.schedule.lambda_local),
            loss_global: global,
            loss_local: locals,
            lr: LrRecord {
                norm: self.cfg.schedule.lr_norm,
                module: self.cfg.schedule.lr_module,
            },
            category: batch.category,
        };
        self.step += 1;
        self.history.push(record.clone());
        Ok(Some(record))
    }

    /// Trains to the configured step count. `on_checkpoint` receives every
    /// periodic checkpoint and the final one.
    pub fn run(
        &mut self,
        mut on_record: impl FnMut(&LogRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(u64, TensorFile) -> Result<()>,
    ) -> Result<()> {
        let total = self.total_steps();
        let every = match self.cfg.checkpoint_every {
            0 => self.batches_per_epoch(),
            n => n as u64,
        };
        while self.step < total {
            if let Some(r) = self.step_once()? {
                on_record(&r)?;
            }
            if self.step.is_multiple_of(every) && self.step < total {
                on_checkpoint(self.step, self.checkpoint()?)?;
            }
        }
        on_checkpoint(self.step, self.checkpoint()?)
    }

    /// Trainable tensors, optimizer state, RNG state and history.
    pub fn checkpoint(&self) -> Result<TensorFile> {
        let mut f = self.model.trainable_tensors();
        self.adam.save(&mut f);
        let md = &mut f.metadata;
        md.insert("config".into(), self.run.to_text());
        md.insert("config_hash".into(), self.run.hash());
        md.insert("step".into(), self.step.to_string());
        md.insert("epoch".into(), self.epoch().to_string());
        md.insert("skipped".into(), self.skipped.to_string());
        md.insert("rng_seed".into(), hex(&self.rng.get_seed()));
        md.insert("rng_stream".into(), self.rng.get_stream().to_string());
        md.insert("rng_word_pos".into(), self.rng.get_word_pos().to_string());
        md.insert("history".into(), serde_json::to_string(&self.history)?);
        Ok(f)
    }
}

/// Forward of every pair under shared category conditioning plus the batch
/// loss. Exposed for gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective(
    model: &Model,
    g: &mut Graph,
    category: Option<&str>,
    support: Option<&[Image]>,
    pairs: &[(Image, Image)],
    groups: &[usize],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Option<BatchLoss>> {
    let cond = model.condition(g, category, support)?;
    let mut sketch = Vec::with_capacity(pairs.len());
    let mut photo = Vec::with_capacity(pairs.len());
    for (s, p) in pairs {
        for (img, out) in [(s, &mut sketch), (p, &mut photo)] {
            let f = model.forward_image(g, img, &cond, false)?;
            let mut feats = vec![f.global];
            feats.extend(f.locals);
            out.push(feats);
        }
    }
    batch_loss(
        g,
        &sketch,
        &photo,
        groups,
        &cfg.triplet,
        cfg.schedule.lambda_local,
        rng,
    )
}
