use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sketchprompt::config::{PromptMode, RunConfig, Task};
use sketchprompt::data::{scan_dataset, select_support, load_support, Catalog, Modality, Split, SupportFile};
use sketchprompt::embedding::{Embedder, EmbeddingFile, EmbeddingSet};
use sketchprompt::image::Image;
use sketchprompt::model::{Architecture, Model};
use sketchprompt::retrieval::{
    eval_category_level, eval_fine_grained, random_agreement, MetricEngine, MetricsReport,
};
use sketchprompt::synth::{generate, SynthSpec};
use sketchprompt::tensor_file::TensorFile;
use sketchprompt::train::{model_from_checkpoint, Trainer};
use sketchprompt::visualize::{overlay, prompt_similarity, to_csv};
use sketchprompt::{Error, Result};

use crate::output::{timestamp, OutDir};
use crate::{Command, Common, EvalSource, ProtocolArg, Which};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::PrepareSplits {
            common,
            data,
            manifest,
            unseen,
        } => prepare_splits(&common, &data, manifest.as_deref(), unseen),
        Command::SelectSupport {
            common,
            data,
            manifest,
            split,
            which,
        } => select_support_cmd(&common, &data, manifest.as_deref(), &split, which),
        Command::Train {
            common,
            data,
            manifest,
            split,
            resume,
        } => train(&common, &data, manifest.as_deref(), &split, resume.as_deref()),
        Command::Embed {
            common,
            checkpoint,
            data,
            manifest,
            split,
            support,
            which,
        } => embed(&common, &checkpoint, &data, manifest.as_deref(), &split, support.as_deref(), which),
        Command::EvalFg {
            common,
            source,
            support,
        } => evaluate(&common, &source, support.as_deref(), ProtocolArg::Fg),
        Command::EvalCat { common, source } => evaluate(&common, &source, None, ProtocolArg::Cat),
        Command::Visualize {
            common,
            checkpoint,
            image,
            category,
            data,
            manifest,
            support,
            layer,
            use_inputs,
        } => visualize(
            &common,
            &checkpoint,
            &image,
            &category,
            data.as_deref(),
            manifest.as_deref(),
            support.as_deref(),
            layer,
            use_inputs,
        ),
        Command::OracleCheck {
            common,
            embeddings,
            split,
            protocol,
            random,
            force,
        } => oracle_check(&common, embeddings.as_deref(), split.as_deref(), protocol, random, force),
        Command::ParamAudit { common, mode, ls } => param_audit(&common, mode.as_deref(), ls),
        Command::SynthData {
            common,
            categories,
            instances,
            sketches,
            size,
        } => synth_data(&common, categories, instances, sketches, size),
    }
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Usage("this command needs --out DIR".into()))
}

/// Prints the dry-run summary. Returns true when the caller should stop.
fn dry_run(common: &Common, cfg: &RunConfig, outputs: &[&str]) -> bool {
    if !common.dry_run {
        return false;
    }
    emit(&format!("# resolved configuration (hash {})\n", cfg.hash()));
    emit(&cfg.to_text());
    let dir = common
        .out
        .as_deref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "<stdout>".into());
    emit(&format!("# planned outputs under {dir}\n"));
    for o in outputs {
        emit(&format!("#   {o}\n"));
    }
    true
}

fn catalog(data: &Path, manifest: Option<&Path>, fine_grained: bool) -> Result<Catalog> {
    let c = scan_dataset(data, manifest, fine_grained)?;
    for w in &c.warnings {
        warn!("{w}");
    }
    Ok(c)
}

fn pick(split: &Split, which: Which) -> Vec<String> {
    match which {
        Which::Seen => split.seen.clone(),
        Which::Unseen => split.unseen.clone(),
        Which::All => {
            let mut v: Vec<String> = split.seen.iter().chain(&split.unseen).cloned().collect();
            v.sort();
            v
        }
    }
}

fn prepare_splits(common: &Common, data: &Path, manifest: Option<&Path>, unseen: usize) -> Result<()> {
    let cfg = common.resolve()?;
    if dry_run(common, &cfg, &["split.json", "manifest.json"]) {
        return Ok(());
    }
    let out = require_out(common)?;
    let cat = catalog(data, manifest, true)?;
    let split = Split::random(&cat.categories(), unseen, cfg.parse("seed")?)?;
    let mut dir = OutDir::create(out)?;
    split.write(&dir.file("split.json")?)?;
    dir.finish("prepare-splits", &cfg.hash(), &cfg.to_text())?;
    info!("{} seen, {} unseen categories", split.seen.len(), split.unseen.len());
    Ok(())
}

fn select_support_cmd(
    common: &Common,
    data: &Path,
    manifest: Option<&Path>,
    split: &Path,
    which: Which,
) -> Result<()> {
    let cfg = common.resolve()?;
    if dry_run(common, &cfg, &["support.json", "manifest.json"]) {
        return Ok(());
    }
    let out = require_out(common)?;
    let cat = catalog(data, manifest, true)?;
    let split = Split::read(split)?;
    let seed = common.seed.map_or_else(|| cfg.parse("support_seed"), Ok)?;
    let file = SupportFile::select(&cat, &pick(&split, which), seed)?;
    let mut dir = OutDir::create(out)?;
    file.write(&dir.file("support.json")?)?;
    dir.finish("select-support", &cfg.hash(), &cfg.to_text())?;
    Ok(())
}

fn train(common: &Common, data: &Path, manifest: Option<&Path>, split: &Path, resume: Option<&Path>) -> Result<()> {
    let resumed = resume.map(TensorFile::read).transpose()?;
    let cfg = match &resumed {
        Some(f) => model_from_checkpoint(f)?.0,
        None => common.resolve()?,
    };
    if dry_run(common, &cfg, &["train.jsonl", "checkpoints/step-NNNNNN.ckpt", "final.ckpt", "manifest.json"]) {
        return Ok(());
    }
    let out = require_out(common)?;
    let split = Split::read(split)?;
    let tc = cfg.train()?;
    let cat = catalog(data, manifest, tc.task == Task::FineGrained)?;
    let mut trainer = match &resumed {
        Some(f) => Trainer::resume(f, &cat, split.seen.clone())?,
        None => {
            let model = Model::build(&cfg.model()?)?;
            Trainer::new(model, &cat, split.seen.clone(), &cfg)?
        }
    };
    let total = trainer.total_steps();
    info!("training {} steps from step {}", total, trainer.step());
    let mut dir = OutDir::create(out)?;
    let log_path = dir.file("train.jsonl")?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(resumed.is_some())
        .write(true)
        .truncate(resumed.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut ckpts: Vec<String> = Vec::new();
    trainer.run(
        |r| {
            let line = serde_json::to_string(r)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            if r.step % 10 == 0 {
                info!("step {} loss {:.5}", r.step, r.loss);
            }
            Ok(())
        },
        |step, file| {
            let name = if step >= total {
                "final.ckpt".to_string()
            } else {
                format!("checkpoints/step-{step:06}.ckpt")
            };
            let path = out.join(&name);
            if let Some(d) = path.parent() {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            file.write(&path)?;
            ckpts.push(name);
            Ok(())
        },
    )?;
    for c in &ckpts {
        dir.file(c)?;
    }
    if trainer.skipped() > 0 {
        warn!("{} batches skipped for lack of negatives", trainer.skipped());
    }
    dir.finish("train", &cfg.hash(), &cfg.to_text())?;
    Ok(())
}

/// Model from a checkpoint plus the evaluation-time configuration: the
/// checkpoint's settings with command-line overrides layered on top.
fn load_checkpoint(common: &Common, path: &Path) -> Result<(RunConfig, RunConfig, Model)> {
    let file = TensorFile::read(path)?;
    let (model_cfg, model) = model_from_checkpoint(&file)?;
    let mut eval_cfg = model_cfg.clone();
    common.apply_overrides(&mut eval_cfg)?;
    Ok((model_cfg, eval_cfg, model))
}

fn support_for(
    eval_cfg: &RunConfig,
    model: &Model,
    cat: &Catalog,
    categories: &[String],
    support: Option<&Path>,
) -> Result<Option<SupportFile>> {
    if model.cfg().visual_prompt != PromptMode::CategorySpecific {
        return Ok(None);
    }
    match support {
        Some(p) => SupportFile::read(p).map(Some),
        None => SupportFile::select(cat, categories, eval_cfg.parse("support_seed")?).map(Some),
    }
}

fn extract(
    common: &Common,
    model_cfg: &RunConfig,
    eval_cfg: &RunConfig,
    model: &Model,
    cat: &Catalog,
    categories: &[String],
    support: Option<&Path>,
) -> Result<Vec<EmbeddingSet>> {
    let embedder = Embedder::new(model, cat, common.exec());
    match model_cfg.train()?.task {
        Task::FineGrained => {
            let sup = support_for(eval_cfg, model, cat, categories, support)?;
            let (sets, warnings) =
                embedder.fine_grained(categories, sup.as_ref(), eval_cfg.flag("exclude_self_support")?)?;
            for w in warnings {
                warn!("{w}");
            }
            Ok(sets)
        }
        Task::CategoryLevel => embedder.category_level(categories),
    }
}

fn split_by_modality(sets: Vec<EmbeddingSet>) -> (Vec<EmbeddingSet>, Vec<EmbeddingSet>) {
    sets.into_iter().partition(|s| s.modality == Modality::Sketch)
}

fn embed(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    manifest: Option<&Path>,
    split: &Path,
    support: Option<&Path>,
    which: Which,
) -> Result<()> {
    let (model_cfg, eval_cfg, model) = load_checkpoint(common, checkpoint)?;
    if dry_run(common, &eval_cfg, &["sketches.bin", "photos.bin", "manifest.json"]) {
        return Ok(());
    }
    let out = require_out(common)?;
    let split = Split::read(split)?;
    let categories = pick(&split, which);
    let cat = catalog(data, manifest, true)?;
    let sets = extract(common, &model_cfg, &eval_cfg, &model, &cat, &categories, support)?;
    let (sketches, photos) = split_by_modality(sets);
    let hash = model_cfg.hash();
    let mut dir = OutDir::create(out)?;
    for (name, sets) in [("sketches.bin", sketches), ("photos.bin", photos)] {
        EmbeddingFile {
            config_hash: hash.clone(),
            sets,
        }
        .write(&dir.file(name)?)?;
    }
    dir.finish("embed", &hash, &model_cfg.to_text())?;
    Ok(())
}

/// Both embedding files, checked to come from the same configuration.
fn read_pair(paths: &[PathBuf], force: bool) -> Result<(Vec<EmbeddingSet>, String)> {
    let q = EmbeddingFile::read(&paths[0])?;
    let g = EmbeddingFile::read(&paths[1])?;
    if q.config_hash != g.config_hash {
        let msg = format!(
            "config hashes differ: {} has {}, {} has {}",
            paths[0].display(),
            q.config_hash,
            paths[1].display(),
            g.config_hash
        );
        if !force {
            return Err(Error::Usage(format!("{msg}; pass --force to compare anyway")));
        }
        warn!("{msg}");
    }
    let mut sets = q.sets;
    sets.extend(g.sets);
    Ok((sets, q.config_hash))
}

fn report(
    sets: &[EmbeddingSet],
    categories: &[String],
    cfg: &RunConfig,
    protocol: ProtocolArg,
    engine: MetricEngine,
    common: &Common,
    hash: &str,
) -> Result<MetricsReport> {
    let metric = cfg.train()?.triplet.distance;
    match protocol {
        ProtocolArg::Fg => eval_fine_grained(sets, categories, metric, engine, hash),
        ProtocolArg::Cat => eval_category_level(sets, categories, metric, engine, common.exec(), hash),
    }
}

fn evaluate(common: &Common, source: &EvalSource, support: Option<&Path>, protocol: ProtocolArg) -> Result<()> {
    let split = Split::read(&source.split)?;
    let categories = pick(&split, source.which);
    let (sets, hash, cfg) = match (&source.embeddings, &source.checkpoint) {
        (Some(paths), None) => {
            let cfg = common.resolve()?;
            if dry_run(common, &cfg, &["report.json", "report.txt", "manifest.json"]) {
                return Ok(());
            }
            let (sets, hash) = read_pair(paths, source.force)?;
            (sets, hash, cfg)
        }
        (None, Some(ckpt)) => {
            let (model_cfg, eval_cfg, model) = load_checkpoint(common, ckpt)?;
            if dry_run(common, &eval_cfg, &["report.json", "report.txt", "manifest.json"]) {
                return Ok(());
            }
            let data = source
                .data
                .as_deref()
                .ok_or_else(|| Error::Usage("--checkpoint needs --data".into()))?;
            let cat = catalog(data, source.manifest.as_deref(), true)?;
            let sets = extract(common, &model_cfg, &eval_cfg, &model, &cat, &categories, support)?;
            (sets, model_cfg.hash(), eval_cfg)
        }
        _ => {
            return Err(Error::Usage(
                "give either --embeddings QUERIES GALLERY or --checkpoint".into(),
            ))
        }
    };
    let mut rep = report(&sets, &categories, &cfg, protocol, MetricEngine::Fast, common, &hash)?;
    rep.timestamp = timestamp();
    for w in &rep.warnings {
        warn!("{w}");
    }
    if source.table {
        emit(&rep.to_table());
    } else {
        emit(&(rep.to_json()? + "\n"));
    }
    if let Some(out) = &common.out {
        let mut dir = OutDir::create(out)?;
        dir.write("report.json", rep.to_json()? + "\n")?;
        dir.write("report.txt", rep.to_table())?;
        dir.finish(
            match protocol {
                ProtocolArg::Fg => "eval-fg",
                ProtocolArg::Cat => "eval-cat",
            },
            &hash,
            &cfg.to_text(),
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn visualize(
    common: &Common,
    checkpoint: &Path,
    image: &Path,
    category: &str,
    data: Option<&Path>,
    manifest: Option<&Path>,
    support: Option<&Path>,
    layer: Option<i64>,
    use_inputs: bool,
) -> Result<()> {
    if !checkpoint.exists() {
        return Err(Error::data(checkpoint, "checkpoint not found"));
    }
    let (model_cfg, eval_cfg, model) = load_checkpoint(common, checkpoint)?;
    let prompts = model_cfg.parse::<usize>("num_prompts")?;
    let mut planned = vec!["similarity.csv".to_string(), "overlay.png".into(), "maps.json".into()];
    planned.extend((0..prompts).map(|i| format!("similarity_prompt{i}.csv")));
    let planned_ref: Vec<&str> = planned.iter().map(String::as_str).collect();
    if dry_run(common, &eval_cfg, &planned_ref) {
        return Ok(());
    }
    let out = require_out(common)?;
    let size = model.cfg().backbone.image_size;
    let support_imgs = if model.cfg().visual_prompt == PromptMode::CategorySpecific {
        let data = data.ok_or_else(|| Error::Usage("category-specific prompts need --data".into()))?;
        let cat = catalog(data, manifest, true)?;
        let set = match support {
            Some(p) => SupportFile::read(p)?
                .sets
                .remove(category)
                .ok_or_else(|| Error::Dataset(format!("support file has no entry for `{category}`")))?,
            None => select_support(&cat, category, eval_cfg.parse("support_seed")?)?,
        };
        Some((load_support(&cat, &set, size)?, format!("{}|{}|{}", set.sketch, set.photos[0], set.photos[1])))
    } else {
        None
    };
    let plan = model.category_plan(
        Some(category),
        support_imgs.as_ref().map(|(s, _)| s.as_slice()),
        support_imgs.as_ref().map_or("", |(_, k)| k.as_str()),
    )?;
    let img = Image::load(image, size)?;
    let layers = model.cfg().backbone.num_layers as i64;
    let chosen = layer.unwrap_or(eval_cfg.parse("vis_layer")?);
    let index = if chosen < 0 { layers + chosen } else { chosen };
    if index < 0 || index >= layers {
        return Err(Error::Usage(format!("layer {chosen} outside the {layers}-layer model")));
    }
    let maps = prompt_similarity(&model, &img, &plan, Some(index as usize), use_inputs)?;
    let hash = model_cfg.hash();
    let mut dir = OutDir::create(out)?;
    dir.write("similarity.csv", to_csv(&maps.mean))?;
    for (i, m) in maps.per_prompt.iter().enumerate() {
        dir.write(&format!("similarity_prompt{i}.csv"), to_csv(m))?;
    }
    overlay(&img, &maps.mean, 0.5).save(&dir.file("overlay.png")?)?;
    let rows = |m: &sketchprompt::graph::Mat| -> Vec<Vec<f64>> { m.rows().into_iter().map(|r| r.to_vec()).collect() };
    let meta = serde_json::json!({
        "category": category,
        "image": image.display().to_string(),
        "layer": maps.layer,
        "use_inputs": maps.use_inputs,
        "config_hash": hash,
        "mean": rows(&maps.mean),
        "per_prompt": maps.per_prompt.iter().map(rows).collect::<Vec<_>>(),
    });
    dir.write("maps.json", serde_json::to_string_pretty(&meta)? + "\n")?;
    dir.finish("visualize", &hash, &model_cfg.to_text())?;
    Ok(())
}

fn oracle_check(
    common: &Common,
    embeddings: Option<&[PathBuf]>,
    split: Option<&Path>,
    protocol: ProtocolArg,
    random: Option<usize>,
    force: bool,
) -> Result<()> {
    let cfg = common.resolve()?;
    if dry_run(common, &cfg, &["oracle.json", "manifest.json"]) {
        return Ok(());
    }
    let summary = match (embeddings, random) {
        (None, Some(n)) => {
            let mismatches = random_agreement(n, cfg.parse("seed")?)?;
            serde_json::json!({
                "mode": "random",
                "trials": n,
                "agree": mismatches.is_empty(),
                "mismatches": mismatches,
            })
        }
        (Some(paths), None) => {
            let split = split.ok_or_else(|| Error::Usage("--embeddings needs --split".into()))?;
            let categories = pick(&Split::read(split)?, Which::Unseen);
            let (sets, hash) = read_pair(paths, force)?;
            let fast = report(&sets, &categories, &cfg, protocol, MetricEngine::Fast, common, &hash)?;
            let slow = report(&sets, &categories, &cfg, protocol, MetricEngine::Oracle, common, &hash)?;
            serde_json::json!({
                "mode": "embeddings",
                "config_hash": hash,
                "agree": fast == slow,
                "fast": fast.aggregate,
                "oracle": slow.aggregate,
            })
        }
        _ => return Err(Error::Usage("give either --embeddings QUERIES GALLERY or --random N".into())),
    };
    let text = serde_json::to_string_pretty(&summary)?;
    emit(&format!("{text}\n"));
    if let Some(out) = &common.out {
        let mut dir = OutDir::create(out)?;
        dir.write("oracle.json", text + "\n")?;
        dir.finish("oracle-check", &cfg.hash(), &cfg.to_text())?;
    }
    if summary["agree"] != serde_json::Value::Bool(true) {
        return Err(Error::Numeric("fast metrics disagree with the oracle".into()));
    }
    Ok(())
}

fn param_audit(common: &Common, mode: Option<&str>, ls: Option<usize>) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(m) = mode {
        cfg.set("scaling", m)?;
    }
    if let Some(l) = ls {
        cfg.set("side_dim", &l.to_string())?;
    }
    if dry_run(common, &cfg, &["<stdout> parameter table"]) {
        return Ok(());
    }
    let arch = Architecture::new(&cfg.model()?)?;
    let rows = arch.audit();
    let mut text = format!("{:<18} {:>12} {:>12} {:>6}\n", "component", "params", "trainable", "added");
    for r in &rows {
        text += &format!(
            "{:<18} {:>12} {:>12} {:>6}\n",
            r.component.label(),
            r.params,
            r.trainable,
            if r.component.added() { "yes" } else { "no" }
        );
    }
    let added: usize = rows.iter().filter(|r| r.component.added()).map(|r| r.params).sum();
    let trainable: usize = rows.iter().map(|r| r.trainable).sum();
    text += &format!("{:<18} {:>12} {:>12}\n", "total_added", added, "");
    text += &format!("{:<18} {:>12} {:>12}\n", "total_trainable", "", trainable);
    emit(&text);
    if let Some(out) = &common.out {
        let mut dir = OutDir::create(out)?;
        dir.write("audit.txt", &text)?;
        dir.finish("param-audit", &cfg.hash(), &cfg.to_text())?;
    }
    Ok(())
}

fn synth_data(common: &Common, categories: usize, instances: usize, sketches: usize, size: usize) -> Result<()> {
    let cfg = common.resolve()?;
    if dry_run(common, &cfg, &["photo/<category>/i<k>.png", "sketch/<category>/i<k>-<v>.png", "manifest.json"]) {
        return Ok(());
    }
    let out = require_out(common)?;
    let spec = SynthSpec {
        categories,
        instances,
        sketches,
        size,
        seed: cfg.parse("seed")?,
    };
    let mut dir = OutDir::create(out)?;
    for p in generate(out, &spec)? {
        let rel = p.strip_prefix(out).unwrap_or(&p).to_string_lossy().into_owned();
        dir.file(&rel)?;
    }
    dir.finish("synth-data", &cfg.hash(), &cfg.to_text())?;
    Ok(())
}
