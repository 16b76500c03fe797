//! Acceptance criteria, one pass/fail line each. Runs as a plain binary so
//! the summary is always printed under `cargo test`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchprompt::config::RunConfig;
use sketchprompt::data::{load_support, scan_dataset, select_support, Catalog, Modality, Split, SupportFile};
use sketchprompt::embedding::Embedder;
use sketchprompt::exec::Exec;
use sketchprompt::graph::{Graph, Mat};
use sketchprompt::image::Image;
use sketchprompt::model::{tier_of, Architecture, Component, Model};
use sketchprompt::params::Tier;
use sketchprompt::patch_matching::{partition_grid, Corner, PatchPartition};
use sketchprompt::retrieval::{average_precision, eval_fine_grained, random_agreement, MetricEngine, MetricsReport};
use sketchprompt::synth::{generate, SynthSpec};
use sketchprompt::train::{pair_objective, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

struct Data {
    _dir: tempfile::TempDir,
    catalog: Catalog,
}

fn synthetic() -> Data {
    let dir = tempfile::tempdir().expect("tempdir");
    generate(dir.path(), &SynthSpec::default()).expect("synthetic data");
    let catalog = scan_dataset(dir.path(), None, true).expect("scan");
    Data { _dir: dir, catalog }
}

fn toy(pairs: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig::toy();
    for (k, v) in pairs {
        c.set(k, v).expect("known key");
    }
    c
}

fn build(cfg: &RunConfig) -> Model {
    Model::build(&cfg.model().expect("model config")).expect("toy model")
}

fn support(data: &Data, category: &str) -> Vec<Image> {
    let set = select_support(&data.catalog, category, 0).expect("support");
    load_support(&data.catalog, &set, 56).expect("support images").to_vec()
}

fn images(data: &Data, n: usize) -> Vec<Image> {
    (0..n).map(|i| data.catalog.load(i * 3, 56).expect("image")).collect()
}

fn features(m: &Model, category: &str, sup: &[Image], imgs: &[Image]) -> Result<Vec<Vec<u64>>, String> {
    let plan = m.category_plan(Some(category), Some(sup), "s").map_err(e)?;
    imgs.iter()
        .map(|img| {
            let f = m.embed(img, &plan).map_err(e)?;
            Ok(f.global.iter().chain(f.locals.iter().flatten()).map(|v| v.to_bits()).collect())
        })
        .collect()
}

fn zero(m: &mut Model, name: &str) {
    m.store_mut().get_mut(name).unwrap_or_else(|| panic!("{name}")).fill(0.0);
}

fn fill_normal(m: &mut Model, name: &str, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = m.store_mut().get_mut(name).unwrap_or_else(|| panic!("{name}"));
    t.mapv_inplace(|_| (rng.random::<f64>() - 0.5) * 2.0 * std);
}

fn identity_at_zero(data: &Data) -> Outcome {
    let cat = data.catalog.categories()[0].clone();
    let sup = support(data, &cat);
    let imgs = images(data, 3);
    let base = features(&build(&toy(&[("scaling", "none")])), &cat, &sup, &imgs)?;

    let mut direct = build(&toy(&[("scaling", "direct")]));
    let live = features(&direct, &cat, &sup, &imgs)?;
    check(live != base, "direct scaling with a live MLP should change the output")?;
    zero(&mut direct, "text_mlp.fc2.weight");
    zero(&mut direct, "text_mlp.fc2.bias");
    check(features(&direct, &cat, &sup, &imgs)? == base, "direct mode with zero MLP output differs")?;

    let mut side = build(&toy(&[("scaling", "sideway")]));
    let fc2: Vec<String> = side.store().names().filter(|n| n.starts_with("sideway.") && n.ends_with("fc2.weight")).map(String::from).collect();
    for (i, n) in fc2.iter().enumerate() {
        fill_normal(&mut side, n, 0.05, i as u64);
    }
    check(features(&side, &cat, &sup, &imgs)? != base, "nonzero FC2 should change the output")?;
    for n in &fc2 {
        zero(&mut side, n);
    }
    check(features(&side, &cat, &sup, &imgs)? == base, "side-way mode with FC2 = 0 differs")?;
    Ok(format!("bit-exact over {} images, {} side-way sites", imgs.len(), fc2.len()))
}

fn audit_count(pairs: &[(&str, &str)], component: Component) -> usize {
    let mut cfg = RunConfig::default();
    for (k, v) in pairs {
        cfg.set(k, v).expect("known key");
    }
    let arch = Architecture::new(&cfg.model().expect("full config")).expect("architecture");
    arch.audit().iter().filter(|r| r.component == component).map(|r| r.params).sum()
}

fn parameter_audit() -> Outcome {
    let totals = [(16usize, 101.42), (64, 103.19), (256, 110.28)];
    let v_prompt = 100.83;
    let mut notes = Vec::new();
    for (ls, total) in totals {
        let l = ls.to_string();
        let cfg = [("scaling", "sideway"), ("side_dim", l.as_str())];
        let side = audit_count(&cfg, Component::SideWay);
        check(side == 2 * 24 * 768 * ls, format!("side-way at L_S={ls}: {side}"))?;
        let t_prompt = side + audit_count(&cfg, Component::TextMlp);
        let delta = total - v_prompt;
        let err = (t_prompt as f64 / 1e6 - delta).abs();
        check(err <= 0.01 + 1e-9, format!("L_S={ls}: {t_prompt} added vs reference delta {delta:.2}M"))?;
        notes.push(format!("{side}"));
    }
    let direct = audit_count(&[("scaling", "direct")], Component::TextMlp);
    check(((direct as f64 / 1e6) - (100.85 - 100.83)).abs() <= 0.01 + 1e-9, format!("direct MLP {direct}"))?;
    let bank = audit_count(&[], Component::TokenBank);
    check(bank == 27_648, format!("token bank {bank}"))?;
    check(((bank as f64 / 1e6) - (100.83 - 100.80)).abs() <= 0.01 + 1e-9, "token bank vs 0.03M")?;
    Ok(format!("side-way {} ; token bank {bank}", notes.join(" / ")))
}

fn frozen_enforcement(data: &Data) -> Outcome {
    let cfg = toy(&[("max_steps", "50")]);
    let model = build(&cfg);
    let before: BTreeMap<String, Mat> = model.store().iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
    let frozen = model.frozen_hash();
    let mut tr = Trainer::new(model, &data.catalog, data.catalog.categories(), &cfg).map_err(e)?;
    tr.run(|_| Ok(()), |_, _| Ok(())).map_err(e)?;
    check(tr.step() == 50, format!("ran {} steps", tr.step()))?;
    let model = tr.into_model();
    check(model.frozen_hash() == frozen, "frozen parameters changed")?;
    let mut moved = BTreeMap::<&str, usize>::new();
    for name in model.trainable() {
        let delta = (model.store().get(name).unwrap() - &before[name.as_str()]).mapv(f64::abs).sum();
        check(delta > 0.0, format!("{name} never updated"))?;
        let tier = match tier_of(name) {
            Tier::Norm => "norm",
            Tier::Module => "module",
            Tier::Frozen => return Err(format!("{name} trainable but frozen-tier")),
        };
        *moved.entry(tier).or_default() += 1;
    }
    check(moved.get("norm").copied().unwrap_or(0) > 0, "no norm-tier parameters")?;
    check(moved.get("module").copied().unwrap_or(0) > 0, "no module-tier parameters")?;
    Ok(format!("frozen hash unchanged; {} norm and {} module tensors moved", moved["norm"], moved["module"]))
}

fn oracle_equivalence() -> Outcome {
    let mismatches = random_agreement(1000, 2024).map_err(e)?;
    check(mismatches.is_empty(), format!("{} mismatches, first: {}", mismatches.len(), mismatches.first().cloned().unwrap_or_default()))?;
    let ap = average_precision(&[true, false, true], None).map_err(e)?;
    check((ap - 0.8333333333333334).abs() < 1e-9 && (ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9, format!("AP([1,0,1]) = {ap}"))?;
    let ap_all_hits = average_precision(&[true, true], None).map_err(e)?;
    check(ap_all_hits == 1.0, "AP([1,1])")?;
    Ok(format!("1000 random matrices agree exactly; AP([1,0,1]) = {ap:.4}"))
}

fn gradient_checks(data: &Data) -> Outcome {
    let cfg = toy(&[]);
    let tc = cfg.train().map_err(e)?;
    let mut model = build(&cfg);
    let fc2: Vec<String> = model.store().names().filter(|n| n.starts_with("sideway.") && n.ends_with("fc2.weight")).map(String::from).collect();
    for (i, n) in fc2.iter().enumerate() {
        fill_normal(&mut model, n, 0.05, 100 + i as u64);
    }
    let cat = data.catalog.categories()[0].clone();
    let sup = support(data, &cat);
    let pairs: Vec<(Image, Image)> = data
        .catalog
        .pairs(&cat)
        .into_iter()
        .step_by(2)
        .take(4)
        .map(|(s, p)| (data.catalog.load(s, 56).unwrap(), data.catalog.load(p, 56).unwrap()))
        .collect();
    let groups: Vec<usize> = (0..pairs.len()).collect();
    let loss_at = |m: &Model, train: bool| -> Result<(f64, Option<BTreeMap<String, Mat>>), String> {
        let mut g: Graph = m.graph(train);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = pair_objective(m, &mut g, Some(&cat), Some(&sup), &pairs, &groups, &tc, &mut rng)
            .map_err(e)?
            .ok_or("batch skipped")?;
        let v = g.scalar(l.total);
        let grads = train.then(|| g.backward(l.total).into_params());
        Ok((v, grads))
    };
    let (base, grads) = loss_at(&model, true)?;
    let grads = grads.expect("train graph");
    check(base > 0.0, "loss is zero, nothing to check")?;
    let targets = [
        "text_mlp.fc1.weight",
        "text_mlp.fc2.weight",
        "sideway.layers.1.attn.fc1.weight",
        "sideway.layers.0.mlp.fc2.weight",
        "prompt.generator.mlp.fc1.weight",
        "prompt.generator.attn.q.weight",
        "prompt.bank.1",
    ];
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for name in targets {
        let grad = grads.get(name).ok_or(format!("no gradient for {name}"))?;
        let (r, c) = grad.dim();
        let largest = grad
            .indexed_iter()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(ij, _)| ij)
            .unwrap();
        let mut picks = vec![largest];
        while picks.len() < 4 {
            let ij = (rng.random_range(0..r), rng.random_range(0..c));
            if grad[ij].abs() > 1e-6 {
                picks.push(ij);
            }
        }
        for ij in picks {
            let mut probe = |delta: f64| -> Result<f64, String> {
                model.store_mut().get_mut(name).unwrap()[ij] += delta;
                let v = loss_at(&model, false).map(|x| x.0);
                model.store_mut().get_mut(name).unwrap()[ij] -= delta;
                v
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            let analytic = grad[ij];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            worst = worst.max(rel);
            checked += 1;
            check(rel < 1e-4, format!("{name}{ij:?}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"))?;
        }
    }
    Ok(format!("{checked} entries over {} tensors, worst relative error {worst:.2e}", targets.len()))
}

struct ToyRun {
    checkpoint: Vec<u8>,
    report: MetricsReport,
}

fn toy_run(data: &Data, seed: u64) -> Result<ToyRun, String> {
    let cfg = toy(&[("max_steps", "200"), ("seed", &seed.to_string())]);
    let cats = data.catalog.categories();
    let mut tr = Trainer::new(build(&cfg), &data.catalog, cats.clone(), &cfg).map_err(e)?;
    tr.run(|_| Ok(()), |_, _| Ok(())).map_err(e)?;
    let checkpoint = tr.checkpoint().map_err(e)?.to_bytes().map_err(e)?;
    let model = tr.into_model();
    let sup = SupportFile::select(&data.catalog, &cats, seed).map_err(e)?;
    let (sets, _) = Embedder::new(&model, &data.catalog, Exec::default())
        .fine_grained(&cats, Some(&sup), false)
        .map_err(e)?;
    let metric = cfg.train().map_err(e)?.triplet.distance;
    let report = eval_fine_grained(&sets, &cats, metric, MetricEngine::Fast, &cfg.hash()).map_err(e)?;
    Ok(ToyRun { checkpoint, report })
}

fn toy_overfit(run: &ToyRun) -> Outcome {
    let acc = run.report.aggregate["acc@1"];
    check(acc >= 0.95, format!("train-split Acc@1 {acc:.4} < 0.95"))?;
    Ok(format!("train-split Acc@1 {acc:.4} after 200 steps"))
}

fn mode_sensitivity(data: &Data) -> Outcome {
    let cats = data.catalog.categories();
    let mut means = Vec::new();
    for mode in ["category_specific", "common"] {
        let mut total = 0.0;
        for seed in 0..5u64 {
            let split = Split::random(&cats, 1, seed).map_err(e)?;
            let cfg = toy(&[("max_steps", "200"), ("seed", &seed.to_string()), ("visual_prompt", mode)]);
            let mut tr = Trainer::new(build(&cfg), &data.catalog, split.seen.clone(), &cfg).map_err(e)?;
            tr.run(|_| Ok(()), |_, _| Ok(())).map_err(e)?;
            let model = tr.into_model();
            let sup = SupportFile::select(&data.catalog, &split.unseen, seed).map_err(e)?;
            let (sets, _) = Embedder::new(&model, &data.catalog, Exec::default())
                .fine_grained(&split.unseen, Some(&sup), false)
                .map_err(e)?;
            let metric = cfg.train().map_err(e)?.triplet.distance;
            let rep = eval_fine_grained(&sets, &split.unseen, metric, MetricEngine::Fast, "").map_err(e)?;
            total += rep.aggregate["acc@1"];
        }
        means.push(total / 5.0);
    }
    let (specific, common) = (means[0], means[1]);
    check(specific >= common, format!("category_specific {specific:.4} < common {common:.4}"))?;
    Ok(format!("held-out Acc@1 category_specific {specific:.4} vs common {common:.4}"))
}

fn patch_partition() -> Outcome {
    let p = PatchPartition::new();
    let mut union = std::collections::BTreeSet::new();
    for corner in Corner::ALL {
        let (r0, c0) = match corner {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, 2),
            Corner::BottomLeft => (2, 0),
            Corner::BottomRight => (2, 2),
        };
        let mut expected = Vec::new();
        for r in 0..7 {
            for c in 0..7 {
                if (r0..r0 + 5).contains(&r) && (c0..c0 + 5).contains(&c) {
                    expected.push(r * 7 + c);
                }
            }
        }
        check(p.get(corner) == expected.as_slice(), format!("{corner:?} window {:?}", p.get(corner)))?;
        check(expected.len() == 25 && expected.contains(&24), format!("{corner:?} size or centre"))?;
        union.extend(expected);
    }
    check(union.len() == 49, format!("union covers {} cells", union.len()))?;

    // The graph op gathers exactly those rows behind the class token.
    let store = Default::default();
    let mut g = Graph::new(&store);
    let grid = g.constant(Mat::from_shape_fn((49, 2), |(i, j)| (i * 10 + j) as f64));
    let cls = g.constant(Mat::from_elem((1, 2), -1.0));
    let seqs = partition_grid(&mut g, grid, cls).map_err(e)?;
    for (corner, v) in Corner::ALL.into_iter().zip(seqs) {
        let m = g.value(v);
        check(m.dim() == (26, 2) && m[[0, 0]] == -1.0, "class token first")?;
        for (k, &idx) in p.get(corner).iter().enumerate() {
            check(m[[k + 1, 0]] == (idx * 10) as f64, format!("{corner:?} row {k}"))?;
        }
    }
    Ok("four 25-cell windows, centre shared, union 49".into())
}

fn determinism(a: &ToyRun, b: &ToyRun) -> Outcome {
    check(a.checkpoint == b.checkpoint, "checkpoints differ")?;
    check(a.report == b.report, "reports differ")?;
    let (ja, jb) = (a.report.to_json().map_err(e)?, b.report.to_json().map_err(e)?);
    check(ja == jb, "report JSON differs")?;
    Ok(format!("{} checkpoint bytes and report identical", a.checkpoint.len()))
}

fn main() {
    let data = synthetic();
    assert_eq!(data.catalog.categories().len(), 3);
    assert_eq!(data.catalog.indices(&data.catalog.categories()[0], Modality::Photo).len(), 6);

    let mut failures = 0;
    let mut report = |n: usize, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}; {secs:.1}s)"),
            Err(why) => {
                failures += 1;
                println!("criterion {n} {name}: FAIL ({why}; {secs:.1}s)");
            }
        }
    };

    let t = Instant::now();
    report(1, "identity at zero", t, identity_at_zero(&data));
    let t = Instant::now();
    report(2, "parameter audit", t, parameter_audit());
    let t = Instant::now();
    report(3, "frozen parameters", t, frozen_enforcement(&data));
    let t = Instant::now();
    report(4, "metrics oracle", t, oracle_equivalence());
    let t = Instant::now();
    report(5, "gradient checks", t, gradient_checks(&data));

    let t = Instant::now();
    let first = toy_run(&data, 0);
    let overfit = first.as_ref().map_err(Clone::clone).and_then(toy_overfit);
    report(6, "toy overfitting", t, overfit);

    let t = Instant::now();
    report(7, "mode sensitivity", t, mode_sensitivity(&data));
    let t = Instant::now();
    report(8, "patch partition", t, patch_partition());

    let t = Instant::now();
    let second = toy_run(&data, 0);
    let same = match (&first, &second) {
        (Ok(a), Ok(b)) => determinism(a, b),
        (Err(x), _) | (_, Err(x)) => Err(x.clone()),
    };
    report(9, "determinism", t, same);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
