use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sketchprompt::config::{Distance, RunConfig, TripletConfig};
use sketchprompt::data::Modality;
use sketchprompt::embedding::{EmbeddingFile, EmbeddingSet};
use sketchprompt::graph::Mat;
use sketchprompt::model::{tier_of, Model};
use sketchprompt::params::Tier;
use sketchprompt::retrieval::{
    acc_at_k, average_precision, fuse_distances, pairwise, precision_at, rank_row,
};
use sketchprompt::train::{triplet_loss, Adam};
use sketchprompt::Error;

fn set(id: usize, global: Vec<f32>, locals: Vec<Vec<f32>>) -> EmbeddingSet {
    EmbeddingSet {
        id: format!("s{id}"),
        category: "c".into(),
        instance: format!("i{id}"),
        modality: Modality::Sketch,
        global,
        locals,
    }
}

fn vector(dims: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.1f32..2.0, dims)
}

proptest! {
    #[test]
    fn fused_is_global_plus_locals(
        q in prop::collection::vec((vector(6), prop::collection::vec(vector(4), 4)), 1..5),
        g in prop::collection::vec((vector(6), prop::collection::vec(vector(4), 4)), 1..5),
    ) {
        let qs: Vec<_> = q.into_iter().enumerate().map(|(i, (a, l))| set(i, a, l)).collect();
        let gs: Vec<_> = g.into_iter().enumerate().map(|(i, (a, l))| set(i, a, l)).collect();
        let d = fuse_distances(&qs, &gs, Distance::Cosine).unwrap();
        let mut sum = d.global.clone();
        for l in &d.locals {
            sum += l;
        }
        prop_assert_eq!(&d.fused, &sum);
        prop_assert_eq!(d.locals.len(), 4);
    }

    #[test]
    fn distances_ignore_power_of_two_scaling(
        q in prop::collection::vec(vector(5), 1..4),
        g in prop::collection::vec(vector(5), 1..4),
        k in -4i32..5,
        euclid in any::<bool>(),
    ) {
        let metric = if euclid { Distance::Euclidean } else { Distance::Cosine };
        let scale = 2f32.powi(2 * k);
        let qs: Vec<Vec<f32>> = q.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let a = pairwise(&q.iter().map(Vec::as_slice).collect::<Vec<_>>(), &g.iter().map(Vec::as_slice).collect::<Vec<_>>(), metric).unwrap();
        let b = pairwise(&qs.iter().map(Vec::as_slice).collect::<Vec<_>>(), &g.iter().map(Vec::as_slice).collect::<Vec<_>>(), metric).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn acc_at_k_is_monotone_and_bounded(
        rows in 1usize..8,
        cols in 2usize..30,
        seed in any::<u64>(),
        ties in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Mat::from_shape_simple_fn((rows, cols), || {
            let x: f64 = StandardNormal.sample(&mut rng);
            if ties { x.round() } else { x }
        });
        let truth: Vec<usize> = (0..rows).map(|i| (i * 7 + seed as usize) % cols).collect();
        let mut last = 0.0;
        for k in 1..=cols {
            let a = acc_at_k(&d, &truth, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(a >= last);
            last = a;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn ranking_is_a_stable_sort(row in prop::collection::vec(0u8..4, 1..40)) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let order = rank_row(&row);
        let mut seen = order.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..row.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(row[a] < row[b] || (row[a] == row[b] && a < b));
        }
    }

    #[test]
    fn precision_metrics_are_bounded(rel in prop::collection::vec(any::<bool>(), 1..300)) {
        let p = precision_at(&rel, 100);
        prop_assert!((0.0..=1.0).contains(&p));
        let ap200 = average_precision(&rel, Some(200)).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap200));
        match average_precision(&rel, None) {
            Ok(ap) => prop_assert!(ap > 0.0 && ap <= 1.0),
            Err(err) => {
                prop_assert!(rel.iter().all(|r| !r));
                prop_assert!(matches!(err, Error::Input(_)));
            }
        }
    }

    #[test]
    fn triplet_loss_is_non_negative(
        a in vector(4), p in vector(4), n in vector(4),
        margin in 0.0f64..1.0,
        euclid in any::<bool>(),
    ) {
        let c = TripletConfig {
            margin,
            distance: if euclid { Distance::Euclidean } else { Distance::Cosine },
            ..TripletConfig::default()
        };
        let f = |v: &[f32]| v.iter().map(|x| *x as f64).collect::<Vec<_>>();
        let l = triplet_loss(&f(&a), &f(&p), &f(&n), &c).unwrap();
        prop_assert!(l >= 0.0);
        // The anchor as its own positive needs only the margin.
        let self_pos = triplet_loss(&f(&a), &f(&a), &f(&n), &c).unwrap();
        prop_assert!(self_pos <= margin + 1e-12);
    }

    #[test]
    fn embedding_file_round_trips(
        sets in prop::collection::vec((vector(3), prop::collection::vec(vector(3), 2)), 0..6),
        hash in "[0-9a-f]{16}",
    ) {
        let file = EmbeddingFile {
            config_hash: hash,
            sets: sets.into_iter().enumerate().map(|(i, (a, l))| set(i, a, l)).collect(),
        };
        let back = EmbeddingFile::from_bytes(&file.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, file);
    }
}

#[test]
fn random_embeddings_score_chance_level() {
    let (m, queries, dims) = (10usize, 4000usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |n: usize| -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    };
    let gallery = draw(m);
    let q = draw(queries);
    let d = pairwise(
        &q.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        &gallery.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        Distance::Cosine,
    )
    .unwrap();
    let truth: Vec<usize> = (0..queries).map(|i| i % m).collect();
    let acc = acc_at_k(&d, &truth, 1).unwrap();
    let sigma = (0.1f64 * 0.9 / queries as f64).sqrt();
    assert!((acc - 1.0 / m as f64).abs() < 4.0 * sigma, "acc@1 {acc}");
    let acc5 = acc_at_k(&d, &truth, 5).unwrap();
    assert!((acc5 - 0.5).abs() < 4.0 * (0.25f64 / queries as f64).sqrt(), "acc@5 {acc5}");
}

fn toy_model() -> Model {
    Model::build(&RunConfig::toy().model().unwrap()).unwrap()
}

#[test]
fn first_adam_step_moves_by_the_tier_rate() {
    let mut model = toy_model();
    let schedule = RunConfig::toy().train().unwrap().schedule;
    let norm = "backbone.ln_post.weight";
    let module = "prompt.bank.0";
    let frozen = "backbone.layers.0.attn.q.weight";
    assert_eq!(tier_of(norm), Tier::Norm);
    assert_eq!(tier_of(module), Tier::Module);
    assert_eq!(tier_of(frozen), Tier::Frozen);
    let before: BTreeMap<&str, Mat> = [norm, module]
        .into_iter()
        .map(|n| (n, model.store().get(n).unwrap().clone()))
        .collect();
    let frozen_hash = model.frozen_hash();

    let mut grads = BTreeMap::new();
    for n in [norm, module] {
        let shape = model.store().get(n).unwrap().dim();
        grads.insert(n.to_string(), Mat::from_shape_fn(shape, |(i, j)| if (i + j) % 2 == 0 { 0.3 } else { -2.0 }));
    }
    let shape = model.store().get(frozen).unwrap().dim();
    grads.insert(frozen.to_string(), Mat::from_elem(shape, 1.0));
    let mut adam = Adam::new(schedule);
    adam.step(&mut model, &grads).unwrap();
    assert_eq!(adam.step, 1);
    for (n, lr) in [(norm, schedule.lr_norm), (module, schedule.lr_module)] {
        let after = model.store().get(n).unwrap();
        for ((ij, a), b) in after.indexed_iter().zip(before[n].iter()) {
            // m̂ = g and v̂ = g² after one step, so the move is lr·g/(|g| + eps).
            let g = grads[n][ij];
            let expected = lr * g / (g.abs() + schedule.eps);
            assert!((b - a - expected).abs() < 1e-15, "{n}{ij:?}");
        }
    }
    assert_eq!(model.frozen_hash(), frozen_hash);
}

#[test]
fn adam_rejects_unknown_parameters() {
    let mut model = toy_model();
    let mut adam = Adam::new(RunConfig::toy().train().unwrap().schedule);
    let grads = BTreeMap::from([("not.a.param".to_string(), Mat::zeros((1, 1)))]);
    assert!(matches!(adam.step(&mut model, &grads), Err(Error::Config(_))));
}

#[test]
fn config_precedence_and_unknown_keys() {
    let mut cfg = RunConfig::default();
    cfg.apply_str("margin = 0.3\n# comment\nseed=4").unwrap();
    assert_eq!(cfg.get("margin"), "0.3");
    cfg.set("margin", "0.2").unwrap();
    assert_eq!(cfg.train().unwrap().triplet.margin, 0.2);
    assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
    let a = RunConfig::default().hash();
    assert_ne!(a, cfg.hash());
    assert_eq!(a, RunConfig::default().hash());
}
