//! Distance fusion, ranking metrics and the two evaluation protocols.
//!
//! Ties in distance always resolve by ascending gallery index.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Distance;
use crate::data::Modality;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::Mat;
use crate::oracle;

/// Component and fused distances between queries (rows) and gallery items
/// (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub global: Mat,
    pub locals: Vec<Mat>,
    pub fused: Mat,
}

fn unit_rows(vectors: &[&[f32]]) -> Result<Mat> {
    let dims = vectors.first().map_or(0, |v| v.len());
    let mut m = Mat::zeros((vectors.len(), dims));
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dims {
            return Err(Error::Shape(format!("feature widths {dims} and {}", v.len())));
        }
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(format!("feature vector {i} has norm {norm}")));
        }
        for (j, x) in v.iter().enumerate() {
            m[[i, j]] = *x as f64 / norm;
        }
    }
    Ok(m)
}

/// Pairwise distances between two lists of vectors.
pub fn pairwise(queries: &[&[f32]], gallery: &[&[f32]], metric: Distance) -> Result<Mat> {
    let q = unit_rows(queries)?;
    let g = unit_rows(gallery)?;
    if q.ncols() != g.ncols() && !queries.is_empty() && !gallery.is_empty() {
        return Err(Error::Shape(format!(
            "query width {} vs gallery width {}",
            q.ncols(),
            g.ncols()
        )));
    }
    let sim = q.dot(&g.t());
    Ok(match metric {
        Distance::Cosine => sim.mapv(|s| 1.0 - s),
        Distance::Euclidean => sim.mapv(|s| (2.0 - 2.0 * s).max(0.0).sqrt()),
    })
}

/// `d_g + Σ_k d_l^k`; with no local features the fused matrix is `d_g`.
pub fn fuse_distances(
    queries: &[EmbeddingSet],
    gallery: &[EmbeddingSet],
    metric: Distance,
) -> Result<DistanceMatrix> {
    let nl = queries.first().or(gallery.first()).map_or(0, |s| s.locals.len());
    if queries.iter().chain(gallery).any(|s| s.locals.len() != nl) {
        return Err(Error::Shape("embedding sets disagree on local feature count".into()));
    }
    fn column(sets: &[EmbeddingSet], k: Option<usize>) -> Vec<&[f32]> {
        sets.iter()
            .map(|s| match k {
                None => s.global.as_slice(),
                Some(k) => s.locals[k].as_slice(),
            })
            .collect()
    }
    let global = pairwise(&column(queries, None), &column(gallery, None), metric)?;
    let mut locals = Vec::with_capacity(nl);
    for k in 0..nl {
        locals.push(pairwise(&column(queries, Some(k)), &column(gallery, Some(k)), metric)?);
    }
    let mut fused = global.clone();
    for l in &locals {
        fused += l;
    }
    Ok(DistanceMatrix {
        global,
        locals,
        fused,
    })
}

fn check_finite(d: &Mat) -> Result<()> {
    if d.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite distance".into()))
    }
}

/// Gallery indices of one row in ascending distance, ties by index.
pub fn rank_row(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal));
    idx
}

/// Zero-based rank of `target` in a row under the tie rule.
fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v < t || (v == t && j < target))
        .count()
}

/// Fraction of queries whose true gallery item is among the `k` nearest.
pub fn acc_at_k(d: &Mat, truth: &[usize], k: usize) -> Result<f64> {
    Ok(fine_grained_counts(d, truth, &[k])?[0])
}

fn fine_grained_counts(d: &Mat, truth: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    if truth.len() != d.nrows() {
        return Err(Error::Input(format!("{} truths for {} queries", truth.len(), d.nrows())));
    }
    if let Some(t) = truth.iter().find(|t| **t >= d.ncols()) {
        return Err(Error::Input(format!("truth index {t} outside gallery of {}", d.ncols())));
    }
    check_finite(d)?;
    if d.nrows() == 0 {
        return Err(Error::Input("no queries".into()));
    }
    let d = d.as_standard_layout();
    let ranks: Vec<usize> = d
        .rows()
        .into_iter()
        .zip(truth)
        .map(|(row, &t)| rank_of(row.as_slice().expect("standard layout"), t))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect())
}

/// Average precision of a ranked relevance list. With a cutoff `N` the
/// denominator is `min(total relevant, N)`; a list with no relevant item
/// scores 0 under a cutoff and is an error without one.
pub fn average_precision(relevance: &[bool], cutoff: Option<usize>) -> Result<f64> {
    if relevance.is_empty() {
        return Err(Error::Input("empty ranking".into()));
    }
    let total = relevance.iter().filter(|r| **r).count();
    let limit = cutoff.unwrap_or(relevance.len()).min(relevance.len());
    let denom = match cutoff {
        Some(n) => total.min(n),
        None if total == 0 => return Err(Error::Input("no relevant item in ranking".into())),
        None => total,
    };
    if denom == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in relevance[..limit].iter().enumerate().filter(|(_, r)| **r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    Ok(sum / denom as f64)
}

/// Relevant items among the top `n`, divided by `n`.
pub fn precision_at(relevance: &[bool], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    relevance.iter().take(n).filter(|r| **r).count() as f64 / n as f64
}

pub const FG_KS: [usize; 3] = [1, 5, 10];
pub const FG_NAMES: [&str; 3] = ["acc@1", "acc@5", "acc@10"];
pub const CAT_NAMES: [&str; 4] = ["map@all", "map@200", "prec@100", "prec@200"];

/// Per-query category-level metrics in `CAT_NAMES` order.
pub fn category_query_metrics(row: &[f64], relevant: impl Fn(usize) -> bool) -> Result<[f64; 4]> {
    let order = rank_row(row);
    let rel: Vec<bool> = order.iter().map(|&j| relevant(j)).collect();
    Ok([
        average_precision(&rel, None)?,
        average_precision(&rel, Some(200))?,
        precision_at(&rel, 100),
        precision_at(&rel, 200),
    ])
}

/// Mean category-level metrics over queries, `CAT_NAMES` order, plus the
/// per-query values.
pub fn category_metrics(
    d: &Mat,
    query_labels: &[usize],
    gallery_labels: &[usize],
    exec: Exec,
) -> Result<([f64; 4], Vec<[f64; 4]>)> {
    if query_labels.len() != d.nrows() || gallery_labels.len() != d.ncols() {
        return Err(Error::Input("label counts do not match the distance matrix".into()));
    }
    check_finite(d)?;
    if d.nrows() == 0 {
        return Err(Error::Input("no queries".into()));
    }
    let d = d.as_standard_layout();
    let per: Vec<[f64; 4]> = exec
        .map_range(d.nrows(), |i| {
            let row = d.row(i);
            category_query_metrics(row.as_slice().expect("standard layout"), |j| {
                gallery_labels[j] == query_labels[i]
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok((mean4(&per), per))
}

fn mean4(rows: &[[f64; 4]]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.map(|v| v / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    FineGrained,
    CategoryLevel,
}

/// Which implementation computes the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricEngine {
    Fast,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub queries: usize,
    pub gallery: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub per_category: Vec<CategoryRow>,
    pub aggregate: BTreeMap<String, f64>,
    pub config_hash: String,
    /// Set by the caller; left empty for reproducible reports.
    pub timestamp: Option<String>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn metric_names(&self) -> &'static [&'static str] {
        match self.protocol {
            Protocol::FineGrained => &FG_NAMES,
            Protocol::CategoryLevel => &CAT_NAMES,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned-column table: one row per category and a final mean row.
    pub fn to_table(&self) -> String {
        let names = self.metric_names();
        let width = self
            .per_category
            .iter()
            .map(|r| r.category.len())
            .chain(["category".len(), "mean".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}  {:>7}  {:>7}", "category", "queries", "gallery");
        for n in names {
            let _ = write!(out, "  {n:>9}");
        }
        out.push('\n');
        let mut line = |label: &str, q: String, g: String, m: &BTreeMap<String, f64>| {
            let _ = write!(out, "{label:<width$}  {q:>7}  {g:>7}");
            for n in names {
                let _ = write!(out, "  {:>9.4}", m.get(*n).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        };
        for r in &self.per_category {
            line(&r.category, r.queries.to_string(), r.gallery.to_string(), &r.metrics);
        }
        line("mean", String::new(), String::new(), &self.aggregate);
        out
    }
}

fn named(names: &[&str], values: &[f64]) -> BTreeMap<String, f64> {
    names.iter().map(|n| n.to_string()).zip(values.iter().copied()).collect()
}

/// Instance-level retrieval inside each category: queries are the category's
/// sketches, the gallery its photos. Aggregates are unweighted category
/// means.
pub fn eval_fine_grained(
    sets: &[EmbeddingSet],
    categories: &[String],
    metric: Distance,
    engine: MetricEngine,
    config_hash: &str,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for cat in categories {
        let of = |m: Modality| -> Vec<EmbeddingSet> {
            sets.iter()
                .filter(|s| s.category == *cat && s.modality == m)
                .cloned()
                .collect()
        };
        let gallery = of(Modality::Photo);
        if gallery.is_empty() {
            warnings.push(format!("`{cat}` has no photos; excluded"));
            continue;
        }
        let mut queries = Vec::new();
        let mut truth = Vec::new();
        for q in of(Modality::Sketch) {
            match gallery.iter().position(|g| g.instance == q.instance) {
                Some(t) => {
                    truth.push(t);
                    queries.push(q);
                }
                None => warnings.push(format!("sketch `{}` has no photo; skipped", q.id)),
            }
        }
        if queries.is_empty() {
            warnings.push(format!("`{cat}` has no matched sketches; excluded"));
            continue;
        }
        let d = fuse_distances(&queries, &gallery, metric)?.fused;
        let values = match engine {
            MetricEngine::Fast => fine_grained_counts(&d, &truth, &FG_KS)?,
            MetricEngine::Oracle => oracle::fine_grained(&d, &truth, &FG_KS)?,
        };
        rows.push(CategoryRow {
            category: cat.clone(),
            queries: queries.len(),
            gallery: gallery.len(),
            metrics: named(&FG_NAMES, &values),
        });
    }
    if rows.is_empty() {
        return Err(Error::Dataset("no category could be evaluated".into()));
    }
    let aggregate = FG_NAMES
        .iter()
        .map(|n| {
            let sum: f64 = rows.iter().map(|r| r.metrics[*n]).sum();
            (n.to_string(), sum / rows.len() as f64)
        })
        .collect();
    Ok(MetricsReport {
        protocol: Protocol::FineGrained,
        per_category: rows,
        aggregate,
        config_hash: config_hash.to_string(),
        timestamp: None,
        warnings,
    })
}

/// Retrieval over all categories at once: queries are every sketch, the
/// gallery every photo, relevance is category equality. Aggregates are
/// means over queries; rows are per-category query means.
pub fn eval_category_level(
    sets: &[EmbeddingSet],
    categories: &[String],
    metric: Distance,
    engine: MetricEngine,
    exec: Exec,
    config_hash: &str,
) -> Result<MetricsReport> {
    let mut warnings = Vec::new();
    let label = |c: &str| categories.iter().position(|x| x == c);
    let gallery: Vec<EmbeddingSet> = sets
        .iter()
        .filter(|s| s.modality == Modality::Photo && label(&s.category).is_some())
        .cloned()
        .collect();
    let mut active = Vec::new();
    for cat in categories {
        if gallery.iter().any(|g| g.category == *cat) {
            active.push(cat.clone());
        } else {
            warnings.push(format!("`{cat}` has no photos; excluded"));
        }
    }
    let queries: Vec<EmbeddingSet> = sets
        .iter()
        .filter(|s| s.modality == Modality::Sketch && active.contains(&s.category))
        .cloned()
        .collect();
    if queries.is_empty() {
        return Err(Error::Dataset("no category could be evaluated".into()));
    }
    let ql: Vec<usize> = queries.iter().map(|q| label(&q.category).expect("active")).collect();
    let gl: Vec<usize> = gallery.iter().map(|g| label(&g.category).expect("filtered")).collect();
    let d = fuse_distances(&queries, &gallery, metric)?.fused;
    let (mean, per) = match engine {
        MetricEngine::Fast => category_metrics(&d, &ql, &gl, exec)?,
        MetricEngine::Oracle => oracle::category(&d, &ql, &gl)?,
    };
    let rows = active
        .iter()
        .map(|cat| {
            let l = label(cat).expect("active");
            let mine: Vec<[f64; 4]> = per
                .iter()
                .zip(&ql)
                .filter(|(_, q)| **q == l)
                .map(|(p, _)| *p)
                .collect();
            CategoryRow {
                category: cat.clone(),
                queries: mine.len(),
                gallery: gl.iter().filter(|g| **g == l).count(),
                metrics: if mine.is_empty() {
                    BTreeMap::new()
                } else {
                    named(&CAT_NAMES, &mean4(&mine))
                },
            }
        })
        .collect();
    Ok(MetricsReport {
        protocol: Protocol::CategoryLevel,
        per_category: rows,
        aggregate: named(&CAT_NAMES, &mean),
        config_hash: config_hash.to_string(),
        timestamp: None,
        warnings,
    })
}

/// Random distance matrix for oracle comparisons: `rows × cols`, either
/// continuous or drawn from five levels so ties are common.
pub fn random_instance(rng: &mut impl Rng, tie_heavy: bool) -> (Mat, Vec<usize>, Vec<usize>, Vec<usize>) {
    let rows = rng.random_range(1..=50);
    let cols = rng.random_range(2..=200);
    let d = Mat::from_shape_fn((rows, cols), |_| {
        if tie_heavy {
            rng.random_range(0..5) as f64 * 0.25
        } else {
            rng.random::<f64>() * 2.0
        }
    });
    let truth = (0..rows).map(|_| rng.random_range(0..cols)).collect();
    let classes = rng.random_range(1..=6usize);
    let gallery: Vec<usize> = (0..cols).map(|_| rng.random_range(0..classes)).collect();
    let queries = (0..rows).map(|_| gallery[rng.random_range(0..cols)]).collect();
    (d, truth, queries, gallery)
}

/// Runs `trials` random instances through both metric paths and returns a
/// description of every disagreement.
pub fn random_agreement(trials: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = Vec::new();
    for t in 0..trials {
        let (d, truth, ql, gl) = random_instance(&mut rng, t % 2 == 1);
        let fast = fine_grained_counts(&d, &truth, &FG_KS)?;
        let slow = oracle::fine_grained(&d, &truth, &FG_KS)?;
        if fast != slow {
            mismatches.push(format!("trial {t}: acc {fast:?} vs oracle {slow:?}"));
        }
        let (fast, fast_per) = category_metrics(&d, &ql, &gl, Exec::Sequential)?;
        let (slow, slow_per) = oracle::category(&d, &ql, &gl)?;
        if fast != slow || fast_per != slow_per {
            mismatches.push(format!("trial {t}: category {fast:?} vs oracle {slow:?}"));
        }
    }
    Ok(mismatches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn es(cat: &str, inst: &str, m: Modality, g: Vec<f32>, locals: Vec<Vec<f32>>) -> EmbeddingSet {
        EmbeddingSet {
            id: format!("{m}/{cat}/{inst}"),
            category: cat.into(),
            instance: inst.into(),
            modality: m,
            global: g,
            locals,
        }
    }

    #[test]
    fn fast_path_matches_oracle_on_random_instances() {
        assert_eq!(random_agreement(60, 7).unwrap(), Vec::<String>::new());
    }

    #[test]
    fn acc_hand_examples() {
        let d = array![[0.1, 0.2], [0.3, 0.05]];
        assert_eq!(acc_at_k(&d, &[0, 1], 1).unwrap(), 1.0);
        let d = array![[0.2, 0.1]];
        assert_eq!(acc_at_k(&d, &[0], 1).unwrap(), 0.0);
        assert_eq!(acc_at_k(&d, &[0], 5).unwrap(), 1.0);
        let d = array![[0.5, 0.5, 0.5]];
        assert_eq!(acc_at_k(&d, &[0], 1).unwrap(), 1.0);
        assert_eq!(acc_at_k(&d, &[2], 2).unwrap(), 0.0);
        assert!(matches!(acc_at_k(&d, &[3], 1), Err(Error::Input(_))));
    }

    #[test]
    fn ap_hand_examples() {
        let ap = average_precision(&[true, false, true], None).unwrap();
        assert!((ap - 0.833_333_333_3).abs() < 1e-9);
        assert_eq!(average_precision(&[true, true, true], None).unwrap(), 1.0);
        assert_eq!(precision_at(&[false, true], 1), 0.0);
        assert_eq!(precision_at(&[false, true], 2), 0.5);
        assert!(average_precision(&[], None).is_err());
        assert!(average_precision(&[false], None).is_err());
        assert_eq!(average_precision(&[false], Some(200)).unwrap(), 0.0);
        // Denominator min(R, N): two relevant, cutoff 1, first hit at rank 1.
        assert_eq!(average_precision(&[true, false, true], Some(1)).unwrap(), 1.0);
    }

    #[test]
    fn fusion_examples() {
        let v = vec![1.0f32, 0.0];
        let q = es("a", "0", Modality::Sketch, v.clone(), vec![v.clone(); 4]);
        let g = es("a", "0", Modality::Photo, v.clone(), vec![v.clone(); 4]);
        let d = fuse_distances(std::slice::from_ref(&q), std::slice::from_ref(&g), Distance::Cosine).unwrap();
        assert_eq!(d.fused[[0, 0]], 0.0);
        assert_eq!(d.locals.len(), 4);
        let q0 = es("a", "0", Modality::Sketch, v.clone(), vec![]);
        let g0 = es("a", "0", Modality::Photo, vec![0.0, 1.0], vec![]);
        let d = fuse_distances(&[q0], &[g0], Distance::Cosine).unwrap();
        assert_eq!(d.fused, d.global);
        assert!((d.fused[[0, 0]] - 1.0).abs() < 1e-12);
        let bad = es("a", "0", Modality::Photo, vec![1.0, 0.0, 0.0], vec![vec![1.0, 0.0, 0.0]; 4]);
        assert!(matches!(fuse_distances(&[q], &[bad], Distance::Cosine), Err(Error::Shape(_))));
    }

    #[test]
    fn perfect_category_embeddings() {
        let one_hot = |c: usize| (0..3).map(|i| if i == c { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
        let cats: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut sets = Vec::new();
        for (c, name) in cats.iter().enumerate() {
            for i in 0..3 {
                sets.push(es(name, &i.to_string(), Modality::Sketch, one_hot(c), vec![]));
                sets.push(es(name, &i.to_string(), Modality::Photo, one_hot(c), vec![]));
            }
        }
        let r = eval_category_level(&sets, &cats, Distance::Cosine, MetricEngine::Fast, Exec::Sequential, "h").unwrap();
        assert_eq!(r.aggregate["map@all"], 1.0);
        assert_eq!(r.aggregate["map@200"], 1.0);
        assert!((r.aggregate["prec@100"] - 0.03).abs() < 1e-12);
        let fg = eval_fine_grained(&sets, &cats, Distance::Cosine, MetricEngine::Fast, "h").unwrap();
        // Identical photos within a category: index tie-break puts photo 0 first.
        assert!((fg.aggregate["acc@1"] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(fg.aggregate["acc@5"], 1.0);
        assert!(r.to_table().lines().count() == 5);
    }

    #[test]
    fn missing_photos_are_excluded_with_warning() {
        let cats = vec!["a".to_string(), "b".to_string()];
        let sets = vec![
            es("a", "0", Modality::Sketch, vec![1.0, 0.0], vec![]),
            es("a", "0", Modality::Photo, vec![1.0, 0.0], vec![]),
            es("b", "0", Modality::Sketch, vec![1.0, 0.0], vec![]),
        ];
        let r = eval_fine_grained(&sets, &cats, Distance::Cosine, MetricEngine::Fast, "").unwrap();
        assert_eq!(r.per_category.len(), 1);
        assert_eq!(r.warnings.len(), 1);
    }
}
