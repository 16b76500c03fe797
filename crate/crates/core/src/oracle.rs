//! Brute-force reference metrics. Nothing here calls into the fast path; the
//! only shared rule is the tie order (distance, then gallery index).

use crate::error::{Error, Result};
use crate::graph::Mat;

/// Full ordering of one row by insertion sort on `(distance, index)`.
fn sorted_row(d: &Mat, i: usize) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::with_capacity(d.ncols());
    for j in 0..d.ncols() {
        let mut pos = order.len();
        while pos > 0 {
            let prev = order[pos - 1];
            let before = d[[i, prev]] < d[[i, j]] || (d[[i, prev]] == d[[i, j]] && prev < j);
            if before {
                break;
            }
            pos -= 1;
        }
        order.insert(pos, j);
    }
    order
}

fn validate(d: &Mat) -> Result<()> {
    if d.nrows() == 0 {
        return Err(Error::Input("no queries".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite distance".into()));
    }
    Ok(())
}

/// Acc@k for each `k`, by locating the truth in the sorted row.
pub fn fine_grained(d: &Mat, truth: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    validate(d)?;
    if truth.len() != d.nrows() || truth.iter().any(|t| *t >= d.ncols()) {
        return Err(Error::Input("truth does not fit the distance matrix".into()));
    }
    let positions: Vec<usize> = (0..d.nrows())
        .map(|i| {
            sorted_row(d, i)
                .iter()
                .position(|&j| j == truth[i])
                .expect("truth is a gallery index")
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let mut hit = 0usize;
            for p in &positions {
                if *p < k {
                    hit += 1;
                }
            }
            hit as f64 / positions.len() as f64
        })
        .collect())
}

/// Precision over the first `n` ranked items, recounted from scratch.
fn precision_upto(rel: &[bool], n: usize) -> f64 {
    let mut c = 0usize;
    for r in rel.iter().take(n) {
        if *r {
            c += 1;
        }
    }
    c as f64 / n as f64
}

fn ap(rel: &[bool], cutoff: Option<usize>) -> Result<f64> {
    let total = rel.iter().filter(|r| **r).count();
    let denom = match cutoff {
        None => total,
        Some(n) => {
            if total < n {
                total
            } else {
                n
            }
        }
    };
    if denom == 0 {
        return match cutoff {
            None => Err(Error::Input("no relevant item in ranking".into())),
            Some(_) => Ok(0.0),
        };
    }
    let mut sum = 0.0;
    for pos in 1..=rel.len() {
        if cutoff.is_some_and(|n| pos > n) {
            break;
        }
        if rel[pos - 1] {
            sum += precision_upto(rel, pos);
        }
    }
    Ok(sum / denom as f64)
}

/// Mean and per-query `[mAP@all, mAP@200, Prec@100, Prec@200]`.
pub fn category(d: &Mat, query_labels: &[usize], gallery_labels: &[usize]) -> Result<([f64; 4], Vec<[f64; 4]>)> {
    validate(d)?;
    if query_labels.len() != d.nrows() || gallery_labels.len() != d.ncols() {
        return Err(Error::Input("labels do not fit the distance matrix".into()));
    }
    let mut per = Vec::new();
    for (i, &label) in query_labels.iter().enumerate() {
        let rel: Vec<bool> = sorted_row(d, i)
            .into_iter()
            .map(|j| gallery_labels[j] == label)
            .collect();
        per.push([
            ap(&rel, None)?,
            ap(&rel, Some(200))?,
            precision_upto(&rel, 100),
            precision_upto(&rel, 200),
        ]);
    }
    let mut mean = [0.0; 4];
    for m in 0..4 {
        let mut s = 0.0;
        for p in &per {
            s += p[m];
        }
        mean[m] = s / per.len() as f64;
    }
    Ok((mean, per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_query_hand_examples() {
        let d = array![[0.1, 0.2, 0.3]];
        let (m, _) = category(&d, &[1], &[1, 0, 1]).unwrap();
        assert!((m[0] - 0.833_333_333_3).abs() < 1e-9);
        let d = array![[0.3, 0.2]];
        let (m, _) = category(&d, &[1], &[1, 0]).unwrap();
        assert_eq!(m[0], 0.5);
        assert_eq!(fine_grained(&array![[0.2, 0.1]], &[0], &[1, 5]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn ties_keep_index_order() {
        let d = array![[1.0, 0.0, 1.0, 0.0]];
        assert_eq!(sorted_row(&d, 0), vec![1, 3, 0, 2]);
    }
}
