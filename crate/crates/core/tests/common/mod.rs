//! Brute-force reference implementations shared by the integration tests.
//! Written from the metric definitions, independently of the library code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

pub fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// 1/rank of the first relevant id, 0 when none is ranked.
pub fn reciprocal_rank(ranked: &[String], relevant: &BTreeSet<String>) -> f64 {
    for k in 1..=ranked.len() {
        if relevant.contains(&ranked[k - 1]) {
            return 1.0 / k as f64;
        }
    }
    0.0
}

/// Mean of precision@k over the ranks k that hold a relevant id, divided
/// by the number of relevant ids.
pub fn average_precision(ranked: &[String], relevant: &BTreeSet<String>) -> f64 {
    let mut total = 0.0;
    for k in 1..=ranked.len() {
        if relevant.contains(&ranked[k - 1]) {
            let hits = ranked[..k].iter().filter(|id| relevant.contains(*id)).count();
            total += hits as f64 / k as f64;
        }
    }
    total / relevant.len() as f64
}

/// Multiset intersection size via two sorted cursors.
pub fn overlap(a: &[String], b: &[String]) -> usize {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort();
    b.sort();
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn harmonic(matched: usize, p_len: usize, r_len: usize) -> f64 {
    if matched == 0 {
        return 0.0;
    }
    let p = matched as f64 / p_len as f64;
    let r = matched as f64 / r_len as f64;
    2.0 * p * r / (p + r)
}

pub fn token_f1(pred: &str, reference: &str) -> f64 {
    let (p, r) = (tokens(pred), tokens(reference));
    harmonic(overlap(&p, &r), p.len(), r.len())
}

pub fn bleu1(pred: &str, reference: &str) -> f64 {
    let (p, r) = (tokens(pred), tokens(reference));
    if p.is_empty() {
        return 0.0;
    }
    let c = p.len() as f64;
    let bp = if c > r.len() as f64 { 1.0 } else { (1.0 - r.len() as f64 / c).exp() };
    overlap(&p, &r) as f64 / c * bp
}

/// Longest common subsequence by trying every subset of `a`, longest first.
/// Exponential; keep `a` short.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16);
    let is_subseq = |s: &[&String]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let pick: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if is_subseq(&pick) {
            best = n;
        }
    }
    best
}

pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let (p, r) = (tokens(pred), tokens(reference));
    harmonic(lcs_brute(&p, &r), p.len(), r.len())
}

/// Per-class F1 from explicit confusion counts, averaged over the classes
/// seen in either list.
pub fn macro_f1(gold: &[usize], pred: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = gold.iter().chain(pred).copied().collect();
    let mut sum = 0.0;
    for &c in &classes {
        let pairs = gold.iter().zip(pred);
        let tp = pairs.clone().filter(|(g, p)| **g == c && **p == c).count() as f64;
        let fp = pairs.clone().filter(|(g, p)| **g != c && **p == c).count() as f64;
        let fn_ = pairs.filter(|(g, p)| **g == c && **p != c).count() as f64;
        let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let rec = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        sum += if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    }
    sum / classes.len() as f64
}

/// Indices of the `k` best rows by f64 dot product; ties to the lower index.
pub fn top_k_dot(rows: &[Vec<f32>], q: &[f32], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum(), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Mean softmax cross-entropy in f64: `rows[i]` scored against `targets[i]`.
pub fn cross_entropy(rows: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in rows.iter().zip(targets) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / rows.len() as f64
}

/// MNRL written out directly: scores `q_i·p_j`, target `i`.
pub fn mnrl(q: &[Vec<f64>], p: &[Vec<f64>], scale: f64) -> f64 {
    let rows: Vec<Vec<f64>> = q
        .iter()
        .map(|qi| p.iter().map(|pj| scale * qi.iter().zip(pj).map(|(a, b)| a * b).sum::<f64>()).collect())
        .collect();
    cross_entropy(&rows, &(0..q.len()).collect::<Vec<_>>())
}

/// Pearson statistic of observed counts against expected probabilities.
pub fn chi_square(observed: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

/// Upper 1% point of the chi-square distribution with 2 degrees of
/// freedom: the survival function is `exp(-x/2)`, so `x = -2 ln 0.01`.
pub fn chi2_df2_crit_01() -> f64 {
    -2.0 * 0.01f64.ln()
}

pub fn counts<T: Ord + Clone>(items: &[T]) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for i in items {
        *m.entry(i.clone()).or_insert(0) += 1;
    }
    m
}

pub mod doubles;
