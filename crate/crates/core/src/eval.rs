//! Scoring: segmentation AMI, per-iteration denoising cost, classification
//! error.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::data::{DatasetBundle, DatasetKind};
use crate::error::{Error, Result};
use crate::model::Tagger;
use crate::rng;
use crate::tag::EvalNoise;

/// `argmax_k m[b, k, j]` per element, ties toward the smallest `k`.
pub fn segmentation_from_masks(m: &Tensor) -> Result<Vec<Vec<usize>>> {
    let d = m.dims();
    if d.len() != 3 {
        return Err(Error::shape(format!("masks must be [B, K, N], got {d:?}")));
    }
    let (b, k, n) = (d[0], d[1], d[2]);
    Ok((0..b)
        .map(|bi| {
            (0..n)
                .map(|j| {
                    let mut best = 0;
                    for kk in 1..k {
                        if m.data()[(bi * k + kk) * n + j] > m.data()[(bi * k + best) * n + j] {
                            best = kk;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect())
}

/// Dense relabeling in order of first appearance.
fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Adjusted mutual information with max-normalization and the
/// hypergeometric expected-MI model. Elements flagged in `ignore` are dropped
/// first. When the denominator vanishes the score is 1 for partitions equal
/// up to relabeling and 0 otherwise.
pub fn ami(truth: &[usize], pred: &[usize], ignore: Option<&[bool]>) -> Result<f64> {
    if truth.len() != pred.len() || ignore.is_some_and(|m| m.len() != truth.len()) {
        return Err(Error::contract(format!(
            "AMI inputs differ in length: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    let keep = |j: &usize| ignore.is_none_or(|m| !m[*j]);
    let u: Vec<usize> = (0..truth.len()).filter(keep).map(|j| truth[j]).collect();
    let v: Vec<usize> = (0..pred.len()).filter(keep).map(|j| pred[j]).collect();
    let (u, r) = dense(&u);
    let (v, c) = dense(&v);
    let n = u.len();
    if u == v {
        return Ok(1.0);
    }
    let mut table = vec![0usize; r * c];
    let (mut a, mut b) = (vec![0usize; r], vec![0usize; c]);
    for (&i, &j) in u.iter().zip(&v) {
        table[i * c + j] += 1;
        a[i] += 1;
        b[j] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for i in 0..r {
        for j in 0..c {
            let nij = table[i * c + j];
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / nf * (nf * nij / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    let emi = expected_mutual_information(&a, &b, n);
    let denom = entropy(&a, nf).max(entropy(&b, nf)) - emi;
    if denom.abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

/// `E[MI]` under random permutation with fixed marginals `a`, `b`.
pub fn expected_mutual_information(a: &[usize], b: &[usize], n: usize) -> f64 {
    let lf: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            let fixed = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj] - lf[n];
            for nij in lo..=hi {
                let term = nij as f64 / nf * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                let log_p = fixed - lf[nij] - lf[ai - nij] - lf[bj - nij] - lf[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Classification error. Each example is scored on its `k` highest classes
/// (ties toward lower indices) as the fraction of its true classes missed.
pub fn top_k_error(pred: &Tensor, truth: &[Vec<u8>], k: usize) -> Result<f64> {
    let d = pred.dims();
    if d.len() != 2 || d[0] != truth.len() {
        return Err(Error::contract(format!(
            "{} truth sets for predictions {d:?}",
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    let classes = d[1];
    let mut missed = 0.0;
    for (row, set) in pred.data().chunks(classes).zip(truth) {
        if set.is_empty() || set.len() > 2 {
            return Err(Error::Data("each truth set needs one or two classes".into()));
        }
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        let top = &order[..k.min(classes)];
        let hits = set.iter().filter(|&&c| top.contains(&(c as usize))).count();
        missed += 1.0 - hits as f64 / set.len() as f64;
    }
    Ok(missed / truth.len() as f64)
}

/// Top-2 scoring as used for two-digit images.
pub fn top2_error(pred: &Tensor, truth: &[Vec<u8>]) -> Result<f64> {
    top_k_error(pred, truth, 2)
}

/// Error under the protocol for `kind`: top-1 for single digits, top-2 for
/// two digits.
pub fn classification_error(kind: DatasetKind, pred: &Tensor, truth: &[Vec<u8>]) -> Result<f64> {
    match kind {
        DatasetKind::TexturedMnist2 => top2_error(pred, truth),
        _ => top_k_error(pred, truth, 1),
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub groups: usize,
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    pub eval_noise: EvalNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub groups: usize,
    /// Mean `C_i` per iteration with corrupted network inputs, scored
    /// against the clean input.
    pub denoising_costs: Vec<f64>,
    /// Mean `C_i` per iteration with clean network inputs.
    pub clean_costs: Vec<f64>,
    /// Mean AMI over examples with at least one scored element.
    pub ami: Option<f64>,
    pub ami_examples: usize,
    pub classification_error: Option<f64>,
    /// Largest simplex violation of any emitted mask.
    pub simplex_violation: f64,
}

impl EvalReport {
    /// Tab-separated report: one row per iteration, then one per metric.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iteration\tdenoising_cost\tclean_cost\n");
        for (i, (d, c)) in self.denoising_costs.iter().zip(&self.clean_costs).enumerate() {
            let _ = writeln!(s, "{}\t{d:.9}\t{c:.9}", i + 1);
        }
        s.push_str("metric\tvalue\n");
        let _ = writeln!(s, "groups\t{}", self.groups);
        match self.ami {
            Some(a) => {
                let _ = writeln!(s, "ami\t{a:.9}");
                let _ = writeln!(s, "ami_examples\t{}", self.ami_examples);
            }
            None => s.push_str("ami\tskipped (no ground-truth labels)\n"),
        }
        if let Some(e) = self.classification_error {
            let _ = writeln!(s, "classification_error\t{e:.9}");
        }
        let _ = writeln!(s, "simplex_violation\t{:.3e}", self.simplex_violation);
        s
    }
}

/// Per-iteration costs, segmentation AMI and (with a class head)
/// classification error over `data`.
///
/// AMI, classification and `clean_costs` come from a pass on clean inputs.
/// `denoising_costs` come from a second pass on inputs corrupted as in
/// training, sharing the same initial state.
pub fn evaluate(model: &Tagger, data: &DatasetBundle, opts: &EvalOptions) -> Result<EvalReport> {
    if data.input_size() != model.config.input_size {
        return Err(Error::shape(format!(
            "dataset has {} elements per example, model expects {}",
            data.input_size(),
            model.config.input_size
        )));
    }
    if opts.batch == 0 {
        return Err(Error::Config("evaluation batch must be positive".into()));
    }
    let has_truth = data.labels.iter().any(|&l| l != 0);
    let with_classes = model.params.class_head.is_some() && data.classes.is_some();
    let mut run = model.eval_options(opts.groups, opts.iterations);
    run.eval_noise = opts.eval_noise;

    let mut cost_sums = vec![0.0; opts.iterations];
    let mut denoise_sums = vec![0.0; opts.iterations];
    let (mut ami_sum, mut ami_examples) = (0.0, 0);
    let mut predictions = Vec::new();
    let mut worst = 0.0f64;
    let starts: Vec<usize> = (0..data.len()).step_by(opts.batch).collect();
    for (bi, &start) in starts.iter().enumerate() {
        let idx: Vec<usize> = (start..(start + opts.batch).min(data.len())).collect();
        let x = data.batch(&idx);
        let mut r = rng::derived(opts.seed, bi as u64);
        let init = model.init_state(&x, opts.groups, &mut r)?;
        let x_tilde = crate::tag::corrupt(&x, &model.config.corruption, &mut r)?;
        let traj = model.run_from(&x, &x, &init, &run)?;
        let noisy = model.run_from(&x, &x_tilde, &init, &run)?;
        for (sum, c) in cost_sums.iter_mut().zip(&traj.costs) {
            *sum += c * idx.len() as f64;
        }
        for (sum, c) in denoise_sums.iter_mut().zip(&noisy.costs) {
            *sum += c * idx.len() as f64;
        }
        for s in &traj.states {
            worst = worst.max(crate::tag::simplex_violation(&s.m));
        }
        if has_truth {
            let seg = segmentation_from_masks(&traj.last().m)?;
            for (&i, pred) in idx.iter().zip(&seg) {
                let truth: Vec<usize> = data.example_labels(i).iter().map(|&l| l as usize).collect();
                let ignore = data.example_ignore(i);
                if ignore.iter().all(|&v| v) {
                    continue;
                }
                ami_sum += ami(&truth, pred, Some(ignore))?;
                ami_examples += 1;
            }
        }
        if with_classes {
            if let Some(p) = &traj.class_probs {
                predictions.extend_from_slice(p.data());
            }
        }
    }
    let mean = |sums: Vec<f64>| -> Vec<f64> { sums.iter().map(|s| s / data.len() as f64).collect() };
    let (clean_costs, denoising_costs) = (mean(cost_sums), mean(denoise_sums));
    if clean_costs.iter().chain(&denoising_costs).any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("evaluation cost".into()));
    }
    let classification_error = if with_classes {
        let classes = model.config.ladder.classes;
        let pred = Tensor::new(&[data.len(), classes], predictions)?;
        Some(classification_error(data.kind, &pred, data.classes.as_ref().unwrap())?)
    } else {
        None
    };
    Ok(EvalReport {
        groups: opts.groups,
        denoising_costs,
        clean_costs,
        ami: (ami_examples > 0).then(|| ami_sum / ami_examples as f64),
        ami_examples,
        classification_error,
        simplex_violation: worst,
    })
}
