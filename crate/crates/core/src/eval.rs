//! Evaluation statistics: Mann–Whitney AUC, bootstrap confidence intervals,
//! the fast DeLong paired-AUC test, prediction correlation, and report
//! formatting for policy behaviour and compute cost.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{all_combos, combo_index, ComboId};
use crate::policy::Trajectory;
use crate::rng::substream;

/// Mann–Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
/// with ties counting one half. Errors if either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval(
            "AUC undefined: only one class present".into(),
        ));
    }
    let mut wins = 0.0;
    for (sp, yp) in scores.iter().zip(labels) {
        if *yp != 1 {
            continue;
        }
        for (sn, yn) in scores.iter().zip(labels) {
            if *yn != 0 {
                continue;
            }
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Percentile bootstrap CI for the AUC. Degenerate resamples (a single class)
/// are redrawn. Deterministic for a fixed seed.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    iters: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    auc(scores, labels)?; // surfaces length/class errors up front
    let n = scores.len();
    let mut rng = substream(seed, "bootstrap");
    let mut stats = Vec::with_capacity(iters);
    for _ in 0..iters {
        loop {
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            if let Ok(a) = auc(&s, &y) {
                stats.push(a);
                break;
            }
        }
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((percentile(&stats, 2.5), percentile(&stats, 97.5)))
}

/// Linear-interpolation percentile on a pre-sorted slice.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Midranks (mean rank of a tie group, 1-based).
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Per-model DeLong structural components: V10 over positives and V01 over
/// negatives, each with mean equal to the AUC.
fn delong_components(scores: &[f64], labels: &[u8]) -> (Vec<f64>, Vec<f64>, f64) {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(s, _)| *s)
        .collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    let rank_all = midranks(&all);
    let rank_pos = midranks(&pos);
    let rank_neg = midranks(&neg);
    let a = (rank_all[..pos.len()].iter().sum::<f64>() - m * (m + 1.0) / 2.0) / (m * n);
    let v10: Vec<f64> = (0..pos.len())
        .map(|i| (rank_all[i] - rank_pos[i]) / n)
        .collect();
    let v01: Vec<f64> = (0..neg.len())
        .map(|j| 1.0 - (rank_all[pos.len() + j] - rank_neg[j]) / m)
        .collect();
    (v10, v01, a)
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1.0)
}

/// Complementary error function, |error| < 1.2e-7 (Numerical Recipes 6.2).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Result of the paired DeLong test comparing two models on the same samples.
#[derive(Debug, Clone, Copy)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Fast DeLong test for the difference of two correlated AUCs, with a
/// two-sided normal p-value. Zero estimated variance (e.g. identical score
/// vectors) yields z = 0, p = 1.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() || scores_a.len() != labels.len() {
        return Err(Error::Eval("paired score vectors differ in length".into()));
    }
    auc(scores_a, labels)?;
    let (v10_a, v01_a, auc_a) = delong_components(scores_a, labels);
    let (v10_b, v01_b, auc_b) = delong_components(scores_b, labels);
    let m = v10_a.len() as f64;
    let n = v01_a.len() as f64;
    let s10 = sample_cov(&v10_a, &v10_a) + sample_cov(&v10_b, &v10_b)
        - 2.0 * sample_cov(&v10_a, &v10_b);
    let s01 = sample_cov(&v01_a, &v01_a) + sample_cov(&v01_b, &v01_b)
        - 2.0 * sample_cov(&v01_a, &v01_b);
    let variance = s10 / m + s01 / n;
    let diff = auc_a - auc_b;
    let (z, p_value) = if variance <= 0.0 || variance < 1e-300 {
        (0.0, 1.0)
    } else {
        let z = diff / variance.sqrt();
        (z, 2.0 * normal_cdf(-z.abs()))
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        variance,
        z,
        p_value,
    })
}

/// Pearson correlation between two prediction vectors. Returns 0 with a
/// warning when either vector has zero variance.
pub fn prediction_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Eval("correlation inputs must be equal-length and non-empty".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|x| (x - mb) * (x - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        log::warn!("prediction correlation undefined (zero variance); reporting 0");
        return Ok(0.0);
    }
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Aggregate statistics over a set of decoded trajectories: how often each
/// terminal combination is used, and how often each modality is skipped.
#[derive(Debug, Clone)]
pub struct PolicyReport {
    pub combo_counts: Vec<(ComboId, usize)>,
    pub skip_rates: [f64; 3],
    pub mean_steps: f64,
    pub total: usize,
}

pub fn policy_report(trajectories: &[Trajectory]) -> PolicyReport {
    let combos = all_combos();
    let mut counts = vec![0usize; combos.len()];
    let mut skipped = [0usize; 3];
    let mut steps = 0usize;
    for t in trajectories {
        counts[combo_index(t.combo)] += 1;
        for i in 0..3 {
            if !t.combo.subset.contains(crate::modality::Modality::from_index(i)) {
                skipped[i] += 1;
            }
        }
        steps += t.steps_taken();
    }
    let total = trajectories.len().max(1);
    PolicyReport {
        combo_counts: combos.into_iter().zip(counts).collect(),
        skip_rates: [
            skipped[0] as f64 / total as f64,
            skipped[1] as f64 / total as f64,
            skipped[2] as f64 / total as f64,
        ],
        mean_steps: steps as f64 / total as f64,
        total: trajectories.len(),
    }
}

impl PolicyReport {
    /// Number of distinct combinations actually used.
    pub fn support(&self) -> usize {
        self.combo_counts.iter().filter(|(_, c)| *c > 0).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("combo,count,fraction\n");
        for (combo, count) in &self.combo_counts {
            out.push_str(&format!(
                "{},{},{:.6}\n",
                combo.label(),
                count,
                *count as f64 / self.total.max(1) as f64
            ));
        }
        out.push_str(&format!(
            "skip_rate_a,{:.6},\nskip_rate_b,{:.6},\nskip_rate_c,{:.6},\nmean_steps,{:.6},\n",
            self.skip_rates[0], self.skip_rates[1], self.skip_rates[2], self.mean_steps
        ));
        out
    }
}

/// One evaluated model in a comparison table.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub name: String,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_mflops: f64,
}

pub fn eval_rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("model,auc,ci_low,ci_high,mean_mflops\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.name, r.auc, r.ci_low, r.ci_high, r.mean_mflops
        ));
    }
    out
}

/// Per-combination executed-compute histogram for a trajectory dump.
pub fn flops_report(trajectories: &[Trajectory]) -> BTreeMap<String, (usize, f64)> {
    use crate::models::adafuse_path_flops;
    let mut map: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for t in trajectories {
        let f = adafuse_path_flops(t.combo, t.steps_taken());
        let entry = map.entry(t.combo.label()).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 = crate::models::mflops(f);
    }
    map
}
