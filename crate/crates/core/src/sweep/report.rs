use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::SweepRow;
use crate::error::{Error, Result};

/// Per-start statistics across seeds (sample standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartStats {
    pub s: usize,
    pub n: usize,
    pub forgetting_mean: f64,
    pub forgetting_std: f64,
    pub acc_sum_mean: f64,
    pub acc_sum_std: f64,
    pub acc_new_mean: f64,
    pub exploded: usize,
}

/// One-sided paired sign test of `forg(s*) < forg(extreme)` across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub extreme: usize,
    pub wins: usize,
    /// Pairs that are not ties.
    pub n: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UShapeReport {
    pub per_start: Vec<StartStats>,
    /// Interior start with the lowest mean forgetting.
    pub interior_min_s: usize,
    /// `min(mean(s_min), mean(s_max)) − mean(interior_min_s)`.
    pub gap: f64,
    pub sign_test_low: SignTest,
    pub sign_test_high: SignTest,
    pub detected: bool,
    /// Start with the largest mean accuracy sum.
    pub best_acc_sum_s: usize,
    pub best_acc_sum_interior: bool,
    /// `max − min` over starts of the mean new-task accuracy.
    pub acc_new_spread: f64,
}

pub const SIGNIFICANCE: f64 = 0.05;

/// `P(Binomial(n, 1/2) ≥ wins)`.
pub fn binomial_tail(n: usize, wins: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    // log-space binomial coefficients keep large n finite
    let ln_choose = |k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
    };
    (wins..=n)
        .map(|k| (ln_choose(k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sign_test(by_seed: &BTreeMap<usize, BTreeMap<u64, f64>>, best: usize, extreme: usize) -> SignTest {
    let (mut wins, mut n) = (0, 0);
    for (seed, &fb) in &by_seed[&best] {
        if let Some(&fe) = by_seed[&extreme].get(seed) {
            if fb != fe {
                n += 1;
                if fb < fe {
                    wins += 1;
                }
            }
        }
    }
    SignTest {
        extreme,
        wins,
        n,
        p_value: binomial_tail(n, wins),
    }
}

pub fn ushape_report(rows: &[SweepRow]) -> Result<UShapeReport> {
    let mut by_seed: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows {
        by_seed.entry(r.s).or_default().insert(r.seed, r.forgetting);
    }
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    if by_seed.len() < 3 || seeds.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 starts and 2 seeds, got {} and {}",
            by_seed.len(),
            seeds.len()
        )));
    }
    let per_start: Vec<StartStats> = by_seed
        .keys()
        .map(|&s| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.s == s).collect();
            let f: Vec<f64> = cell.iter().map(|r| r.forgetting).collect();
            let a: Vec<f64> = cell.iter().map(|r| r.acc_sum).collect();
            let n: Vec<f64> = cell.iter().map(|r| r.acc_new).collect();
            let (forgetting_mean, forgetting_std) = mean_std(&f);
            let (acc_sum_mean, acc_sum_std) = mean_std(&a);
            StartStats {
                s,
                n: cell.len(),
                forgetting_mean,
                forgetting_std,
                acc_sum_mean,
                acc_sum_std,
                acc_new_mean: mean_std(&n).0,
                exploded: cell.iter().filter(|r| r.exploded).count(),
            }
        })
        .collect();

    let (first, last) = (&per_start[0], &per_start[per_start.len() - 1]);
    let interior = &per_start[1..per_start.len() - 1];
    let best = interior
        .iter()
        .fold(&interior[0], |b, st| if st.forgetting_mean < b.forgetting_mean { st } else { b });
    let gap = first.forgetting_mean.min(last.forgetting_mean) - best.forgetting_mean;
    let low = sign_test(&by_seed, best.s, first.s);
    let high = sign_test(&by_seed, best.s, last.s);
    let detected = gap > 0.0 && low.p_value <= SIGNIFICANCE && high.p_value <= SIGNIFICANCE;

    let best_sum = per_start
        .iter()
        .fold(&per_start[0], |b, st| if st.acc_sum_mean > b.acc_sum_mean { st } else { b });
    let acc_new: Vec<f64> = per_start.iter().map(|st| st.acc_new_mean).collect();
    let spread = acc_new.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - acc_new.iter().copied().fold(f64::INFINITY, f64::min);

    Ok(UShapeReport {
        interior_min_s: best.s,
        gap,
        sign_test_low: low,
        sign_test_high: high,
        detected,
        best_acc_sum_s: best_sum.s,
        best_acc_sum_interior: best_sum.s != first.s && best_sum.s != last.s,
        acc_new_spread: spread,
        per_start,
    })
}
