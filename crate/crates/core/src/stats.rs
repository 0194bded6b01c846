//! Non-parametric comparison framework.
//!
//! Tests run on entity-level aggregates only: each entity contributes one
//! value per side, never one value per template. Exact null distributions
//! are computed over doubled mid-ranks so that tied data stays in integer
//! arithmetic; above [`EXACT_MAX_N`] a tie- and continuity-corrected normal
//! approximation is used. All p-values are two-sided.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{AuditError, Result};
use crate::registry::EntityRegistry;
use crate::scoring::{BiasRecord, Scope};

/// Largest sample size (pairs for Wilcoxon, n1 + n2 for Mann–Whitney) that
/// uses the exact null distribution.
pub const EXACT_MAX_N: usize = 12;

pub const WILCOXON_MIN_N: usize = 5;
pub const MANN_WHITNEY_MIN_N: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Band {
    pub fn of(d: f64) -> Self {
        match d.abs() {
            x if x < 0.2 => Band::Negligible,
            x if x < 0.5 => Band::Small,
            x if x < 0.8 => Band::Medium,
            _ => Band::Large,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Paired,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub d: f64,
    pub band: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    /// Zero for paired designs.
    pub n2: usize,
    pub effect: Option<EffectSize>,
    pub method: Method,
}

/// Doubled mid-ranks (so ties stay integral) plus tie-group sizes.
pub fn doubled_ranks(values: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share rank ((i+1) + (j+1)) / 2
        let doubled = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

/// Two-sided normal tail with continuity correction.
fn normal_two_sided(statistic: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Counts of subset sums: `counts[s]` = number of subsets of `items` summing to `s`.
fn subset_sum_counts(items: &[u64]) -> Vec<u128> {
    let total: u64 = items.iter().sum();
    let mut counts = vec![0u128; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in items {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Counts of size-`k` subset sums: `counts[s]`.
fn sized_subset_sum_counts(items: &[u64], k: usize) -> Vec<u128> {
    let total: u64 = items.iter().sum();
    let width = total as usize + 1;
    let mut dp = vec![vec![0u128; width]; k + 1];
    dp[0][0] = 1;
    for &r in items {
        let r = r as usize;
        for size in (1..=k).rev() {
            let (lo, hi) = dp.split_at_mut(size);
            let prev = &lo[size - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                if prev[s - r] != 0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    dp.swap_remove(k)
}

/// Exact two-sided p for the signed-rank statistic.
///
/// `positive_doubled` is the doubled W+ and `ranks` the doubled ranks of all
/// non-zero differences. Returns (extreme count, total count).
pub fn wilcoxon_exact_counts(ranks: &[u64], positive_doubled: u64) -> (u128, u128) {
    let total: u64 = ranks.iter().sum();
    let counts = subset_sum_counts(ranks);
    let observed = (2 * positive_doubled as i128 - total as i128).abs();
    let extreme = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i128 - total as i128).abs() >= observed)
        .map(|(_, c)| *c)
        .sum();
    (extreme, 1u128 << ranks.len())
}

pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(AuditError::LengthMismatch(x.len(), y.len()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    wilcoxon_differences(&diffs)
}

/// Signed-rank test on paired differences; zero differences are dropped.
pub fn wilcoxon_differences(diffs: &[f64]) -> Result<TestResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(AuditError::Invalid("non-finite difference".into()));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(AuditError::DegeneratePairs);
    }
    let n = nonzero.len();
    if n < WILCOXON_MIN_N {
        return Err(AuditError::InsufficientData { needed: WILCOXON_MIN_N, got: n });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = doubled_ranks(&abs);
    let pos_doubled: u64 = ranks.iter().zip(&nonzero).filter(|(_, d)| **d > 0.0).map(|(r, _)| *r).sum();
    let total_doubled: u64 = ranks.iter().sum();
    let w_plus = pos_doubled as f64 / 2.0;
    let w_minus = (total_doubled - pos_doubled) as f64 / 2.0;

    let (p_value, method) = if n <= EXACT_MAX_N {
        let (extreme, total) = wilcoxon_exact_counts(&ranks, pos_doubled);
        (extreme as f64 / total as f64, Method::Exact)
    } else {
        (wilcoxon_normal_p(n, w_plus, &ties), Method::NormalApprox)
    };
    let effect = cohens_d_paired(diffs).ok();
    Ok(TestResult {
        test: "wilcoxon_signed_rank".into(),
        statistic: w_plus.min(w_minus),
        p_value,
        n1: n,
        n2: 0,
        effect,
        method,
    })
}

/// Normal approximation with tie and continuity correction.
pub fn wilcoxon_normal_p(n: usize, w_plus: f64, ties: &[usize]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_sum(ties) / 48.0;
    normal_two_sided(w_plus, mean, var)
}

/// Exact two-sided counts for the rank-sum of the first sample.
pub fn mann_whitney_exact_counts(ranks: &[u64], n1: usize, rank_sum_doubled: u64) -> (u128, u128) {
    let n = ranks.len() as i128;
    let counts = sized_subset_sum_counts(ranks, n1);
    // Expected doubled rank sum is n1·(n+1).
    let center = n1 as i128 * (n + 1);
    let observed = (rank_sum_doubled as i128 - center).abs();
    let mut extreme = 0u128;
    let mut total = 0u128;
    for (s, c) in counts.iter().enumerate() {
        total += c;
        if (s as i128 - center).abs() >= observed {
            extreme += c;
        }
    }
    (extreme, total)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(AuditError::EmptySample);
    }
    let (n1, n2) = (a.len(), b.len());
    if n1.min(n2) < MANN_WHITNEY_MIN_N {
        return Err(AuditError::InsufficientData { needed: MANN_WHITNEY_MIN_N, got: n1.min(n2) });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(AuditError::Invalid("non-finite sample value".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let r1_doubled: u64 = ranks[..n1].iter().sum();
    let u1 = (r1_doubled as f64 - (n1 * (n1 + 1)) as f64) / 2.0;

    let (p_value, method) = if n1 + n2 <= EXACT_MAX_N {
        let (extreme, total) = mann_whitney_exact_counts(&ranks, n1, r1_doubled);
        (extreme as f64 / total as f64, Method::Exact)
    } else {
        (mann_whitney_normal_p(n1, n2, u1, &ties), Method::NormalApprox)
    };
    Ok(TestResult {
        test: "mann_whitney_u".into(),
        statistic: u1,
        p_value,
        n1,
        n2,
        effect: cohens_d(a, b, Design::Independent).ok(),
        method,
    })
}

pub fn mann_whitney_normal_p(n1: usize, n2: usize, u1: f64, ties: &[usize]) -> f64 {
    let (f1, f2) = (n1 as f64, n2 as f64);
    let n = f1 + f2;
    let mean = f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_sum(ties) / (n * (n - 1.0)));
    normal_two_sided(u1, mean, var)
}

fn sample_var(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn cohens_d_paired(diffs: &[f64]) -> Result<EffectSize> {
    if diffs.len() < 2 {
        return Err(AuditError::InsufficientData { needed: 2, got: diffs.len() });
    }
    let sd = sample_var(diffs).sqrt();
    if sd <= 0.0 || !sd.is_finite() {
        return Err(AuditError::ZeroDenominator("standard deviation of differences"));
    }
    let d = diffs.iter().sum::<f64>() / diffs.len() as f64 / sd;
    Ok(EffectSize { d, band: Band::of(d) })
}

/// Cohen's d: pooled sample sd for independent samples, sd of the
/// differences for paired samples.
pub fn cohens_d(a: &[f64], b: &[f64], design: Design) -> Result<EffectSize> {
    match design {
        Design::Paired => {
            if a.len() != b.len() {
                return Err(AuditError::LengthMismatch(a.len(), b.len()));
            }
            let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            cohens_d_paired(&diffs)
        }
        Design::Independent => {
            if a.is_empty() || b.is_empty() {
                return Err(AuditError::EmptySample);
            }
            let (n1, n2) = (a.len() as f64, b.len() as f64);
            if n1 + n2 < 3.0 {
                return Err(AuditError::InsufficientData { needed: 3, got: (n1 + n2) as usize });
            }
            let ss = |v: &[f64]| if v.len() < 2 { 0.0 } else { sample_var(v) * (v.len() as f64 - 1.0) };
            let pooled = ((ss(a) + ss(b)) / (n1 + n2 - 2.0)).sqrt();
            if pooled <= 0.0 || !pooled.is_finite() {
                return Err(AuditError::ZeroDenominator("pooled standard deviation"));
            }
            let d = (a.iter().sum::<f64>() / n1 - b.iter().sum::<f64>() / n2) / pooled;
            Ok(EffectSize { d, band: Band::of(d) })
        }
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(AuditError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(AuditError::InsufficientData { needed: 3, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AuditError::ConstantVector);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Which bias records feed one side of a comparison. `None` matches anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Selector {
    pub scope: Option<Scope>,
    pub aggregation: Option<String>,
    pub task_id: Option<String>,
    pub model_id: Option<String>,
    pub language: Option<String>,
    pub variant: Option<String>,
    /// Entity metadata filter: key → required value.
    pub entity_tags: BTreeMap<String, String>,
}

impl Selector {
    fn matches(&self, r: &BiasRecord, registry: Option<&EntityRegistry>) -> bool {
        let eq = |want: &Option<String>, have: &str| want.as_deref().map_or(true, |w| w == have);
        let scope_ok = match self.scope {
            Some(s) => s == r.scope,
            None => r.scope == Scope::Task,
        };
        let agg_ok = match &self.aggregation {
            Some(a) => a == &r.aggregation,
            None => r.aggregation == "per_config",
        };
        let tags_ok = self.entity_tags.is_empty()
            || registry.and_then(|reg| reg.get(&r.entity_id)).is_some_and(|e| {
                self.entity_tags.iter().all(|(k, v)| e.tag(k) == Some(v.as_str()))
            });
        scope_ok
            && agg_ok
            && eq(&self.task_id, &r.task_id)
            && eq(&self.model_id, &r.model_id)
            && eq(&self.language, &r.language)
            && eq(&self.variant, &r.variant)
            && tags_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    #[serde(default)]
    pub name: String,
    pub design: Design,
    pub left: Selector,
    pub right: Selector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntityLevel {
    pub left: BTreeMap<String, f64>,
    pub right: BTreeMap<String, f64>,
}

fn per_entity_means<'a>(records: impl Iterator<Item = &'a BiasRecord>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.entity_id.clone()).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Collapses records to one mean value per entity per side.
pub fn entity_level_aggregate(
    records: &[BiasRecord],
    spec: &ComparisonSpec,
    registry: Option<&EntityRegistry>,
) -> Result<EntityLevel> {
    let left = per_entity_means(records.iter().filter(|r| spec.left.matches(r, registry)));
    let right = per_entity_means(records.iter().filter(|r| spec.right.matches(r, registry)));
    if spec.design == Design::Paired {
        let l: BTreeSet<&String> = left.keys().collect();
        let r: BTreeSet<&String> = right.keys().collect();
        if let Some(missing) = l.symmetric_difference(&r).next() {
            return Err(AuditError::UnpairedEntity((*missing).clone()));
        }
    }
    Ok(EntityLevel { left, right })
}

pub fn compare(records: &[BiasRecord], spec: &ComparisonSpec, registry: Option<&EntityRegistry>) -> Result<TestResult> {
    let level = entity_level_aggregate(records, spec, registry)?;
    let left: Vec<f64> = level.left.values().copied().collect();
    let right: Vec<f64> = level.right.values().copied().collect();
    let mut result = match spec.design {
        Design::Paired => wilcoxon_signed_rank(&left, &right)?,
        Design::Independent => mann_whitney_u(&left, &right)?,
    };
    if !spec.name.is_empty() {
        result.test = format!("{}:{}", spec.name, result.test);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilcoxon_all_positive() {
        let r = wilcoxon_differences(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 2.0 / 32.0);
        assert_eq!(r.method, Method::Exact);
    }

    #[test]
    fn wilcoxon_symmetric_and_degenerate() {
        let r = wilcoxon_differences(&[1.0, -1.0, 2.0, -2.0, 3.0, -3.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(matches!(wilcoxon_differences(&[0.0; 6]), Err(AuditError::DegeneratePairs)));
        assert!(matches!(wilcoxon_differences(&[1.0, 2.0, 0.0]), Err(AuditError::InsufficientData { .. })));
    }

    #[test]
    fn mann_whitney_cases() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.1);
        let r = mann_whitney_u(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(r.statistic, 8.0);
        assert_eq!(r.p_value, 1.0);
        assert!(matches!(mann_whitney_u(&[5.0], &[]), Err(AuditError::EmptySample)));
    }

    #[test]
    fn cohens_d_cases() {
        let e = cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], Design::Independent).unwrap();
        assert_eq!((e.d, e.band), (0.0, Band::Negligible));
        // mean difference 1, pooled sd sqrt(2)
        let e = cohens_d(&[2.0, 4.0], &[1.0, 3.0], Design::Independent).unwrap();
        assert!((e.d - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(e.band, Band::Medium);
        assert!(matches!(
            cohens_d(&[1.0, 1.0], &[0.0, 0.0], Design::Independent),
            Err(AuditError::ZeroDenominator(_))
        ));
        let e = cohens_d(&[3.0, 5.0, 4.0], &[1.0, 2.0, 2.0], Design::Paired).unwrap();
        // diffs 2, 3, 2: mean 7/3, sd sqrt(1/3)
        assert!((e.d - (7.0 / 3.0) / (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn band_thresholds() {
        assert_eq!(Band::of(0.19999), Band::Negligible);
        assert_eq!(Band::of(-0.2), Band::Small);
        assert_eq!(Band::of(0.5), Band::Medium);
        assert_eq!(Band::of(-0.8), Band::Large);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(AuditError::ConstantVector)));
    }

    #[test]
    fn doubled_ranks_with_ties() {
        let (r, t) = doubled_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![7, 2, 7, 4]);
        assert_eq!(t, vec![2]);
    }
}
