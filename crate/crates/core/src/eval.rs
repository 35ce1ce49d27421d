//! Ranking metrics and scenario-sliced evaluation.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    make_scenario_cases, BundleTable, BundlingCase, PopClass, PopularityProfile, Scenario,
};
use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_row;

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 2] = [20, 40];

/// A frozen model that scores every item for a partial bundle.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;

    /// One logit per item for the query set.
    fn score(&self, query: &[usize]) -> Result<Vec<f32>>;
}

/// Non-query items by descending score; ties by ascending id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub items: Vec<usize>,
}

pub fn rank_case(logits: &[f32], query: &[usize]) -> RankedList {
    let mut items: Vec<usize> = (0..logits.len()).filter(|i| !query.contains(i)).collect();
    items.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    RankedList { items }
}

fn check_args(targets: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("cutoff k must be >= 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::Empty("target set"));
    }
    Ok(())
}

/// Fraction of targets within the first `k` ranked items.
pub fn recall_at_k(ranked: &[usize], targets: &[usize], k: usize) -> Result<f64> {
    check_args(targets, k)?;
    let hits = ranked.iter().take(k).filter(|i| targets.contains(i)).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Binary-relevance NDCG with gain `1 / log2(p + 1)` at 1-based position `p`.
pub fn ndcg_at_k(ranked: &[usize], targets: &[usize], k: usize) -> Result<f64> {
    check_args(targets, k)?;
    let gain = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(pos, _)| gain(pos + 1))
        .sum();
    let ideal: f64 = (1..=targets.len().min(k)).map(gain).sum();
    Ok(dcg / ideal)
}

/// Mean metrics of one scenario. `metrics` is `None` when there are no
/// cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub count: usize,
    pub metrics: Option<IndexMap<String, f64>>,
}

impl MetricsReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.as_ref().and_then(|m| m.get(key).copied())
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.get(&format!("recall@{k}"))
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.get(&format!("ndcg@{k}"))
    }
}

fn case_metrics(scorer: &dyn Scorer, case: &BundlingCase, ks: &[usize]) -> Result<Vec<f64>> {
    let logits = scorer.score(&case.query)?;
    if logits.len() != scorer.n_items() {
        return Err(Error::shape("scorer output", (1, logits.len()), (1, scorer.n_items())));
    }
    let ranked = rank_case(&logits, &case.query);
    let mut out = Vec::with_capacity(2 * ks.len());
    for &k in ks {
        out.push(recall_at_k(&ranked.items, &case.target, k)?);
        out.push(ndcg_at_k(&ranked.items, &case.target, k)?);
    }
    Ok(out)
}

/// Per-case metrics averaged over `cases`. With `threads > 1` cases are
/// scored on a private pool; the reduction runs in case order either way, so
/// the report does not depend on the thread count.
pub fn evaluate(
    scorer: &dyn Scorer,
    cases: &[BundlingCase],
    scenario: &str,
    ks: &[usize],
    threads: usize,
) -> Result<MetricsReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be a non-empty list of positive integers".into()));
    }
    let per_case: Vec<Vec<f64>> = if threads > 1 && cases.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| {
            cases
                .par_iter()
                .map(|c| case_metrics(scorer, c, ks))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        cases
            .iter()
            .map(|c| case_metrics(scorer, c, ks))
            .collect::<Result<Vec<_>>>()?
    };
    let metrics = if per_case.is_empty() {
        None
    } else {
        let mut sums = vec![0.0; 2 * ks.len()];
        for row in &per_case {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let n = per_case.len() as f64;
        let mut m = IndexMap::new();
        for (j, &k) in ks.iter().enumerate() {
            m.insert(format!("recall@{k}"), sums[2 * j] / n);
            m.insert(format!("ndcg@{k}"), sums[2 * j + 1] / n);
        }
        Some(m)
    };
    Ok(MetricsReport {
        scenario: scenario.to_string(),
        count: per_case.len(),
        metrics,
    })
}

/// Evaluation cases of `scenario` over the listed bundles, in bundle order.
pub fn scenario_cases(
    bundles: &BundleTable,
    indices: &[usize],
    profile: &PopularityProfile,
    scenario: Scenario,
    seed: u64,
) -> Vec<BundlingCase> {
    indices
        .iter()
        .flat_map(|&b| make_scenario_cases(b, bundles.get(b), profile, scenario, seed))
        .collect()
}

/// One report per scenario, in the order given.
pub fn evaluate_scenarios(
    scorer: &dyn Scorer,
    bundles: &BundleTable,
    indices: &[usize],
    profile: &PopularityProfile,
    scenarios: &[Scenario],
    ks: &[usize],
    seed: u64,
    threads: usize,
) -> Result<Vec<MetricsReport>> {
    scenarios
        .iter()
        .map(|&sc| {
            let cases = scenario_cases(bundles, indices, profile, sc, seed);
            evaluate(scorer, &cases, sc.name(), ks, threads)
        })
        .collect()
}

/// Pop-to-LT reports of a baseline and a candidate model at one popularity
/// ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub backbone: MetricsReport,
    pub diet: MetricsReport,
    /// Relative Recall@`k` change of `diet` over `backbone`, in percent.
    pub improvement_pct: Option<f64>,
}

/// `(a - b) / b * 100`, undefined when `b` is zero.
pub fn improvement_pct(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| (a - b) / b * 100.0)
}

/// Rebuilds the popularity classes at each ratio (used for both head and
/// tail) and evaluates both models on the resulting Pop-to-LT cases.
#[allow(clippy::too_many_arguments)]
pub fn popularity_sweep(
    backbone: &dyn Scorer,
    diet: &dyn Scorer,
    bundles: &BundleTable,
    indices: &[usize],
    counts: &[usize],
    ratios: &[f64],
    ks: &[usize],
    seed: u64,
    threads: usize,
) -> Result<Vec<SweepPoint>> {
    let k = *ks.first().ok_or_else(|| Error::Config("empty cutoff list".into()))?;
    ratios
        .iter()
        .map(|&ratio| {
            let profile = PopularityProfile::from_counts(counts, ratio, ratio)?;
            let cases = scenario_cases(bundles, indices, &profile, Scenario::PopToLt, seed);
            let name = Scenario::PopToLt.name();
            let backbone = evaluate(backbone, &cases, name, ks, threads)?;
            let diet = evaluate(diet, &cases, name, ks, threads)?;
            let improvement_pct = match (diet.recall(k), backbone.recall(k)) {
                (Some(a), Some(b)) => improvement_pct(a, b),
                _ => None,
            };
            Ok(SweepPoint {
                ratio,
                backbone,
                diet,
                improvement_pct,
            })
        })
        .collect()
}

/// Target-probability histograms for long-tail and popular targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHistogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub tail: Vec<usize>,
    pub head: Vec<usize>,
}

impl ScoreHistogram {
    pub const CSV_HEADER: &'static str = "bin_lo,bin_hi,lt_count,pop_count";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for b in 0..self.tail.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.tail[b],
                self.head[b]
            );
        }
        out
    }
}

/// Buckets probabilities into `bins` uniform bins on `[0, max]`; the maximum
/// itself lands in the last bin.
pub fn bucket(probs: &[f64], max: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &p in probs {
        let b = if max > 0.0 {
            ((p / max * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    counts
}

/// Softmax probability (over all items) of every TAIL and HEAD target,
/// bucketed separately. MID targets are skipped.
pub fn score_distribution(
    scorer: &dyn Scorer,
    cases: &[BundlingCase],
    profile: &PopularityProfile,
    bins: usize,
) -> Result<ScoreHistogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let (mut tail, mut head) = (Vec::new(), Vec::new());
    for case in cases {
        let logits = scorer.score(&case.query)?;
        let mut probs = vec![0f32; logits.len()];
        softmax_row(&logits, &mut probs);
        for &t in &case.target {
            match profile.class_of(t) {
                PopClass::Tail => tail.push(probs[t] as f64),
                PopClass::Head => head.push(probs[t] as f64),
                PopClass::Mid => {}
            }
        }
    }
    let max = tail.iter().chain(&head).copied().fold(0.0, f64::max);
    let edges = (0..=bins).map(|b| max * b as f64 / bins as f64).collect();
    Ok(ScoreHistogram {
        edges,
        tail: bucket(&tail, max, bins),
        head: bucket(&head, max, bins),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub rank: usize,
    pub item: usize,
    pub logit: f32,
    pub score: f32,
    pub class: PopClass,
    pub is_target: bool,
}

pub const CASE_CSV_HEADER: &str = "rank,item,logit,score,class,target";

/// Top-`k` ranked items of one case with logits, softmax scores and
/// popularity classes.
pub fn case_report(
    scorer: &dyn Scorer,
    case: &BundlingCase,
    profile: &PopularityProfile,
    k: usize,
) -> Result<Vec<CaseRow>> {
    let logits = scorer.score(&case.query)?;
    let mut probs = vec![0f32; logits.len()];
    softmax_row(&logits, &mut probs);
    let ranked = rank_case(&logits, &case.query);
    Ok(ranked
        .items
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &item)| CaseRow {
            rank: pos + 1,
            item,
            logit: logits[item],
            score: probs[item],
            class: profile.class_of(item),
            is_target: case.target.contains(&item),
        })
        .collect())
}

pub fn case_rows_csv(rows: &[CaseRow], name: impl Fn(usize) -> String) -> String {
    let mut out = String::from(CASE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let class = match r.class {
            PopClass::Head => "HEAD",
            PopClass::Mid => "MID",
            PopClass::Tail => "TAIL",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.rank,
            name(r.item),
            r.logit,
            r.score,
            class,
            u8::from(r.is_target)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CaseLabel;
    use crate::numerics::SplitMix64;

    struct Fixed(Vec<f32>);

    impl Scorer for Fixed {
        fn n_items(&self) -> usize {
            self.0.len()
        }
        fn score(&self, _: &[usize]) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
    }

    /// Deterministic pseudo-random logits per query.
    struct Noise(usize);

    impl Scorer for Noise {
        fn n_items(&self) -> usize {
            self.0
        }
        fn score(&self, query: &[usize]) -> Result<Vec<f32>> {
            let seed = query.iter().fold(17u64, |h, &q| h.wrapping_mul(31).wrapping_add(q as u64));
            let mut rng = SplitMix64::new(seed);
            Ok((0..self.0).map(|_| rng.next_f64() as f32).collect())
        }
    }

    fn case(query: Vec<usize>, target: Vec<usize>) -> BundlingCase {
        BundlingCase {
            bundle: 0,
            query,
            target,
            label: CaseLabel::Mixed,
        }
    }

    #[test]
    fn ties_follow_id_order() {
        let r = rank_case(&[0.0; 6], &[1, 4]);
        assert_eq!(r.items, vec![0, 2, 3, 5]);
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..50 {
            let logits: Vec<f32> = (0..10).map(|_| (rng.below(5) as f32) * 0.5).collect();
            let r = rank_case(&logits, &[3]);
            let mut oracle: Vec<(i64, usize)> = (0..10)
                .filter(|&i| i != 3)
                .map(|i| (-(logits[i] * 2.0) as i64, i))
                .collect();
            oracle.sort();
            assert_eq!(r.items, oracle.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn metric_examples() {
        let ranked = [4, 2, 7, 1, 0];
        assert_eq!(recall_at_k(&ranked, &[2, 9], 3).unwrap(), 0.5);
        assert_eq!(recall_at_k(&ranked, &[4, 7], 3).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ranked, &[4], 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&ranked, &[7], 3).unwrap() - 0.5).abs() < 1e-15);
        assert!(recall_at_k(&ranked, &[4], 0).is_err());
        assert!(ndcg_at_k(&ranked, &[], 5).is_err());
    }

    #[test]
    fn perfect_model_scores_one() {
        let s = Fixed(vec![0.0, 0.0, 5.0, 4.0]);
        let r = evaluate(&s, &[case(vec![0], vec![2, 3])], "overall", &DEFAULT_KS, 1).unwrap();
        assert_eq!(r.count, 1);
        for key in ["recall@20", "ndcg@20", "recall@40", "ndcg@40"] {
            assert_eq!(r.get(key), Some(1.0));
        }
        let empty = evaluate(&s, &[], "pop2lt", &DEFAULT_KS, 1).unwrap();
        assert_eq!(empty.count, 0);
        assert!(empty.metrics.is_none());
        let json = serde_json::to_string(&empty).unwrap();
        assert_eq!(json, r#"{"scenario":"pop2lt","count":0,"metrics":null}"#);
    }

    #[test]
    fn random_model_recall_matches_binomial() {
        let n = 200;
        let k = 20;
        let mut rng = SplitMix64::new(5);
        let cases: Vec<BundlingCase> = (0..600)
            .map(|_| {
                let mut items: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut items);
                case(items[..2].to_vec(), vec![items[2]])
            })
            .collect();
        let r = evaluate(&Noise(n), &cases, "overall", &[k], 1).unwrap();
        let p = k as f64 / (n - 2) as f64;
        let sigma = (p * (1.0 - p) / cases.len() as f64).sqrt();
        let got = r.recall(k).unwrap();
        assert!((got - p).abs() < 3.0 * sigma, "recall {got} expected {p} +- {}", 3.0 * sigma);
    }

    #[test]
    fn parallel_equals_serial() {
        let mut rng = SplitMix64::new(8);
        let cases: Vec<BundlingCase> = (0..100)
            .map(|_| case(vec![rng.below(50)], vec![50 + rng.below(50)]))
            .collect();
        let a = evaluate(&Noise(100), &cases, "overall", &DEFAULT_KS, 1).unwrap();
        let b = evaluate(&Noise(100), &cases, "overall", &DEFAULT_KS, 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn uniform_logits_fill_the_top_bin() {
        let n = 8;
        let profile = PopularityProfile::from_counts(&[8, 7, 6, 5, 4, 3, 2, 1], 0.25, 0.25).unwrap();
        let cases = vec![case(vec![2], vec![0, 7]), case(vec![3], vec![1, 6, 4])];
        let h = score_distribution(&Fixed(vec![1.0; n]), &cases, &profile, 50).unwrap();
        assert!((h.edges[50] - 1.0 / n as f64).abs() < 1e-7);
        assert_eq!(h.tail[49], 2);
        assert_eq!(h.head[49], 2);
        assert_eq!(h.tail.iter().sum::<usize>() + h.head.iter().sum::<usize>(), 4);
        assert!(h.to_csv().starts_with("bin_lo,bin_hi,lt_count,pop_count\n"));
    }

    #[test]
    fn bucketing_oracle() {
        let probs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let max = probs.iter().copied().fold(0.0, f64::max);
        let counts = bucket(&probs, max, 4);
        let mut oracle = [0usize; 4];
        for &p in &probs {
            let b = if p >= 0.75 * max {
                3
            } else if p >= 0.5 * max {
                2
            } else if p >= 0.25 * max {
                1
            } else {
                0
            };
            oracle[b] += 1;
        }
        assert_eq!(counts, oracle);
    }

    #[test]
    fn case_report_rows() {
        let logits = vec![0.1, 3.0, 2.0, 0.5, 1.0, -1.0, 0.0];
        let profile = PopularityProfile::from_counts(&[7, 6, 5, 4, 3, 2, 1], 0.3, 0.3).unwrap();
        let c = case(vec![1], vec![2, 5]);
        let rows = case_report(&Fixed(logits.clone()), &c, &profile, 5).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows.iter().map(|r| r.item).collect::<Vec<_>>(), vec![2, 4, 3, 0, 6]);
        assert!(rows[0].is_target && rows.iter().skip(1).all(|r| !r.is_target));
        for r in &rows {
            assert_eq!(r.logit.to_bits(), logits[r.item].to_bits());
        }
        let csv = case_rows_csv(&rows, |i| format!("i{i}"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn sweep_improvement() {
        assert_eq!(improvement_pct(0.15, 0.1).map(|v| (v * 1e9).round() / 1e9), Some(50.0));
        assert_eq!(improvement_pct(0.1, 0.0), None);
    }
}
