use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Bundle, PopClass, PopularityProfile};
use crate::error::{Error, Result};
use crate::numerics::SplitMix64;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Popularity pattern of a query/target split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseLabel {
    PopToLt,
    LtToPop,
    PopToPop,
    LtToLt,
    Mixed,
}

/// Which evaluation cases to build from a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    Overall,
    PopToLt,
    LtToPop,
    PopToPop,
    LtToLt,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Overall,
        Scenario::PopToLt,
        Scenario::LtToPop,
        Scenario::PopToPop,
        Scenario::LtToLt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Overall => "overall",
            Scenario::PopToLt => "pop2lt",
            Scenario::LtToPop => "lt2pop",
            Scenario::PopToPop => "pop2pop",
            Scenario::LtToLt => "lt2lt",
        }
    }

    /// Query and target classes for the popularity scenarios.
    fn roles(self) -> Option<(PopClass, PopClass)> {
        match self {
            Scenario::Overall => None,
            Scenario::PopToLt => Some((PopClass::Head, PopClass::Tail)),
            Scenario::LtToPop => Some((PopClass::Tail, PopClass::Head)),
            Scenario::PopToPop => Some((PopClass::Head, PopClass::Head)),
            Scenario::LtToLt => Some((PopClass::Tail, PopClass::Tail)),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scenario `{s}` (expected overall, pop2lt, lt2pop, pop2pop or lt2lt)"
                ))
            })
    }
}

/// A partial bundle: the model sees `query` and must rank `target` items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundlingCase {
    /// Index into the bundle table.
    pub bundle: usize,
    pub query: Vec<usize>,
    pub target: Vec<usize>,
    pub label: CaseLabel,
}

pub fn label_case(query: &[usize], target: &[usize], profile: &PopularityProfile) -> CaseLabel {
    let all = |items: &[usize], c: PopClass| items.iter().all(|&i| profile.class_of(i) == c);
    use PopClass::{Head, Tail};
    if all(query, Head) && all(target, Tail) {
        CaseLabel::PopToLt
    } else if all(query, Tail) && all(target, Head) {
        CaseLabel::LtToPop
    } else if all(query, Head) && all(target, Head) {
        CaseLabel::PopToPop
    } else if all(query, Tail) && all(target, Tail) {
        CaseLabel::LtToLt
    } else {
        CaseLabel::Mixed
    }
}

fn check_size(bundle: &Bundle) -> Result<()> {
    if bundle.items.len() < 2 {
        return Err(Error::Contract(format!(
            "bundle `{}` has {} items; at least two are needed",
            bundle.id,
            bundle.items.len()
        )));
    }
    Ok(())
}

/// Splits `bundle` into `query_n` query items and the rest, choosing the
/// query positions at random. Both halves keep bundle order.
fn random_split(
    idx: usize,
    bundle: &Bundle,
    query_n: usize,
    rng: &mut SplitMix64,
    profile: Option<&PopularityProfile>,
) -> BundlingCase {
    let size = bundle.items.len();
    let mut pos: Vec<usize> = (0..size).collect();
    rng.shuffle(&mut pos);
    let mut in_query = vec![false; size];
    for &p in &pos[..query_n] {
        in_query[p] = true;
    }
    let (mut query, mut target) = (Vec::new(), Vec::new());
    for (p, &item) in bundle.items.iter().enumerate() {
        if in_query[p] {
            query.push(item);
        } else {
            target.push(item);
        }
    }
    let label = profile.map_or(CaseLabel::Mixed, |pr| label_case(&query, &target, pr));
    BundlingCase {
        bundle: idx,
        query,
        target,
        label,
    }
}

/// Training mask: a query fraction drawn uniformly from [0.3, 0.8], rounded
/// and clamped so neither side is empty.
pub fn make_training_case(
    idx: usize,
    bundle: &Bundle,
    rng: &mut SplitMix64,
    profile: Option<&PopularityProfile>,
) -> Result<BundlingCase> {
    check_size(bundle)?;
    let size = bundle.items.len();
    let frac = rng.uniform(0.3, 0.8);
    let query_n = ((frac * size as f64).round() as usize).clamp(1, size - 1);
    Ok(random_split(idx, bundle, query_n, rng, profile))
}

fn case_rng(idx: usize, seed: u64) -> SplitMix64 {
    SplitMix64::new(seed ^ (idx as u64).wrapping_mul(GOLDEN))
}

/// Hides a random non-empty proper subset of a bundle of at least two items.
/// The split depends only on `seed` and the bundle index.
pub fn make_overall_case(
    idx: usize,
    bundle: &Bundle,
    seed: u64,
    profile: Option<&PopularityProfile>,
) -> BundlingCase {
    let size = bundle.items.len();
    assert!(size >= 2, "bundle `{}` has fewer than two items", bundle.id);
    let mut rng = case_rng(idx, seed);
    let target_n = 1 + rng.below(size - 1);
    random_split(idx, bundle, size - target_n, &mut rng, profile)
}

/// Evaluation cases for one bundle under `scenario`.
///
/// Popularity scenarios use only bundles made entirely of the two named
/// classes, with at least one item of each: query gets the first class and
/// target the second. When both classes coincide the bundle is split at
/// random, as for OVERALL. Any MID item disqualifies the bundle. OVERALL hides
/// a random non-empty proper subset, seeded by `seed` and the bundle index.
pub fn make_scenario_cases(
    idx: usize,
    bundle: &Bundle,
    profile: &PopularityProfile,
    scenario: Scenario,
    seed: u64,
) -> Vec<BundlingCase> {
    if bundle.items.len() < 2 {
        return Vec::new();
    }
    let Some((qc, tc)) = scenario.roles() else {
        return vec![make_overall_case(idx, bundle, seed, Some(profile))];
    };
    let classes: Vec<PopClass> = bundle.items.iter().map(|&i| profile.class_of(i)).collect();
    if classes.iter().any(|&c| c != qc && c != tc) {
        return Vec::new();
    }
    if qc == tc {
        return vec![make_overall_case(idx, bundle, seed, Some(profile))];
    }
    let query: Vec<usize> = bundle
        .items
        .iter()
        .zip(&classes)
        .filter(|(_, &c)| c == qc)
        .map(|(&i, _)| i)
        .collect();
    let target: Vec<usize> = bundle
        .items
        .iter()
        .zip(&classes)
        .filter(|(_, &c)| c == tc)
        .map(|(&i, _)| i)
        .collect();
    if query.is_empty() || target.is_empty() {
        return Vec::new();
    }
    let label = label_case(&query, &target, profile);
    vec![BundlingCase {
        bundle: idx,
        query,
        target,
        label,
    }]
}
