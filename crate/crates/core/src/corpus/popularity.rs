use serde::{Deserialize, Serialize};

use super::InteractionMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PopClass {
    Head,
    Mid,
    Tail,
}

/// Interaction counts, ranks and head/mid/tail classes for every item.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityProfile {
    pub counts: Vec<usize>,
    /// `rank[i]` is 0 for the most popular item.
    pub rank: Vec<usize>,
    pub class: Vec<PopClass>,
    pub head_ratio: f64,
    pub tail_ratio: f64,
}

impl PopularityProfile {
    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    pub fn class_of(&self, item: usize) -> PopClass {
        self.class[item]
    }

    pub fn items_in(&self, class: PopClass) -> Vec<usize> {
        (0..self.class.len()).filter(|&i| self.class[i] == class).collect()
    }

    /// Builds a profile straight from per-item counts.
    pub fn from_counts(counts: &[usize], head_ratio: f64, tail_ratio: f64) -> Result<Self> {
        let ok = |r: f64| r.is_finite() && (0.0..=1.0).contains(&r);
        if !ok(head_ratio) || !ok(tail_ratio) || head_ratio + tail_ratio > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "popularity ratios must lie in [0, 1] with sum <= 1, got {head_ratio} and {tail_ratio}"
            )));
        }
        let n = counts.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut rank = vec![0; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let n_head = class_size(head_ratio, n);
        // Rounding both sizes up can overlap when the ratios sum to one.
        let n_tail = class_size(tail_ratio, n).min(n - n_head);
        let class = rank
            .iter()
            .map(|&r| {
                if r < n_head {
                    PopClass::Head
                } else if r >= n - n_tail {
                    PopClass::Tail
                } else {
                    PopClass::Mid
                }
            })
            .collect();
        Ok(Self {
            counts: counts.to_vec(),
            rank,
            class,
            head_ratio,
            tail_ratio,
        })
    }
}

/// `ceil(ratio * n)`, tolerant of products like `0.3 * 10 = 3.0000000000000004`.
fn class_size(ratio: f64, n: usize) -> usize {
    let raw = ratio * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Classifies items by interaction count: the top `ceil(head_ratio * n)` by
/// count are HEAD, the bottom `ceil(tail_ratio * n)` are TAIL. Ties break by
/// ascending item id.
pub fn compute_popularity(
    d: &InteractionMatrix,
    head_ratio: f64,
    tail_ratio: f64,
) -> Result<PopularityProfile> {
    PopularityProfile::from_counts(d.item_counts(), head_ratio, tail_ratio)
}
