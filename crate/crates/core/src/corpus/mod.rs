//! Items, bundles, user-item interactions and everything derived from them.

mod cases;
mod io;
mod popularity;
mod split;
mod synth;

use std::collections::HashMap;

pub use cases::{
    label_case, make_overall_case, make_scenario_cases, make_training_case, BundlingCase,
    CaseLabel, Scenario,
};
pub use io::{
    load_bundles, load_bundles_with, load_features, load_idmap, load_interactions,
    load_interactions_with, save_bundles, save_features, save_idmap, save_interactions, Dataset,
    BUNDLES_FILE, FEATURE_MAGIC, IDMAP_FILE, INTERACTIONS_FILE, MEDIA_FILE, TEXT_FILE,
};
pub use popularity::{compute_popularity, PopClass, PopularityProfile};
pub use split::{split_bundles, SplitAssignment, SplitRole};
pub use synth::{synth_generate, SynthConfig, SynthOutput};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Bidirectional map between external string ids and dense indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    external: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_external(ids: Vec<String>) -> Result<Self> {
        let mut map = Self::new();
        for id in ids {
            if map.index.contains_key(&id) {
                return Err(Error::Contract(format!("duplicate external id `{id}`")));
            }
            map.intern(&id);
        }
        Ok(map)
    }

    /// Dense id of `ext`, assigning the next free one if unseen.
    pub fn intern(&mut self, ext: &str) -> usize {
        if let Some(&i) = self.index.get(ext) {
            return i;
        }
        let i = self.external.len();
        self.external.push(ext.to_string());
        self.index.insert(ext.to_string(), i);
        i
    }

    pub fn dense(&self, ext: &str) -> Option<usize> {
        self.index.get(ext).copied()
    }

    pub fn external(&self, dense: usize) -> &str {
        &self.external[dense]
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.external.iter().enumerate().map(|(i, s)| (i, s.as_str()))
    }
}

/// Items with their text and media feature tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemCorpus {
    pub ids: IdMap,
    pub text: Tensor<f32>,
    pub media: Tensor<f32>,
}

impl ItemCorpus {
    pub fn new(ids: IdMap, text: Tensor<f32>, media: Tensor<f32>) -> Result<Self> {
        let n = ids.len();
        for (name, t) in [("text", &text), ("media", &media)] {
            if t.rows() != n {
                return Err(Error::Contract(format!(
                    "{name} features have {} rows for {n} items",
                    t.rows()
                )));
            }
            if t.cols() == 0 {
                return Err(Error::Contract(format!("{name} features have zero width")));
            }
        }
        Ok(Self { ids, text, media })
    }

    pub fn n_items(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bundle {
    pub id: String,
    pub items: Vec<usize>,
}

/// Bundles in file order, each with at least two distinct items.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BundleTable {
    bundles: Vec<Bundle>,
}

impl BundleTable {
    pub fn new(bundles: Vec<Bundle>, n_items: usize) -> Result<Self> {
        for b in &bundles {
            let mut seen = b.items.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != b.items.len() || seen.len() < 2 {
                return Err(Error::Contract(format!(
                    "bundle `{}` needs at least two distinct items",
                    b.id
                )));
            }
            if let Some(&bad) = b.items.iter().find(|&&i| i >= n_items) {
                return Err(Error::Contract(format!(
                    "bundle `{}` references item {bad} >= {n_items}",
                    b.id
                )));
            }
        }
        Ok(Self { bundles })
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn get(&self, i: usize) -> &Bundle {
        &self.bundles[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Bundle> {
        self.bundles.iter()
    }
}

/// Sparse binary user-item matrix.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionMatrix {
    n_users: usize,
    n_items: usize,
    user_items: Vec<Vec<usize>>,
    item_counts: Vec<usize>,
}

impl InteractionMatrix {
    /// Builds the matrix from `(user, item)` pairs; duplicates collapse.
    pub fn from_pairs(n_users: usize, n_items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut user_items = vec![Vec::new(); n_users];
        for &(u, i) in pairs {
            if u >= n_users || i >= n_items {
                return Err(Error::Contract(format!(
                    "interaction ({u}, {i}) outside {n_users}x{n_items}"
                )));
            }
            user_items[u].push(i);
        }
        let mut item_counts = vec![0; n_items];
        for items in &mut user_items {
            items.sort_unstable();
            items.dedup();
            for &i in items.iter() {
                item_counts[i] += 1;
            }
        }
        Ok(Self {
            n_users,
            n_items,
            user_items,
            item_counts,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Number of ones.
    pub fn nnz(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }

    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_items[user].binary_search(&item).is_ok()
    }

    pub fn item_counts(&self) -> &[usize] {
        &self.item_counts
    }

    /// All `(user, item)` ones, user-major and item-ascending.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }
}
