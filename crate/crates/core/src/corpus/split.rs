use serde::{Deserialize, Serialize};

use super::BundleTable;
use crate::error::{Error, Result};
use crate::numerics::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Test,
    Val,
}

/// Role of every bundle, indexed like the bundle table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    roles: Vec<SplitRole>,
}

impl SplitAssignment {
    pub fn role(&self, bundle: usize) -> SplitRole {
        self.roles[bundle]
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Bundle indices holding `role`, ascending.
    pub fn indices(&self, role: SplitRole) -> Vec<usize> {
        (0..self.roles.len()).filter(|&b| self.roles[b] == role).collect()
    }
}

/// Shuffles bundles with `seed`, then cuts 70% train, 20% test and the
/// remainder validation. The first two sizes are floored.
pub fn split_bundles(table: &BundleTable, seed: u64) -> Result<SplitAssignment> {
    let n = table.len();
    if n == 0 {
        return Err(Error::Empty("bundle table"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let n_train = n * 7 / 10;
    let n_test = n * 2 / 10;
    let mut roles = vec![SplitRole::Val; n];
    for (pos, &b) in order.iter().enumerate() {
        roles[b] = if pos < n_train {
            SplitRole::Train
        } else if pos < n_train + n_test {
            SplitRole::Test
        } else {
            SplitRole::Val
        };
    }
    Ok(SplitAssignment { roles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Bundle;

    fn table(n: usize) -> BundleTable {
        let bundles = (0..n)
            .map(|b| Bundle {
                id: format!("b{b}"),
                items: vec![0, 1],
            })
            .collect();
        BundleTable::new(bundles, 2).unwrap()
    }

    fn sizes(s: &SplitAssignment) -> [usize; 3] {
        [SplitRole::Train, SplitRole::Test, SplitRole::Val].map(|r| s.indices(r).len())
    }

    #[test]
    fn proportions() {
        assert_eq!(sizes(&split_bundles(&table(10), 3).unwrap()), [7, 2, 1]);
        assert_eq!(sizes(&split_bundles(&table(100), 3).unwrap()), [70, 20, 10]);
        assert_eq!(sizes(&split_bundles(&table(15), 3).unwrap()), [10, 3, 2]);
    }

    #[test]
    fn seeded() {
        let t = table(50);
        assert_eq!(split_bundles(&t, 8).unwrap(), split_bundles(&t, 8).unwrap());
        assert_ne!(split_bundles(&t, 8).unwrap(), split_bundles(&t, 9).unwrap());
    }

    #[test]
    fn empty_rejected() {
        assert!(split_bundles(&BundleTable::default(), 1).is_err());
    }
}
