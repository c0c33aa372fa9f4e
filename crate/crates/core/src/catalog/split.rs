use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{purpose, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    #[serde(rename = "valid")]
    Validation,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "valid",
            Role::Test => "test",
        }
    }
}

/// Relative sizes of the train / validation / test partitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 8.0,
            valid: 1.0,
            test: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub roles: Vec<Role>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn users_with(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(u, _)| u)
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }
}

/// Random user partition. Train gets `⌊n·train/total⌋`, validation
/// `⌊n·valid/total⌋`, test the remainder.
pub fn split_users(n_users: usize, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    ensure!(n_users >= 10, Contract, "need at least 10 users to split, got {n_users}");
    ensure!(
        ratios.train > 0.0 && ratios.valid > 0.0 && ratios.test > 0.0,
        Contract,
        "split ratios must be positive"
    );
    let total = ratios.train + ratios.valid + ratios.test;
    // Exact for the default 8:1:1 with integer arithmetic.
    let n_train = ((n_users as f64 * ratios.train / total) + 1e-9).floor() as usize;
    let n_valid = ((n_users as f64 * ratios.valid / total) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut stream(seed, &[purpose::SPLIT]));
    let mut roles = vec![Role::Test; n_users];
    for (rank, &u) in order.iter().enumerate() {
        roles[u] = if rank < n_train {
            Role::Train
        } else if rank < n_train + n_valid {
            Role::Validation
        } else {
            Role::Test
        };
    }
    Ok(SplitAssignment { roles, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn movielens_sized_split() {
        let s = split_users(3000, SplitRatios::default(), 1).unwrap();
        assert_eq!(s.count(Role::Train), 2400);
        assert_eq!(s.count(Role::Validation), 300);
        assert_eq!(s.count(Role::Test), 300);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = split_users(100, SplitRatios::default(), 5).unwrap();
        let b = split_users(100, SplitRatios::default(), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_give_different_assignments() {
        let splits: Vec<_> = (0..10)
            .map(|s| split_users(100, SplitRatios::default(), s).unwrap().roles)
            .collect();
        let mut collisions = 0;
        for i in 0..splits.len() {
            for j in i + 1..splits.len() {
                if splits[i] == splits[j] {
                    collisions += 1;
                }
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn too_few_users() {
        assert!(matches!(
            split_users(9, SplitRatios::default(), 0),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn roles_partition_users() {
        let s = split_users(57, SplitRatios::default(), 3).unwrap();
        let total = s.count(Role::Train) + s.count(Role::Validation) + s.count(Role::Test);
        assert_eq!(total, 57);
        assert_eq!(s.count(Role::Train), 45);
        assert_eq!(s.count(Role::Validation), 5);
    }
}
