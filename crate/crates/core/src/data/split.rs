use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Combo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    /// Train `y2 ∈ {y1, …, y1+C/2-1} (mod C)`, test the other half.
    Diagonal,
    /// Train iff `y1 < C1/2` or `y2 < C2/2`.
    Tile,
    /// Train iff `y1 < C1-1` or `y2 < 1`: only `(C1-1, 0)` carries `y2 = 0`.
    OneLabel,
    /// Single factor; lower half of the classes trains, upper half tests.
    NewClasses,
}

impl SplitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitScheme::Diagonal => "diagonal",
            SplitScheme::Tile => "tile",
            SplitScheme::OneLabel => "one-label",
            SplitScheme::NewClasses => "new-classes",
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(SplitScheme::Diagonal),
            "tile" => Ok(SplitScheme::Tile),
            "one-label" => Ok(SplitScheme::OneLabel),
            "new-classes" => Ok(SplitScheme::NewClasses),
            other => Err(Error::Validation(format!("unknown split scheme {other:?}"))),
        }
    }
}

/// Partition of the label grid into train and test combinations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSplit {
    pub scheme: SplitScheme,
    pub classes: Vec<usize>,
    pub train_combos: BTreeSet<Combo>,
    pub test_combos: BTreeSet<Combo>,
}

impl LabelSplit {
    /// `c2` is ignored for [`SplitScheme::NewClasses`], which has a single
    /// factor with `c1` classes.
    pub fn new(scheme: SplitScheme, c1: usize, c2: usize) -> Result<Self> {
        if c1 < 2 || (scheme != SplitScheme::NewClasses && c2 < 2) {
            return Err(Error::Validation(format!(
                "{scheme} split needs at least 2 classes per factor, got {c1}x{c2}"
            )));
        }
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        if scheme == SplitScheme::NewClasses {
            for y in 0..c1 {
                if y < c1 / 2 {
                    train.insert(vec![y]);
                } else {
                    test.insert(vec![y]);
                }
            }
            return Ok(Self {
                scheme,
                classes: vec![c1],
                train_combos: train,
                test_combos: test,
            });
        }
        if scheme == SplitScheme::Diagonal && c1 != c2 {
            return Err(Error::Validation(format!(
                "diagonal split needs equal class counts, got {c1} and {c2}"
            )));
        }
        for y1 in 0..c1 {
            for y2 in 0..c2 {
                let is_train = match scheme {
                    SplitScheme::Diagonal => (y2 + c2 - y1) % c2 < c2 / 2,
                    SplitScheme::Tile => y1 < c1 / 2 || y2 < c2 / 2,
                    SplitScheme::OneLabel => (y1 < c1 - 1) != (y2 < 1),
                    SplitScheme::NewClasses => unreachable!(),
                };
                if is_train {
                    train.insert(vec![y1, y2]);
                } else {
                    test.insert(vec![y1, y2]);
                }
            }
        }
        Ok(Self {
            scheme,
            classes: vec![c1, c2],
            train_combos: train,
            test_combos: test,
        })
    }

    pub fn factor_count(&self) -> usize {
        self.classes.len()
    }

    pub fn combos(&self, role: super::Role) -> &BTreeSet<Combo> {
        match role {
            super::Role::Train => &self.train_combos,
            super::Role::Test => &self.test_combos,
        }
    }

    pub fn is_train(&self, combo: &[usize]) -> bool {
        self.train_combos.contains(combo)
    }

    pub fn is_test(&self, combo: &[usize]) -> bool {
        self.test_combos.contains(combo)
    }

    /// Every test combination is absent from training, yet each of its
    /// factor values occurs in some training combination.
    pub fn factors_seen_in_training(&self) -> bool {
        self.test_combos.iter().all(|t| {
            (0..t.len()).all(|i| self.train_combos.iter().any(|c| c[i] == t[i]))
        })
    }
}
