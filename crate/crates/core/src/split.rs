//! Seeded train/val/test folds.
//!
//! Each fold is an independent random permutation of the image ids, so test
//! sets of different folds may overlap. Splitting is always by image.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Fractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl Fractions {
    fn check(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::invalid(format!("fractions must be positive, got {self:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("fractions must sum to 1, got {self:?}")));
        }
        Ok(())
    }
}

impl FromStr for Fractions {
    type Err = Error;

    /// `"0.8,0.1,0.1"`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("fractions {s:?}: {e}")))?;
        match parts[..] {
            [train, val, test] => Ok(Fractions { train, val, test }),
            _ => Err(Error::invalid(format!("expected three fractions, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        })
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            _ => Err(Error::invalid(format!("unknown split part {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub fold_index: usize,
    pub train: BTreeSet<u64>,
    pub val: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

impl Split {
    pub fn part(&self, p: Part) -> &BTreeSet<u64> {
        match p {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    /// `<image_id> <train|val|test>` per line, ascending id.
    pub fn to_text(&self) -> String {
        let mut all: BTreeMap<u64, Part> = BTreeMap::new();
        for p in [Part::Train, Part::Val, Part::Test] {
            for &id in self.part(p) {
                all.insert(id, p);
            }
        }
        all.into_iter().map(|(id, p)| format!("{id} {p}\n")).collect()
    }

    pub fn from_text(fold_index: usize, text: &str) -> Result<Self> {
        let mut s = Split {
            fold_index,
            train: BTreeSet::new(),
            val: BTreeSet::new(),
            test: BTreeSet::new(),
        };
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(id), Some(part), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::invalid(format!("split line {}: {line:?}", n + 1)));
            };
            let id: u64 = id
                .parse()
                .map_err(|_| Error::invalid(format!("split line {}: bad id {id:?}", n + 1)))?;
            let set = match part.parse::<Part>()? {
                Part::Train => &mut s.train,
                Part::Val => &mut s.val,
                Part::Test => &mut s.test,
            };
            set.insert(id);
        }
        Ok(s)
    }

    /// Dataset restricted to one part; annotations follow their images.
    pub fn subset(&self, d: &Dataset, p: Part) -> Dataset {
        let ids: HashSet<u64> = self.part(p).iter().copied().collect();
        d.subset(&ids)
    }
}

/// Size of a held-out part: `floor(n * f)`, tolerant of binary rounding just below an integer.
fn part_size(n: usize, f: f64) -> usize {
    (n as f64 * f + 1e-9).floor() as usize
}

/// `k` independent seeded splits of the image ids.
pub fn kfold_splits(d: &Dataset, k: usize, fractions: Fractions, seed: u64) -> Result<Vec<Split>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    fractions.check()?;
    let mut ids: Vec<u64> = d.images.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    if n < 3 * k {
        return Err(Error::invalid(format!(
            "{n} images cannot form {k} folds of three non-empty parts"
        )));
    }
    let n_val = part_size(n, fractions.val);
    let n_test = part_size(n, fractions.test);
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::invalid(format!(
            "fractions {fractions:?} leave an empty part for {n} images"
        )));
    }
    Ok((0..k)
        .map(|fold| {
            let mut perm = ids.clone();
            perm.shuffle(&mut stream_rng(seed, fold as u64));
            let (val, rest) = perm.split_at(n_val);
            let (test, train) = rest.split_at(n_test);
            Split {
                fold_index: fold,
                train: train.iter().copied().collect(),
                val: val.iter().copied().collect(),
                test: test.iter().copied().collect(),
            }
        })
        .collect())
}
