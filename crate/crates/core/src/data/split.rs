//! Deterministic stratified train/validation/test splits.
//!
//! Split sizes come from largest-remainder rounding of `n * ratio`, ties going
//! to the later split. Per-label counts are then rounded jointly so that every
//! split holds each label within one scan of its proportional share. Scans are
//! shuffled within each label by a seeded ChaCha stream after sorting by
//! `scan_id`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Label};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, DataError> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let parts = self.as_array();
        if parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(DataError::Config(format!(
                "split ratios must all be positive, got {:?}",
                parts
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl DatasetSplit {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

/// Largest-remainder apportionment of `total` over `weights` (which sum to
/// `total`). Ties go to the later index.
fn largest_remainder(total: usize, targets: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa).then(b.cmp(&a))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Rounds the `strata x splits` table of proportional targets so that row sums
/// equal stratum sizes and column sums equal split sizes.
fn controlled_rounding(strata: &[usize], sizes: &[usize; 3], n: usize) -> Vec<[usize; 3]> {
    let targets: Vec<[f64; 3]> = strata
        .iter()
        .map(|&nk| std::array::from_fn(|s| nk as f64 * sizes[s] as f64 / n as f64))
        .collect();
    let mut table: Vec<[usize; 3]> = targets
        .iter()
        .map(|row| row.map(|t| t.floor() as usize))
        .collect();
    let mut row_deficit: Vec<usize> = strata
        .iter()
        .zip(&table)
        .map(|(&nk, row)| nk - row.iter().sum::<usize>())
        .collect();
    let mut col_deficit: [usize; 3] =
        std::array::from_fn(|s| sizes[s] - table.iter().map(|row| row[s]).sum::<usize>());

    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (k, row) in targets.iter().enumerate() {
        for (s, &t) in row.iter().enumerate() {
            cells.push((k, s, t - t.floor()));
        }
    }
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    for &(k, s, frac) in &cells {
        if frac > 0.0 && row_deficit[k] > 0 && col_deficit[s] > 0 {
            table[k][s] += 1;
            row_deficit[k] -= 1;
            col_deficit[s] -= 1;
        }
    }
    // Degenerate fractional patterns: place whatever is left anywhere legal.
    for &(k, s, _) in &cells {
        while row_deficit[k] > 0 && col_deficit[s] > 0 {
            table[k][s] += 1;
            row_deficit[k] -= 1;
            col_deficit[s] -= 1;
        }
    }
    table
}

pub fn split_dataset(
    dataset: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    ratios.validate()?;
    if dataset.is_empty() {
        return Err(DataError::Config("cannot split an empty dataset".into()));
    }
    let n = dataset.len();
    let targets = ratios.as_array().map(|r| r * n as f64);
    let sizes: [usize; 3] = largest_remainder(n, &targets)
        .try_into()
        .expect("three splits");

    let mut strata: BTreeMap<Option<Label>, Vec<String>> = BTreeMap::new();
    for scan in dataset {
        strata
            .entry(scan.label())
            .or_default()
            .push(scan.scan_id.clone());
    }
    let counts: Vec<usize> = strata.values().map(Vec::len).collect();
    let table = controlled_rounding(&counts, &sizes, n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<String>; 3] = Default::default();
    for (mut ids, quota) in strata.into_values().zip(table) {
        ids.sort();
        ids.shuffle(&mut rng);
        let mut it = ids.into_iter();
        for (s, q) in quota.iter().enumerate() {
            out[s].extend(it.by_ref().take(*q));
        }
    }
    for part in &mut out {
        part.sort();
    }
    let [train, validation, test] = out;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
        ratios,
    })
}
