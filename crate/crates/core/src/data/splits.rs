//! Patient-level train/validation/test partitioning and nested label
//! subsets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::PatientRecord;
use crate::error::{Error, Result};
use crate::rng;

/// Label proportions (percent) used by the fine-tuning experiments.
pub const PROPORTIONS: [u32; 4] = [10, 20, 50, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub num_subsets: usize,
    pub test_subsets: usize,
    /// Selects which of the remaining subsets is validation.
    pub fold: usize,
    pub proportions: Vec<u32>,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            num_subsets: 10,
            test_subsets: 2,
            fold: 0,
            proportions: PROPORTIONS.to_vec(),
        }
    }
}

/// Indices into the record list.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    pub train: Vec<usize>,
    /// Nested training subsets keyed by percentage.
    pub train_by_r: BTreeMap<u32, Vec<usize>>,
    /// Patients missing a view, in a seeded order.
    pub unpaired: Vec<usize>,
}

impl Splits {
    /// Training subset for proportion `r` percent.
    pub fn train_subset(&self, r: u32) -> Result<&[usize]> {
        self.train_by_r
            .get(&r)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("proportion {r}% not in split plan")))
    }

    /// Pretraining pool: paired train and validation patients plus the
    /// first `fraction` of unpaired ones. Test patients never appear.
    pub fn pretrain(&self, unpaired_fraction: f64) -> Vec<usize> {
        let k = (unpaired_fraction.clamp(0.0, 1.0) * self.unpaired.len() as f64).round() as usize;
        let mut out: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        out.extend_from_slice(&self.unpaired[..k]);
        out
    }
}

fn subset_size(r: u32, n: usize) -> usize {
    (r as usize * n).div_ceil(100).min(n)
}

pub fn make_splits(records: &[PatientRecord], plan: &SplitPlan, seed: u64) -> Result<Splits> {
    if plan.test_subsets + 2 > plan.num_subsets {
        return Err(Error::Config(format!(
            "{} test subsets leave no train/validation among {}",
            plan.test_subsets, plan.num_subsets
        )));
    }
    if let Some(r) = plan.proportions.iter().find(|&&r| r == 0 || r > 100) {
        return Err(Error::Config(format!("proportion {r}% outside (0, 100]")));
    }
    let mut paired: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_paired()).collect();
    let mut unpaired: Vec<usize> = (0..records.len()).filter(|&i| !records[i].is_paired()).collect();
    if paired.len() < plan.num_subsets {
        return Err(Error::Data(format!(
            "{} paired patients cannot fill {} subsets",
            paired.len(),
            plan.num_subsets
        )));
    }
    paired.shuffle(&mut rng::stream(seed, "split", &[]));
    unpaired.shuffle(&mut rng::stream(seed, "split-unpaired", &[]));

    let n = paired.len();
    let (base, extra) = (n / plan.num_subsets, n % plan.num_subsets);
    let mut subsets = Vec::with_capacity(plan.num_subsets);
    let mut start = 0;
    for s in 0..plan.num_subsets {
        let len = base + usize::from(s < extra);
        subsets.push(paired[start..start + len].to_vec());
        start += len;
    }
    let test: Vec<usize> = subsets[..plan.test_subsets].concat();
    let rest = &subsets[plan.test_subsets..];
    let val_idx = plan.fold % rest.len();
    let val = rest[val_idx].clone();
    let mut train: Vec<usize> = rest
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != val_idx)
        .flat_map(|(_, s)| s.iter().copied())
        .collect();
    train.shuffle(&mut rng::stream(seed, "split-proportion", &[plan.fold as u64]));
    let train_by_r = plan
        .proportions
        .iter()
        .map(|&r| (r, train[..subset_size(r, train.len())].to_vec()))
        .collect();
    Ok(Splits {
        test,
        val,
        train,
        train_by_r,
        unpaired,
    })
}
