use clear_tensor::Rng;

use super::Dataset;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
            stratify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    /// Ascending original indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Number of training samples taken from a group of `count`.
fn train_share(count: usize, fraction: f64) -> usize {
    let n = (fraction * count as f64).round() as usize;
    if count >= 2 {
        n.clamp(1, count - 1)
    } else {
        count
    }
}

pub fn split_indices(labels: &[usize], num_classes: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(CoreError::input(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let root = Rng::new(spec.seed, 0x5917);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut warnings = Vec::new();
    if spec.stratify {
        for c in 0..num_classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            if idx.len() == 1 {
                warnings.push(format!("class {c} has a single sample; it goes to the training split"));
            }
            root.split(c as u64).shuffle(&mut idx);
            let n = train_share(idx.len(), spec.train_fraction);
            train.extend_from_slice(&idx[..n]);
            test.extend_from_slice(&idx[n..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        root.split(u64::MAX).shuffle(&mut idx);
        let n = train_share(idx.len(), spec.train_fraction);
        train.extend_from_slice(&idx[..n]);
        test.extend_from_slice(&idx[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test, warnings })
}

/// Seeded per-class split into `(train, test)` plus any warnings.
pub fn stratified_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Vec<String>)> {
    let s = split_indices(ds.labels(), ds.num_classes(), spec)?;
    let mut train = ds.subset(&s.train)?;
    let mut test = ds.subset(&s.test)?;
    train.set_meta("split", "train");
    test.set_meta("split", "test");
    Ok((train, test, s.warnings))
}
